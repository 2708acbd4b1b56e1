#include "advnorm/resample.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace advnorm {

int resampled_length(int length, double spacing, double target) {
  if (!(target > 0.0)) throw GeometryError("target spacing must be positive");
  if (!(spacing > 0.0)) throw GeometryError("source spacing must be positive");
  return static_cast<int>(std::floor(static_cast<double>(length - 1) * spacing / target + 1e-9)) + 1;
}

namespace {

struct AxisSample {
  int lo;
  int hi;
  double w;  // weight of hi
};

std::vector<AxisSample> axis_samples(int in_len, int out_len, double spacing, double target) {
  std::vector<AxisSample> s(static_cast<std::size_t>(out_len));
  for (int j = 0; j < out_len; ++j) {
    const double pos = std::min(static_cast<double>(j) * target / spacing, static_cast<double>(in_len - 1));
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, in_len - 1);
    s[static_cast<std::size_t>(j)] = {lo, hi, pos - lo};
  }
  return s;
}

Vec3i resampled_shape(const Vec3i& shape, const Spacing& sp, double target) {
  return {resampled_length(shape.x, sp.x, target), resampled_length(shape.y, sp.y, target),
          resampled_length(shape.z, sp.z, target)};
}

}  // namespace

Volume resample_isotropic(const Volume& v, double target_spacing) {
  const Vec3i out_shape = resampled_shape(v.shape(), v.spacing(), target_spacing);
  const auto sx = axis_samples(v.shape().x, out_shape.x, v.spacing().x, target_spacing);
  const auto sy = axis_samples(v.shape().y, out_shape.y, v.spacing().y, target_spacing);
  const auto sz = axis_samples(v.shape().z, out_shape.z, v.spacing().z, target_spacing);
  Volume out(out_shape, v.channels(), {target_spacing, target_spacing, target_spacing});
  for (int c = 0; c < v.channels(); ++c) {
    for (int z = 0; z < out_shape.z; ++z) {
      const auto& az = sz[static_cast<std::size_t>(z)];
      for (int y = 0; y < out_shape.y; ++y) {
        const auto& ay = sy[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_shape.x; ++x) {
          const auto& ax = sx[static_cast<std::size_t>(x)];
          auto lerp_x = [&](int yy, int zz) {
            const double a = v.at(c, ax.lo, yy, zz);
            return ax.w == 0.0 ? a : a + ax.w * (v.at(c, ax.hi, yy, zz) - a);
          };
          auto lerp_xy = [&](int zz) {
            const double a = lerp_x(ay.lo, zz);
            return ay.w == 0.0 ? a : a + ay.w * (lerp_x(ay.hi, zz) - a);
          };
          const double a = lerp_xy(az.lo);
          const double val = az.w == 0.0 ? a : a + az.w * (lerp_xy(az.hi) - a);
          out.at(c, x, y, z) = static_cast<float>(val);
        }
      }
    }
  }
  return out;
}

LabeledVolume resample_isotropic(const LabeledVolume& lv, double target_spacing) {
  Volume image = resample_isotropic(lv.image, target_spacing);
  const Vec3i out_shape = image.shape();
  const auto& sp = lv.image.spacing();
  auto nearest = [&](int j, int in_len, double spacing) {
    const double pos = static_cast<double>(j) * target_spacing / spacing;
    return std::min(static_cast<int>(std::lround(pos)), in_len - 1);
  };
  LabelMap labels(out_shape);
  const Vec3i in = lv.labels.shape();
  for (int z = 0; z < out_shape.z; ++z) {
    for (int y = 0; y < out_shape.y; ++y) {
      for (int x = 0; x < out_shape.x; ++x) {
        labels(x, y, z) = lv.labels(nearest(x, in.x, sp.x), nearest(y, in.y, sp.y), nearest(z, in.z, sp.z));
      }
    }
  }
  return {std::move(image), std::move(labels)};
}

namespace {

struct Box {
  Vec3i lo;
  Vec3i size;
};

std::optional<Box> content_box(const Volume& v, const LabelMap* labels) {
  const Vec3i s = v.shape();
  Vec3i lo{s.x, s.y, s.z};
  Vec3i hi{-1, -1, -1};
  for (int z = 0; z < s.z; ++z) {
    for (int y = 0; y < s.y; ++y) {
      for (int x = 0; x < s.x; ++x) {
        bool nonzero = labels != nullptr && (*labels)(x, y, z) != 0;
        for (int c = 0; c < v.channels() && !nonzero; ++c) nonzero = v.at(c, x, y, z) != 0.0F;
        if (!nonzero) continue;
        lo = {std::min(lo.x, x), std::min(lo.y, y), std::min(lo.z, z)};
        hi = {std::max(hi.x, x), std::max(hi.y, y), std::max(hi.z, z)};
      }
    }
  }
  if (hi.x < 0) return std::nullopt;
  return Box{lo, hi - lo + Vec3i{1, 1, 1}};
}

Vec3i placement(const std::optional<Box>& box, Vec3i target) {
  if (!box) return {};
  Vec3i dst;
  for (int a = 0; a < 3; ++a) {
    if (box->size[a] > target[a]) {
      throw GeometryError("target shape " + to_string(target) + " smaller than content bounding box " +
                          to_string(box->size));
    }
    dst[a] = (target[a] - box->size[a]) / 2;
  }
  return dst;
}

}  // namespace

Volume crop_pad(const Volume& v, Vec3i target) {
  const auto box = content_box(v, nullptr);
  const Vec3i dst = placement(box, target);
  Volume out(target, v.channels(), v.spacing());
  if (!box) return out;
  for (int c = 0; c < v.channels(); ++c) {
    for (int z = 0; z < box->size.z; ++z) {
      for (int y = 0; y < box->size.y; ++y) {
        for (int x = 0; x < box->size.x; ++x) {
          out.at(c, dst.x + x, dst.y + y, dst.z + z) = v.at(c, box->lo.x + x, box->lo.y + y, box->lo.z + z);
        }
      }
    }
  }
  return out;
}

LabeledVolume crop_pad(const LabeledVolume& lv, Vec3i target) {
  const auto box = content_box(lv.image, &lv.labels);
  const Vec3i dst = placement(box, target);
  LabeledVolume out{Volume(target, lv.image.channels(), lv.image.spacing()), LabelMap(target)};
  if (!box) return out;
  for (int z = 0; z < box->size.z; ++z) {
    for (int y = 0; y < box->size.y; ++y) {
      for (int x = 0; x < box->size.x; ++x) {
        const Vec3i s{box->lo.x + x, box->lo.y + y, box->lo.z + z};
        for (int c = 0; c < lv.image.channels(); ++c) out.image.at(c, dst.x + x, dst.y + y, dst.z + z) = lv.image.at(c, s.x, s.y, s.z);
        out.labels(dst.x + x, dst.y + y, dst.z + z) = lv.labels(s.x, s.y, s.z);
      }
    }
  }
  return out;
}

LabeledVolume pad_to_at_least(const LabeledVolume& lv, Vec3i minimum) {
  const Vec3i in = lv.image.shape();
  const Vec3i target{std::max(in.x, minimum.x), std::max(in.y, minimum.y), std::max(in.z, minimum.z)};
  if (target == in) return lv;
  const Vec3i dst{(target.x - in.x) / 2, (target.y - in.y) / 2, (target.z - in.z) / 2};
  LabeledVolume out{Volume(target, lv.image.channels(), lv.image.spacing()), LabelMap(target)};
  for (int z = 0; z < in.z; ++z) {
    for (int y = 0; y < in.y; ++y) {
      for (int x = 0; x < in.x; ++x) {
        for (int c = 0; c < lv.image.channels(); ++c) out.image.at(c, dst.x + x, dst.y + y, dst.z + z) = lv.image.at(c, x, y, z);
        out.labels(dst.x + x, dst.y + y, dst.z + z) = lv.labels(x, y, z);
      }
    }
  }
  return out;
}

}  // namespace advnorm
