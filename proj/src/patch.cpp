#include "advnorm/patch.hpp"

#include <algorithm>
#include <cstring>
#include <random>

namespace advnorm {

std::vector<int> axis_offsets(int length, int patch, int stride) {
  if (stride < 1) throw GeometryError("patch stride must be >= 1, got " + std::to_string(stride));
  if (stride > patch) {
    throw GeometryError("stride " + std::to_string(stride) + " exceeds patch extent " + std::to_string(patch) +
                        "; the lattice would leave gaps");
  }
  if (patch < 1 || patch > length) {
    throw GeometryError("patch extent " + std::to_string(patch) + " does not fit axis of length " +
                        std::to_string(length));
  }
  std::vector<int> offsets;
  for (int o = 0; o + patch <= length; o += stride) offsets.push_back(o);
  if (offsets.back() != length - patch) offsets.push_back(length - patch);
  return offsets;
}

PatchGrid patch_grid(Vec3i shape, Vec3i patch, Vec3i stride) {
  for (int a = 0; a < 3; ++a) {
    if (patch[a] > shape[a]) {
      throw GeometryError("patch " + to_string(patch) + " larger than volume " + to_string(shape) + " along axis " +
                          std::to_string(a));
    }
  }
  PatchGrid grid{shape, patch, stride, {}, {}};
  for (int a = 0; a < 3; ++a) grid.axis_offsets[a] = axis_offsets(shape[a], patch[a], stride[a]);
  for (int oz : grid.axis_offsets[2]) {
    for (int oy : grid.axis_offsets[1]) {
      for (int ox : grid.axis_offsets[0]) grid.origins.push_back({ox, oy, oz});
    }
  }
  return grid;
}

namespace {

void check_box(Vec3i origin, Vec3i size, Vec3i shape) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || size[a] < 1 || origin[a] + size[a] > shape[a]) {
      throw GeometryError("patch box at " + to_string(origin) + " of size " + to_string(size) +
                          " leaves volume " + to_string(shape));
    }
  }
}

}  // namespace

Volume extract_patch(const Volume& v, Vec3i origin, Vec3i size) {
  check_box(origin, size, v.shape());
  Volume out(size, v.channels(), v.spacing());
  for (int c = 0; c < v.channels(); ++c) {
    for (int z = 0; z < size.z; ++z) {
      for (int y = 0; y < size.y; ++y) {
        const float* src = v.channel(c).data() + linear_index(v.shape(), origin.x, origin.y + y, origin.z + z);
        std::memcpy(&out.at(c, 0, y, z), src, sizeof(float) * static_cast<std::size_t>(size.x));
      }
    }
  }
  return out;
}

LabelMap extract_patch(const LabelMap& labels, Vec3i origin, Vec3i size) {
  check_box(origin, size, labels.shape());
  LabelMap out(size);
  for (int z = 0; z < size.z; ++z) {
    for (int y = 0; y < size.y; ++y) {
      for (int x = 0; x < size.x; ++x) out(x, y, z) = labels(origin.x + x, origin.y + y, origin.z + z);
    }
  }
  return out;
}

LabeledVolume extract_patch(const LabeledVolume& lv, Vec3i origin, Vec3i size) {
  return {extract_patch(lv.image, origin, size), extract_patch(lv.labels, origin, size)};
}

Vec3i clamped_origin(Vec3i center, Vec3i size, Vec3i shape) {
  Vec3i o;
  for (int a = 0; a < 3; ++a) o[a] = std::clamp(center[a] - size[a] / 2, 0, shape[a] - size[a]);
  return o;
}

std::vector<SampledPatch> sample_foreground_patches(const LabeledVolume& lv, int n, Vec3i size, std::uint64_t seed) {
  const Vec3i shape = lv.labels.shape();
  for (int a = 0; a < 3; ++a) {
    if (size[a] > shape[a]) {
      throw GeometryError("patch " + to_string(size) + " larger than volume " + to_string(shape));
    }
  }
  std::vector<std::size_t> foreground;
  const auto& labels = lv.labels.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0) foreground.push_back(i);
  }
  if (foreground.empty()) throw std::runtime_error("no foreground voxel to centre patches on");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, foreground.size() - 1);
  std::vector<SampledPatch> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  const auto sx = static_cast<std::size_t>(shape.x);
  const auto sxy = sx * static_cast<std::size_t>(shape.y);
  for (int i = 0; i < n; ++i) {
    const std::size_t idx = foreground[pick(rng)];
    const Vec3i center{static_cast<int>(idx % sx), static_cast<int>((idx / sx) % static_cast<std::size_t>(shape.y)),
                       static_cast<int>(idx / sxy)};
    const Vec3i origin = clamped_origin(center, size, shape);
    out.push_back({extract_patch(lv.image, origin, size), extract_patch(lv.labels, origin, size), center, origin});
  }
  return out;
}

OverlapAverager::OverlapAverager(Vec3i shape, int channels)
    : shape_(shape), channels_(channels), sums_(static_cast<std::size_t>(channels) * shape.product(), 0.0),
      counts_(shape.product(), 0) {}

void OverlapAverager::add(Vec3i origin, const Volume& patch) {
  check_box(origin, patch.shape(), shape_);
  if (patch.channels() != channels_) {
    throw GeometryError("patch has " + std::to_string(patch.channels()) + " channels, expected " +
                        std::to_string(channels_));
  }
  const Vec3i size = patch.shape();
  const std::size_t n = shape_.product();
  for (int z = 0; z < size.z; ++z) {
    for (int y = 0; y < size.y; ++y) {
      const std::size_t base = linear_index(shape_, origin.x, origin.y + y, origin.z + z);
      for (int x = 0; x < size.x; ++x) ++counts_[base + static_cast<std::size_t>(x)];
      for (int c = 0; c < channels_; ++c) {
        double* dst = sums_.data() + static_cast<std::size_t>(c) * n + base;
        const float* src = patch.channel(c).data() + linear_index(patch.shape(), 0, y, z);
        for (int x = 0; x < size.x; ++x) dst[x] += src[x];
      }
    }
  }
}

Volume OverlapAverager::finalize(Spacing spacing) const {
  Volume out(shape_, channels_, spacing);
  const std::size_t n = shape_.product();
  for (std::size_t i = 0; i < n; ++i) {
    if (counts_[i] == 0) {
      const Vec3i v{static_cast<int>(i % static_cast<std::size_t>(shape_.x)),
                    static_cast<int>((i / static_cast<std::size_t>(shape_.x)) % static_cast<std::size_t>(shape_.y)),
                    static_cast<int>(i / (static_cast<std::size_t>(shape_.x) * static_cast<std::size_t>(shape_.y)))};
      throw GeometryError("voxel " + to_string(v) + " is not covered by any patch");
    }
  }
  for (int c = 0; c < channels_; ++c) {
    const double* src = sums_.data() + static_cast<std::size_t>(c) * n;
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i] / counts_[i]);
  }
  return out;
}

LabelMap ProbabilityMap::argmax() const {
  LabelMap out(probs.shape());
  const std::size_t n = probs.voxel_count();
  auto& dst = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    float best_p = probs.data()[i];
    for (int c = 1; c < probs.channels(); ++c) {
      const float p = probs.data()[static_cast<std::size_t>(c) * n + i];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    dst[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ProbabilityMap reconstruct(std::span<const PatchProbabilities> patches, Vec3i shape) {
  if (patches.empty()) throw GeometryError("no patches to reconstruct from");
  OverlapAverager acc(shape, patches.front().probs.channels());
  for (const auto& p : patches) acc.add(p.origin, p.probs);
  return {acc.finalize(patches.front().probs.spacing()), acc.counts()};
}

}  // namespace advnorm
