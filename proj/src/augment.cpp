#include "advnorm/augment.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "advnorm/random.hpp"

namespace advnorm::augment {

void BiasFieldParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("bias field alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  if (axis < 0 || axis > 2) throw std::invalid_argument("bias field axis must be 0, 1 or 2");
  if (noise_sigma < 0.0) throw std::invalid_argument("bias noise sigma must be >= 0");
}

double field_extent(int length) { return length > 1 ? static_cast<double>(length - 1) : 1.0; }

namespace {

inline double field_value(double alpha, double coord, double extent) { return coord / extent * alpha + (1.0 - alpha); }

Volume apply_field(const Volume& v, const BiasFieldParams& params, Vec3i origin, Vec3i parent_shape) {
  params.validate();
  Volume out = v;
  const Vec3i s = v.shape();
  const double extent = field_extent(parent_shape[params.axis]);
  std::mt19937_64 rng(derive_seed(params.noise_seed, {0x4E4F4953}));
  std::normal_distribution<double> gauss(0.0, params.noise_sigma > 0.0 ? params.noise_sigma : 1.0);
  for (int c = 0; c < v.channels(); ++c) {
    for (int z = 0; z < s.z; ++z) {
      for (int y = 0; y < s.y; ++y) {
        for (int x = 0; x < s.x; ++x) {
          const Vec3i local{x, y, z};
          const double b = field_value(params.alpha, origin[params.axis] + local[params.axis], extent);
          double val = static_cast<double>(v.at(c, x, y, z)) * b;
          if (params.noise_sigma > 0.0) val += gauss(rng);
          out.at(c, x, y, z) = params.alpha == 0.0 && params.noise_sigma == 0.0 ? v.at(c, x, y, z) : static_cast<float>(val);
        }
      }
    }
  }
  return out;
}

}  // namespace

Volume bias_field(Vec3i shape, const BiasFieldParams& params) {
  params.validate();
  Volume b(shape, 1);
  const double extent = field_extent(shape[params.axis]);
  for (int z = 0; z < shape.z; ++z) {
    for (int y = 0; y < shape.y; ++y) {
      for (int x = 0; x < shape.x; ++x) {
        const Vec3i p{x, y, z};
        b(x, y, z) = static_cast<float>(field_value(params.alpha, p[params.axis], extent));
      }
    }
  }
  return b;
}

Volume apply_bias(const Volume& v, const BiasFieldParams& params) { return apply_field(v, params, {}, v.shape()); }

Volume apply_bias_at(const Volume& patch, const BiasFieldParams& params, Vec3i origin, Vec3i parent_shape) {
  return apply_field(patch, params, origin, parent_shape);
}

AugmentResult augment_batch(std::span<const PositionedPatch> patches, const AugmentOptions& options,
                            std::uint64_t seed) {
  if (!(options.probability >= 0.0 && options.probability <= 1.0)) {
    throw std::invalid_argument("augmentation probability must lie in [0,1]");
  }
  AugmentResult result;
  result.patches.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    if (!p.origin || !p.parent_shape) {
      throw std::invalid_argument("patch " + std::to_string(i) + " has no parent-volume position; the bias field "
                                  "must be evaluated in parent coordinates");
    }
    const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(i)});
    std::mt19937_64 rng(s);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const bool degrade = uni(rng) < options.probability;
    double alpha = 0.0;
    if (degrade) {
      alpha = options.alpha_sampler ? options.alpha_sampler(derive_seed(s, {0x414C5048})) : uni(rng);
      BiasFieldParams params{alpha, options.axis, 0.0, 0};
      result.patches.push_back(apply_bias_at(p.image, params, *p.origin, *p.parent_shape));
    } else {
      result.patches.push_back(p.image);
    }
    result.alphas.push_back(alpha);
    result.degraded.push_back(degrade);
  }
  return result;
}

Volume standardize(const Volume& v) {
  Volume out = v;
  for (int c = 0; c < v.channels(); ++c) {
    auto src = v.channel(c);
    bool distinct = false;
    for (float x : src) {
      if (x != src[0]) {
        distinct = true;
        break;
      }
    }
    if (!distinct) throw std::domain_error("cannot standardize a zero-variance volume");
    double mean = 0.0;
    for (float x : src) mean += x;
    mean /= static_cast<double>(src.size());
    double var = 0.0;
    for (float x : src) var += (x - mean) * (x - mean);
    var /= static_cast<double>(src.size());
    const double inv = 1.0 / std::sqrt(var);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>((src[i] - mean) * inv);
  }
  return out;
}

}  // namespace advnorm::augment
