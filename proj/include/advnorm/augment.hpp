#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "advnorm/volume.hpp"

namespace advnorm::augment {

/// Linear multiplicative bias field B = (y/H)·alpha + (1 - alpha) along one axis.
struct BiasFieldParams {
  double alpha = 0.0;
  int axis = 1;              // 0 = x, 1 = y, 2 = z
  double noise_sigma = 0.0;  // additive eta ~ Normal(0, sigma); 0 is the noiseless model
  std::uint64_t noise_seed = 0;

  void validate() const;
};

/// H for an axis of `length` voxels: the coordinate of the last voxel, so the
/// field spans exactly [1 - alpha, 1]. A single-voxel axis uses H = 1.
double field_extent(int length);

/// The field B over `shape` (single channel).
Volume bias_field(Vec3i shape, const BiasFieldParams& params);

/// I' = I·B + eta on every channel.
Volume apply_bias(const Volume& v, const BiasFieldParams& params);

/// Same degradation on a patch cut from a larger volume: B is evaluated at
/// parent coordinates origin + local, with H taken from the parent extent.
Volume apply_bias_at(const Volume& patch, const BiasFieldParams& params, Vec3i origin, Vec3i parent_shape);

/// A patch plus where it came from, so the field can be evaluated in parent coordinates.
struct PositionedPatch {
  Volume image;
  std::optional<Vec3i> origin;
  std::optional<Vec3i> parent_shape;
};

struct AugmentOptions {
  double probability = 0.5;
  /// Draws alpha for each degradation; default Uniform(0, 1).
  std::function<double(std::uint64_t)> alpha_sampler;
  int axis = 1;
};

struct AugmentResult {
  std::vector<Volume> patches;
  std::vector<double> alphas;  // 0 for untouched patches
  std::vector<bool> degraded;
};

/// Each patch independently degraded with the given probability, alpha drawn per degradation.
/// Throws std::invalid_argument when a patch lacks its position metadata.
AugmentResult augment_batch(std::span<const PositionedPatch> patches, const AugmentOptions& options,
                            std::uint64_t seed);

/// Zero-mean, unit-std rescaling over all voxels of each channel.
/// Throws std::domain_error for a zero-variance channel.
Volume standardize(const Volume& v);

}  // namespace advnorm::augment
