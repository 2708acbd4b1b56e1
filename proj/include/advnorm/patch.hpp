#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "advnorm/volume.hpp"

namespace advnorm {

/// Regular lattice of patch origins covering a volume.
struct PatchGrid {
  Vec3i volume_shape;
  Vec3i patch;
  Vec3i stride;
  std::array<std::vector<int>, 3> axis_offsets;
  std::vector<Vec3i> origins;  // x-fastest enumeration of the axis offsets
};

/// Offsets {0, stride, 2*stride, ...} along one axis, plus a final clamped
/// offset length - patch when the lattice does not land on it.
std::vector<int> axis_offsets(int length, int patch, int stride);

/// Throws GeometryError when the patch exceeds the shape or a stride lies outside [1, patch].
PatchGrid patch_grid(Vec3i shape, Vec3i patch = Vec3i::cube(32), Vec3i stride = Vec3i::cube(8));

/// Copies of a sub-box; throws GeometryError when the box leaves the source.
Volume extract_patch(const Volume& v, Vec3i origin, Vec3i size);
LabelMap extract_patch(const LabelMap& labels, Vec3i origin, Vec3i size);
LabeledVolume extract_patch(const LabeledVolume& lv, Vec3i origin, Vec3i size);

struct SampledPatch {
  Volume image;
  LabelMap labels;
  Vec3i center;  // the foreground voxel the patch was drawn around
  Vec3i origin;  // clamped box origin inside the parent volume
};

/// Origin of a `size` box centred on `center`, clamped inside `shape`.
Vec3i clamped_origin(Vec3i center, Vec3i size, Vec3i shape);

/// n patches, each centred (up to boundary clamping) on a uniformly drawn
/// non-background voxel. Pure function of its arguments.
std::vector<SampledPatch> sample_foreground_patches(const LabeledVolume& lv, int n, Vec3i size, std::uint64_t seed);

/// Overlap-averaging accumulator for patchwise inference.
class OverlapAverager {
 public:
  OverlapAverager(Vec3i shape, int channels);

  void add(Vec3i origin, const Volume& patch);
  /// Mean over covering patches; throws GeometryError naming the first uncovered voxel.
  Volume finalize(Spacing spacing = {}) const;
  const std::vector<int>& counts() const { return counts_; }

 private:
  Vec3i shape_;
  int channels_;
  std::vector<double> sums_;
  std::vector<int> counts_;
};

/// Per-voxel class probabilities of a whole volume, channel c = class c.
struct ProbabilityMap {
  Volume probs;
  std::vector<int> counts;

  int classes() const { return probs.channels(); }
  LabelMap argmax() const;
};

struct PatchProbabilities {
  Vec3i origin;
  Volume probs;  // C channels over the patch box
};

/// Voxelwise arithmetic mean of the class probabilities of all covering patches.
ProbabilityMap reconstruct(std::span<const PatchProbabilities> patches, Vec3i shape);

}  // namespace advnorm
