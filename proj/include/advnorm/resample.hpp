#pragma once

#include "advnorm/volume.hpp"

namespace advnorm {

/// Shape after resampling an axis of `length` voxels at `spacing` mm onto a
/// `target` mm grid anchored at voxel 0, without extrapolating past the last voxel.
int resampled_length(int length, double spacing, double target);

/// Trilinear resampling of every channel onto an isotropic grid.
Volume resample_isotropic(const Volume& v, double target_spacing = 1.0);
/// Intensities trilinear, labels nearest-neighbour.
LabeledVolume resample_isotropic(const LabeledVolume& lv, double target_spacing = 1.0);

/// Crops to the bounding box of non-zero content and centres it in `target`,
/// padding with zero intensity / background. Throws when the content does not fit.
Volume crop_pad(const Volume& v, Vec3i target);
LabeledVolume crop_pad(const LabeledVolume& lv, Vec3i target);

/// Zero-pads (centred) any axis shorter than `minimum`; other axes untouched.
LabeledVolume pad_to_at_least(const LabeledVolume& lv, Vec3i minimum);

}  // namespace advnorm
