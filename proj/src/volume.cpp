#include "advnorm/volume.hpp"

#include <cmath>

namespace advnorm {

std::string to_string(const Vec3i& v) {
  return "(" + std::to_string(v.x) + ", " + std::to_string(v.y) + ", " + std::to_string(v.z) + ")";
}

const char* tissue_name(int label) {
  switch (label) {
    case 0: return "BG";
    case 1: return "WM";
    case 2: return "GM";
    case 3: return "CSF";
    default: return "?";
  }
}

Volume::Volume(Vec3i shape, int channels, Spacing spacing, float fill)
    : shape_(shape), channels_(channels), spacing_(spacing) {
  if (shape.x < 1 || shape.y < 1 || shape.z < 1 || channels < 1) {
    throw GeometryError("volume dimensions must be >= 1, got shape " + to_string(shape) + " with " +
                        std::to_string(channels) + " channels");
  }
  data_.assign(static_cast<std::size_t>(channels) * shape.product(), fill);
}

std::span<float> Volume::channel(int c) {
  return {data_.data() + static_cast<std::size_t>(c) * voxel_count(), voxel_count()};
}

std::span<const float> Volume::channel(int c) const {
  return {data_.data() + static_cast<std::size_t>(c) * voxel_count(), voxel_count()};
}

void Volume::validate() const {
  if (shape_.x < 1 || shape_.y < 1 || shape_.z < 1 || channels_ < 1) {
    throw GeometryError("empty volume " + to_string(shape_));
  }
  if (!(spacing_.x > 0.0 && spacing_.y > 0.0 && spacing_.z > 0.0)) {
    throw GeometryError("voxel spacing must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(channels_) * voxel_count()) {
    throw GeometryError("volume buffer size does not match its shape");
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw GeometryError("volume contains non-finite intensities");
  }
}

LabelMap::LabelMap(Vec3i shape, std::uint8_t fill) : shape_(shape) {
  if (shape.x < 1 || shape.y < 1 || shape.z < 1) {
    throw GeometryError("label map dimensions must be >= 1, got " + to_string(shape));
  }
  labels_.assign(shape.product(), fill);
}

std::array<std::size_t, kNumClasses> LabelMap::census() const {
  std::array<std::size_t, kNumClasses> counts{};
  for (auto l : labels_) {
    if (l < kNumClasses) ++counts[l];
  }
  return counts;
}

std::vector<std::uint8_t> LabelMap::mask(int label) const {
  std::vector<std::uint8_t> m(labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] == label ? 1 : 0;
  return m;
}

std::vector<std::uint8_t> LabelMap::foreground() const {
  std::vector<std::uint8_t> m(labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] != 0 ? 1 : 0;
  return m;
}

void LabeledVolume::validate() const {
  image.validate();
  if (!(image.shape() == labels.shape())) {
    throw GeometryError("image shape " + to_string(image.shape()) + " does not match label shape " +
                        to_string(labels.shape()));
  }
  for (auto l : labels.data()) {
    if (l >= kNumClasses) throw GeometryError("label value " + std::to_string(l) + " outside {0,1,2,3}");
  }
}

}  // namespace advnorm
