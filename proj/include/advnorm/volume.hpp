#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advnorm {

/// Integer triple used for shapes, origins, strides and voxel indices.
struct Vec3i {
  int x = 0;
  int y = 0;
  int z = 0;

  constexpr int& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  constexpr int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  constexpr std::size_t product() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  friend constexpr bool operator==(const Vec3i&, const Vec3i&) = default;
  friend constexpr Vec3i operator+(Vec3i a, Vec3i b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3i operator-(Vec3i a, Vec3i b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }

  static constexpr Vec3i cube(int n) { return {n, n, n}; }
};

std::string to_string(const Vec3i& v);

/// Millimetres per voxel along x, y, z.
struct Spacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

/// Tissue classes. Values are the on-disk label codes.
enum class Tissue : std::uint8_t { Background = 0, WhiteMatter = 1, GrayMatter = 2, Csf = 3 };
inline constexpr int kNumClasses = 4;
const char* tissue_name(int label);

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Linear offset of (x, y, z) in an x-fastest grid.
constexpr std::size_t linear_index(const Vec3i& shape, int x, int y, int z) {
  return (static_cast<std::size_t>(z) * static_cast<std::size_t>(shape.y) + static_cast<std::size_t>(y)) *
             static_cast<std::size_t>(shape.x) +
         static_cast<std::size_t>(x);
}

/// Scalar or multi-channel 3D image. Storage is channel-major (C, x, y, z)
/// with x varying fastest, i.e. the NIfTI ordering repeated per channel.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Vec3i shape, int channels = 1, Spacing spacing = {}, float fill = 0.0F);

  const Vec3i& shape() const { return shape_; }
  int channels() const { return channels_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing spacing) { spacing_ = spacing; }
  /// Voxel count along y (the bias-field axis).
  int height() const { return shape_.y; }
  std::size_t voxel_count() const { return shape_.product(); }
  bool empty() const { return data_.empty(); }

  float& at(int c, int x, int y, int z) { return data_[offset(c, x, y, z)]; }
  float at(int c, int x, int y, int z) const { return data_[offset(c, x, y, z)]; }
  float& operator()(int x, int y, int z) { return data_[offset(0, x, y, z)]; }
  float operator()(int x, int y, int z) const { return data_[offset(0, x, y, z)]; }

  std::span<float> channel(int c);
  std::span<const float> channel(int c) const;
  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  /// Throws GeometryError unless dims >= 1, spacing > 0 and values are finite.
  void validate() const;

 private:
  std::size_t offset(int c, int x, int y, int z) const {
    return static_cast<std::size_t>(c) * voxel_count() + linear_index(shape_, x, y, z);
  }

  Vec3i shape_{};
  int channels_ = 0;
  Spacing spacing_{};
  std::vector<float> data_;
};

/// Per-voxel tissue labels, same ordering as a single Volume channel.
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(Vec3i shape, std::uint8_t fill = 0);

  const Vec3i& shape() const { return shape_; }
  std::size_t voxel_count() const { return shape_.product(); }
  std::uint8_t& operator()(int x, int y, int z) { return labels_[linear_index(shape_, x, y, z)]; }
  std::uint8_t operator()(int x, int y, int z) const { return labels_[linear_index(shape_, x, y, z)]; }
  std::vector<std::uint8_t>& data() { return labels_; }
  const std::vector<std::uint8_t>& data() const { return labels_; }

  /// Number of voxels carrying each class label.
  std::array<std::size_t, kNumClasses> census() const;
  /// Binary mask (0/1) of voxels labeled `label`.
  std::vector<std::uint8_t> mask(int label) const;
  /// Mask of voxels with label != Background.
  std::vector<std::uint8_t> foreground() const;

 private:
  Vec3i shape_{};
  std::vector<std::uint8_t> labels_;
};

struct LabeledVolume {
  Volume image;
  LabelMap labels;

  /// Image valid, shapes match and every label is a known class.
  void validate() const;
};

}  // namespace advnorm
