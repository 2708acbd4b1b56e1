#pragma once

#include <algorithm>
#include <new>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advnorm::nn {

/// 64-byte aligned allocation.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major tensor. Volumetric activations use [N, C, D, H, W] with W
/// (the image x axis) fastest, matching the Volume memory layout.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{0}) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) throw std::invalid_argument("reshape changes element count");
    shape_ = std::move(shape);
  }
  /// Product of dims from index `from` on (e.g. per-sample size with from = 1).
  std::size_t stride_from(std::size_t from) const {
    std::size_t s = 1;
    for (std::size_t i = from; i < shape_.size(); ++i) s *= static_cast<std::size_t>(shape_[i]);
    return s;
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::vector<int> shape_;
  AlignedVector<T> data_;
};

std::string shape_string(const std::vector<int>& shape);

/// How init_parameters fills a parameter. Normal draws N(0, gain^2 / fan_in)
/// with fan_in = shape[1].
struct InitRule {
  enum class Kind { Zero, One, Normal };
  Kind kind = Kind::Zero;
  double gain = 1.0;
};

/// Trainable array with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  InitRule init;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape, InitRule rule = {})
      : name(std::move(n)), value(shape), grad(shape), init(rule) {}
  void zero_grad() { grad.fill(T{0}); }
};

/// Non-trainable state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* tensor;
};

}  // namespace advnorm::nn
