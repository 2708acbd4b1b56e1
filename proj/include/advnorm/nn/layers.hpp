#pragma once

#include <cstdint>
#include <vector>

#include "advnorm/nn/tensor.hpp"

namespace advnorm::nn {

enum class Phase { Train, Eval };

/// How a forward pass behaves. Train uses batch statistics and dropout; Eval
/// uses running statistics and no dropout. `cache` keeps what backward needs.
struct RunOptions {
  Phase phase = Phase::Eval;
  bool update_running_stats = true;
  bool cache = false;
  std::uint64_t dropout_seed = 0;
};

/// 3D convolution over [N, C, D, H, W] with cubic kernel, stride and zero padding.
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
         double init_gain = 1.4142135623730951);

  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true);

  std::vector<Parameter<T>*> parameters();
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  std::vector<int> output_shape(const std::vector<int>& in) const;
  std::size_t parameter_count() const;

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Parameter<T> weight_;  // [out, in * k^3]
  Parameter<T> bias_;    // [out]
  Tensor<T> input_;
};

template <typename T>
class BatchNorm3d {
 public:
  BatchNorm3d() = default;
  BatchNorm3d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::vector<Parameter<T>*> parameters() { return {&gamma_, &beta_}; }
  std::vector<Buffer<T>> buffers();

 private:
  int c_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  std::string name_;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  bool batch_stats_used_ = true;
};

/// Conv3d(no bias) → BatchNorm3d → ReLU, the unit both U-Nets are built from.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(const std::string& name, int in_channels, int out_channels);

  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true);

  std::vector<Parameter<T>*> parameters();
  std::vector<Buffer<T>> buffers() { return bn_.buffers(); }

 private:
  Conv3d<T> conv_;
  BatchNorm3d<T> bn_;
  Tensor<T> out_;
};

/// 2×2×2 max pooling, stride 2; spatial dims must be even.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  std::vector<int> in_shape_;
  std::vector<std::uint8_t> argmax_;
};

/// Nearest-neighbour ×2 upsampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& grad_out);

/// Channel concatenation of two [N, C, ...] tensors and its split.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void split_channels(const Tensor<T>& g, int first, Tensor<T>& ga, Tensor<T>& gb);

template <typename T>
class LeakyRelu {
 public:
  explicit LeakyRelu(double slope = 0.2) : slope_(static_cast<T>(slope)) {}
  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  T slope_;
  std::vector<std::uint8_t> positive_;
};

/// Inverted dropout; identity in Eval. The mask is a pure function of
/// (RunOptions::dropout_seed, salt).
template <typename T>
class Dropout {
 public:
  Dropout(double rate = 0.3, std::uint64_t salt = 0) : rate_(rate), salt_(salt) {}
  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  double rate_;
  std::uint64_t salt_;
  std::vector<T> scale_;
};

/// Fully connected layer on [N, F].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features, double init_gain = 1.0);
  Tensor<T> forward(const Tensor<T>& x, const RunOptions& opt);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true);
  std::vector<Parameter<T>*> parameters() { return {&weight_, &bias_}; }

 private:
  int in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  Tensor<T> input_;
};

/// Softmax over dim 1 of [N, C, ...].
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);
/// Given probabilities p and dL/dp, returns dL/dlogits.
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs);

}  // namespace advnorm::nn
