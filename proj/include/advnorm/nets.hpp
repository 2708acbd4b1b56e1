#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "advnorm/nn/layers.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

enum class OutputActivation { Linear, Softmax };

struct UNet3DConfig {
  int in_channels = 1;
  int base_features = 8;  // level l has base·2^l features
  int depth = 3;          // pooling levels
  int out_channels = 1;
  OutputActivation activation = OutputActivation::Linear;

  void validate() const;
  int features(int level) const { return base_features << level; }
};

struct DiscriminatorConfig {
  int in_channels = 1;
  int domains = 2;  // K; the output has K+1 classes
  int input_size = 32;
  double leaky_slope = 0.2;
  double dropout = 0.3;
  std::vector<int> widths{16, 32, 64, 128};

  void validate() const;
  int classes() const { return domains + 1; }
};

UNet3DConfig generator_config(int channels, int base_features = 8, int depth = 3);
UNet3DConfig segmenter_config(int channels, int base_features = 8, int depth = 3);

void to_json(nlohmann::json& j, const UNet3DConfig& c);
void from_json(const nlohmann::json& j, UNet3DConfig& c);
void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

/// 3D U-Net: two Conv-BN-ReLU per level, max-pool down, nearest upsample and
/// skip concatenation up, 1³ convolution head.
template <typename T>
class UNet3D {
 public:
  UNet3D() = default;
  UNet3D(const std::string& name, const UNet3DConfig& cfg);

  /// Linear head returns the head output; softmax head returns probabilities.
  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::RunOptions& opt);
  /// Takes dL/d(output) as returned by forward. Accumulates parameter gradients.
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out, bool need_input_grad = true);

  std::vector<nn::Parameter<T>*> parameters();
  std::vector<nn::Buffer<T>> buffers();
  const UNet3DConfig& config() const { return cfg_; }

 private:
  struct Level {
    nn::ConvBnRelu<T> a, b;
  };
  UNet3DConfig cfg_;
  std::vector<Level> enc_, dec_;
  std::vector<nn::MaxPool2<T>> pool_;
  Level bottom_;
  nn::Conv3d<T> head_;
  nn::Tensor<T> probs_;
};

/// (K+1)-way classifier: four stride-2 k4 convolutions with LeakyReLU and
/// dropout, then one linear layer.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const std::string& name, const DiscriminatorConfig& cfg);

  nn::Tensor<T> forward_logits(const nn::Tensor<T>& x, const nn::RunOptions& opt);
  /// Softmax of forward_logits, shape [N, K+1].
  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::RunOptions& opt);
  /// Takes dL/dlogits.
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_logits, bool need_input_grad = true);

  std::vector<nn::Parameter<T>*> parameters();
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<nn::Conv3d<T>> conv_;
  std::vector<nn::LeakyRelu<T>> act_;
  std::vector<nn::Dropout<T>> drop_;
  nn::Linear<T> fc_;
  std::vector<int> feature_shape_;
};

/// θ_G, θ_S, θ_D.
template <typename T>
struct Networks {
  UNet3D<T> generator;
  UNet3D<T> segmenter;
  Discriminator<T> discriminator;

  Networks() = default;
  Networks(const UNet3DConfig& g, const UNet3DConfig& s, const DiscriminatorConfig& d)
      : generator("G", g), segmenter("S", s), discriminator("D", d) {}
};

/// Fills parameters per their InitRule; each parameter's stream is keyed by
/// its name so adding a layer does not perturb the others.
template <typename T>
void init_parameters(const std::vector<nn::Parameter<T>*>& params, std::uint64_t seed);
template <typename T>
void init_parameters(Networks<T>& nets, std::uint64_t seed);

template <typename T>
std::size_t parameter_count(const std::vector<nn::Parameter<T>*>& params);

std::uint64_t name_hash(const std::string& name);

// Checkpoint container: magic, version, JSON header, raw little-endian float32 arrays.
struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

/// Written to a temporary file and renamed, so a crash never leaves a truncated checkpoint.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
void store_parameters(Checkpoint& ckpt, const std::vector<nn::Parameter<T>*>& params);
template <typename T>
void store_buffers(Checkpoint& ckpt, const std::vector<nn::Buffer<T>>& buffers);
template <typename T>
void load_parameters(const Checkpoint& ckpt, const std::vector<nn::Parameter<T>*>& params);
template <typename T>
void load_buffers(const Checkpoint& ckpt, const std::vector<nn::Buffer<T>>& buffers);

}  // namespace advnorm
