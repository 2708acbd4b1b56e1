#include "advnorm/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "advnorm/random.hpp"

namespace advnorm {

using nn::Parameter;
using nn::Tensor;

void UNet3DConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("U-Net channel counts must be >= 1");
  if (base_features < 1) throw std::invalid_argument("U-Net base features must be >= 1");
  if (depth < 1) throw std::invalid_argument("U-Net depth must be >= 1");
}

void DiscriminatorConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("discriminator input channels must be >= 1");
  if (domains < 1) throw std::invalid_argument("discriminator needs K >= 1 domains");
  if (widths.size() != 4) throw std::invalid_argument("discriminator has exactly 4 convolution layers");
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("discriminator widths must be >= 1");
  }
  if (input_size < 16 || input_size % 16 != 0) {
    throw std::invalid_argument("discriminator input size must be a positive multiple of 16, got " +
                                std::to_string(input_size));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout rate must lie in [0,1)");
}

UNet3DConfig generator_config(int channels, int base_features, int depth) {
  return {channels, base_features, depth, channels, OutputActivation::Linear};
}

UNet3DConfig segmenter_config(int channels, int base_features, int depth) {
  return {channels, base_features, depth, kNumClasses, OutputActivation::Softmax};
}

void to_json(nlohmann::json& j, const UNet3DConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"base_features", c.base_features},
       {"depth", c.depth},
       {"out_channels", c.out_channels},
       {"activation", c.activation == OutputActivation::Linear ? "linear" : "softmax"}};
}

void from_json(const nlohmann::json& j, UNet3DConfig& c) {
  c.in_channels = j.at("in_channels");
  c.base_features = j.at("base_features");
  c.depth = j.at("depth");
  c.out_channels = j.at("out_channels");
  const std::string act = j.at("activation");
  if (act == "linear") {
    c.activation = OutputActivation::Linear;
  } else if (act == "softmax") {
    c.activation = OutputActivation::Softmax;
  } else {
    throw std::invalid_argument("unknown output activation '" + act + "'");
  }
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"in_channels", c.in_channels}, {"domains", c.domains},     {"input_size", c.input_size},
       {"leaky_slope", c.leaky_slope}, {"dropout", c.dropout},     {"widths", c.widths}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c.in_channels = j.at("in_channels");
  c.domains = j.at("domains");
  c.input_size = j.at("input_size");
  c.leaky_slope = j.at("leaky_slope");
  c.dropout = j.at("dropout");
  c.widths = j.at("widths").get<std::vector<int>>();
}

// ---------------------------------------------------------------- UNet3D

template <typename T>
UNet3D<T>::UNet3D(const std::string& name, const UNet3DConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int in = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = name + ".enc" + std::to_string(l);
    enc_.push_back({nn::ConvBnRelu<T>(p + "a", in, cfg.features(l)),
                    nn::ConvBnRelu<T>(p + "b", cfg.features(l), cfg.features(l))});
    pool_.emplace_back();
    in = cfg.features(l);
  }
  const int fb = cfg.features(cfg.depth);
  bottom_ = {nn::ConvBnRelu<T>(name + ".bottom_a", in, fb), nn::ConvBnRelu<T>(name + ".bottom_b", fb, fb)};
  dec_.resize(static_cast<std::size_t>(cfg.depth));
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string p = name + ".dec" + std::to_string(l);
    dec_[static_cast<std::size_t>(l)] = {
        nn::ConvBnRelu<T>(p + "a", cfg.features(l) + cfg.features(l + 1), cfg.features(l)),
        nn::ConvBnRelu<T>(p + "b", cfg.features(l), cfg.features(l))};
  }
  head_ = nn::Conv3d<T>(name + ".head", cfg.features(0), cfg.out_channels, 1, 1, 0, true, 1.0);
}

template <typename T>
Tensor<T> UNet3D<T>::forward(const Tensor<T>& x, const nn::RunOptions& opt) {
  if (x.rank() != 5 || x.dim(1) != cfg_.in_channels) {
    throw std::invalid_argument("U-Net expects [N, " + std::to_string(cfg_.in_channels) + ", D, H, W], got " +
                                nn::shape_string(x.shape()));
  }
  const int div = 1 << cfg_.depth;
  for (int a = 2; a < 5; ++a) {
    if (x.dim(static_cast<std::size_t>(a)) % div != 0) {
      throw std::invalid_argument("U-Net input " + nn::shape_string(x.shape()) + " not divisible by " +
                                  std::to_string(div));
    }
  }
  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (int l = 0; l < cfg_.depth; ++l) {
    auto& lv = enc_[static_cast<std::size_t>(l)];
    h = lv.b.forward(lv.a.forward(h, opt), opt);
    skips.push_back(h);
    h = pool_[static_cast<std::size_t>(l)].forward(h, opt);
  }
  h = bottom_.b.forward(bottom_.a.forward(h, opt), opt);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    auto& lv = dec_[static_cast<std::size_t>(l)];
    Tensor<T> cat = nn::concat_channels(skips[static_cast<std::size_t>(l)], nn::upsample2(h));
    skips[static_cast<std::size_t>(l)] = Tensor<T>();
    h = lv.b.forward(lv.a.forward(cat, opt), opt);
  }
  Tensor<T> out = head_.forward(h, opt);
  if (cfg_.activation == OutputActivation::Softmax) {
    out = nn::softmax_channels(out);
    probs_ = opt.cache ? out : Tensor<T>();
  }
  return out;
}

template <typename T>
Tensor<T> UNet3D<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  Tensor<T> g = grad_out;
  if (cfg_.activation == OutputActivation::Softmax) {
    if (probs_.empty()) throw std::logic_error("U-Net backward without cached forward");
    g = nn::softmax_channels_backward(probs_, g);
  }
  g = head_.backward(g);
  std::vector<Tensor<T>> skip_grads(static_cast<std::size_t>(cfg_.depth));
  for (int l = 0; l < cfg_.depth; ++l) {
    auto& lv = dec_[static_cast<std::size_t>(l)];
    g = lv.a.backward(lv.b.backward(g));
    Tensor<T> gu;
    nn::split_channels(g, cfg_.features(l), skip_grads[static_cast<std::size_t>(l)], gu);
    g = nn::upsample2_backward(gu);
  }
  g = bottom_.a.backward(bottom_.b.backward(g));
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    g = pool_[static_cast<std::size_t>(l)].backward(g);
    const auto& sg = skip_grads[static_cast<std::size_t>(l)];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg[i];
    auto& lv = enc_[static_cast<std::size_t>(l)];
    g = lv.a.backward(lv.b.backward(g), l > 0 || need_input_grad);
  }
  return g;
}

template <typename T>
std::vector<Parameter<T>*> UNet3D<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto add = [&](nn::ConvBnRelu<T>& u) {
    for (auto* p : u.parameters()) out.push_back(p);
  };
  for (auto& lv : enc_) {
    add(lv.a);
    add(lv.b);
  }
  add(bottom_.a);
  add(bottom_.b);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    add(dec_[static_cast<std::size_t>(l)].a);
    add(dec_[static_cast<std::size_t>(l)].b);
  }
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<nn::Buffer<T>> UNet3D<T>::buffers() {
  std::vector<nn::Buffer<T>> out;
  auto add = [&](nn::ConvBnRelu<T>& u) {
    for (auto b : u.buffers()) out.push_back(b);
  };
  for (auto& lv : enc_) {
    add(lv.a);
    add(lv.b);
  }
  add(bottom_.a);
  add(bottom_.b);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    add(dec_[static_cast<std::size_t>(l)].a);
    add(dec_[static_cast<std::size_t>(l)].b);
  }
  return out;
}

// ---------------------------------------------------------------- Discriminator

template <typename T>
Discriminator<T>::Discriminator(const std::string& name, const DiscriminatorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  int in = cfg.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    conv_.emplace_back(name + ".conv" + std::to_string(i), in, cfg.widths[i], 4, 2, 1, true, gain);
    act_.emplace_back(cfg.leaky_slope);
    drop_.emplace_back(cfg.dropout, static_cast<std::uint64_t>(i));
    in = cfg.widths[i];
  }
  const int s = cfg.input_size / 16;
  fc_ = nn::Linear<T>(name + ".fc", in * s * s * s, cfg.classes());
}

template <typename T>
Tensor<T> Discriminator<T>::forward_logits(const Tensor<T>& x, const nn::RunOptions& opt) {
  const int s = cfg_.input_size;
  if (x.rank() != 5 || x.dim(1) != cfg_.in_channels || x.dim(2) != s || x.dim(3) != s || x.dim(4) != s) {
    throw std::invalid_argument("discriminator expects [N, " + std::to_string(cfg_.in_channels) + ", " +
                                std::to_string(s) + ", " + std::to_string(s) + ", " + std::to_string(s) + "], got " +
                                nn::shape_string(x.shape()));
  }
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    h = drop_[i].forward(act_[i].forward(conv_[i].forward(h, opt), opt), opt);
  }
  feature_shape_ = h.shape();
  h.reshape({h.dim(0), static_cast<int>(h.stride_from(1))});
  return fc_.forward(h, opt);
}

template <typename T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& x, const nn::RunOptions& opt) {
  Tensor<T> logits = forward_logits(x, opt);
  return nn::softmax_channels(logits);
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const Tensor<T>& grad_logits, bool need_input_grad) {
  Tensor<T> g = fc_.backward(grad_logits);
  g.reshape(feature_shape_);
  for (int i = 3; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    g = conv_[k].backward(act_[k].backward(drop_[k].backward(g)), i > 0 || need_input_grad);
  }
  return g;
}

template <typename T>
std::vector<Parameter<T>*> Discriminator<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& c : conv_) {
    for (auto* p : c.parameters()) out.push_back(p);
  }
  for (auto* p : fc_.parameters()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------- init

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void init_parameters(const std::vector<Parameter<T>*>& params, std::uint64_t seed) {
  for (auto* p : params) {
    p->zero_grad();
    switch (p->init.kind) {
      case nn::InitRule::Kind::Zero:
        p->value.fill(T{0});
        break;
      case nn::InitRule::Kind::One:
        p->value.fill(T{1});
        break;
      case nn::InitRule::Kind::Normal: {
        const int fan_in = p->value.rank() > 1 ? p->value.dim(1) : 1;
        std::mt19937_64 rng(derive_seed(seed, {name_hash(p->name)}));
        std::normal_distribution<double> gauss(0.0, p->init.gain / std::sqrt(static_cast<double>(fan_in)));
        for (auto& v : p->value.storage()) v = static_cast<T>(gauss(rng));
        break;
      }
    }
  }
}

template <typename T>
void init_parameters(Networks<T>& nets, std::uint64_t seed) {
  init_parameters(nets.generator.parameters(), seed);
  init_parameters(nets.segmenter.parameters(), seed);
  init_parameters(nets.discriminator.parameters(), seed);
  for (auto& b : nets.generator.buffers()) b.tensor->fill(b.name.ends_with("running_var") ? T{1} : T{0});
  for (auto& b : nets.segmenter.buffers()) b.tensor->fill(b.name.ends_with("running_var") ? T{1} : T{0});
}

template <typename T>
std::size_t parameter_count(const std::vector<Parameter<T>*>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[8] = {'A', 'D', 'V', 'N', 'C', 'K', 'P', 'T'};
}

const NamedArray& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw std::runtime_error("checkpoint has no array named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (Tensor<float>::count(a.shape) != a.data.size()) {
      throw std::invalid_argument("checkpoint array '" + a.name + "' shape does not match its data");
    }
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.data.size()}});
    offset += a.data.size();
  }
  const std::string text = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 8);
    const std::uint32_t version = Checkpoint::kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : ckpt.arrays) {
      out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    NamedArray arr{a.at("name"), a.at("shape").get<std::vector<int>>(), {}};
    arr.data.resize(a.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(arr.data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint data for '" + arr.name + "' in " + path.string());
    ckpt.arrays.push_back(std::move(arr));
  }
  return ckpt;
}

namespace {

template <typename T>
NamedArray to_named(const std::string& name, const Tensor<T>& t) {
  NamedArray a{name, t.shape(), std::vector<float>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) a.data[i] = static_cast<float>(t[i]);
  return a;
}

template <typename T>
void from_named(const NamedArray& a, Tensor<T>& t) {
  if (a.shape != t.shape()) {
    throw std::runtime_error("checkpoint array '" + a.name + "' has shape " + nn::shape_string(a.shape) +
                             ", model expects " + nn::shape_string(t.shape()));
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(a.data[i]);
}

}  // namespace

template <typename T>
void store_parameters(Checkpoint& ckpt, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) ckpt.arrays.push_back(to_named(p->name, p->value));
}

template <typename T>
void store_buffers(Checkpoint& ckpt, const std::vector<nn::Buffer<T>>& buffers) {
  for (const auto& b : buffers) ckpt.arrays.push_back(to_named(b.name, *b.tensor));
}

template <typename T>
void load_parameters(const Checkpoint& ckpt, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) from_named(ckpt.get(p->name), p->value);
}

template <typename T>
void load_buffers(const Checkpoint& ckpt, const std::vector<nn::Buffer<T>>& buffers) {
  for (const auto& b : buffers) from_named(ckpt.get(b.name), *b.tensor);
}

#define ADVNORM_INSTANTIATE(T)                                                                 \
  template class UNet3D<T>;                                                                    \
  template class Discriminator<T>;                                                             \
  template void init_parameters<T>(const std::vector<Parameter<T>*>&, std::uint64_t);          \
  template void init_parameters<T>(Networks<T>&, std::uint64_t);                               \
  template std::size_t parameter_count<T>(const std::vector<Parameter<T>*>&);                  \
  template void store_parameters<T>(Checkpoint&, const std::vector<Parameter<T>*>&);           \
  template void store_buffers<T>(Checkpoint&, const std::vector<nn::Buffer<T>>&);              \
  template void load_parameters<T>(const Checkpoint&, const std::vector<Parameter<T>*>&);      \
  template void load_buffers<T>(const Checkpoint&, const std::vector<nn::Buffer<T>>&);

ADVNORM_INSTANTIATE(float)
ADVNORM_INSTANTIATE(double)

#undef ADVNORM_INSTANTIATE

}  // namespace advnorm
