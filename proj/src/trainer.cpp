#include "advnorm/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#include "advnorm/augment.hpp"
#include "advnorm/patch.hpp"
#include "advnorm/random.hpp"

namespace advnorm::train {

namespace {

using nn::Phase;
using nn::RunOptions;
using nn::Tensor;

enum Stream : std::uint64_t {
  kInit = 0x494E4954,
  kPoolTrain = 0x50545231,
  kPoolVal = 0x50565431,
  kBatchD = 0x42443031,
  kBatchGS = 0x42475331,
  kAugD = 0x41443031,
  kAugGS = 0x41475331,
  kDropD = 0x44443031,
  kDropGS = 0x44475331,
};

std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, r.ptr};
}

double parse_double(const std::string& s) {
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "' in history");
  return x;
}

template <typename T>
const nn::Parameter<T>* first_nonfinite(const std::vector<nn::Parameter<T>*>& params) {
  for (auto* p : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i)
      if (!std::isfinite(static_cast<double>(p->grad[i]))) return p;
  return nullptr;
}

NamedArray named(const std::string& name, const Tensor<Real>& t) {
  NamedArray a;
  a.name = name;
  a.shape = t.shape();
  a.data.assign(t.data(), t.data() + t.size());
  return a;
}

void unnamed(const NamedArray& a, Tensor<Real>& t) {
  if (a.shape != t.shape()) throw std::invalid_argument("checkpoint array '" + a.name + "' has the wrong shape");
  std::copy(a.data.begin(), a.data.end(), t.data());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void copy_patch(const Volume& v, Tensor<Real>& t, int index) {
  const std::size_t per = t.stride_from(1);
  if (v.data().size() != per) throw std::invalid_argument("patch does not match the batch tensor");
  std::copy(v.data().begin(), v.data().end(), t.data() + static_cast<std::size_t>(index) * per);
}

Volume tensor_sample(const Tensor<Real>& t, int index, Vec3i shape) {
  Volume v(shape, t.dim(1));
  const std::size_t per = t.stride_from(1);
  std::copy(t.data() + static_cast<std::size_t>(index) * per, t.data() + static_cast<std::size_t>(index + 1) * per,
            v.data().begin());
  return v;
}

Tensor<Real> concat(const Tensor<Real>& a, const Tensor<Real>& b) {
  auto shape = a.shape();
  shape[0] += b.dim(0);
  Tensor<Real> out(shape);
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

std::vector<int> argmax_rows(const Tensor<Real>& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Real* l = logits.data() + static_cast<std::size_t>(i) * c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(l, l + c) - l) + 1;
  }
  return out;
}

double nll_row(const Real* l, int classes, int label) {
  double mx = l[0];
  for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(l[c]));
  double s = 0.0;
  for (int c = 0; c < classes; ++c) s += std::exp(static_cast<double>(l[c]) - mx);
  return std::min(mx + std::log(s) - static_cast<double>(l[label - 1]), -std::log(losses::kProbabilityFloor));
}

}  // namespace

// ---------------------------------------------------------------------------- Adam

template <typename T>
Adam<T>::Adam(std::vector<nn::Parameter<T>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
  if (!(opt.beta1 >= 0 && opt.beta1 < 1 && opt.beta2 >= 0 && opt.beta2 < 1 && opt.eps > 0 && opt.weight_decay >= 0))
    throw std::invalid_argument("invalid Adam options");
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
void Adam<T>::step(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
  if (const auto* bad = first_nonfinite(params_)) throw NonFiniteError("non-finite gradient in parameter " + bad->name);
  ++t_;
  const double b1 = opt_.beta1, b2 = opt_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto* p = params_[k];
    T* w = p->value.data();
    const T* g = p->grad.data();
    T* m = m_[k].data();
    T* v = v_[k].data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + opt_.eps) + opt_.weight_decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
    }
  }
}

template <typename T>
void Adam<T>::store(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.meta["adam"][prefix] = t_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ckpt.arrays.push_back(named(prefix + ":" + params_[k]->name + ":m", m_[k].template cast<Real>()));
    ckpt.arrays.push_back(named(prefix + ":" + params_[k]->name + ":v", v_[k].template cast<Real>()));
  }
}

template <typename T>
void Adam<T>::load(const Checkpoint& ckpt, const std::string& prefix) {
  t_ = ckpt.meta.at("adam").at(prefix).template get<std::int64_t>();
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor<Real> m(m_[k].shape()), v(v_[k].shape());
    unnamed(ckpt.get(prefix + ":" + params_[k]->name + ":m"), m);
    unnamed(ckpt.get(prefix + ":" + params_[k]->name + ":v"), v);
    m_[k] = m.template cast<T>();
    v_[k] = v.template cast<T>();
  }
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------------------- schedules

double multistep_rate(double base, int epoch, std::span<const int> milestones, double gamma) {
  double r = base;
  for (int ms : milestones)
    if (epoch > ms) r *= gamma;
  return r;
}

PlateauSchedule::PlateauSchedule(double base, double factor, int patience)
    : rate_(base), factor_(factor), patience_(patience) {
  if (!(base > 0) || !(factor > 0 && factor <= 1) || patience < 1) throw std::invalid_argument("invalid plateau schedule");
}

double PlateauSchedule::observe(double loss) {
  if (std::isfinite(loss) && (!seen_ || loss < best_)) {
    best_ = loss;
    seen_ = true;
    stale_ = 0;
  } else if (++stale_ > patience_) {
    rate_ *= factor_;
    stale_ = 0;
  }
  return rate_;
}

double PlateauSchedule::replay(double base, double factor, int patience, std::span<const double> losses) {
  PlateauSchedule s(base, factor, patience);
  for (double l : losses) s.observe(l);
  return s.rate();
}

nlohmann::json PlateauSchedule::to_json() const {
  return {{"rate", rate_}, {"factor", factor_}, {"patience", patience_}, {"best", best_}, {"seen", seen_}, {"stale", stale_}};
}

void PlateauSchedule::from_json(const nlohmann::json& j) {
  rate_ = j.at("rate").get<double>();
  factor_ = j.at("factor").get<double>();
  patience_ = j.at("patience").get<int>();
  best_ = j.at("best").get<double>();
  seen_ = j.at("seen").get<bool>();
  stale_ = j.at("stale").get<int>();
}

// ---------------------------------------------------------------------------- config

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Adversarial: return "adversarial";
    case Mode::Preprocessor: return "pre-processor";
    case Mode::SegmenterOnly: return "segmenter-only";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  if (s == "adversarial") return Mode::Adversarial;
  if (s == "pre-processor") return Mode::Preprocessor;
  if (s == "segmenter-only") return Mode::SegmenterOnly;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

const char* transform_name(InputTransform t) { return t == InputTransform::None ? "none" : "standardize"; }

InputTransform parse_transform(const std::string& s) {
  if (s == "none") return InputTransform::None;
  if (s == "standardize") return InputTransform::Standardize;
  throw std::invalid_argument("unknown input transform '" + s + "'");
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  need(m >= 1, "m must be >= 1");
  need(n_epochs >= 1, "n_epochs must be >= 1");
  need(n_iter >= 0, "n_iter must be >= 0");
  need(n_steps >= 1, "n_steps must be >= 1");
  need(std::isfinite(lambda) && lambda >= 0, "lambda must be finite and >= 0");
  need(lr_gs > 0 && std::isfinite(lr_gs), "lr_gs must be > 0");
  need(lr_d > 0 && std::isfinite(lr_d), "lr_d must be > 0");
  need(weight_decay >= 0, "weight_decay must be >= 0");
  need(gamma > 0 && gamma <= 1, "gamma must be in (0, 1]");
  need(plateau_factor > 0 && plateau_factor <= 1, "plateau_factor must be in (0, 1]");
  need(patience >= 1, "patience must be >= 1");
  need(augment_probability >= 0 && augment_probability <= 1, "augment_probability must be in [0, 1]");
  need(augment_axis >= 0 && augment_axis <= 2, "augment_axis must be 0, 1 or 2");
  need(patch >= 2, "patch must be >= 2");
  need(train_patches >= 1, "train_patches must be >= 1");
  need(val_patches >= 1, "val_patches must be >= 1");
  for (int d : domains) need(d >= 1, "domains are 1-based");
  dice.validate();
}

int TrainConfig::iterations(int domain_count) const {
  if (n_iter > 0) return n_iter;
  const long long total = static_cast<long long>(train_patches) * domain_count;
  const long long per = static_cast<long long>(m) * n_steps;
  return static_cast<int>((total + per - 1) / per);
}

std::string TrainConfig::run_tag() const {
  if (mode == Mode::Adversarial && lambda == 0.0) return mode_name(Mode::Preprocessor);
  return mode_name(mode);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", mode_name(c.mode)},
       {"input", transform_name(c.input)},
       {"m", c.m},
       {"n_epochs", c.n_epochs},
       {"n_iter", c.n_iter},
       {"n_steps", c.n_steps},
       {"lambda", c.lambda},
       {"lr_gs", c.lr_gs},
       {"lr_d", c.lr_d},
       {"weight_decay", c.weight_decay},
       {"milestones", c.milestones},
       {"gamma", c.gamma},
       {"plateau_factor", c.plateau_factor},
       {"patience", c.patience},
       {"augment_probability", c.augment_probability},
       {"augment_axis", c.augment_axis},
       {"patch", c.patch},
       {"train_patches", c.train_patches},
       {"val_patches", c.val_patches},
       {"domains", c.domains},
       {"seed", c.seed},
       {"dice_epsilon", c.dice.epsilon},
       {"dice_weights", c.dice.weights}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> keys{"mode", "input", "m", "n_epochs", "n_iter", "n_steps", "lambda", "lr_gs",
                                          "lr_d", "weight_decay", "milestones", "gamma", "plateau_factor",
                                          "patience", "augment_probability", "augment_axis", "patch",
                                          "train_patches", "val_patches", "domains", "seed", "dice_epsilon",
                                          "dice_weights"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw std::invalid_argument("unknown train config key '" + k + "'");
  TrainConfig d;
  if (j.contains("mode")) d.mode = parse_mode(j["mode"].get<std::string>());
  if (j.contains("input")) d.input = parse_transform(j["input"].get<std::string>());
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) j.at(k).get_to(field);
  };
  get("m", d.m);
  get("n_epochs", d.n_epochs);
  get("n_iter", d.n_iter);
  get("n_steps", d.n_steps);
  get("lambda", d.lambda);
  get("lr_gs", d.lr_gs);
  get("lr_d", d.lr_d);
  get("weight_decay", d.weight_decay);
  get("milestones", d.milestones);
  get("gamma", d.gamma);
  get("plateau_factor", d.plateau_factor);
  get("patience", d.patience);
  get("augment_probability", d.augment_probability);
  get("augment_axis", d.augment_axis);
  get("patch", d.patch);
  get("train_patches", d.train_patches);
  get("val_patches", d.val_patches);
  get("domains", d.domains);
  get("seed", d.seed);
  get("dice_epsilon", d.dice.epsilon);
  get("dice_weights", d.dice.weights);
  c = d;
}

void ModelConfig::validate() const {
  generator.validate();
  segmenter.validate();
  discriminator.validate();
  if (generator.activation != OutputActivation::Linear) throw std::invalid_argument("generator head must be linear");
  if (segmenter.activation != OutputActivation::Softmax) throw std::invalid_argument("segmenter head must be softmax");
  if (generator.out_channels != generator.in_channels)
    throw std::invalid_argument("generator must map C channels to C channels");
  if (segmenter.in_channels != generator.out_channels)
    throw std::invalid_argument("segmenter input channels must match the generator output");
  if (segmenter.out_channels != kNumClasses) throw std::invalid_argument("segmenter must output 4 classes");
  if (discriminator.in_channels != generator.out_channels)
    throw std::invalid_argument("discriminator input channels must match the generator output");
}

// ---------------------------------------------------------------------------- data

Volume transform_input(const Volume& v, InputTransform t) {
  return t == InputTransform::Standardize ? augment::standardize(v) : v;
}

std::size_t PatchPool::size() const {
  std::size_t n = 0;
  for (const auto& r : refs) n += r.size();
  return n;
}

PatchPool make_pool(std::span<const synth::Subject* const> subjects, std::span<const int> domains, int per_domain,
                    int patch, InputTransform transform, std::uint64_t seed) {
  if (per_domain < 1) throw std::invalid_argument("make_pool: need at least one patch per domain");
  std::set<int> wanted(domains.begin(), domains.end());
  if (wanted.empty())
    for (const auto* s : subjects) wanted.insert(s->domain);
  PatchPool pool;
  pool.patch = Vec3i::cube(patch);
  for (int d : wanted) {
    std::vector<const synth::Subject*> mine;
    for (const auto* s : subjects)
      if (s->domain == d) mine.push_back(s);
    if (mine.empty()) throw std::invalid_argument("make_pool: domain " + std::to_string(d) + " has no subjects");
    pool.domains.push_back(d);
    auto& refs = pool.refs.emplace_back();
    const int n = static_cast<int>(mine.size());
    for (int i = 0; i < n; ++i) {
      const auto* s = mine[static_cast<std::size_t>(i)];
      const int count = per_domain / n + (i < per_domain % n ? 1 : 0);
      LabeledVolume lv{transform_input(s->volume.image, transform), s->volume.labels};
      const int vi = static_cast<int>(pool.volumes.size());
      if (count > 0) {
        for (const auto& sp :
             sample_foreground_patches(lv, count, pool.patch, derive_seed(seed, {static_cast<std::uint64_t>(d),
                                                                                  static_cast<std::uint64_t>(s->index)})))
          refs.push_back({vi, sp.origin});
      }
      pool.volumes.push_back(std::move(lv));
      pool.volume_domain.push_back(d);
    }
  }
  const int c = pool.channels();
  for (const auto& v : pool.volumes)
    if (v.image.channels() != c) throw std::invalid_argument("make_pool: subjects disagree on channel count");
  return pool;
}

std::vector<DomainSample> sample_batch(const PatchPool& pool, int m, std::uint64_t seed) {
  const int k = static_cast<int>(pool.domains.size());
  if (k == 0) throw std::invalid_argument("sample_batch: pool has no domains");
  if (m < 1) throw std::invalid_argument("sample_batch: m must be >= 1");
  for (int i = 0; i < k; ++i)
    if (pool.refs[static_cast<std::size_t>(i)].empty())
      throw std::invalid_argument("sample_batch: domain " + std::to_string(pool.domains[static_cast<std::size_t>(i)]) +
                                  " is empty");
  std::mt19937_64 rng(seed);
  std::vector<int> counts(static_cast<std::size_t>(k), m / k);
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < m % k; ++i) {
    std::uniform_int_distribution<int> pick(i, k - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  std::vector<DomainSample> out;
  for (int i = 0; i < k; ++i) {
    const auto& refs = pool.refs[static_cast<std::size_t>(i)];
    std::uniform_int_distribution<std::size_t> pick(0, refs.size() - 1);
    for (int c = 0; c < counts[static_cast<std::size_t>(i)]; ++c)
      out.push_back({refs[pick(rng)], pool.domains[static_cast<std::size_t>(i)]});
  }
  return out;
}

Tensor<Real> one_hot(std::span<const LabelMap* const> labels, int classes) {
  if (labels.empty()) throw std::invalid_argument("one_hot: no labels");
  const Vec3i s = labels.front()->shape();
  Tensor<Real> y({static_cast<int>(labels.size()), classes, s.z, s.y, s.x});
  const std::size_t vox = s.product();
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto& l = labels[n]->data();
    if (labels[n]->shape() != s) throw std::invalid_argument("one_hot: label shapes differ");
    for (std::size_t i = 0; i < vox; ++i) {
      if (l[i] >= classes) throw std::invalid_argument("one_hot: label out of range");
      y[(n * static_cast<std::size_t>(classes) + l[i]) * vox + i] = Real{1};
    }
  }
  return y;
}

StepBatch make_step_batch(const PatchPool& pool, std::span<const DomainSample> samples, double augment_probability,
                          int augment_axis, std::uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("make_step_batch: empty batch");
  const Vec3i p = pool.patch;
  const int n = static_cast<int>(samples.size());
  const int c = pool.channels();
  StepBatch b;
  b.real = Tensor<Real>({n, c, p.z, p.y, p.x});
  std::vector<augment::PositionedPatch> positioned;
  std::vector<LabelMap> labels;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const auto& lv = pool.volumes.at(static_cast<std::size_t>(s.ref.volume));
    auto patch = extract_patch(lv, s.ref.origin, p);
    copy_patch(patch.image, b.real, i);
    positioned.push_back({std::move(patch.image), s.ref.origin, lv.image.shape()});
    labels.push_back(std::move(patch.labels));
    b.input.z.push_back(s.z);
  }
  std::vector<const LabelMap*> lp;
  for (const auto& l : labels) lp.push_back(&l);
  b.input.y = one_hot(lp, kNumClasses);
  if (augment_probability > 0.0) {
    augment::AugmentOptions opt;
    opt.probability = augment_probability;
    opt.axis = augment_axis;
    auto aug = augment::augment_batch(positioned, opt, seed);
    b.input.x = Tensor<Real>(b.real.shape());
    for (int i = 0; i < n; ++i) copy_patch(aug.patches[static_cast<std::size_t>(i)], b.input.x, i);
    b.alphas = std::move(aug.alphas);
  } else {
    b.input.x = b.real;
    b.alphas.assign(static_cast<std::size_t>(n), 0.0);
  }
  return b;
}

// ---------------------------------------------------------------------------- history

namespace {
const char* kHistoryHeader =
    "epoch,tag,lr_gs,lr_d,seg_loss,adv_loss,d_real_loss,d_gen_loss,d_accuracy,val_seg_loss,val_dsc,val_d_loss,"
    "val_d_accuracy,d_updates,gs_updates";
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream os;
  os << kHistoryHeader << '\n';
  for (const auto& r : history) {
    os << r.epoch << ',' << r.tag << ',' << fmt(r.lr_gs) << ',' << fmt(r.lr_d) << ',' << fmt(r.seg_loss) << ','
       << fmt(r.adv_loss) << ',' << fmt(r.d_real_loss) << ',' << fmt(r.d_gen_loss) << ',' << fmt(r.d_accuracy) << ','
       << fmt(r.val_seg_loss) << ',' << fmt(r.val_dsc) << ',' << fmt(r.val_d_loss) << ',' << fmt(r.val_d_accuracy)
       << ',' << r.d_updates << ',' << r.gs_updates << '\n';
  }
  return os.str();
}

std::vector<EpochRecord> parse_history_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kHistoryHeader) throw std::invalid_argument("history CSV header mismatch");
  std::vector<EpochRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 15) throw std::invalid_argument("history CSV row has " + std::to_string(f.size()) + " fields");
    EpochRecord r;
    r.epoch = std::stoi(f[0]);
    r.tag = f[1];
    r.lr_gs = parse_double(f[2]);
    r.lr_d = parse_double(f[3]);
    r.seg_loss = parse_double(f[4]);
    r.adv_loss = parse_double(f[5]);
    r.d_real_loss = parse_double(f[6]);
    r.d_gen_loss = parse_double(f[7]);
    r.d_accuracy = parse_double(f[8]);
    r.val_seg_loss = parse_double(f[9]);
    r.val_dsc = parse_double(f[10]);
    r.val_d_loss = parse_double(f[11]);
    r.val_d_accuracy = parse_double(f[12]);
    r.d_updates = std::stoll(f[13]);
    r.gs_updates = std::stoll(f[14]);
    out.push_back(r);
  }
  return out;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},       {"tag", r.tag},
       {"lr_gs", r.lr_gs},       {"lr_d", r.lr_d},
       {"seg_loss", r.seg_loss}, {"adv_loss", r.adv_loss},
       {"d_real_loss", r.d_real_loss}, {"d_gen_loss", r.d_gen_loss},
       {"d_accuracy", r.d_accuracy},   {"val_seg_loss", r.val_seg_loss},
       {"val_dsc", r.val_dsc},         {"val_d_loss", r.val_d_loss},
       {"val_d_accuracy", r.val_d_accuracy}, {"d_updates", r.d_updates},
       {"gs_updates", r.gs_updates}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("tag").get_to(r.tag);
  j.at("lr_gs").get_to(r.lr_gs);
  j.at("lr_d").get_to(r.lr_d);
  j.at("seg_loss").get_to(r.seg_loss);
  j.at("adv_loss").get_to(r.adv_loss);
  j.at("d_real_loss").get_to(r.d_real_loss);
  j.at("d_gen_loss").get_to(r.d_gen_loss);
  j.at("d_accuracy").get_to(r.d_accuracy);
  j.at("val_seg_loss").get_to(r.val_seg_loss);
  j.at("val_dsc").get_to(r.val_dsc);
  j.at("val_d_loss").get_to(r.val_d_loss);
  j.at("val_d_accuracy").get_to(r.val_d_accuracy);
  j.at("d_updates").get_to(r.d_updates);
  j.at("gs_updates").get_to(r.gs_updates);
}

// ---------------------------------------------------------------------------- state

TrainState::TrainState(const ModelConfig& m, const TrainConfig& cfg)
    : model(m), config(cfg), nets((m.validate(), cfg.validate(), m.generator), m.segmenter, m.discriminator) {
  if (model.discriminator.input_size != cfg.patch)
    throw std::invalid_argument("discriminator input size must equal the patch size");
  if (cfg.patch % (1 << model.generator.depth) != 0 || cfg.patch % (1 << model.segmenter.depth) != 0)
    throw std::invalid_argument("patch size must be divisible by 2^depth");
  init_parameters(nets, derive_seed(cfg.seed, {kInit}));
  Adam<Real>::Options o;
  o.weight_decay = cfg.weight_decay;
  opt_g = Adam<Real>(nets.generator.parameters(), o);
  opt_s = Adam<Real>(nets.segmenter.parameters(), o);
  opt_d = Adam<Real>(nets.discriminator.parameters(), o);
  d_schedule = PlateauSchedule(cfg.lr_d, cfg.plateau_factor, cfg.patience);
  best_val = std::numeric_limits<double>::infinity();
}

double TrainState::lr_gs() const { return multistep_rate(config.lr_gs, epoch + 1, config.milestones, config.gamma); }

std::vector<nn::Parameter<Real>*> TrainState::all_parameters() {
  auto p = nets.generator.parameters();
  for (auto* q : nets.segmenter.parameters()) p.push_back(q);
  for (auto* q : nets.discriminator.parameters()) p.push_back(q);
  return p;
}

std::unique_ptr<TrainState> make_state(const ModelConfig& model, const TrainConfig& cfg) {
  return std::make_unique<TrainState>(model, cfg);
}

Checkpoint to_checkpoint(TrainState& s) {
  Checkpoint c;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history) hist.push_back(r);
  c.meta = {{"kind", "train-state"},
            {"generator", s.model.generator},
            {"segmenter", s.model.segmenter},
            {"discriminator", s.model.discriminator},
            {"train", s.config},
            {"epoch", s.epoch},
            {"history", hist},
            {"d_schedule", s.d_schedule.to_json()},
            {"best_val", std::isfinite(s.best_val) ? nlohmann::json(s.best_val) : nlohmann::json(nullptr)},
            {"best_epoch", s.best_epoch},
            {"d_updates", s.d_updates},
            {"gs_updates", s.gs_updates}};
  store_parameters(c, s.all_parameters());
  store_buffers(c, s.nets.generator.buffers());
  store_buffers(c, s.nets.segmenter.buffers());
  s.opt_g.store(c, "adam.G");
  s.opt_s.store(c, "adam.S");
  s.opt_d.store(c, "adam.D");
  return c;
}

std::unique_ptr<TrainState> from_checkpoint(const Checkpoint& c) {
  if (c.meta.value("kind", "") != "train-state") throw std::invalid_argument("checkpoint does not hold a training state");
  ModelConfig m;
  m.generator = c.meta.at("generator").get<UNet3DConfig>();
  m.segmenter = c.meta.at("segmenter").get<UNet3DConfig>();
  m.discriminator = c.meta.at("discriminator").get<DiscriminatorConfig>();
  auto s = make_state(m, c.meta.at("train").get<TrainConfig>());
  load_parameters(c, s->all_parameters());
  load_buffers(c, s->nets.generator.buffers());
  load_buffers(c, s->nets.segmenter.buffers());
  s->opt_g.load(c, "adam.G");
  s->opt_s.load(c, "adam.S");
  s->opt_d.load(c, "adam.D");
  s->epoch = c.meta.at("epoch").get<int>();
  for (const auto& r : c.meta.at("history")) s->history.push_back(r.get<EpochRecord>());
  s->d_schedule.from_json(c.meta.at("d_schedule"));
  const auto& bv = c.meta.at("best_val");
  s->best_val = bv.is_null() ? std::numeric_limits<double>::infinity() : bv.get<double>();
  s->best_epoch = c.meta.at("best_epoch").get<int>();
  s->d_updates = c.meta.at("d_updates").get<std::int64_t>();
  s->gs_updates = c.meta.at("gs_updates").get<std::int64_t>();
  return s;
}

// ---------------------------------------------------------------------------- steps

losses::DiscriminatorOutcome discriminator_step(TrainState& state, const StepBatch& batch, double lr,
                                                std::uint64_t dropout_seed) {
  if (batch.input.size() == 0) throw std::invalid_argument("discriminator_step: empty batch");
  state.opt_d.zero_grad();
  const RunOptions g_opt{Phase::Train, false, false, 0};
  const RunOptions d_opt{Phase::Train, false, true, dropout_seed};
  auto out = losses::discriminator_gradients(state.nets, batch.real, batch.input.z, g_opt, d_opt, &batch.input.x);
  if (!std::isfinite(out.real_loss) || !std::isfinite(out.gen_loss))
    throw NonFiniteError("discriminator loss is not finite (real " + fmt(out.real_loss) + ", generated " +
                         fmt(out.gen_loss) + ")");
  state.opt_d.step(lr);
  ++state.d_updates;
  return out;
}

losses::GeneratorOutcome generator_segmenter_step(TrainState& state, const StepBatch& batch, double lambda,
                                                  double lr, std::uint64_t dropout_seed) {
  auto& nets = state.nets;
  const Mode mode = state.config.mode;
  state.opt_g.zero_grad();
  state.opt_s.zero_grad();
  const RunOptions gs{Phase::Train, true, true, 0};
  losses::GeneratorOutcome out;
  if (mode == Mode::SegmenterOnly) {
    const Tensor<Real> probs = nets.segmenter.forward(batch.input.x, gs);
    const auto seg = losses::dice_loss(probs, batch.input.y, state.config.dice);
    nets.segmenter.backward(seg.grad, false);
    out.seg_loss = seg.value;
    out.objective = seg.value;
  } else {
    const RunOptions d_opt{Phase::Train, false, true, dropout_seed};
    out = losses::generator_segmenter_gradients(nets, batch.input, state.config.dice,
                                                mode == Mode::Preprocessor ? 0.0 : lambda, gs, d_opt);
  }
  if (!std::isfinite(out.objective)) throw NonFiniteError("generator/segmenter objective is not finite");
  if (const auto* bad = first_nonfinite(nets.segmenter.parameters()))
    throw NonFiniteError("non-finite gradient in parameter " + bad->name);
  if (mode != Mode::SegmenterOnly) {
    if (const auto* bad = first_nonfinite(nets.generator.parameters()))
      throw NonFiniteError("non-finite gradient in parameter " + bad->name);
    state.opt_g.step(lr);
  }
  state.opt_s.step(lr);
  ++state.gs_updates;
  return out;
}

ValidationResult validate(TrainState& state, const PatchPool& pool, int batch) {
  auto& nets = state.nets;
  const Mode mode = state.config.mode;
  const int k1 = nets.discriminator.config().classes();
  const RunOptions ev{Phase::Eval, false, false, 0};
  std::vector<DomainSample> all;
  for (std::size_t d = 0; d < pool.domains.size(); ++d)
    for (const auto& r : pool.refs[d]) all.push_back({r, pool.domains[d]});
  if (all.empty()) throw std::invalid_argument("validate: empty pool");
  ValidationResult out;
  std::array<double, kNumClasses> inter{}, pred{}, truth{};
  double d_loss = 0.0;
  int d_correct = 0;
  for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(all.size(), start + static_cast<std::size_t>(batch));
    const std::span<const DomainSample> chunk(all.data() + start, end - start);
    const StepBatch b = make_step_batch(pool, chunk, 0.0, 1, 0);
    const int n = b.input.size();
    Tensor<Real> gx;
    if (mode != Mode::SegmenterOnly) gx = nets.generator.forward(b.input.x, ev);
    const Tensor<Real> probs = nets.segmenter.forward(mode == Mode::SegmenterOnly ? b.input.x : gx, ev);
    out.seg_loss += losses::dice_loss(probs, b.input.y, state.config.dice).value * n;
    const std::size_t vox = probs.stride_from(2);
    for (int i = 0; i < n; ++i) {
      for (std::size_t v = 0; v < vox; ++v) {
        int best = 0, lab = 0;
        for (int c = 0; c < kNumClasses; ++c) {
          const std::size_t off = (static_cast<std::size_t>(i) * kNumClasses + static_cast<std::size_t>(c)) * vox + v;
          if (probs[off] > probs[(static_cast<std::size_t>(i) * kNumClasses + static_cast<std::size_t>(best)) * vox + v])
            best = c;
          if (b.input.y[off] > Real{0.5}) lab = c;
        }
        pred[static_cast<std::size_t>(best)] += 1;
        truth[static_cast<std::size_t>(lab)] += 1;
        if (best == lab) inter[static_cast<std::size_t>(lab)] += 1;
      }
    }
    if (mode == Mode::Adversarial) {
      const Tensor<Real> logits = nets.discriminator.forward_logits(concat(b.real, gx), ev);
      const auto p = argmax_rows(logits);
      for (int i = 0; i < 2 * n; ++i) {
        const int label = i < n ? b.input.z[static_cast<std::size_t>(i)] : k1;
        d_loss += nll_row(logits.data() + static_cast<std::size_t>(i) * k1, k1, label);
        d_correct += p[static_cast<std::size_t>(i)] == label ? 1 : 0;
      }
    }
  }
  const double total = static_cast<double>(all.size());
  out.seg_loss /= total;
  double dsc = 0.0;
  for (int c = 1; c < kNumClasses; ++c) {
    const double den = pred[static_cast<std::size_t>(c)] + truth[static_cast<std::size_t>(c)];
    dsc += den > 0 ? 2.0 * inter[static_cast<std::size_t>(c)] / den : 1.0;
  }
  out.dsc = dsc / (kNumClasses - 1);
  // Mean real-class NLL plus mean generated-class NLL, as in the training objective.
  out.d_loss = d_loss / total;
  out.d_accuracy = d_correct / (2.0 * total);
  return out;
}

// ---------------------------------------------------------------------------- loop

void train(TrainState& state, const synth::DomainSuite& suite, const std::optional<std::filesystem::path>& run_dir,
           const TrainCallbacks& callbacks) {
  const TrainConfig& cfg = state.config;
  int suite_domains = 0;
  for (const auto& s : suite.subjects) {
    suite_domains = std::max(suite_domains, s.domain);
    if (s.volume.image.channels() != state.model.segmenter.in_channels)
      throw std::invalid_argument("suite channel count does not match the model");
  }
  std::vector<int> domains = cfg.domains;
  if (domains.empty())
    for (int d = 1; d <= suite_domains; ++d) domains.push_back(d);
  for (int d : domains)
    if (d > suite_domains) throw std::invalid_argument("training domain " + std::to_string(d) + " not in the suite");
  if (cfg.mode == Mode::Adversarial && state.model.discriminator.domains < *std::max_element(domains.begin(), domains.end()))
    throw std::invalid_argument("discriminator has fewer domain classes than the training domains");

  const auto train_subjects = suite.select(synth::Split::Train);
  const auto val_subjects = suite.select(synth::Split::Val);
  const PatchPool train_pool =
      make_pool(train_subjects, domains, cfg.train_patches, cfg.patch, cfg.input, derive_seed(cfg.seed, {kPoolTrain}));
  const PatchPool val_pool =
      make_pool(val_subjects, domains, cfg.val_patches, cfg.patch, cfg.input, derive_seed(cfg.seed, {kPoolVal}));
  const int n_iter = cfg.iterations(static_cast<int>(domains.size()));
  if (run_dir) std::filesystem::create_directories(*run_dir);

  for (int epoch = state.epoch + 1; epoch <= cfg.n_epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.tag = cfg.run_tag();
    rec.lr_gs = multistep_rate(cfg.lr_gs, epoch, cfg.milestones, cfg.gamma);
    rec.lr_d = state.d_schedule.rate();
    int d_samples = 0, d_correct = 0, d_count = 0;
    for (int it = 0; it < n_iter; ++it) {
      const auto i = static_cast<std::uint64_t>(it);
      if (cfg.mode == Mode::Adversarial) {
        for (int s = 0; s < cfg.n_steps; ++s) {
          const auto st = static_cast<std::uint64_t>(s);
          const auto samples = sample_batch(train_pool, cfg.m, derive_seed(cfg.seed, {kBatchD, e, i, st}));
          const auto b = make_step_batch(train_pool, samples, cfg.augment_probability, cfg.augment_axis,
                                         derive_seed(cfg.seed, {kAugD, e, i, st}));
          const auto o = discriminator_step(state, b, rec.lr_d, derive_seed(cfg.seed, {kDropD, e, i, st}));
          rec.d_real_loss += o.real_loss;
          rec.d_gen_loss += o.gen_loss;
          d_correct += o.real_correct + o.gen_correct;
          d_samples += 2 * o.samples;
          ++d_count;
        }
      }
      const auto samples = sample_batch(train_pool, cfg.m, derive_seed(cfg.seed, {kBatchGS, e, i}));
      const auto b = make_step_batch(train_pool, samples, cfg.augment_probability, cfg.augment_axis,
                                     derive_seed(cfg.seed, {kAugGS, e, i}));
      const auto o = generator_segmenter_step(state, b, cfg.lambda, rec.lr_gs, derive_seed(cfg.seed, {kDropGS, e, i}));
      rec.seg_loss += o.seg_loss / n_iter;
      rec.adv_loss += o.gen_loss / n_iter;
      if (callbacks.on_iteration) callbacks.on_iteration(epoch, it);
    }
    if (d_count > 0) {
      rec.d_real_loss /= d_count;
      rec.d_gen_loss /= d_count;
      rec.d_accuracy = static_cast<double>(d_correct) / d_samples;
    }
    const auto val = validate(state, val_pool);
    rec.val_seg_loss = val.seg_loss;
    rec.val_dsc = val.dsc;
    rec.val_d_loss = val.d_loss;
    rec.val_d_accuracy = val.d_accuracy;
    rec.d_updates = state.d_updates;
    rec.gs_updates = state.gs_updates;

    state.epoch = epoch;
    state.history.push_back(rec);
    if (cfg.mode == Mode::Adversarial) state.d_schedule.observe(val.d_loss);
    const bool improved = val.seg_loss < state.best_val;
    if (improved) {
      state.best_val = val.seg_loss;
      state.best_epoch = epoch;
    }
    if (run_dir) {
      const auto ckpt = to_checkpoint(state);
      write_checkpoint(*run_dir / "last.ckpt", ckpt);
      if (improved) write_checkpoint(*run_dir / "best.ckpt", ckpt);
      write_text_atomic(*run_dir / "history.csv", history_csv(state.history));
    }
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
}

// ---------------------------------------------------------------------------- evaluation

Segmentation segment_volume(Networks<Real>& nets, const Volume& input, Mode mode, int patch, int stride, int batch) {
  const Vec3i p = Vec3i::cube(patch);
  const auto grid = patch_grid(input.shape(), p, Vec3i::cube(stride));
  const int c = input.channels();
  const RunOptions ev{Phase::Eval, false, false, 0};
  const bool use_g = mode != Mode::SegmenterOnly;
  std::optional<OverlapAverager> norm;
  if (use_g) norm.emplace(input.shape(), c);
  std::vector<PatchProbabilities> probs;
  probs.reserve(grid.origins.size());
  for (std::size_t start = 0; start < grid.origins.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(grid.origins.size(), start + static_cast<std::size_t>(batch));
    const int n = static_cast<int>(end - start);
    Tensor<Real> x({n, c, p.z, p.y, p.x});
    for (int i = 0; i < n; ++i) copy_patch(extract_patch(input, grid.origins[start + static_cast<std::size_t>(i)], p), x, i);
    Tensor<Real> gx;
    if (use_g) {
      gx = nets.generator.forward(x, ev);
      for (int i = 0; i < n; ++i) norm->add(grid.origins[start + static_cast<std::size_t>(i)], tensor_sample(gx, i, p));
    }
    const Tensor<Real> s = nets.segmenter.forward(use_g ? gx : x, ev);
    for (int i = 0; i < n; ++i) probs.push_back({grid.origins[start + static_cast<std::size_t>(i)], tensor_sample(s, i, p)});
  }
  Segmentation out;
  out.probs = reconstruct(probs, input.shape());
  out.probs.probs.set_spacing(input.spacing());
  out.normalized = use_g ? norm->finalize(input.spacing()) : input;
  return out;
}

namespace {

std::vector<double> y_profile(const Volume& v, const std::vector<std::uint8_t>& fg) {
  const Vec3i s = v.shape();
  std::vector<double> sum(static_cast<std::size_t>(s.y)), cnt(static_cast<std::size_t>(s.y));
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        const std::size_t i = linear_index(s, x, y, z);
        if (!fg[i]) continue;
        sum[static_cast<std::size_t>(y)] += v.at(0, x, y, z);
        cnt[static_cast<std::size_t>(y)] += 1;
      }
  for (std::size_t y = 0; y < sum.size(); ++y) sum[y] = cnt[y] > 0 ? sum[y] / cnt[y] : 0.0;
  return sum;
}

std::pair<double, double> robust_range(std::vector<float> values) {
  if (values.empty()) return {0.0, 1.0};
  const auto q = [&](double f) {
    const auto k = static_cast<std::size_t>(f * static_cast<double>(values.size() - 1));
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
    return static_cast<double>(values[k]);
  };
  const double lo = q(0.001), hi = q(0.999);
  return hi > lo ? std::pair{lo, hi} : std::pair{lo, lo + 1.0};
}

}  // namespace

EvalResult evaluate(Networks<Real>& nets, const TrainConfig& cfg, std::span<const synth::Subject* const> subjects,
                    const EvalOptions& opt) {
  if (subjects.empty()) throw std::invalid_argument("evaluate: no subjects");
  if (opt.stride < 1 || opt.batch < 1) throw std::invalid_argument("evaluate: stride and batch must be >= 1");
  std::set<int> present;
  for (const auto* s : subjects) {
    if (s->volume.labels.voxel_count() == 0 || s->volume.labels.shape() != s->volume.image.shape())
      throw std::invalid_argument("evaluate: subject " + std::to_string(s->index) + " of domain " +
                                  std::to_string(s->domain) + " has no ground truth");
    present.insert(s->domain);
  }
  const int k = nets.discriminator.config().domains;
  const bool use_d = cfg.mode == Mode::Adversarial && opt.discriminator_patches > 0;
  const RunOptions ev{Phase::Eval, false, false, 0};

  struct Acc {
    std::array<double, kNumClasses> dsc{}, mhd{};
    double raw_p = 0, norm_p = 0;
    int volumes = 0;
    std::vector<float> raw_vals, norm_vals;
    std::vector<double> raw_prof, norm_prof;
  };
  std::map<int, Acc> acc;
  std::vector<int> d_pred, d_truth;
  Acc overall;

  for (const auto* s : subjects) {
    Volume raw = s->volume.image;
    if (opt.bias_alpha > 0.0) raw = augment::apply_bias(raw, {opt.bias_alpha, opt.bias_axis, 0.0, 0});
    const Volume input = transform_input(raw, cfg.input);
    const auto seg = segment_volume(nets, input, cfg.mode, cfg.patch, opt.stride, opt.batch);
    const LabelMap pred = seg.probs.argmax();
    const LabelMap& truth = s->volume.labels;
    const Spacing sp = s->volume.image.spacing();
    const Vec3i sh = truth.shape();
    const double diagonal = std::sqrt(std::pow(sh.x * sp.x, 2) + std::pow(sh.y * sp.y, 2) + std::pow(sh.z * sp.z, 2));
    auto& a = acc[s->domain];
    for (int c = 0; c < kNumClasses; ++c) {
      const double d = metrics::dsc(pred, truth, c);
      const auto pm = pred.mask(c), tm = truth.mask(c);
      const bool empty = std::none_of(pm.begin(), pm.end(), [](auto v) { return v != 0; }) ||
                         std::none_of(tm.begin(), tm.end(), [](auto v) { return v != 0; });
      const double h = empty ? diagonal : metrics::mhd(pm, tm, sh, sp);
      a.dsc[static_cast<std::size_t>(c)] += d;
      a.mhd[static_cast<std::size_t>(c)] += h;
      overall.dsc[static_cast<std::size_t>(c)] += d;
      overall.mhd[static_cast<std::size_t>(c)] += h;
    }
    const auto fg = truth.foreground();
    const double rp = metrics::pearson_vs_y(raw, fg), np = metrics::pearson_vs_y(seg.normalized, fg);
    a.raw_p += rp;
    a.norm_p += np;
    overall.raw_p += rp;
    overall.norm_p += np;
    ++a.volumes;
    ++overall.volumes;
    const std::span<const float> rc = std::as_const(raw).channel(0), nc = seg.normalized.channel(0);
    for (std::size_t i = 0; i < fg.size(); ++i) {
      if (!fg[i]) continue;
      a.raw_vals.push_back(rc[i]);
      a.norm_vals.push_back(nc[i]);
    }
    const auto rprof = y_profile(raw, fg), nprof = y_profile(seg.normalized, fg);
    if (a.raw_prof.empty()) {
      a.raw_prof.assign(rprof.size(), 0.0);
      a.norm_prof.assign(nprof.size(), 0.0);
    }
    if (a.raw_prof.size() == rprof.size()) {
      for (std::size_t y = 0; y < rprof.size(); ++y) {
        a.raw_prof[y] += rprof[y];
        a.norm_prof[y] += nprof[y];
      }
    }

    if (use_d) {
      const LabeledVolume lv{input, truth};
      const auto patches = sample_foreground_patches(
          lv, opt.discriminator_patches, Vec3i::cube(cfg.patch),
          derive_seed(opt.seed, {static_cast<std::uint64_t>(s->domain), static_cast<std::uint64_t>(s->index)}));
      const int n = static_cast<int>(patches.size());
      Tensor<Real> x({n, input.channels(), cfg.patch, cfg.patch, cfg.patch});
      for (int i = 0; i < n; ++i) copy_patch(patches[static_cast<std::size_t>(i)].image, x, i);
      const Tensor<Real> gx = nets.generator.forward(x, ev);
      const auto p = argmax_rows(nets.discriminator.forward_logits(concat(x, gx), ev));
      for (int i = 0; i < 2 * n; ++i) {
        d_pred.push_back(p[static_cast<std::size_t>(i)]);
        d_truth.push_back(i < n ? s->domain : k + 1);
      }
    }
  }

  EvalResult out;
  std::vector<float> raw_all, norm_all;
  for (auto& [d, a] : acc) {
    raw_all.insert(raw_all.end(), a.raw_vals.begin(), a.raw_vals.end());
    norm_all.insert(norm_all.end(), a.norm_vals.begin(), a.norm_vals.end());
  }
  const auto [rlo, rhi] = robust_range(raw_all);
  const auto [nlo, nhi] = robust_range(norm_all);
  raw_all.clear();
  norm_all.clear();

  std::vector<std::vector<double>> confusion;
  double accuracy = 0.0;
  if (!d_pred.empty()) {
    confusion = metrics::confusion_matrix(d_pred, d_truth, k);
    for (std::size_t i = 0; i < d_pred.size(); ++i) accuracy += d_pred[i] == d_truth[i] ? 1.0 : 0.0;
    accuracy /= static_cast<double>(d_pred.size());
  }
  auto fill = [&](metrics::MetricReport& r, const Acc& a, int test_domain) {
    r.name = opt.name;
    r.train_domain = opt.train_domain;
    r.test_domain = test_domain;
    for (int c = 0; c < kNumClasses; ++c) {
      r.dsc[static_cast<std::size_t>(c)] = a.dsc[static_cast<std::size_t>(c)] / a.volumes;
      r.mhd[static_cast<std::size_t>(c)] = a.mhd[static_cast<std::size_t>(c)] / a.volumes;
    }
    r.finalize_means();
    r.pearson = a.norm_p / a.volumes;
    r.discriminator_accuracy = accuracy;
    r.confusion = confusion;
  };

  std::vector<metrics::Histogram> rh, nh;
  for (auto& [d, a] : acc) {
    DomainEval de;
    de.domain = d;
    fill(de.report, a, d);
    de.raw_pearson = a.raw_p / a.volumes;
    de.normalized_pearson = a.norm_p / a.volumes;
    de.raw_hist = metrics::Histogram(opt.histogram_bins, rlo, rhi);
    de.normalized_hist = metrics::Histogram(opt.histogram_bins, nlo, nhi);
    for (float v : a.raw_vals) de.raw_hist.add_value(v);
    for (float v : a.norm_vals) de.normalized_hist.add_value(v);
    de.raw_profile = a.raw_prof;
    de.normalized_profile = a.norm_prof;
    for (auto& v : de.raw_profile) v /= a.volumes;
    for (auto& v : de.normalized_profile) v /= a.volumes;
    rh.push_back(de.raw_hist);
    nh.push_back(de.normalized_hist);
    out.domains.push_back(std::move(de));
  }
  if (rh.size() >= 2) {
    out.raw_jsd = metrics::histogram_jsd(rh);
    out.normalized_jsd = metrics::histogram_jsd(nh);
  }
  fill(out.overall, overall, 0);
  out.raw_pearson = overall.raw_p / overall.volumes;
  out.normalized_pearson = overall.norm_p / overall.volumes;
  out.overall.jsd = out.normalized_jsd;
  for (auto& de : out.domains) de.report.jsd = out.normalized_jsd;
  return out;
}

}  // namespace advnorm::train
