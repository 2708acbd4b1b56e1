#include "advnorm/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace advnorm::losses {

using nn::Tensor;

void DiceConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("dice epsilon must be > 0");
  if (weights.empty()) throw std::invalid_argument("dice needs at least one class weight");
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("dice class weights must be > 0");
  }
}

void AdversarialConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (domains < 2) throw std::invalid_argument("adversarial training needs K >= 2 domains");
}

namespace {

struct DiceSums {
  double num = 0.0;  // eps + 2 Σ ω s y
  double den = 0.0;  // eps + Σ ω (s + y)
};

template <typename S>
DiceSums dice_sums(const S* s, const S* y, std::size_t classes, std::size_t voxels, const DiceConfig& cfg) {
  DiceSums r{cfg.epsilon, cfg.epsilon};
  for (std::size_t c = 0; c < classes; ++c) {
    double inter = 0.0, total = 0.0;
    const S* sc = s + c * voxels;
    const S* yc = y + c * voxels;
    for (std::size_t v = 0; v < voxels; ++v) {
      inter += static_cast<double>(sc[v]) * static_cast<double>(yc[v]);
      total += static_cast<double>(sc[v]) + static_cast<double>(yc[v]);
    }
    r.num += 2.0 * cfg.weights[c] * inter;
    r.den += cfg.weights[c] * total;
  }
  return r;
}

}  // namespace

double dice_loss(std::span<const double> s, std::span<const double> y, const DiceConfig& cfg) {
  cfg.validate();
  if (s.size() != y.size()) throw std::invalid_argument("dice_loss: prediction and target sizes differ");
  const std::size_t classes = cfg.weights.size();
  if (s.size() % classes != 0) throw std::invalid_argument("dice_loss: size is not a multiple of the class count");
  const auto d = dice_sums(s.data(), y.data(), classes, s.size() / classes, cfg);
  return 1.0 - d.num / d.den;
}

template <typename T>
LossAndGrad<T> dice_loss(const Tensor<T>& s, const Tensor<T>& y, const DiceConfig& cfg) {
  cfg.validate();
  if (s.shape() != y.shape()) {
    throw std::invalid_argument("dice_loss: shape " + nn::shape_string(s.shape()) + " vs " +
                                nn::shape_string(y.shape()));
  }
  if (s.rank() < 2 || s.dim(1) != static_cast<int>(cfg.weights.size())) {
    throw std::invalid_argument("dice_loss: channel count must equal the number of class weights");
  }
  const int n = s.dim(0);
  const std::size_t classes = cfg.weights.size();
  const std::size_t voxels = s.stride_from(2);
  const std::size_t per = s.stride_from(1);
  LossAndGrad<T> out{0.0, Tensor<T>(s.shape())};
  for (int i = 0; i < n; ++i) {
    const T* si = s.data() + i * per;
    const T* yi = y.data() + i * per;
    const auto d = dice_sums(si, yi, classes, voxels, cfg);
    out.value += 1.0 - d.num / d.den;
    // dL/ds = -ω_c (2 y B - A) / B², averaged over the batch
    const double inv = 1.0 / (d.den * d.den * n);
    T* g = out.grad.data() + i * per;
    for (std::size_t c = 0; c < classes; ++c) {
      const double w = cfg.weights[c];
      for (std::size_t v = 0; v < voxels; ++v) {
        const std::size_t k = c * voxels + v;
        g[k] = static_cast<T>(-w * (2.0 * static_cast<double>(yi[k]) * d.den - d.num) * inv);
      }
    }
  }
  out.value /= n;
  return out;
}

NllValue discriminator_nll(std::span<const double> d, int z) {
  if (z < 1 || z > static_cast<int>(d.size())) {
    throw std::invalid_argument("discriminator_nll: class " + std::to_string(z) + " outside 1.." +
                                std::to_string(d.size()));
  }
  const double p = d[static_cast<std::size_t>(z - 1)];
  if (p < kProbabilityFloor) return {-std::log(kProbabilityFloor), true};
  return {-std::log(p), false};
}

NllValue generated_nll_from_domains(std::span<const double> d) {
  if (d.size() < 2) throw std::invalid_argument("generated_nll_from_domains: need K+1 >= 2 probabilities");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < d.size(); ++i) s += d[i];
  const double p = 1.0 - s;
  if (p < kProbabilityFloor) return {-std::log(kProbabilityFloor), true};
  return {-std::log1p(-s), false};
}

std::vector<double> discriminator_nll_grad(std::span<const double> d, int z) {
  std::vector<double> g(d.size(), 0.0);
  const auto v = discriminator_nll(d, z);
  if (!v.clamped) g[static_cast<std::size_t>(z - 1)] = -1.0 / d[static_cast<std::size_t>(z - 1)];
  return g;
}

template <typename T>
LossAndGrad<T> nll_from_logits(const Tensor<T>& logits, std::span<const int> labels, double scale) {
  if (logits.rank() != 2) throw std::invalid_argument("nll_from_logits expects [N, K+1] logits");
  const int n = logits.dim(0), k1 = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("nll_from_logits: one label per row");
  if (n == 0) throw std::invalid_argument("nll_from_logits: empty batch");
  if (scale < 0.0) scale = 1.0 / n;
  LossAndGrad<T> out{0.0, Tensor<T>(logits.shape())};
  for (int i = 0; i < n; ++i) {
    const int z = labels[static_cast<std::size_t>(i)];
    if (z < 1 || z > k1) throw std::invalid_argument("nll_from_logits: label " + std::to_string(z) + " out of range");
    const T* l = logits.data() + static_cast<std::size_t>(i) * k1;
    double mx = l[0];
    for (int c = 1; c < k1; ++c) mx = std::max(mx, static_cast<double>(l[c]));
    double sum = 0.0;
    for (int c = 0; c < k1; ++c) sum += std::exp(static_cast<double>(l[c]) - mx);
    const double lse = mx + std::log(sum);
    // -log softmax_z, floored like the probability form
    out.value += scale * std::min(lse - static_cast<double>(l[z - 1]), -std::log(kProbabilityFloor));
    T* g = out.grad.data() + static_cast<std::size_t>(i) * k1;
    for (int c = 0; c < k1; ++c) {
      const double p = std::exp(static_cast<double>(l[c]) - lse);
      g[c] = static_cast<T>(scale * (p - (c == z - 1 ? 1.0 : 0.0)));
    }
  }
  return out;
}

double generator_objective(double seg_loss, double generated_nll, double lambda) {
  return seg_loss - lambda * generated_nll;
}

template <typename T>
Tensor<T> generator_direction(const Tensor<T>& grad_seg, const Tensor<T>& grad_dis, double lambda) {
  if (grad_seg.shape() != grad_dis.shape()) throw std::invalid_argument("generator_direction: shape mismatch");
  Tensor<T> out(grad_seg.shape());
  const T l = static_cast<T>(lambda);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = grad_seg[i] - l * grad_dis[i];
  return out;
}

namespace {

template <typename T>
void check_batch(const Batch<T>& b, int domains) {
  if (b.size() == 0) throw std::invalid_argument("empty batch");
  if (static_cast<int>(b.z.size()) != b.size()) throw std::invalid_argument("batch needs one domain label per sample");
  for (int z : b.z) {
    if (z < 1 || z > domains) throw std::invalid_argument("domain label " + std::to_string(z) + " outside 1..K");
  }
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  std::vector<int> shape = a.shape();
  shape[0] += b.dim(0);
  Tensor<T> out(shape);
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

template <typename T>
int correct_count(const Tensor<T>& logits, std::span<const int> labels, int first, int count) {
  const int k1 = logits.dim(1);
  int ok = 0;
  for (int i = first; i < first + count; ++i) {
    const T* l = logits.data() + static_cast<std::size_t>(i) * k1;
    const int arg = static_cast<int>(std::max_element(l, l + k1) - l);
    ok += (arg + 1 == labels[static_cast<std::size_t>(i)]);
  }
  return ok;
}

}  // namespace

template <typename T>
ObjectiveTerms total_objective(const Batch<T>& batch, Networks<T>& nets, const DiceConfig& dice,
                               const nn::RunOptions& opt) {
  const int k = nets.discriminator.config().domains;
  check_batch(batch, k);
  nn::RunOptions o = opt;
  o.cache = false;
  const Tensor<T> gx = nets.generator.forward(batch.x, o);
  const Tensor<T> probs = nets.segmenter.forward(gx, o);
  ObjectiveTerms t;
  t.seg = dice_loss(probs, batch.y, dice).value;
  const Tensor<T> dr = nets.discriminator.forward(batch.x, o);
  const Tensor<T> dg = nets.discriminator.forward(gx, o);
  const int n = batch.size();
  std::vector<double> row(static_cast<std::size_t>(k + 1));
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c <= k; ++c) row[static_cast<std::size_t>(c)] = dr[static_cast<std::size_t>(i * (k + 1) + c)];
    const auto real = discriminator_nll(row, batch.z[static_cast<std::size_t>(i)]);
    for (int c = 0; c <= k; ++c) row[static_cast<std::size_t>(c)] = dg[static_cast<std::size_t>(i * (k + 1) + c)];
    const auto gen = discriminator_nll(row, k + 1);
    t.dis_real += real.value / n;
    t.dis_gen += gen.value / n;
    t.clamped = t.clamped || real.clamped || gen.clamped;
  }
  return t;
}

template <typename T>
DiscriminatorOutcome discriminator_gradients(Networks<T>& nets, const Tensor<T>& x, std::span<const int> z,
                                             const nn::RunOptions& g_opt, const nn::RunOptions& d_opt,
                                             const Tensor<T>* g_input) {
  const int m = x.dim(0);
  const int k = nets.discriminator.config().domains;
  if (m == 0 || static_cast<int>(z.size()) != m) throw std::invalid_argument("discriminator batch is empty or unlabeled");
  nn::RunOptions go = g_opt;
  go.cache = false;
  if (g_input && g_input->shape() != x.shape()) throw std::invalid_argument("generator input does not match the real batch");
  const Tensor<T> gx = nets.generator.forward(g_input ? *g_input : x, go);
  nn::RunOptions dopt = d_opt;
  dopt.cache = true;
  const Tensor<T> logits = nets.discriminator.forward_logits(concat_batch(x, gx), dopt);
  std::vector<int> labels(z.begin(), z.end());
  labels.resize(static_cast<std::size_t>(2 * m), k + 1);
  // Sum over the 2m rows divided by m: mean real term plus mean generated term.
  const auto real = nll_from_logits(logits, labels, 1.0 / m);
  nets.discriminator.backward(real.grad, false);

  DiscriminatorOutcome out;
  out.samples = m;
  const int k1 = k + 1;
  for (int i = 0; i < 2 * m; ++i) {
    const T* l = logits.data() + static_cast<std::size_t>(i) * k1;
    double mx = l[0];
    for (int c = 1; c < k1; ++c) mx = std::max(mx, static_cast<double>(l[c]));
    double s = 0.0;
    for (int c = 0; c < k1; ++c) s += std::exp(static_cast<double>(l[c]) - mx);
    const double nll = std::min(mx + std::log(s) - static_cast<double>(l[labels[static_cast<std::size_t>(i)] - 1]),
                                -std::log(kProbabilityFloor));
    (i < m ? out.real_loss : out.gen_loss) += nll / m;
  }
  out.real_correct = correct_count(logits, labels, 0, m);
  out.gen_correct = correct_count(logits, labels, m, m);
  return out;
}

template <typename T>
GeneratorOutcome generator_segmenter_gradients(Networks<T>& nets, const Batch<T>& batch, const DiceConfig& dice,
                                               double lambda, const nn::RunOptions& gs_opt,
                                               const nn::RunOptions& d_opt) {
  const int k = nets.discriminator.config().domains;
  check_batch(batch, k);
  const int m = batch.size();
  nn::RunOptions o = gs_opt;
  o.cache = true;
  const Tensor<T> gx = nets.generator.forward(batch.x, o);
  const Tensor<T> probs = nets.segmenter.forward(gx, o);
  const auto seg = dice_loss(probs, batch.y, dice);
  const Tensor<T> grad_seg = nets.segmenter.backward(seg.grad, true);

  GeneratorOutcome out;
  out.seg_loss = seg.value;
  Tensor<T> grad_dis(gx.shape());
  if (lambda != 0.0) {
    // D only routes the gradient back to G; its own accumulators are restored.
    auto dparams = nets.discriminator.parameters();
    std::vector<nn::AlignedVector<T>> saved;
    saved.reserve(dparams.size());
    for (auto* p : dparams) saved.push_back(p->grad.storage());
    nn::RunOptions dopt = d_opt;
    dopt.cache = true;
    const Tensor<T> logits = nets.discriminator.forward_logits(gx, dopt);
    const std::vector<int> labels(static_cast<std::size_t>(m), k + 1);
    const auto gen = nll_from_logits(logits, labels);
    out.gen_loss = gen.value;
    grad_dis = nets.discriminator.backward(gen.grad, true);
    for (std::size_t i = 0; i < dparams.size(); ++i) dparams[i]->grad.storage() = std::move(saved[i]);
  }
  out.objective = generator_objective(out.seg_loss, out.gen_loss, lambda);
  nets.generator.backward(generator_direction(grad_seg, grad_dis, lambda), false);
  return out;
}

#define ADVNORM_INSTANTIATE(T)                                                                                  \
  template LossAndGrad<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, const DiceConfig&);                 \
  template LossAndGrad<T> nll_from_logits<T>(const Tensor<T>&, std::span<const int>, double);                  \
  template Tensor<T> generator_direction<T>(const Tensor<T>&, const Tensor<T>&, double);                       \
  template ObjectiveTerms total_objective<T>(const Batch<T>&, Networks<T>&, const DiceConfig&,                  \
                                             const nn::RunOptions&);                                           \
  template DiscriminatorOutcome discriminator_gradients<T>(Networks<T>&, const Tensor<T>&, std::span<const int>, \
                                                           const nn::RunOptions&, const nn::RunOptions&,      \
                                                           const Tensor<T>*);      \
  template GeneratorOutcome generator_segmenter_gradients<T>(Networks<T>&, const Batch<T>&, const DiceConfig&,  \
                                                             double, const nn::RunOptions&, const nn::RunOptions&);

ADVNORM_INSTANTIATE(float)
ADVNORM_INSTANTIATE(double)

}  // namespace advnorm::losses
