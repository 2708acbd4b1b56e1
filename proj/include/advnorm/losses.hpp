#pragma once

#include <span>
#include <vector>

#include "advnorm/nets.hpp"
#include "advnorm/nn/tensor.hpp"

namespace advnorm::losses {

/// Weighted soft Dice. Weights are indexed by class (BG, WM, GM, CSF by default).
struct DiceConfig {
  double epsilon = 1e-5;
  std::vector<double> weights{0.22, 0.28, 0.20, 0.30};

  void validate() const;
};

struct AdversarialConfig {
  double lambda = 1.5;
  int domains = 2;  // K

  void validate() const;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Dice loss of one sample: s and y are [C, ...] with C = weights.size().
/// 1 - (eps + 2 Σ_c ω_c Σ_v s·y) / (eps + Σ_c ω_c Σ_v (s + y)).
double dice_loss(std::span<const double> s, std::span<const double> y, const DiceConfig& cfg);

template <typename T>
struct LossAndGrad {
  double value = 0.0;
  nn::Tensor<T> grad;  // d value / d input, same shape as the input
};

/// Mean per-sample Dice loss over a batch [N, C, ...] and its gradient w.r.t. s.
template <typename T>
LossAndGrad<T> dice_loss(const nn::Tensor<T>& s, const nn::Tensor<T>& y, const DiceConfig& cfg);

struct NllValue {
  double value = 0.0;
  bool clamped = false;  // d_z fell below kProbabilityFloor
};

/// -log d_z for a K+1 probability vector, z in 1..K+1.
NllValue discriminator_nll(std::span<const double> d, int z);
/// The generated-class loss written through the domain classes: -log(1 - Σ_{z<=K} d_z).
NllValue generated_nll_from_domains(std::span<const double> d);
/// d(-log d_z)/d d, respecting the floor.
std::vector<double> discriminator_nll_grad(std::span<const double> d, int z);

/// Mean NLL of softmax(logits) over a batch [N, K+1] with 1-based labels, and
/// its gradient w.r.t. the logits. `scale` multiplies both (use it to turn a
/// sum over a concatenated [real; generated] batch into per-term means).
template <typename T>
LossAndGrad<T> nll_from_logits(const nn::Tensor<T>& logits, std::span<const int> labels, double scale = -1.0);

/// Value L_seg - λ·L_dis(D(G(x)), K+1) that G descends.
double generator_objective(double seg_loss, double generated_nll, double lambda);
/// Update direction for G: g_seg - λ·g_dis.
template <typename T>
nn::Tensor<T> generator_direction(const nn::Tensor<T>& grad_seg, const nn::Tensor<T>& grad_dis, double lambda);

/// x [N, C, ...], y one-hot [N, 4, ...], z in 1..K per sample.
template <typename T>
struct Batch {
  nn::Tensor<T> x;
  nn::Tensor<T> y;
  std::vector<int> z;

  int size() const { return x.empty() ? 0 : x.dim(0); }
};

/// The three expectations of the adversarial objective, kept apart.
struct ObjectiveTerms {
  double seg = 0.0;       // E[L_seg(S(G(x)), y)]
  double dis_real = 0.0;  // E[L_dis(D(x), z)]
  double dis_gen = 0.0;   // E[L_dis(D(G(x)), K+1)]
  bool clamped = false;
};

/// Forward-only evaluation; runs every network with `opt`.
template <typename T>
ObjectiveTerms total_objective(const Batch<T>& batch, Networks<T>& nets, const DiceConfig& dice,
                               const nn::RunOptions& opt = {});

struct DiscriminatorOutcome {
  double real_loss = 0.0;
  double gen_loss = 0.0;
  int real_correct = 0;
  int gen_correct = 0;
  int samples = 0;  // per half
};

/// Accumulates into D's gradients the mean over i of
/// ∇L_dis(D(x_i), z_i) + ∇L_dis(D(G(x_i)), K+1). G is run forward only, on
/// `g_input` when given (an augmented copy of x) and on x otherwise.
template <typename T>
DiscriminatorOutcome discriminator_gradients(Networks<T>& nets, const nn::Tensor<T>& x, std::span<const int> z,
                                             const nn::RunOptions& g_opt, const nn::RunOptions& d_opt,
                                             const nn::Tensor<T>* g_input = nullptr);

struct GeneratorOutcome {
  double seg_loss = 0.0;
  double gen_loss = 0.0;  // L_dis(D(G(x)), K+1)
  double objective = 0.0;
};

/// Accumulates ∇_S L_seg into S and ∇_G L_seg - λ∇_G L_dis(D(G(x)), K+1) into G.
/// D's parameter gradients are left untouched.
template <typename T>
GeneratorOutcome generator_segmenter_gradients(Networks<T>& nets, const Batch<T>& batch, const DiceConfig& dice,
                                               double lambda, const nn::RunOptions& gs_opt,
                                               const nn::RunOptions& d_opt);

}  // namespace advnorm::losses
