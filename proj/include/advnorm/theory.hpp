#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace advnorm::theory {

/// Row-major K×n (or (K+1)×n) table; rows are domains, columns atoms.
using Table = std::vector<std::vector<double>>;

class SingularityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct TabularProblem {
  int n = 4;
  int K = 2;
  Table p_r;                  // p_r(x|z), K rows of length n
  std::vector<double> prior;  // p(z); empty means uniform

  void validate() const;
  double p(int z) const;  // 0-based z
  bool uniform_prior() const;

  /// Rows drawn from a flat Dirichlet, strictly positive.
  static TabularProblem random(int K, int n, std::uint64_t seed);
};

/// Softmax-parameterised p_g (K×n logits) and D ((K+1)×n logits, softmax over rows per atom).
struct TabularState {
  Table g_logits;
  Table d_logits;

  Table p_g() const;
  Table d() const;
  static TabularState random(int K, int n, std::uint64_t seed);
  /// Logits whose softmax reproduces the given rows exactly up to rounding.
  static TabularState from_distributions(const Table& p_g, const Table& d);
};

/// (1/K) Σ_z p_r(·|z).
std::vector<double> mean_real(const TabularProblem& p);

double kl(const std::vector<double>& p, const std::vector<double>& q);

/// Closed form from setting each ∂/∂D_z to zero separately:
/// D*_z = r_z / (1 + Σ r), D*_{K+1} = 1 / (1 + Σ r), r_z = p_r(x|z)/p_g(x|z).
/// Throws SingularityError where p_g = 0 under p_r > 0.
Table optimal_discriminator(const Table& p_r, const Table& p_g);

/// Pointwise maximiser of discriminator_objective over the simplex:
/// D_z ∝ p(z) p_r(x|z), D_{K+1} ∝ Σ_z p(z) p_g(x|z).
Table exact_optimal_discriminator(const TabularProblem& p, const Table& p_g);

struct ObjectiveValue {
  double value = 0.0;
  double real_term = 0.0;       // Σ_z p(z) Σ_x p_r(x|z) log D_z(x)
  double generated_term = 0.0;  // Σ_z p(z) Σ_x p_g(x|z) log D_{K+1}(x)
  bool floored = false;         // some log argument fell below 1e-300
};

/// Σ_z p(z) Σ_x [p_r(x|z) log D_z(x) + p_g(x|z) log D_{K+1}(x)].
ObjectiveValue discriminator_objective(const TabularProblem& p, const Table& p_g, const Table& d);

/// ∂V/∂D, same shape as D.
Table discriminator_objective_gradient(const TabularProblem& p, const Table& p_g, const Table& d);

/// Norm of ∂V/∂D projected on the simplex tangent space of every atom.
double stationarity_norm(const TabularProblem& p, const Table& p_g, const Table& d);

/// Maximises discriminator_objective over D by per-atom projected gradient
/// ascent with backtracking, from the uniform discriminator.
Table numeric_optimal_discriminator(const TabularProblem& p, const Table& p_g, int max_iters = 20000,
                                    double tol = 1e-14);

struct QDistribution {
  std::vector<double> q;
  double Z = 0.0;
};

/// q(·|z) ∝ p_g(x|z) + Σ_z' p_g(x|z)/p_g(x|z') p_r(x|z'); z is 0-based.
QDistribution q_distribution(const Table& p_r, const Table& p_g, int z);

struct GeneratorLoss {
  double value = 0.0;         // Σ_z p(z) [KL(p_g‖q) - log Z(z)]
  double approximated = 0.0;  // Σ_z p(z) KL(p_g‖q) - log(K+1)
  double max_log_z_error = 0.0;  // max_z |log(Z(z)/(K+1))|
};

/// Generator term of the objective with D = D*, written through q.
GeneratorLoss generator_loss_under_optimal_D(const TabularProblem& p, const Table& p_g);

/// ∂V/∂(generator logits) with D held fixed.
Table generator_logit_gradient(const TabularProblem& p, const Table& p_g, const Table& d);

enum class SolveMode {
  Alternating,         // n_steps ascent steps on D logits, then one descent step on G logits
  BestResponse,        // D = optimal_discriminator each iteration
  ExactBestResponse,   // D = exact_optimal_discriminator each iteration
};

const char* mode_name(SolveMode m);
SolveMode parse_mode(const std::string& s);

struct SolveOptions {
  SolveMode mode = SolveMode::BestResponse;
  int steps = 5000;
  double g_rate = 1.0;
  double d_rate = 1.0;
  int d_steps = 3;
  int record_every = 1;
};

struct Trajectory {
  std::vector<int> step;
  std::vector<std::vector<double>> kl;  // per recorded step, KL(p_g(·|z) ‖ p̄_r) for each z
  TabularState final_state;

  double final_max_kl() const;
};

/// Throws std::runtime_error when logits turn non-finite.
Trajectory minimax_solve(const TabularProblem& p, const TabularState& init, const SolveOptions& opt);

struct Certificate {
  std::uint64_t seed = 0;
  int K = 0;
  int n = 0;
  std::string mode;
  double threshold = 1e-3;
  std::vector<double> final_kl;
  double max_kl = 0.0;
  double mean_generated_kl = 0.0;  // KL(mean_z p_g(·|z) ‖ p̄_r)
  double closed_form_stationarity = 0.0;  // at the final p_g
  double exact_stationarity = 0.0;
  double closed_form_vs_numeric = 0.0;  // max |D* - numeric maximiser|
  bool assertion_enabled = true;
  bool pass = false;
};

void to_json(nlohmann::json& j, const Certificate& c);

struct CertifyOptions {
  SolveOptions solve;
  double threshold = 1e-3;
  bool init_at_mean = false;
  std::vector<double> prior;  // empty = uniform
};

Certificate certify(int K, int n, std::uint64_t seed, const CertifyOptions& opt);

}  // namespace advnorm::theory
