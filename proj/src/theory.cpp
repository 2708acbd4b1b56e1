#include "advnorm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "advnorm/random.hpp"

namespace advnorm::theory {

namespace {

constexpr double kLogFloor = 1e-300;

std::vector<double> softmax(const std::vector<double>& a) {
  const double mx = *std::max_element(a.begin(), a.end());
  std::vector<double> e(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (e[i] = std::exp(a[i] - mx));
  for (auto& x : e) x /= s;
  return e;
}

double safe_log(double x, bool& floored) {
  if (x < kLogFloor) {
    floored = true;
    return std::log(kLogFloor);
  }
  return std::log(x);
}

void check_table(const Table& t, std::size_t rows, std::size_t cols, const char* what) {
  if (t.size() != rows) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " +
                                std::to_string(t.size()));
  }
  for (const auto& r : t) {
    if (r.size() != cols) throw std::invalid_argument(std::string(what) + ": ragged row");
  }
}

// Euclidean projection of v onto the probability simplex.
std::vector<double> project_simplex(const std::vector<double>& v) {
  std::vector<double> u(v);
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    css += u[i];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = std::max(v[i] - theta, 0.0);
  return w;
}

double atom_value(const std::vector<double>& c, const std::vector<double>& d) {
  double f = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    if (c[k] == 0.0) continue;
    if (d[k] <= 0.0) return -std::numeric_limits<double>::infinity();
    f += c[k] * std::log(d[k]);
  }
  return f;
}

// Per-atom weights c_k(x): p(z) p_r(x|z) for k <= K, Σ_z p(z) p_g(x|z) for K+1.
std::vector<double> atom_weights(const TabularProblem& p, const Table& p_g, int x) {
  std::vector<double> c(static_cast<std::size_t>(p.K + 1), 0.0);
  for (int z = 0; z < p.K; ++z) {
    c[static_cast<std::size_t>(z)] = p.p(z) * p.p_r[static_cast<std::size_t>(z)][static_cast<std::size_t>(x)];
    c[static_cast<std::size_t>(p.K)] += p.p(z) * p_g[static_cast<std::size_t>(z)][static_cast<std::size_t>(x)];
  }
  return c;
}

}  // namespace

void TabularProblem::validate() const {
  if (K < 1 || n < 1) throw std::invalid_argument("tabular problem needs K >= 1 and n >= 1");
  check_table(p_r, static_cast<std::size_t>(K), static_cast<std::size_t>(n), "p_r");
  for (const auto& row : p_r) {
    double s = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw std::invalid_argument("p_r entries must be >= 0");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("p_r rows must sum to 1");
  }
  if (!prior.empty()) {
    if (prior.size() != static_cast<std::size_t>(K)) throw std::invalid_argument("prior needs K entries");
    const double s = std::accumulate(prior.begin(), prior.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-12 || *std::min_element(prior.begin(), prior.end()) <= 0.0) {
      throw std::invalid_argument("prior must be a positive distribution");
    }
  }
}

double TabularProblem::p(int z) const {
  return prior.empty() ? 1.0 / K : prior[static_cast<std::size_t>(z)];
}

bool TabularProblem::uniform_prior() const {
  return std::all_of(prior.begin(), prior.end(), [&](double v) { return std::abs(v - 1.0 / K) <= 1e-15; });
}

TabularProblem TabularProblem::random(int K, int n, std::uint64_t seed) {
  TabularProblem p;
  p.K = K;
  p.n = n;
  std::mt19937_64 rng(derive_seed(seed, {1}));
  std::gamma_distribution<double> g(1.0, 1.0);
  for (int z = 0; z < K; ++z) {
    std::vector<double> row(static_cast<std::size_t>(n));
    for (auto& v : row) v = std::max(g(rng), 1e-6);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& v : row) v /= s;
    p.p_r.push_back(std::move(row));
  }
  return p;
}

Table TabularState::p_g() const {
  Table t;
  for (const auto& r : g_logits) t.push_back(softmax(r));
  return t;
}

Table TabularState::d() const {
  const std::size_t rows = d_logits.size(), n = rows ? d_logits[0].size() : 0;
  Table t(rows, std::vector<double>(n));
  std::vector<double> col(rows);
  for (std::size_t x = 0; x < n; ++x) {
    for (std::size_t k = 0; k < rows; ++k) col[k] = d_logits[k][x];
    const auto s = softmax(col);
    for (std::size_t k = 0; k < rows; ++k) t[k][x] = s[k];
  }
  return t;
}

TabularState TabularState::random(int K, int n, std::uint64_t seed) {
  TabularState s;
  std::mt19937_64 rng(derive_seed(seed, {2}));
  std::normal_distribution<double> nd(0.0, 1.0);
  s.g_logits.assign(static_cast<std::size_t>(K), std::vector<double>(static_cast<std::size_t>(n)));
  for (auto& r : s.g_logits)
    for (auto& v : r) v = nd(rng);
  s.d_logits.assign(static_cast<std::size_t>(K + 1), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  return s;
}

TabularState TabularState::from_distributions(const Table& p_g, const Table& d) {
  TabularState s;
  auto logs = [](const Table& t) {
    Table o(t);
    for (auto& r : o)
      for (auto& v : r) {
        if (!(v > 0.0)) throw std::invalid_argument("from_distributions needs strictly positive entries");
        v = std::log(v);
      }
    return o;
  };
  s.g_logits = logs(p_g);
  s.d_logits = logs(d);
  return s;
}

std::vector<double> mean_real(const TabularProblem& p) {
  p.validate();
  std::vector<double> m(static_cast<std::size_t>(p.n), 0.0);
  for (const auto& row : p.p_r)
    for (std::size_t x = 0; x < row.size(); ++x) m[x] += row[x] / p.K;
  return m;
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (!(q[i] > 0.0)) throw SingularityError("kl: q vanishes where p > 0 at atom " + std::to_string(i));
    s += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(s, 0.0);
}

Table optimal_discriminator(const Table& p_r, const Table& p_g) {
  const std::size_t K = p_r.size();
  if (K == 0) throw std::invalid_argument("optimal_discriminator: no domains");
  const std::size_t n = p_r[0].size();
  check_table(p_g, K, n, "p_g");
  Table d(K + 1, std::vector<double>(n));
  for (std::size_t x = 0; x < n; ++x) {
    std::vector<double> r(K);
    double sum = 0.0;
    for (std::size_t z = 0; z < K; ++z) {
      if (p_r[z][x] == 0.0) {
        r[z] = 0.0;
      } else if (!(p_g[z][x] > 0.0)) {
        throw SingularityError("optimal_discriminator: p_g(x|z) = 0 under p_r > 0 at atom " + std::to_string(x) +
                               ", domain " + std::to_string(z + 1));
      } else {
        r[z] = p_r[z][x] / p_g[z][x];
      }
      sum += r[z];
    }
    for (std::size_t z = 0; z < K; ++z) d[z][x] = r[z] / (1.0 + sum);
    d[K][x] = 1.0 / (1.0 + sum);
  }
  return d;
}

Table exact_optimal_discriminator(const TabularProblem& p, const Table& p_g) {
  p.validate();
  check_table(p_g, static_cast<std::size_t>(p.K), static_cast<std::size_t>(p.n), "p_g");
  Table d(static_cast<std::size_t>(p.K + 1), std::vector<double>(static_cast<std::size_t>(p.n)));
  for (int x = 0; x < p.n; ++x) {
    const auto c = atom_weights(p, p_g, x);
    const double s = std::accumulate(c.begin(), c.end(), 0.0);
    if (!(s > 0.0)) throw SingularityError("exact_optimal_discriminator: atom " + std::to_string(x) + " has no mass");
    for (int k = 0; k <= p.K; ++k) d[static_cast<std::size_t>(k)][static_cast<std::size_t>(x)] = c[static_cast<std::size_t>(k)] / s;
  }
  return d;
}

ObjectiveValue discriminator_objective(const TabularProblem& p, const Table& p_g, const Table& d) {
  p.validate();
  check_table(p_g, static_cast<std::size_t>(p.K), static_cast<std::size_t>(p.n), "p_g");
  check_table(d, static_cast<std::size_t>(p.K + 1), static_cast<std::size_t>(p.n), "D");
  ObjectiveValue v;
  for (int z = 0; z < p.K; ++z) {
    const auto zi = static_cast<std::size_t>(z);
    for (std::size_t x = 0; x < static_cast<std::size_t>(p.n); ++x) {
      if (p.p_r[zi][x] > 0.0) v.real_term += p.p(z) * p.p_r[zi][x] * safe_log(d[zi][x], v.floored);
      if (p_g[zi][x] > 0.0) v.generated_term += p.p(z) * p_g[zi][x] * safe_log(d[static_cast<std::size_t>(p.K)][x], v.floored);
    }
  }
  v.value = v.real_term + v.generated_term;
  return v;
}

Table discriminator_objective_gradient(const TabularProblem& p, const Table& p_g, const Table& d) {
  check_table(d, static_cast<std::size_t>(p.K + 1), static_cast<std::size_t>(p.n), "D");
  Table g(d.size(), std::vector<double>(static_cast<std::size_t>(p.n)));
  for (int x = 0; x < p.n; ++x) {
    const auto c = atom_weights(p, p_g, x);
    for (int k = 0; k <= p.K; ++k) {
      const auto ki = static_cast<std::size_t>(k), xi = static_cast<std::size_t>(x);
      g[ki][xi] = c[ki] == 0.0 ? 0.0 : c[ki] / d[ki][xi];
    }
  }
  return g;
}

double stationarity_norm(const TabularProblem& p, const Table& p_g, const Table& d) {
  const auto g = discriminator_objective_gradient(p, p_g, d);
  double s = 0.0;
  for (int x = 0; x < p.n; ++x) {
    double mean = 0.0;
    for (int k = 0; k <= p.K; ++k) mean += g[static_cast<std::size_t>(k)][static_cast<std::size_t>(x)];
    mean /= p.K + 1;
    for (int k = 0; k <= p.K; ++k) {
      const double r = g[static_cast<std::size_t>(k)][static_cast<std::size_t>(x)] - mean;
      s += r * r;
    }
  }
  return std::sqrt(s);
}

Table numeric_optimal_discriminator(const TabularProblem& p, const Table& p_g, int max_iters, double tol) {
  p.validate();
  Table d(static_cast<std::size_t>(p.K + 1), std::vector<double>(static_cast<std::size_t>(p.n)));
  const std::size_t k1 = static_cast<std::size_t>(p.K + 1);
  for (int x = 0; x < p.n; ++x) {
    const auto c = atom_weights(p, p_g, x);
    std::vector<double> cur(k1, 1.0 / static_cast<double>(k1));
    double f = atom_value(c, cur);
    double eta = 1.0;
    for (int it = 0; it < max_iters; ++it) {
      std::vector<double> g(k1);
      for (std::size_t k = 0; k < k1; ++k) g[k] = c[k] == 0.0 ? 0.0 : c[k] / cur[k];
      std::vector<double> next;
      double fn = 0.0, moved = 0.0;
      while (true) {
        std::vector<double> step(k1);
        for (std::size_t k = 0; k < k1; ++k) step[k] = cur[k] + eta * g[k];
        next = project_simplex(step);
        fn = atom_value(c, next);
        double lin = 0.0;
        moved = 0.0;
        for (std::size_t k = 0; k < k1; ++k) {
          lin += g[k] * (next[k] - cur[k]);
          moved += (next[k] - cur[k]) * (next[k] - cur[k]);
        }
        // Armijo condition for projected steps
        if (fn >= f + 0.5 * lin || moved == 0.0) break;
        eta *= 0.5;
        if (eta < 1e-30) break;
      }
      if (!(fn >= f)) break;
      cur = next;
      f = fn;
      eta *= 2.0;
      if (std::sqrt(moved) < tol) break;
    }
    for (std::size_t k = 0; k < k1; ++k) d[k][static_cast<std::size_t>(x)] = cur[k];
  }
  return d;
}

QDistribution q_distribution(const Table& p_r, const Table& p_g, int z) {
  const std::size_t K = p_r.size();
  if (z < 0 || static_cast<std::size_t>(z) >= K) throw std::invalid_argument("q_distribution: domain out of range");
  const std::size_t n = p_r[0].size();
  check_table(p_g, K, n, "p_g");
  const auto zi = static_cast<std::size_t>(z);
  QDistribution out;
  out.q.assign(n, 0.0);
  for (std::size_t x = 0; x < n; ++x) {
    double m = p_g[zi][x];
    for (std::size_t w = 0; w < K; ++w) {
      if (p_r[w][x] == 0.0) continue;
      if (!(p_g[w][x] > 0.0)) {
        throw SingularityError("q_distribution: p_g(x|z') = 0 under p_r > 0 at atom " + std::to_string(x));
      }
      m += p_g[zi][x] / p_g[w][x] * p_r[w][x];
    }
    out.q[x] = m;
    out.Z += m;
  }
  for (auto& v : out.q) v /= out.Z;
  return out;
}

GeneratorLoss generator_loss_under_optimal_D(const TabularProblem& p, const Table& p_g) {
  p.validate();
  check_table(p_g, static_cast<std::size_t>(p.K), static_cast<std::size_t>(p.n), "p_g");
  GeneratorLoss out;
  const double k1 = p.K + 1.0;
  for (int z = 0; z < p.K; ++z) {
    const auto q = q_distribution(p.p_r, p_g, z);
    const double d = kl(p_g[static_cast<std::size_t>(z)], q.q);
    out.value += p.p(z) * (d - std::log(q.Z));
    out.approximated += p.p(z) * d;
    out.max_log_z_error = std::max(out.max_log_z_error, std::abs(std::log(q.Z / k1)));
  }
  out.approximated -= std::log(k1);
  return out;
}

Table generator_logit_gradient(const TabularProblem& p, const Table& p_g, const Table& d) {
  Table g(static_cast<std::size_t>(p.K), std::vector<double>(static_cast<std::size_t>(p.n)));
  const auto& fake = d[static_cast<std::size_t>(p.K)];
  std::vector<double> L(fake.size());
  bool floored = false;
  for (std::size_t x = 0; x < fake.size(); ++x) L[x] = safe_log(fake[x], floored);
  for (int z = 0; z < p.K; ++z) {
    const auto& row = p_g[static_cast<std::size_t>(z)];
    double mean = 0.0;
    for (std::size_t x = 0; x < row.size(); ++x) mean += row[x] * L[x];
    for (std::size_t x = 0; x < row.size(); ++x) g[static_cast<std::size_t>(z)][x] = p.p(z) * row[x] * (L[x] - mean);
  }
  return g;
}

const char* mode_name(SolveMode m) {
  switch (m) {
    case SolveMode::Alternating: return "alternating";
    case SolveMode::BestResponse: return "best_response_d";
    case SolveMode::ExactBestResponse: return "exact_best_response_d";
  }
  return "?";
}

SolveMode parse_mode(const std::string& s) {
  if (s == "alternating") return SolveMode::Alternating;
  if (s == "best_response_d") return SolveMode::BestResponse;
  if (s == "exact_best_response_d") return SolveMode::ExactBestResponse;
  throw std::invalid_argument("unknown solve mode '" + s + "'");
}

double Trajectory::final_max_kl() const {
  if (kl.empty()) return 0.0;
  return *std::max_element(kl.back().begin(), kl.back().end());
}

Trajectory minimax_solve(const TabularProblem& p, const TabularState& init, const SolveOptions& opt) {
  p.validate();
  check_table(init.g_logits, static_cast<std::size_t>(p.K), static_cast<std::size_t>(p.n), "G logits");
  check_table(init.d_logits, static_cast<std::size_t>(p.K + 1), static_cast<std::size_t>(p.n), "D logits");
  if (opt.steps < 0 || opt.record_every < 1 || opt.d_steps < 1) throw std::invalid_argument("bad solve options");
  const auto pbar = mean_real(p);
  Trajectory tr;
  TabularState s = init;
  auto record = [&](int step) {
    const auto pg = s.p_g();
    std::vector<double> k;
    for (const auto& row : pg) k.push_back(kl(row, pbar));
    tr.step.push_back(step);
    tr.kl.push_back(std::move(k));
  };
  record(0);
  for (int t = 1; t <= opt.steps; ++t) {
    Table pg = s.p_g();
    Table d;
    if (opt.mode == SolveMode::Alternating) {
      for (int k = 0; k < opt.d_steps; ++k) {
        d = s.d();
        for (int x = 0; x < p.n; ++x) {
          const auto c = atom_weights(p, pg, x);
          const double total = std::accumulate(c.begin(), c.end(), 0.0);
          for (int j = 0; j <= p.K; ++j) {
            const auto ji = static_cast<std::size_t>(j), xi = static_cast<std::size_t>(x);
            s.d_logits[ji][xi] += opt.d_rate * (c[ji] - d[ji][xi] * total);
          }
        }
      }
      d = s.d();
    } else if (opt.mode == SolveMode::BestResponse) {
      d = optimal_discriminator(p.p_r, pg);
    } else {
      d = exact_optimal_discriminator(p, pg);
    }
    const auto g = generator_logit_gradient(p, pg, d);
    for (int z = 0; z < p.K; ++z)
      for (int x = 0; x < p.n; ++x) {
        auto& v = s.g_logits[static_cast<std::size_t>(z)][static_cast<std::size_t>(x)];
        v -= opt.g_rate * g[static_cast<std::size_t>(z)][static_cast<std::size_t>(x)];
        if (!std::isfinite(v)) throw std::runtime_error("minimax_solve: non-finite generator logits at step " + std::to_string(t));
      }
    if (opt.mode != SolveMode::Alternating) s.d_logits = TabularState::from_distributions(pg, d).d_logits;
    if (t % opt.record_every == 0 || t == opt.steps) record(t);
  }
  tr.final_state = std::move(s);
  return tr;
}

void to_json(nlohmann::json& j, const Certificate& c) {
  j = {{"seed", c.seed},
       {"K", c.K},
       {"n", c.n},
       {"mode", c.mode},
       {"threshold", c.threshold},
       {"final_kl", c.final_kl},
       {"max_kl", c.max_kl},
       {"mean_generated_kl", c.mean_generated_kl},
       {"closed_form_stationarity", c.closed_form_stationarity},
       {"exact_stationarity", c.exact_stationarity},
       {"closed_form_vs_numeric", c.closed_form_vs_numeric},
       {"status", !c.assertion_enabled ? "assertion disabled" : (c.pass ? "pass" : "fail")}};
}

Certificate certify(int K, int n, std::uint64_t seed, const CertifyOptions& opt) {
  TabularProblem p = TabularProblem::random(K, n, seed);
  p.prior = opt.prior;
  p.validate();
  TabularState init = TabularState::random(K, n, seed);
  if (opt.init_at_mean) {
    const auto pbar = mean_real(p);
    for (auto& row : init.g_logits)
      for (int x = 0; x < n; ++x) row[static_cast<std::size_t>(x)] = std::log(pbar[static_cast<std::size_t>(x)]);
  }
  const auto tr = minimax_solve(p, init, opt.solve);
  Certificate c;
  c.seed = seed;
  c.K = K;
  c.n = n;
  c.mode = mode_name(opt.solve.mode);
  c.threshold = opt.threshold;
  c.final_kl = tr.kl.back();
  c.max_kl = tr.final_max_kl();
  const auto pg = tr.final_state.p_g();
  std::vector<double> mean_g(static_cast<std::size_t>(n), 0.0);
  for (int z = 0; z < K; ++z)
    for (int x = 0; x < n; ++x) mean_g[static_cast<std::size_t>(x)] += p.p(z) * pg[static_cast<std::size_t>(z)][static_cast<std::size_t>(x)];
  c.mean_generated_kl = kl(mean_g, mean_real(p));
  const auto closed = optimal_discriminator(p.p_r, pg);
  c.closed_form_stationarity = stationarity_norm(p, pg, closed);
  c.exact_stationarity = stationarity_norm(p, pg, exact_optimal_discriminator(p, pg));
  const auto numeric = numeric_optimal_discriminator(p, pg);
  for (std::size_t k = 0; k < closed.size(); ++k)
    for (std::size_t x = 0; x < closed[k].size(); ++x)
      c.closed_form_vs_numeric = std::max(c.closed_form_vs_numeric, std::abs(closed[k][x] - numeric[k][x]));
  c.assertion_enabled = p.uniform_prior();
  c.pass = c.assertion_enabled && c.max_kl < c.threshold;
  return c;
}

}  // namespace advnorm::theory
