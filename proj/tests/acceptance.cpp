// Acceptance gate: `acceptance <1..10>` prints one PASS/FAIL line and exits 0 on pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "advnorm/config.hpp"
#include "advnorm/experiments.hpp"
#include "advnorm/losses.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/patch.hpp"
#include "advnorm/theory.hpp"

#ifndef ADVNORM_ACCEPT_DIR
#define ADVNORM_ACCEPT_DIR "acceptance_runs"
#endif

using namespace advnorm;
namespace fs = std::filesystem;
using nn::Tensor;

namespace tol {
constexpr double kl_converged = 1e-3;
constexpr double dstar_vs_numeric = 1e-6;
constexpr double fixed_point = 1e-12;
constexpr double theory_seconds = 60.0;
constexpr double fd_rtol = 1e-3;
constexpr double fd_atol = 1e-8;
constexpr int fd_instances = 50;
constexpr double fd_step = 1e-8;
constexpr double nll_identity = 1e-12;
constexpr double disjoint_dice = 0.999;
constexpr double overlap_reconstruction = 1e-6;
constexpr double metric_oracle = 1e-9;
constexpr int mhd_max_voxels = 200;
constexpr double recipe_seconds = 30.0 * 60.0;
}  // namespace tol

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool close(double a, double b, double rtol, double atol) { return std::abs(a - b) <= atol + rtol * std::abs(b); }

// Reduced scale for one CPU core; see README for the mapping to the desk scale.
const char* kAcceptConfig = R"(
output_dir = "accept"
[data]
profiles = ["adult", "shifted"]
subjects = 10
shape = 32
seed = 1
[model]
base = 4
depth = 2
d_widths = [8, 16, 32, 32]
[train]
patch = 16
m = 4
n_epochs = 100
n_iter = 50
train_patches = 400
val_patches = 64
milestones = [75, 90]
patience = 100
augment_probability = 0.0
seed = 7
[eval]
stride = 8
discriminator_patches = 16
seed = 3
)";

config::ExperimentConfig accept_config() { return config::parse_toml(kAcceptConfig); }

fs::path run_dir(const std::string& name) {
  const fs::path p = fs::path(ADVNORM_ACCEPT_DIR) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string assertions_text(const experiments::RecipeResult& r) {
  std::string s;
  for (const auto& a : r.assertions) {
    if (!s.empty()) s += "; ";
    s += fmt("%s %.4f %s %.4f%s -> %s", a.name.c_str(), a.lhs, a.op.c_str(), a.rhs,
             a.tol > 0 ? fmt(" (tol %g)", a.tol).c_str() : "", a.pass ? "ok" : "FAIL");
  }
  return s;
}

Verdict recipe_verdict(const std::string& name, const config::ExperimentConfig& cfg) {
  const auto res = experiments::run_recipe(name, cfg, run_dir(name));
  experiments::append_ledger(fs::path(ADVNORM_ACCEPT_DIR) / "recipes.jsonl", res);
  const bool in_time = res.seconds <= tol::recipe_seconds;
  return {res.pass && in_time, assertions_text(res) + fmt("; %.0f s", res.seconds)};
}

// ------------------------------------------------------------------ 1

Verdict theory_certification() {
  const auto t0 = std::chrono::steady_clock::now();
  int converged = 0, matched = 0, fixed_ok = 0;
  double worst_kl = 0.0, worst_dstar = 0.0, worst_fixed = 0.0;
  const int instances = 20;
  for (int i = 0; i < instances; ++i) {
    const int K = 2 + i % 3;
    const int n = (i / 3) % 2 ? 16 : 4;
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(i);
    theory::CertifyOptions opt;
    opt.solve.mode = theory::SolveMode::BestResponse;
    opt.solve.steps = 5000;
    opt.solve.record_every = 5000;
    opt.threshold = tol::kl_converged;
    const auto c = theory::certify(K, n, seed, opt);
    converged += c.max_kl < tol::kl_converged ? 1 : 0;
    matched += c.closed_form_vs_numeric <= tol::dstar_vs_numeric ? 1 : 0;
    worst_kl = std::max(worst_kl, c.max_kl);
    worst_dstar = std::max(worst_dstar, c.closed_form_vs_numeric);

    const auto p = theory::TabularProblem::random(K, n, seed);
    std::vector<double> pbar(static_cast<std::size_t>(n), 0.0);
    for (const auto& row : p.p_r)
      for (int x = 0; x < n; ++x) pbar[static_cast<std::size_t>(x)] += row[static_cast<std::size_t>(x)] / K;
    const theory::Table pg(static_cast<std::size_t>(K), pbar);
    const auto d = theory::optimal_discriminator(p.p_r, pg);
    double err = 0.0;
    for (int x = 0; x < n; ++x) err = std::max(err, std::abs(d[static_cast<std::size_t>(K)][static_cast<std::size_t>(x)] - 1.0 / (K + 1)));
    for (int z = 0; z < K; ++z) err = std::max(err, std::abs(theory::q_distribution(p.p_r, pg, z).Z - (K + 1)));
    worst_fixed = std::max(worst_fixed, err);
    fixed_ok += err <= tol::fixed_point ? 1 : 0;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = converged == instances && matched == instances && fixed_ok == instances && secs < tol::theory_seconds;
  return {pass, fmt("converged %d/%d (worst max KL %.3g, need < %g); closed-form D* vs numeric %d/%d (worst %.3g, need "
                    "<= %g); fixed point %d/%d (worst %.2g); %.1f s",
                    converged, instances, worst_kl, tol::kl_converged, matched, instances, worst_dstar,
                    tol::dstar_vs_numeric, fixed_ok, instances, worst_fixed, secs)};
}

// ------------------------------------------------------------------ 2

Tensor<double> random_simplex(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  const int n = shape[0], c = shape[1];
  const std::size_t v = t.stride_from(2);
  for (int i = 0; i < n; ++i)
    for (std::size_t k = 0; k < v; ++k) {
      double s = 0;
      for (int j = 0; j < c; ++j) s += (t[(i * c + j) * v + k] = u(rng));
      for (int j = 0; j < c; ++j) t[(i * c + j) * v + k] /= s;
    }
  return t;
}

Tensor<double> random_one_hot(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor<double> t(shape);
  const int n = shape[0], c = shape[1];
  const std::size_t v = t.stride_from(2);
  std::uniform_int_distribution<int> pick(0, c - 1);
  for (int i = 0; i < n; ++i)
    for (std::size_t k = 0; k < v; ++k) t[(i * c + pick(rng)) * v + k] = 1.0;
  return t;
}

std::vector<double> random_probs(int k1, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> d(static_cast<std::size_t>(k1));
  for (auto& x : d) x = u(rng);
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  for (auto& x : d) x /= s;
  return d;
}

Verdict gradient_correctness() {
  std::mt19937_64 rng(20);
  int dice_ok = 0, nll_ok = 0, comp_ok = 0;
  losses::DiceConfig dice;
  for (int t = 0; t < tol::fd_instances; ++t) {
    auto s = random_simplex({2, 4, 2, 2, 2}, rng);
    const auto y = random_one_hot({2, 4, 2, 2, 2}, rng);
    const auto g = losses::dice_loss(s, y, dice).grad;
    bool ok = true;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double h = 1e-6, keep = s[i];
      s[i] = keep + h;
      const double up = losses::dice_loss(s, y, dice).value;
      s[i] = keep - h;
      const double dn = losses::dice_loss(s, y, dice).value;
      s[i] = keep;
      ok = ok && close(g[i], (up - dn) / (2 * h), tol::fd_rtol, tol::fd_atol);
    }
    dice_ok += ok;
  }
  for (int t = 0; t < tol::fd_instances; ++t) {
    bool ok = true;
    auto d = random_probs(3 + t % 3, rng);
    const int z = 1 + t % static_cast<int>(d.size());
    const auto g = losses::discriminator_nll_grad(d, z);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double h = 1e-7, keep = d[i];
      d[i] = keep + h;
      const double up = losses::discriminator_nll(d, z).value;
      d[i] = keep - h;
      const double dn = losses::discriminator_nll(d, z).value;
      d[i] = keep;
      ok = ok && close(g[i], (up - dn) / (2 * h), tol::fd_rtol, tol::fd_atol);
    }
    const int k1 = static_cast<int>(d.size());
    Tensor<double> logits({4, k1});
    std::normal_distribution<double> nd(0.0, 2.0);
    for (auto& x : logits.storage()) x = nd(rng);
    const std::vector<int> labels{1, k1, 1 + t % k1, k1};
    const auto lg = losses::nll_from_logits(logits, labels);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double h = 1e-6, keep = logits[i];
      logits[i] = keep + h;
      const double up = losses::nll_from_logits(logits, labels).value;
      logits[i] = keep - h;
      const double dn = losses::nll_from_logits(logits, labels).value;
      logits[i] = keep;
      ok = ok && close(lg.grad[i], (up - dn) / (2 * h), tol::fd_rtol, tol::fd_atol);
    }
    nll_ok += ok;
  }
  const nn::RunOptions gs{nn::Phase::Train, false, false, 0};
  const nn::RunOptions dopt{nn::Phase::Train, false, false, 99};
  double worst = 0.0;
  int checked = 0, kinks = 0;
  for (int t = 0; checked < tol::fd_instances && t < 4 * tol::fd_instances; ++t) {
    DiscriminatorConfig dc;
    dc.input_size = 16;
    dc.widths = {2, 3, 3, 4};
    Networks<double> nets(generator_config(1, 2, 1), segmenter_config(1, 2, 1), dc);
    init_parameters(nets, 500 + static_cast<std::uint64_t>(t));
    losses::Batch<double> b;
    b.x = Tensor<double>({2, 1, 16, 16, 16});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& x : b.x.storage()) x = u(rng);
    b.y = random_one_hot({2, 4, 16, 16, 16}, rng);
    b.z = {1, 2};
    const double lambda = 5.0 * u(rng);
    auto params = nets.generator.parameters();
    for (auto* p : nets.segmenter.parameters()) params.push_back(p);
    for (auto* p : params) p->zero_grad();
    for (auto* p : nets.discriminator.parameters()) p->zero_grad();
    losses::generator_segmenter_gradients(nets, b, dice, lambda, gs, dopt);
    auto value = [&] {
      const auto gx = nets.generator.forward(b.x, gs);
      const double seg = losses::dice_loss(nets.segmenter.forward(gx, gs), b.y, dice).value;
      const std::vector<int> gen(b.z.size(), 3);
      return losses::generator_objective(seg, losses::nll_from_logits(nets.discriminator.forward_logits(gx, dopt), gen).value,
                                         lambda);
    };
    std::normal_distribution<double> nd;
    std::vector<std::vector<double>> dir;
    double analytic = 0.0;
    for (auto* p : params) {
      dir.emplace_back(p->value.size());
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        dir.back()[i] = nd(rng);
        analytic += dir.back()[i] * p->grad[i];
      }
    }
    auto shift = [&](double s) {
      for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < params[k]->value.size(); ++i) params[k]->value[i] += s * dir[k][i];
    };
    // One-sided slopes that disagree mean the draw sits on an activation kink; redraw it.
    const double v0 = value();
    shift(tol::fd_step);
    const double up = value();
    shift(-2 * tol::fd_step);
    const double dn = value();
    shift(tol::fd_step);
    const double fwd = (up - v0) / tol::fd_step, bwd = (v0 - dn) / tol::fd_step;
    if (!close(fwd, bwd, tol::fd_rtol, tol::fd_atol)) {
      ++kinks;
      continue;
    }
    ++checked;
    const double numeric = (up - dn) / (2 * tol::fd_step);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12));
    comp_ok += close(analytic, numeric, tol::fd_rtol, tol::fd_atol);
  }
  const int n = tol::fd_instances;
  return {dice_ok == n && nll_ok == n && comp_ok == n && checked == n,
          fmt("dice %d/%d, discriminator NLL %d/%d, composite G objective %d/%d (worst rel err %.2g, %d kink draws "
              "redrawn) at rtol %g",
              dice_ok, n, nll_ok, n, comp_ok, checked, worst, kinks, tol::fd_rtol)};
}

// ------------------------------------------------------------------ 3

Verdict loss_identities() {
  std::mt19937_64 rng(30);
  double worst_nll = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const auto d = random_probs(2 + t % 6, rng);
    double domains = 0.0;
    for (std::size_t z = 0; z + 1 < d.size(); ++z) domains += d[z];
    const double oracle = -std::log(1.0 - domains);
    worst_nll = std::max(worst_nll, std::abs(losses::discriminator_nll(d, static_cast<int>(d.size())).value - oracle));
    worst_nll = std::max(worst_nll, std::abs(losses::generated_nll_from_domains(d).value - oracle));
  }
  losses::DiceConfig dice;
  double worst_self = 0.0, worst_disjoint = 1.0;
  for (int t = 0; t < 50; ++t) {
    const int side = 2 + t % 4;
    const auto y = random_one_hot({1 + t % 3, 4, side, side, side}, rng);
    worst_self = std::max(worst_self, std::abs(losses::dice_loss(y, y, dice).value));
    Tensor<double> s(y.shape());
    const std::size_t v = s.stride_from(2);
    for (int i = 0; i < y.dim(0); ++i)
      for (std::size_t k = 0; k < v; ++k)
        for (int c = 0; c < 4; ++c)
          if (y[(static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(c)) * v + k] == 1.0)
            s[(static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>((c + 1 + t % 3) % 4)) * v + k] = 1.0;
    worst_disjoint = std::min(worst_disjoint, losses::dice_loss(s, y, dice).value);
  }
  const bool pass = worst_nll <= tol::nll_identity && worst_self == 0.0 && worst_disjoint >= tol::disjoint_dice;
  return {pass, fmt("nll(d,K+1) identity worst %.2g (need <= %g); dice(truth,truth) worst %.2g (need 0); disjoint dice "
                    "min %.6f (need >= %g)",
                    worst_nll, tol::nll_identity, worst_self, worst_disjoint, tol::disjoint_dice)};
}

// ------------------------------------------------------------------ 4

bool axis_covered(int length, const std::vector<int>& offsets, int patch) {
  std::vector<char> hit(static_cast<std::size_t>(length), 0);
  for (int o : offsets) {
    if (o < 0 || o + patch > length) return false;
    for (int i = o; i < o + patch; ++i) hit[static_cast<std::size_t>(i)] = 1;
  }
  return std::all_of(hit.begin(), hit.end(), [](char c) { return c != 0; });
}

Verdict geometry() {
  const int patch = 32, stride = 8;
  int shapes = 0, covered = 0;
  for (int x = 32; x <= 64; ++x)
    for (int y = 32; y <= 64; ++y)
      for (int z = 32; z <= 64; ++z) {
        ++shapes;
        const auto g = patch_grid({x, y, z}, Vec3i::cube(patch), Vec3i::cube(stride));
        bool ok = axis_covered(x, g.axis_offsets[0], patch) && axis_covered(y, g.axis_offsets[1], patch) &&
                  axis_covered(z, g.axis_offsets[2], patch);
        ok = ok && g.origins.size() == g.axis_offsets[0].size() * g.axis_offsets[1].size() * g.axis_offsets[2].size();
        for (const auto& o : g.origins)
          ok = ok && std::find(g.axis_offsets[0].begin(), g.axis_offsets[0].end(), o.x) != g.axis_offsets[0].end() &&
               std::find(g.axis_offsets[1].begin(), g.axis_offsets[1].end(), o.y) != g.axis_offsets[1].end() &&
               std::find(g.axis_offsets[2].begin(), g.axis_offsets[2].end(), o.z) != g.axis_offsets[2].end();
        covered += ok;
      }
  // Voxel-level coverage on the boundary cases of the lattice.
  int voxel_checked = 0, voxel_ok = 0;
  for (int x : {32, 33, 39, 40, 41, 63, 64})
    for (int y : {32, 40, 47, 64})
      for (int z : {32, 41, 64}) {
        const auto g = patch_grid({x, y, z}, Vec3i::cube(patch), Vec3i::cube(stride));
        std::vector<int> count(static_cast<std::size_t>(x * y * z), 0);
        for (const auto& o : g.origins)
          for (int k = o.z; k < o.z + patch; ++k)
            for (int j = o.y; j < o.y + patch; ++j)
              for (int i = o.x; i < o.x + patch; ++i) ++count[linear_index({x, y, z}, i, j, k)];
        ++voxel_checked;
        voxel_ok += std::all_of(count.begin(), count.end(), [](int c) { return c > 0; });
      }

  std::mt19937_64 rng(40);
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  const Vec3i full{64, 64, 64};
  Volume src(full, 3);
  for (auto& v : src.data()) v = u(rng);
  std::vector<PatchProbabilities> tiles;
  for (const auto& o : patch_grid(full, Vec3i::cube(32), Vec3i::cube(32)).origins)
    tiles.push_back({o, extract_patch(src, o, Vec3i::cube(32))});
  const bool identity = reconstruct(tiles, full).probs.data() == src.data();

  const Vec3i shape{40, 48, 37};
  const auto g = patch_grid(shape, Vec3i::cube(32), Vec3i::cube(8));
  std::vector<PatchProbabilities> patches;
  std::vector<double> sum(shape.product() * 2, 0.0);
  std::vector<int> cnt(shape.product(), 0);
  for (const auto& o : g.origins) {
    Volume p(Vec3i::cube(32), 2);
    for (auto& v : p.data()) v = u(rng);
    for (int k = 0; k < 32; ++k)
      for (int j = 0; j < 32; ++j)
        for (int i = 0; i < 32; ++i) {
          const auto idx = linear_index(shape, o.x + i, o.y + j, o.z + k);
          ++cnt[idx];
          for (int c = 0; c < 2; ++c) sum[c * shape.product() + idx] += p.at(c, i, j, k);
        }
    patches.push_back({o, std::move(p)});
  }
  const auto rec = reconstruct(patches, shape);
  double worst = 0.0;
  for (int c = 0; c < 2; ++c)
    for (std::size_t idx = 0; idx < shape.product(); ++idx)
      worst = std::max(worst, std::abs(rec.probs.data()[c * shape.product() + idx] - sum[c * shape.product() + idx] / cnt[idx]));
  const bool pass = covered == shapes && voxel_ok == voxel_checked && identity && worst <= tol::overlap_reconstruction;
  return {pass, fmt("grid coverage %d/%d shapes in [32,64]^3 (voxel-level %d/%d); exact tiling identity %s; overlap "
                    "reconstruction vs brute force %.2g (need <= %g)",
                    covered, shapes, voxel_ok, voxel_checked, identity ? "yes" : "NO", worst,
                    tol::overlap_reconstruction)};
}

// ------------------------------------------------------------------ 5

Verdict metric_oracles() {
  std::mt19937_64 rng(50);
  double worst_mhd = 0.0;
  int mhd_cases = 0;
  const Spacing sps[] = {{1, 1, 1}, {1.0, 1.5, 0.8}, {0.7, 0.7, 2.5}};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (mhd_cases < 100) {
    const Vec3i s{4 + mhd_cases % 5, 3 + mhd_cases % 6, 2 + mhd_cases % 4};
    const Spacing sp = sps[mhd_cases % 3];
    std::vector<std::uint8_t> a(s.product(), 0), b(s.product(), 0);
    for (auto& v : a) v = u(rng) < 0.2;
    for (auto& v : b) v = u(rng) < 0.15;
    const auto na = std::count(a.begin(), a.end(), 1), nb = std::count(b.begin(), b.end(), 1);
    if (na == 0 || nb == 0 || na > tol::mhd_max_voxels || nb > tol::mhd_max_voxels) continue;
    std::vector<std::array<double, 3>> pa, pb;
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x) {
          const std::array<double, 3> p{x * sp.x, y * sp.y, z * sp.z};
          if (a[linear_index(s, x, y, z)]) pa.push_back(p);
          if (b[linear_index(s, x, y, z)]) pb.push_back(p);
        }
    auto directed = [](const auto& from, const auto& to) {
      double worst = 0.0;
      for (const auto& p : from) {
        double best = INFINITY;
        for (const auto& q : to)
          best = std::min(best, std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                          (p[2] - q[2]) * (p[2] - q[2])));
        worst = std::max(worst, best);
      }
      return worst;
    };
    const double oracle = 0.5 * (directed(pa, pb) + directed(pb, pa));
    worst_mhd = std::max(worst_mhd, std::abs(metrics::mhd(a, b, s, sp) - oracle));
    ++mhd_cases;
  }

  double worst_jsd = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int groups = 2 + t % 3, bins = 4 + t % 29;
    std::vector<metrics::Histogram> hs;
    std::vector<std::vector<double>> p;
    for (int g = 0; g < groups; ++g) {
      metrics::Histogram h(bins, -0.5, 1.5);
      const int n = 20 + t;
      for (int i = 0; i < n; ++i) h.add_value(std::pow(u(rng), 1.0 + g) * 2.0 - 0.5);
      std::vector<double> q(static_cast<std::size_t>(bins));
      for (int k = 0; k < bins; ++k) q[static_cast<std::size_t>(k)] = h.counts()[static_cast<std::size_t>(k)] / h.total();
      hs.push_back(h);
      p.push_back(q);
    }
    double hmix = 0.0, hmean = 0.0;
    for (int k = 0; k < bins; ++k) {
      double m = 0.0;
      for (const auto& q : p) m += q[static_cast<std::size_t>(k)] / groups;
      if (m > 0) hmix -= m * std::log(m);
      for (const auto& q : p)
        if (q[static_cast<std::size_t>(k)] > 0) hmean -= q[static_cast<std::size_t>(k)] * std::log(q[static_cast<std::size_t>(k)]) / groups;
    }
    worst_jsd = std::max(worst_jsd, std::abs(metrics::histogram_jsd(hs) - (hmix - hmean)));
  }

  double worst_pearson = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Vec3i s{3 + t % 4, 4 + t % 7, 2 + t % 3};
    Volume v(s);
    std::vector<std::uint8_t> mask(s.product(), 0);
    for (auto& x : v.data()) x = static_cast<float>(u(rng));
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x) {
          v(x, y, z) += static_cast<float>(0.1 * (t % 5) * y);
          mask[linear_index(s, x, y, z)] = t % 2 ? 1 : u(rng) < 0.7;
        }
    double n = 0, sy = 0, sv = 0;
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x)
          if (mask[linear_index(s, x, y, z)]) {
            n += 1;
            sy += y;
            sv += v(x, y, z);
          }
    const double my = sy / n, mv = sv / n;
    double cyy = 0, cvv = 0, cvy = 0;
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x)
          if (mask[linear_index(s, x, y, z)]) {
            cyy += (y - my) * (y - my);
            cvv += (v(x, y, z) - mv) * (v(x, y, z) - mv);
            cvy += (y - my) * (v(x, y, z) - mv);
          }
    worst_pearson = std::max(worst_pearson, std::abs(metrics::pearson_vs_y(v, mask) - cvy / std::sqrt(cyy * cvv)));
  }

  const Vec3i s{4, 1, 1};
  const std::vector<std::uint8_t> a{1, 1, 1, 0}, b{0, 1, 1, 0}, c{0, 0, 0, 1}, e{0, 0, 0, 0};
  const bool dsc_ok = metrics::dsc(a, b) == 0.8 && metrics::dsc(a, a) == 1.0 && metrics::dsc(a, c) == 0.0 &&
                      metrics::dsc(e, e) == 1.0 && metrics::dsc(b, e) == 0.0;
  (void)s;
  const bool pass = worst_mhd <= tol::metric_oracle && worst_jsd <= tol::metric_oracle &&
                    worst_pearson <= tol::metric_oracle && dsc_ok;
  return {pass, fmt("MHD vs brute force worst %.2g over %d masks <= %d voxels; JSD worst %.2g; Pearson worst %.2g (need "
                    "<= %g); DSC hand cases %s",
                    worst_mhd, mhd_cases, tol::mhd_max_voxels, worst_jsd, worst_pearson, tol::metric_oracle,
                    dsc_ok ? "exact" : "WRONG")};
}

// ------------------------------------------------------------------ 10

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict reproducibility() {
  auto cfg = accept_config();
  cfg.train.n_epochs = 2;
  cfg.train.n_iter = 10;
  const std::string recipe = "joint_normalization";
  std::vector<experiments::RecipeResult> results;
  for (const char* tag : {"repro_a", "repro_b"}) results.push_back(experiments::run_recipe(recipe, cfg, run_dir(tag)));
  const auto& a = results[0];
  const auto& b = results[1];
  int runs = 0, same_history = 0, same_params = 0;
  for (std::size_t i = 0; i < a.runs.size() && i < b.runs.size(); ++i) {
    ++runs;
    same_history += slurp(a.runs[i] / "history.csv") == slurp(b.runs[i] / "history.csv");
    const auto ca = read_checkpoint(a.runs[i] / "last.ckpt"), cb = read_checkpoint(b.runs[i] / "last.ckpt");
    bool eq = ca.arrays.size() == cb.arrays.size() && !ca.arrays.empty();
    for (std::size_t k = 0; eq && k < ca.arrays.size(); ++k)
      eq = ca.arrays[k].name == cb.arrays[k].name && ca.arrays[k].shape == cb.arrays[k].shape &&
           std::memcmp(ca.arrays[k].data.data(), cb.arrays[k].data.data(), ca.arrays[k].data.size() * sizeof(float)) == 0;
    same_params += eq;
  }
  const bool same_details = a.details == b.details;
  const bool pass = runs == 4 && a.runs.size() == b.runs.size() && same_history == runs && same_params == runs &&
                    same_details;
  return {pass, fmt("recipe %s twice: %d runs, identical history CSVs %d/%d, bitwise-identical final parameters %d/%d, "
                    "identical metrics %s",
                    recipe.c_str(), runs, same_history, runs, same_params, runs, same_details ? "yes" : "NO")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: acceptance <criterion 1..10>\n");
    return 2;
  }
  const int k = std::atoi(argv[1]);
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"tabular minimax certification", theory_certification},
      {"gradient correctness", gradient_correctness},
      {"loss identities", loss_identities},
      {"patch geometry", geometry},
      {"metric oracles", metric_oracles},
      {"cross-domain degradation", [] { return recipe_verdict("cross_domain_baseline", accept_config()); }},
      {"normalization benefit", [] { return recipe_verdict("joint_normalization", accept_config()); }},
      {"bias-field correlation", [] { return recipe_verdict("bias_field", accept_config()); }},
      {"lambda sweep", [] { return recipe_verdict("lambda_sweep", accept_config()); }},
      {"reproducibility", reproducibility},
  };
  if (k < 1 || k > static_cast<int>(criteria.size())) {
    std::fprintf(stderr, "criterion must be 1..%zu\n", criteria.size());
    return 2;
  }
  Verdict v;
  try {
    v = criteria[static_cast<std::size_t>(k - 1)].second();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  std::printf("criterion %d (%s): %s | %s\n", k, criteria[static_cast<std::size_t>(k - 1)].first,
              v.pass ? "PASS" : "FAIL", v.detail.c_str());
  return v.pass ? 0 : 1;
}
