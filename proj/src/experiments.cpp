#include "advnorm/experiments.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace advnorm::experiments {

namespace fs = std::filesystem;
using nlohmann::json;

Assertion check(std::string name, double lhs, std::string op, double rhs, double tol) {
  Assertion a{std::move(name), lhs, std::move(op), rhs, tol, false};
  if (a.op == "<=") {
    a.pass = lhs <= rhs + tol;
  } else if (a.op == ">=") {
    a.pass = lhs >= rhs - tol;
  } else if (a.op == "<") {
    a.pass = lhs < rhs;
  } else if (a.op == ">") {
    a.pass = lhs > rhs;
  } else {
    throw std::invalid_argument("unknown comparison '" + a.op + "'");
  }
  if (!std::isfinite(lhs) || !std::isfinite(rhs)) a.pass = false;
  return a;
}

void to_json(json& j, const Assertion& a) {
  j = {{"name", a.name}, {"lhs", a.lhs}, {"op", a.op}, {"rhs", a.rhs}, {"tol", a.tol}, {"pass", a.pass}};
}

void to_json(json& j, const RecipeResult& r) {
  std::vector<std::string> runs;
  for (const auto& p : r.runs) runs.push_back(p.string());
  j = {{"recipe", r.recipe}, {"pass", r.pass},     {"assertions", r.assertions},
       {"details", r.details}, {"seconds", r.seconds}, {"runs", runs}};
}

std::unique_ptr<train::TrainState> train_run(const config::ExperimentConfig& cfg, const synth::DomainSuite& suite,
                                             const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "config.toml", std::ios::binary);
    out << config::to_toml(cfg);
  }
  auto state = train::make_state(cfg.model_config(), cfg.train);
  train::train(*state, suite, dir);
  return state;
}

train::EvalOptions eval_options(const config::ExperimentConfig& cfg, double bias_alpha) {
  train::EvalOptions o;
  o.stride = cfg.eval.stride;
  o.batch = cfg.eval.batch;
  o.bias_alpha = bias_alpha;
  o.discriminator_patches = cfg.eval.discriminator_patches;
  o.histogram_bins = cfg.eval.bins;
  o.seed = cfg.eval.seed;
  o.name = cfg.train.run_tag();
  o.train_domain = cfg.train.domains.size() == 1 ? cfg.train.domains.front() : 0;
  return o;
}

train::EvalResult evaluate_split(train::TrainState& state, const config::ExperimentConfig& cfg,
                                 const synth::DomainSuite& suite, int domain, double bias_alpha) {
  const auto subjects = suite.select(synth::parse_split(cfg.eval.split), domain);
  return train::evaluate(state.nets, state.config, subjects, eval_options(cfg, bias_alpha));
}

double generated_row_tv(const std::vector<std::vector<double>>& confusion) {
  if (confusion.size() < 3) return 1.0;
  const std::size_t k = confusion.size() - 1;
  const auto& row = confusion[k];
  double mass = 0.0;
  for (std::size_t z = 0; z < k; ++z) mass += row[z];
  if (mass <= 0.0) return 1.0;
  double tv = 0.0;
  for (std::size_t z = 0; z < k; ++z) tv += std::abs(row[z] / mass - 1.0 / static_cast<double>(k));
  return 0.5 * tv;
}

namespace {

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

json report_json(const metrics::MetricReport& r) {
  json j;
  metrics::to_json(j, r);
  return j;
}

config::ExperimentConfig with(config::ExperimentConfig cfg, const json& patch) {
  return config::apply_patch(cfg, patch);
}

struct Grid {
  std::vector<std::vector<double>> dsc;  // [train domain][test domain]
  double in_domain = 0.0;
  double cross_domain = 0.0;
  json reports = json::array();
};

// Segmenter-only models, one per training domain; diagonal_only skips the off-diagonal evaluations.
Grid domain_grid(const config::ExperimentConfig& cfg, const synth::DomainSuite& suite, const fs::path& out,
                 RecipeResult& res, bool diagonal_only) {
  const int K = suite.domains();
  Grid g;
  g.dsc.assign(static_cast<std::size_t>(K), std::vector<double>(static_cast<std::size_t>(K), NAN));
  std::vector<double> diag, off;
  for (int z = 1; z <= K; ++z) {
    auto c = with(cfg, {{"train", {{"mode", "segmenter-only"}, {"input", "none"}, {"domains", {z}}}}});
    const auto dir = out / ("segmenter_d" + std::to_string(z));
    auto state = train_run(c, suite, dir);
    res.runs.push_back(dir);
    for (int w = 1; w <= K; ++w) {
      if (diagonal_only && w != z) continue;
      const auto r = evaluate_split(*state, c, suite, w);
      const double d = r.overall.mean_dsc;
      g.dsc[static_cast<std::size_t>(z - 1)][static_cast<std::size_t>(w - 1)] = d;
      (w == z ? diag : off).push_back(d);
      g.reports.push_back(report_json(r.overall));
    }
  }
  g.in_domain = mean(diag);
  g.cross_domain = off.empty() ? NAN : mean(off);
  return g;
}

json grid_json(const Grid& g) {
  json rows = json::array();
  for (const auto& r : g.dsc) {
    json row = json::array();
    for (double v : r) row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    rows.push_back(row);
  }
  return {{"dsc", rows}, {"in_domain", g.in_domain},
          {"cross_domain", std::isfinite(g.cross_domain) ? json(g.cross_domain) : json(nullptr)},
          {"reports", g.reports}};
}

struct JointRun {
  train::EvalResult eval;
  double train_d_accuracy = 0.0;
  fs::path dir;
};

JointRun joint_run(const config::ExperimentConfig& cfg, const synth::DomainSuite& suite, const fs::path& dir,
                   RecipeResult& res, double bias_alpha = 0.0) {
  auto c = with(cfg, {{"train", {{"domains", json::array()}}}});
  auto state = train_run(c, suite, dir);
  res.runs.push_back(dir);
  JointRun j;
  j.eval = evaluate_split(*state, c, suite, 0, bias_alpha);
  j.train_d_accuracy = state->history.empty() ? 0.0 : state->history.back().d_accuracy;
  j.dir = dir;
  return j;
}

json joint_json(const JointRun& j) {
  json domains = json::array();
  for (const auto& d : j.eval.domains) domains.push_back(report_json(d.report));
  return {{"mean_dsc", j.eval.overall.mean_dsc},
          {"raw_jsd", j.eval.raw_jsd},
          {"normalized_jsd", j.eval.normalized_jsd},
          {"train_d_accuracy", j.train_d_accuracy},
          {"eval_d_accuracy", j.eval.overall.discriminator_accuracy},
          {"confusion", j.eval.overall.confusion},
          {"domains", domains}};
}

RecipeResult cross_domain(const config::ExperimentConfig& cfg, const fs::path& out, bool control) {
  RecipeResult res;
  const auto suite = config::build_suite(cfg);
  const auto g = domain_grid(cfg, suite, out, res, false);
  res.details["grid"] = grid_json(g);
  if (control) {
    res.assertions.push_back(check("in_minus_cross_abs", std::abs(g.in_domain - g.cross_domain), "<=", 0.05));
  } else {
    res.assertions.push_back(check("cross_domain_dsc", g.cross_domain, "<=", g.in_domain - 0.20));
  }
  return res;
}

RecipeResult joint_normalization(const config::ExperimentConfig& cfg, const fs::path& out) {
  RecipeResult res;
  const auto suite = config::build_suite(cfg);
  const auto g = domain_grid(cfg, suite, out, res, true);
  const auto adv = joint_run(with(cfg, {{"train", {{"mode", "adversarial"}, {"input", "none"}}}}), suite,
                             out / "adversarial", res);
  const auto std_run = joint_run(with(cfg, {{"train", {{"mode", "segmenter-only"}, {"input", "standardize"}}}}),
                                 suite, out / "standardize", res);
  res.details = {{"grid", grid_json(g)}, {"adversarial", joint_json(adv)}, {"standardize", joint_json(std_run)}};
  const double a = adv.eval.overall.mean_dsc;
  res.assertions.push_back(check("adversarial_vs_in_domain", a, ">=", g.in_domain - 0.05));
  res.assertions.push_back(check("adversarial_vs_standardize", a, ">=", std_run.eval.overall.mean_dsc));
  res.assertions.push_back(check("normalized_jsd", adv.eval.normalized_jsd, "<=", 0.5 * adv.eval.raw_jsd));
  return res;
}

RecipeResult lambda_sweep(const config::ExperimentConfig& cfg, const fs::path& out) {
  RecipeResult res;
  const auto suite = config::build_suite(cfg);
  const std::vector<double> lambdas{0.1, 1.5, 5.0};
  std::vector<double> dsc, acc, tv;
  json runs = json::array();
  for (double l : lambdas) {
    char name[32];
    std::snprintf(name, sizeof name, "lambda_%g", l);
    const auto r = joint_run(with(cfg, {{"train", {{"mode", "adversarial"}, {"lambda", l}}}}), suite, out / name, res);
    dsc.push_back(r.eval.overall.mean_dsc);
    acc.push_back(r.train_d_accuracy);
    tv.push_back(generated_row_tv(r.eval.overall.confusion));
    auto j = joint_json(r);
    j["lambda"] = l;
    j["generated_row_tv"] = tv.back();
    runs.push_back(j);
  }
  res.details["runs"] = runs;
  for (std::size_t i = 0; i + 1 < lambdas.size(); ++i) {
    char a[64], b[64];
    std::snprintf(a, sizeof a, "dsc_lambda_%g_vs_%g", lambdas[i + 1], lambdas[i]);
    std::snprintf(b, sizeof b, "d_accuracy_lambda_%g_vs_%g", lambdas[i + 1], lambdas[i]);
    res.assertions.push_back(check(a, dsc[i + 1], "<=", dsc[i], 0.01));
    res.assertions.push_back(check(b, acc[i + 1], "<", acc[i]));
  }
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (lambdas[i] < 1.5) continue;
    char a[64];
    std::snprintf(a, sizeof a, "generated_row_tv_lambda_%g", lambdas[i]);
    res.assertions.push_back(check(a, tv[i], "<", 0.25));
  }
  return res;
}

RecipeResult bias_field(const config::ExperimentConfig& cfg, const fs::path& out) {
  RecipeResult res;
  const auto suite = config::build_suite(cfg);
  const auto c = with(cfg, {{"train", {{"domains", json::array()}}}});
  auto state = train_run(c, suite, out / "adversarial");
  res.runs.push_back(out / "adversarial");
  json rows = json::array();
  std::vector<double> alphas{0.0};
  alphas.insert(alphas.end(), cfg.eval.alphas.begin(), cfg.eval.alphas.end());
  for (double a : alphas) {
    const auto r = evaluate_split(*state, c, suite, 0, a);
    rows.push_back({{"alpha", a},
                    {"raw_pearson", r.raw_pearson},
                    {"normalized_pearson", r.normalized_pearson},
                    {"mean_dsc", r.overall.mean_dsc}});
    if (a <= 0.0) continue;
    char name[48];
    std::snprintf(name, sizeof name, "abs_pearson_alpha_%g", a);
    res.assertions.push_back(check(name, std::abs(r.normalized_pearson), "<", std::abs(r.raw_pearson)));
  }
  res.details["alphas"] = rows;
  return res;
}

RecipeResult multichannel(const config::ExperimentConfig& cfg, const fs::path& out) {
  RecipeResult res;
  auto run = [&](const json& data, const std::string& name) {
    const auto c = with(cfg, {{"data", data}});
    const auto suite = config::build_suite(c);
    return joint_run(c, suite, out / name, res);
  };
  const auto one = run({{"channels", 1}}, "t1");
  const auto two = run({{"channels", 2}, {"second_channel", "preset"}}, "t1_t2");
  const auto noise = run({{"channels", 2}, {"second_channel", "noise"}}, "t1_noise");
  res.details = {{"one_channel", joint_json(one)}, {"two_channel", joint_json(two)}, {"noise_channel", joint_json(noise)}};
  const double d1 = one.eval.overall.mean_dsc;
  res.assertions.push_back(check("two_channel_gain", two.eval.overall.mean_dsc - d1, ">=", 0.01));
  res.assertions.push_back(check("noise_channel_gain_abs", std::abs(noise.eval.overall.mean_dsc - d1), "<", 0.02));
  return res;
}

std::vector<Recipe> all_recipes() {
  return {
      {"cross_domain_baseline", "segmenter-only per domain on a severe-shift pair; cross-domain DSC drops by 0.20",
       {{"data", {{"profiles", {"adult", "shifted"}}, {"channels", 1}}}, {"train", {{"mode", "segmenter-only"}}}},
       [](const auto& c, const auto& o) { return cross_domain(c, o, false); }},
      {"cross_domain_control", "segmenter-only per domain on two identical profiles; no degradation",
       {{"data", {{"profiles", {"adult", "adult"}}, {"channels", 1}}}, {"train", {{"mode", "segmenter-only"}}}},
       [](const auto& c, const auto& o) { return cross_domain(c, o, true); }},
      {"joint_normalization", "adversarial normalization over two domains vs in-domain and standardization",
       {{"data", {{"profiles", {"adult", "shifted"}}, {"channels", 1}}}, {"train", {{"mode", "adversarial"}}}},
       joint_normalization},
      {"joint_normalization_k3", "adversarial normalization over three domains vs in-domain and standardization",
       {{"data", {{"profiles", {"adult", "shifted", "infant"}}, {"channels", 1}}},
        {"train", {{"mode", "adversarial"}}}},
       joint_normalization},
      {"lambda_sweep", "adversarial runs at lambda 0.1, 1.5, 5.0",
       {{"data", {{"profiles", {"adult", "shifted"}}, {"channels", 1}}}, {"train", {{"mode", "adversarial"}}}},
       lambda_sweep},
      {"bias_field", "adversarial run trained with bias augmentation, evaluated under fixed bias strengths",
       {{"data", {{"profiles", {"adult", "shifted"}}, {"channels", 1}}},
        {"train", {{"mode", "adversarial"}, {"augment_probability", 0.5}}}},
       bias_field},
      {"multichannel", "one channel vs two channels vs a pure-noise second channel",
       {{"data", {{"profiles", {"adult", "shifted"}}}}, {"train", {{"mode", "adversarial"}}}}, multichannel},
  };
}

}  // namespace

std::vector<std::string> recipe_names() {
  std::vector<std::string> out;
  for (const auto& r : all_recipes()) out.push_back(r.name);
  return out;
}

Recipe find_recipe(const std::string& name) {
  for (auto& r : all_recipes())
    if (r.name == name) return r;
  throw std::invalid_argument("unknown recipe '" + name + "'");
}

RecipeResult run_recipe(const std::string& name, const config::ExperimentConfig& base, const fs::path& out_dir) {
  const auto recipe = find_recipe(name);
  auto cfg = config::apply_patch(base, recipe.deltas);
  cfg.validate();
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "config.toml", std::ios::binary);
    out << config::to_toml(cfg);
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto res = recipe.run(cfg, out_dir);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.recipe = name;
  res.pass = !res.assertions.empty();
  for (const auto& a : res.assertions) res.pass = res.pass && a.pass;
  std::ofstream out(out_dir / "result.json", std::ios::binary);
  out << json(res).dump(2) << "\n";
  return res;
}

void append_ledger(const fs::path& ledger, const RecipeResult& r) {
  if (ledger.has_parent_path()) fs::create_directories(ledger.parent_path());
  std::ofstream out(ledger, std::ios::binary | std::ios::app);
  out << json(r).dump() << "\n";
  if (!out) throw std::runtime_error("cannot append to " + ledger.string());
}

}  // namespace advnorm::experiments
