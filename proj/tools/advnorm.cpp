#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "advnorm/config.hpp"
#include "advnorm/experiments.hpp"
#include "advnorm/report.hpp"
#include "advnorm/theory.hpp"
#include "advnorm/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advnorm;

namespace {

// Bad paths and missing inputs: exit code 2.
struct PathError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config,-c", c.config, "TOML config file");
  cmd->add_option("--set", c.sets, "override as section.key=value (value parsed as JSON, else taken as a string)");
  cmd->add_option("--output,-o", c.output, "output directory (overrides output_dir)");
  cmd->add_option("--seed", c.seed, "sets data, train and eval seeds");
}

json parse_value(const std::string& s) {
  try {
    return json::parse(s);
  } catch (const json::exception&) {
    return s;
  }
}

config::ExperimentConfig load(const Common& c, json extra = json::object()) {
  config::ExperimentConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw PathError("config file not found: " + c.config);
    cfg = config::load_config(c.config);
  }
  json patch = json::object();
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw config::ConfigError("--set expects key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq);
    json* node = &patch;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (dot == std::string::npos) {
        (*node)[part] = parse_value(s.substr(eq + 1));
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  if (c.output) patch["output_dir"] = *c.output;
  if (c.seed) {
    patch["data"]["seed"] = *c.seed;
    patch["train"]["seed"] = *c.seed;
    patch["eval"]["seed"] = *c.seed;
  }
  patch.merge_patch(extra);
  cfg = config::apply_patch(cfg, patch);
  cfg.validate();
  return cfg;
}

void require_parent(const fs::path& out) {
  const auto parent = fs::absolute(out).parent_path();
  if (!fs::is_directory(parent)) throw PathError("parent of output directory does not exist: " + parent.string());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

int cmd_synth(const Common& c) {
  auto cfg = load(c, {{"data", {{"manifest", ""}}}});
  const auto out = config::output_path(cfg);
  require_parent(out);
  const auto suite = config::build_suite(cfg);
  const auto manifest = config::write_suite(suite, out);
  write_text(out / "config.toml", config::to_toml(cfg));
  std::printf("wrote %zu subjects over %d domains to %s\n", suite.subjects.size(), suite.domains(),
              manifest.string().c_str());
  return 0;
}

int cmd_train(const Common& c, bool resume, std::optional<int> epochs, std::optional<double> lambda,
              std::optional<double> augment) {
  json extra = json::object();
  if (epochs) extra["train"]["n_epochs"] = *epochs;
  if (lambda) extra["train"]["lambda"] = *lambda;
  if (augment) extra["train"]["augment_probability"] = *augment;
  const auto cfg = load(c, extra);
  const auto dir = config::output_path(cfg);
  require_parent(dir);
  const auto suite = config::build_suite(cfg);
  std::unique_ptr<train::TrainState> state;
  if (resume) {
    if (!fs::exists(dir / "last.ckpt")) throw PathError("nothing to resume: " + (dir / "last.ckpt").string());
    state = train::from_checkpoint(read_checkpoint(dir / "last.ckpt"));
    json a, b;
    train::to_json(a, state->config);
    train::to_json(b, cfg.train);
    a.erase("n_epochs");
    b.erase("n_epochs");
    if (a != b) throw config::ConfigError("train section differs from the checkpoint being resumed");
    state->config.n_epochs = cfg.train.n_epochs;
    std::printf("resuming after epoch %d\n", state->epoch);
  } else {
    state = train::make_state(cfg.model_config(), cfg.train);
  }
  fs::create_directories(dir);
  write_text(dir / "config.toml", config::to_toml(cfg));
  train::TrainCallbacks cb;
  cb.on_epoch = [](const train::EpochRecord& r) {
    std::printf("epoch %d [%s] seg %.4f adv %.4f d_acc %.3f val_seg %.4f val_dsc %.4f\n", r.epoch, r.tag.c_str(),
                r.seg_loss, r.adv_loss, r.d_accuracy, r.val_seg_loss, r.val_dsc);
    std::fflush(stdout);
  };
  train::train(*state, suite, dir, cb);
  std::printf("best epoch %d (val seg loss %.6f); checkpoints in %s\n", state->best_epoch, state->best_val,
              dir.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::vector<double> alphas;
  std::string baseline = "model";
  std::string recipe;
  std::string out;
  int domain = 0;
  bool list = false;
  bool strict = false;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  if (a.list) {
    for (const auto& n : experiments::recipe_names())
      std::printf("%s: %s\n", n.c_str(), experiments::find_recipe(n).description.c_str());
    return 0;
  }
  const auto cfg = load(c);
  const auto root = config::output_path(cfg);
  if (!a.recipe.empty()) {
    try {
      (void)experiments::find_recipe(a.recipe);
    } catch (const std::invalid_argument& e) {
      throw config::ConfigError(e.what());
    }
    require_parent(root);
    const auto res = experiments::run_recipe(a.recipe, cfg, root / "recipes" / a.recipe);
    experiments::append_ledger(root / "recipes.jsonl", res);
    for (const auto& x : res.assertions)
      std::printf("%-40s %.6f %s %.6f (tol %g) %s\n", x.name.c_str(), x.lhs, x.op.c_str(), x.rhs, x.tol,
                  x.pass ? "PASS" : "FAIL");
    std::printf("recipe %s: %s in %.1f s\n", a.recipe.c_str(), res.pass ? "PASS" : "FAIL", res.seconds);
    return a.strict && !res.pass ? 1 : 0;
  }
  const fs::path ckpt = a.checkpoint.empty() ? root / "best.ckpt" : fs::path(a.checkpoint);
  if (!fs::exists(ckpt)) throw PathError("checkpoint not found: " + ckpt.string());
  auto state = train::from_checkpoint(read_checkpoint(ckpt));
  if (a.baseline == "no-normalization" || a.baseline == "standardize") {
    state->config.mode = train::Mode::SegmenterOnly;
    state->config.input = a.baseline == "standardize" ? train::InputTransform::Standardize : train::InputTransform::None;
  } else if (a.baseline != "model") {
    throw config::ConfigError("--baseline must be model, no-normalization or standardize");
  }
  const auto suite = config::build_suite(cfg);
  const auto subjects = suite.select(synth::parse_split(cfg.eval.split), a.domain);
  if (subjects.empty()) throw PathError("no subjects in split '" + cfg.eval.split + "'");
  const fs::path out = a.out.empty() ? root / "eval" : fs::path(a.out);
  require_parent(out);
  std::vector<double> alphas = a.alphas.empty() ? std::vector<double>{0.0} : a.alphas;
  for (double alpha : alphas) {
    auto opt = experiments::eval_options(cfg, alpha);
    opt.name = a.baseline == "model" ? state->config.run_tag() : a.baseline;
    opt.train_domain = state->config.domains.size() == 1 ? state->config.domains.front() : 0;
    const auto r = train::evaluate(state->nets, state->config, subjects, opt);
    char sub[32];
    std::snprintf(sub, sizeof sub, "alpha_%g", alpha);
    const fs::path dir = alphas.size() == 1 ? out : out / sub;
    report::write_eval_outputs(dir, r,
                               {{"checkpoint", ckpt.string()},
                                {"baseline", a.baseline},
                                {"bias_alpha", alpha},
                                {"split", cfg.eval.split},
                                {"domain", a.domain}});
    std::printf("alpha %g: mean DSC %.4f, JSD raw %.4f normalized %.4f, |rho| raw %.4f normalized %.4f -> %s\n",
                alpha, r.overall.mean_dsc, r.raw_jsd, r.normalized_jsd, std::abs(r.raw_pearson),
                std::abs(r.normalized_pearson), dir.string().c_str());
  }
  return 0;
}

struct TheoryArgs {
  std::optional<int> K, n, seeds, steps;
  std::optional<std::string> mode;
  bool init_at_mean = false;
  std::vector<double> prior;
};

int cmd_theory(const Common& c, const TheoryArgs& t) {
  json extra = json::object();
  if (t.K) extra["theory"]["K"] = *t.K;
  if (t.n) extra["theory"]["n"] = *t.n;
  if (t.seeds) extra["theory"]["seeds"] = *t.seeds;
  if (t.steps) extra["theory"]["steps"] = *t.steps;
  if (t.mode) extra["theory"]["mode"] = *t.mode;
  if (t.init_at_mean) extra["theory"]["init_at_mean"] = true;
  if (!t.prior.empty()) extra["theory"]["prior"] = t.prior;
  const auto cfg = load(c, extra);
  const auto& th = cfg.theory;
  const auto dir = config::output_path(cfg) / "theory";
  require_parent(dir.parent_path());
  fs::create_directories(dir);
  theory::CertifyOptions opt;
  opt.solve.mode = theory::parse_mode(th.mode);
  opt.solve.steps = th.steps;
  opt.solve.g_rate = th.g_rate;
  opt.solve.d_rate = th.d_rate;
  opt.solve.d_steps = th.d_steps;
  opt.solve.record_every = th.steps;
  opt.threshold = th.threshold;
  opt.init_at_mean = th.init_at_mean;
  opt.prior = th.prior;
  int passed = 0;
  bool all = true;
  json summary = json::array();
  for (int i = 0; i < th.seeds; ++i) {
    const std::uint64_t seed = th.first_seed + static_cast<std::uint64_t>(i);
    const auto cert = theory::certify(th.K, th.n, seed, opt);
    json j = cert;
    write_text(dir / ("seed_" + std::to_string(seed) + ".json"), j.dump(2) + "\n");
    summary.push_back({{"seed", seed}, {"max_kl", cert.max_kl}, {"pass", cert.pass},
                       {"assertion_enabled", cert.assertion_enabled}});
    passed += cert.pass ? 1 : 0;
    all = all && cert.pass;
    std::printf("seed %llu: max KL %.3e %s\n", static_cast<unsigned long long>(seed), cert.max_kl,
                cert.assertion_enabled ? (cert.pass ? "pass" : "FAIL") : "assertion disabled");
  }
  write_text(dir / "summary.json",
             json{{"K", th.K}, {"n", th.n}, {"mode", th.mode}, {"threshold", th.threshold}, {"passed", passed},
                  {"total", th.seeds}, {"pass", all}, {"certificates", summary}}
                     .dump(2) + "\n");
  std::printf("%d/%d certificates pass at %g\n", passed, th.seeds, th.threshold);
  return 0;
}

int cmd_report(const Common& c, const std::string& eval_dir, const std::string& out_dir) {
  fs::path in = eval_dir, out = out_dir;
  if (in.empty() || out.empty()) {
    const auto cfg = load(c);
    if (in.empty()) in = config::output_path(cfg) / "eval";
    if (out.empty()) out = config::output_path(cfg) / "report";
  }
  if (!fs::is_directory(in)) throw PathError("eval directory not found: " + in.string());
  const auto res = report::make_report(in, out);
  for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("wrote %zu files to %s%s\n", res.files.size(), out.string().c_str(),
              res.warnings.empty() ? "" : " (partial)");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advnorm: task-driven adversarial intensity normalization on synthetic MRI"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "generate the synthetic multi-domain suite and its manifest");
  add_common(synth, common);

  auto* train_cmd = app.add_subcommand("train", "train generator, segmenter and discriminator");
  add_common(train_cmd, common);
  bool resume = false;
  std::optional<int> epochs;
  std::optional<double> lambda, augment;
  train_cmd->add_flag("--resume", resume, "continue from last.ckpt in the output directory");
  train_cmd->add_option("--epochs", epochs, "train.n_epochs");
  train_cmd->add_option("--lambda", lambda, "train.lambda");
  train_cmd->add_option("--augment-prob", augment, "train.augment_probability");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or run a recipe");
  add_common(eval, common);
  EvalArgs ea;
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file (default <output>/best.ckpt)");
  eval->add_option("--alpha,--bias-alpha", ea.alphas, "test-time bias field strength(s)");
  eval->add_option("--baseline", ea.baseline, "model | no-normalization | standardize");
  eval->add_option("--recipe", ea.recipe, "run a named experiment recipe");
  eval->add_option("--out", ea.out, "eval output directory (default <output>/eval)");
  eval->add_option("--domain", ea.domain, "test domain, 0 = all");
  eval->add_flag("--list-recipes", ea.list, "list recipe names");
  eval->add_flag("--strict", ea.strict, "exit 1 when a recipe verdict fails");

  auto* th = app.add_subcommand("theory", "certify the tabular minimax fixed point");
  add_common(th, common);
  TheoryArgs ta;
  th->add_option("--K", ta.K, "number of domains");
  th->add_option("--n", ta.n, "number of atoms");
  th->add_option("--seeds", ta.seeds, "number of random instances");
  th->add_option("--steps", ta.steps, "solver steps");
  th->add_option("--mode", ta.mode, "best_response_d | exact_best_response_d | alternating");
  th->add_flag("--init-at-mean", ta.init_at_mean, "start the generator at the mean real distribution");
  th->add_option("--prior", ta.prior, "domain prior p(z)");

  auto* rep = app.add_subcommand("report", "plots and summary table from eval outputs");
  add_common(rep, common);
  std::string eval_dir, report_dir;
  rep->add_option("--eval-dir", eval_dir, "eval output directory (default <output>/eval)");
  rep->add_option("--out", report_dir, "report directory (default <output>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(common);
    if (train_cmd->parsed()) return cmd_train(common, resume, epochs, lambda, augment);
    if (eval->parsed()) return cmd_eval(common, ea);
    if (th->parsed()) return cmd_theory(common, ta);
    if (rep->parsed()) return cmd_report(common, eval_dir, report_dir);
  } catch (const config::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const PathError& e) {
    std::fprintf(stderr, "path error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
