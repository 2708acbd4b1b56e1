#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advnorm/config.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/trainer.hpp"

#ifndef ADVNORM_CLI
#error "ADVNORM_CLI must name the advnorm executable"
#endif

using namespace advnorm;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    auto p = fs::temp_directory_path() / "advnorm_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    ::setenv(config::kOutputRootVar, p.c_str(), 1);
    return p;
  }();
  return r;
}

int run(const std::string& args) {
  (void)root();
  const std::string cmd = std::string(ADVNORM_CLI) + " " + args + " > " + (root() / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  int n = 0;
  for (std::string l; std::getline(in, l);) n += l.empty() ? 0 : 1;
  return n;
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
  const auto p = root() / (name + ".toml");
  std::ofstream out(p);
  out << "output_dir = \"" << name << "\"\n" << extra << R"(
[data]
subjects = 3
shape = 24
seed = 1
[model]
base = 2
depth = 1
d_widths = [2, 2, 3, 3]
[train]
patch = 16
m = 2
n_epochs = 1
n_iter = 2
train_patches = 4
val_patches = 2
seed = 5
[eval]
stride = 8
discriminator_patches = 2
[theory]
seeds = 2
steps = 200
)";
  return p;
}

}  // namespace

TEST_CASE("synth writes every volume and reruns byte-identically") {
  const auto cfg = write_config("data");
  REQUIRE(run("synth -c " + cfg.string()) == 0);
  const auto dir = root() / "data";
  CHECK(count_lines(dir / "manifest.csv") == 1 + 2 * 3);
  const auto first = slurp(dir / "images" / "d2_s001.nii");
  CHECK_FALSE(first.empty());
  REQUIRE(run("synth -c " + cfg.string() + " -o data2") == 0);
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "config.toml") continue;
    CHECK_MESSAGE(slurp(e.path()) == slurp(root() / "data2" / fs::relative(e.path(), dir)), e.path().string());
  }
  CHECK(run("synth -c " + cfg.string() + " -o /nonexistent/deeper/out") == 2);
}

TEST_CASE("config and path errors exit with code 2 before any work") {
  const auto bad = write_config("bad", "colour = \"red\"\n");
  CHECK(run("train -c " + bad.string()) == 2);
  CHECK_FALSE(fs::exists(root() / "bad"));
  CHECK(run("train -c " + (root() / "missing.toml").string()) == 2);
  const auto ok = write_config("paths");
  CHECK(run("train -c " + ok.string() + " --set train.lamda=1") == 2);
  CHECK(run("eval -c " + ok.string() + " --checkpoint " + (root() / "none.ckpt").string()) == 2);
  CHECK(run("train -c " + ok.string() + " --resume") == 2);
  CHECK(run("report --eval-dir " + (root() / "noeval").string() + " --out " + (root() / "r").string()) == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("train, resume, eval and report") {
  const auto cfg = write_config("run");
  REQUIRE(run("train -c " + cfg.string()) == 0);
  const auto dir = root() / "run";
  CHECK(count_lines(dir / "history.csv") == 2);
  CHECK(fs::exists(dir / "best.ckpt"));
  CHECK(fs::exists(dir / "last.ckpt"));
  const auto effective = config::load_config(dir / "config.toml");
  CHECK(effective.train.n_epochs == 1);
  CHECK(effective.output_dir == "run");

  REQUIRE(run("train -c " + cfg.string() + " --resume --epochs 2") == 0);
  const auto history = train::parse_history_csv(slurp(dir / "history.csv"));
  REQUIRE(history.size() == 2);
  CHECK(history[0].epoch == 1);
  CHECK(history[1].epoch == 2);
  CHECK(history[0].tag == "adversarial");
  CHECK(run("train -c " + cfg.string() + " --resume --epochs 3 --lambda 0.5") == 2);

  REQUIRE(run("eval -c " + cfg.string()) == 0);
  const auto reports = metrics::from_csv(slurp(dir / "eval" / "reports.csv"));
  REQUIRE(reports.size() == 3);
  const auto ev = nlohmann::json::parse(slurp(dir / "eval" / "eval.json"));
  metrics::MetricReport overall;
  metrics::from_json(ev["overall"], overall);
  CHECK(reports.back().mean_dsc == overall.mean_dsc);
  CHECK(reports.back().test_domain == 0);
  CHECK(fs::exists(dir / "eval" / "confusion.csv"));

  REQUIRE(run("eval -c " + cfg.string() + " --alpha 0 --out " + (dir / "eval_a0").string()) == 0);
  CHECK(slurp(dir / "eval_a0" / "reports.csv") == slurp(dir / "eval" / "reports.csv"));
  REQUIRE(run("eval -c " + cfg.string() + " --alpha 0.3 0.9 --out " + (dir / "eval_bias").string()) == 0);
  CHECK(fs::exists(dir / "eval_bias" / "alpha_0.9" / "eval.json"));
  REQUIRE(run("eval -c " + cfg.string() + " --baseline standardize --out " + (dir / "eval_std").string()) == 0);
  CHECK_FALSE(fs::exists(dir / "eval_std" / "confusion.csv"));
  CHECK(run("eval -c " + cfg.string() + " --baseline other") == 2);

  REQUIRE(run("report -c " + cfg.string()) == 0);
  const auto summary = slurp(dir / "report" / "summary.csv");
  REQUIRE(run("report -c " + cfg.string()) == 0);
  CHECK(slurp(dir / "report" / "summary.csv") == summary);
  const auto key = std::string("\nnormalized_jsd,");
  const auto at = summary.find(key);
  REQUIRE(at != std::string::npos);
  const double jsd = std::stod(summary.substr(at + key.size()));
  CHECK(jsd == ev["normalized_jsd"].get<double>());
  CHECK(fs::exists(dir / "report" / "histograms.ppm"));
  CHECK(fs::exists(dir / "report" / "profiles.ppm"));
  CHECK(fs::exists(dir / "report" / "confusion.pgm"));

  REQUIRE(run("report --eval-dir " + (dir / "eval_std").string() + " --out " + (dir / "report_std").string()) == 0);
  CHECK(slurp(dir / "report_std" / "warnings.txt").find("confusion.csv") != std::string::npos);
}

TEST_CASE("lambda zero is recorded as the pre-processor baseline") {
  const auto cfg = write_config("pre");
  REQUIRE(run("train -c " + cfg.string() + " --lambda 0") == 0);
  const auto history = train::parse_history_csv(slurp(root() / "pre" / "history.csv"));
  REQUIRE(history.size() == 1);
  CHECK(history[0].tag == "pre-processor");
}

TEST_CASE("theory certificates") {
  const auto cfg = write_config("th");
  REQUIRE(run("theory -c " + cfg.string() + " --init-at-mean --steps 50") == 0);
  auto summary = nlohmann::json::parse(slurp(root() / "th" / "theory" / "summary.json"));
  CHECK(summary["total"] == 2);
  CHECK(summary["passed"] == 2);
  const auto cert = nlohmann::json::parse(slurp(root() / "th" / "theory" / "seed_1.json"));
  CHECK(cert["K"] == 2);
  CHECK(cert["max_kl"].get<double>() < 1e-9);

  REQUIRE(run("theory -c " + cfg.string() + " --prior 0.3 0.7 -o th_prior") == 0);
  summary = nlohmann::json::parse(slurp(root() / "th_prior" / "theory" / "summary.json"));
  for (const auto& c : summary["certificates"]) CHECK(c["assertion_enabled"] == false);
  CHECK(run("theory -c " + cfg.string() + " --K 1") == 2);
}

TEST_CASE("recipe verdicts go to the results ledger") {
  const auto cfg = write_config("rec");
  REQUIRE(run("eval -c " + cfg.string() + " --recipe cross_domain_control") == 0);
  CHECK(count_lines(root() / "rec" / "recipes.jsonl") == 1);
  CHECK(fs::exists(root() / "rec" / "recipes" / "cross_domain_control" / "result.json"));
  CHECK(run("eval -c " + cfg.string() + " --recipe nonsense") == 2);
  CHECK(run("eval --list-recipes") == 0);
}
