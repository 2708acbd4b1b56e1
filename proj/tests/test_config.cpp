#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advnorm/config.hpp"

using namespace advnorm;
using namespace advnorm::config;
namespace fs = std::filesystem;

namespace {

nlohmann::json as_json(const ExperimentConfig& c) {
  nlohmann::json j;
  to_json(j, c);
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("advnorm_test_config_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig small() {
  return parse_toml(R"(
output_dir = "small"
[data]
profiles = ["adult", "shifted"]
subjects = 3
shape = 24
seed = 4
[model]
base = 2
depth = 1
[train]
patch = 16
)");
}

}  // namespace

TEST_CASE("defaults validate and describe the desk-scale model") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  const auto m = c.model_config();
  CHECK(m.generator.base_features == 8);
  CHECK(m.generator.depth == 3);
  CHECK(m.discriminator.domains == 2);
  CHECK(m.discriminator.input_size == 32);
  CHECK(c.profiles().size() == 2);
  CHECK(c.profiles()[1].domain == 2);
  CHECK(c.profiles()[0].channels() == 1);
}

TEST_CASE("TOML sections map onto the config") {
  const auto c = parse_toml(R"(
output_dir = "runs/a"
[data]
profiles = ["adult", "infant", "shifted"]
subjects = 6
[train]
mode = "segmenter-only"
lambda = 2
milestones = [3, 4]
dice_weights = [0.25, 0.25, 0.25, 0.25]
[theory]
K = 3
prior = [0.2, 0.3, 0.5]
)");
  CHECK(c.output_dir == "runs/a");
  CHECK(c.data.domains() == 3);
  CHECK(c.data.subjects == 6);
  CHECK(c.train.mode == train::Mode::SegmenterOnly);
  CHECK(c.train.lambda == 2.0);
  CHECK(c.train.milestones == std::vector<int>{3, 4});
  CHECK(c.theory.prior.size() == 3);
  CHECK(c.model.base == 8);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("unknown keys and bad values are config errors") {
  CHECK_THROWS_AS(parse_toml("outputdir = \"x\""), ConfigError);
  CHECK_THROWS_AS(parse_toml("[data]\nsubject = 3"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[train]\nlamda = 1.0"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[model]\nbase = \"eight\""), ConfigError);
  CHECK_THROWS_AS(parse_toml("[train]\nmode = \"gan\""), ConfigError);
  CHECK_THROWS_AS(parse_toml("[data\nsubjects = 3"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[extra]\nx = 1"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/advnorm.toml"), ConfigError);
}

TEST_CASE("validation rejects inconsistent settings") {
  auto bad = [](const char* text) {
    const auto c = parse_toml(text);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad("[data]\nprofiles = [\"adult\"]");
  bad("[data]\nprofiles = [\"adult\", \"alien\"]");
  bad("[data]\nchannels = 3");
  bad("[data]\nsecond_channel = \"t2\"");
  bad("[data]\nsubjects = 10\ntrain = 5\nval = 2\ntest = 2");
  bad("[data]\nshape = 24\n[train]\npatch = 32");
  bad("[train]\npatch = 20");
  bad("[train]\nlambda = -1.0");
  bad("[train]\ndomains = [3]");
  bad("[eval]\nalphas = [1.5]");
  bad("[eval]\nsplit = \"holdout\"");
  bad("[theory]\nK = 1");
  bad("[theory]\nK = 2\nprior = [1.0]");
  bad("[theory]\nmode = \"newton\"");
}

TEST_CASE("effective config round-trips through TOML") {
  auto c = parse_toml(R"(
output_dir = "rt"
[data]
profiles = ["adult", "shifted"]
channels = 2
second_channel = "noise"
deformation = 0.05
[train]
lambda = 5
lr_gs = 0.001
dice_epsilon = 1e-7
domains = [1]
[eval]
alphas = [0.1, 1]
[theory]
init_at_mean = true
prior = [0.5, 0.5]
)");
  c.train.seed = 123456789012345ULL;
  const std::string text = to_toml(c);
  const auto back = parse_toml(text);
  CHECK(as_json(back) == as_json(c));
  CHECK(to_toml(back) == text);
  CHECK(to_toml(ExperimentConfig{}) == to_toml(parse_toml(to_toml(ExperimentConfig{}))));
}

TEST_CASE("merge patches override single fields") {
  const ExperimentConfig base;
  const auto c = apply_patch(base, {{"train", {{"lambda", 0.1}}}, {"data", {{"profiles", {"adult", "adult"}}}}});
  CHECK(c.train.lambda == 0.1);
  CHECK(c.data.profiles[1] == "adult");
  CHECK(c.train.lr_gs == base.train.lr_gs);
  CHECK_THROWS_AS(apply_patch(base, {{"train", {{"nope", 1}}}}), ConfigError);
}

TEST_CASE("output root variable applies to relative output dirs") {
  ExperimentConfig c;
  c.output_dir = "runs/x";
  ::unsetenv(kOutputRootVar);
  CHECK(output_path(c) == fs::path("runs/x"));
  ::setenv(kOutputRootVar, "/tmp/root", 1);
  CHECK(output_path(c) == fs::path("/tmp/root/runs/x"));
  c.output_dir = "/abs/y";
  CHECK(output_path(c) == fs::path("/abs/y"));
  ::unsetenv(kOutputRootVar);
}

TEST_CASE("profiles follow the channel settings") {
  auto c = small();
  c.data.channels = 2;
  auto p = c.profiles();
  REQUIRE(p[0].mean2.has_value());
  CHECK((*p[0].mean2)[3] == synth::adult_profile(1).mean2.value()[3]);
  c.data.second_channel = "noise";
  p = c.profiles();
  REQUIRE(p[0].mean2.has_value());
  CHECK((*p[0].mean2)[1] == (*p[0].mean2)[2]);
  CHECK((*p[0].mean2)[2] == (*p[0].mean2)[3]);
  CHECK((*p[1].mean2)[1] == (*p[0].mean2)[1]);
}

TEST_CASE("suite generation, manifest round trip and byte-identical reruns") {
  auto c = small();
  c.validate();
  const auto suite = build_suite(c);
  CHECK(suite.subjects.size() == 6);
  const auto a = scratch("a"), b = scratch("b");
  const auto ma = write_suite(suite, a);
  write_suite(build_suite(c), b);
  CHECK(slurp(ma).find("domain,index,split,profile,image,labels\n") == 0);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    CHECK_MESSAGE(slurp(e.path()) == slurp(b / rel), rel.string());
  }
  std::size_t rows = 0;
  std::istringstream lines(slurp(ma));
  for (std::string l; std::getline(lines, l);) rows += l.empty() ? 0 : 1;
  CHECK(rows == 7);

  const auto back = read_suite(ma);
  REQUIRE(back.subjects.size() == suite.subjects.size());
  CHECK(back.domains() == 2);
  CHECK(back.profiles[1].name == "shifted");
  for (std::size_t i = 0; i < back.subjects.size(); ++i) {
    CHECK(back.subjects[i].domain == suite.subjects[i].domain);
    CHECK(back.subjects[i].split == suite.subjects[i].split);
    CHECK(back.subjects[i].volume.image.data() == suite.subjects[i].volume.image.data());
    CHECK(back.subjects[i].volume.labels.data() == suite.subjects[i].volume.labels.data());
  }

  auto m = c;
  m.data.manifest = ma.string();
  CHECK(build_suite(m).subjects.size() == 6);
  m.data.channels = 2;
  CHECK_THROWS_AS(build_suite(m), ConfigError);
  m.data.channels = 1;
  m.data.profiles = {"adult", "shifted", "infant"};
  CHECK_THROWS_AS(build_suite(m), ConfigError);
  CHECK_THROWS_AS(read_suite(a / "missing.csv"), ConfigError);
}

TEST_CASE("explicit split counts are honoured") {
  auto c = small();
  c.data.subjects = 5;
  c.data.train = 3;
  c.data.val = 1;
  c.data.test = 1;
  c.validate();
  const auto s = build_suite(c);
  CHECK(s.select(synth::Split::Train, 1).size() == 3);
  CHECK(s.select(synth::Split::Test, 2).size() == 1);
}
