#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advnorm/synth.hpp"
#include "advnorm/theory.hpp"
#include "advnorm/trainer.hpp"

namespace advnorm::config {

/// Bad key, bad value or unreadable config file.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::vector<std::string> profiles{"adult", "shifted"};  // preset names, domain z = position + 1
  int subjects = 10;                                      // per domain
  int shape = 48;
  int shells = 3;
  double deformation = 0.08;
  std::uint64_t seed = 0;
  int channels = 1;
  std::string second_channel = "preset";  // "preset" or "noise"
  int train = 0;                          // split counts; all zero = default split
  int val = 0;
  int test = 0;
  std::string manifest;  // load subjects from a synth manifest instead of generating them

  int domains() const { return static_cast<int>(profiles.size()); }
};

struct ModelSection {
  int base = 8;
  int depth = 3;
  std::vector<int> d_widths{16, 32, 64, 128};
  double dropout = 0.3;
  double leaky_slope = 0.2;
};

struct EvalConfig {
  int stride = 8;
  int batch = 4;
  std::vector<double> alphas{0.3, 0.5, 0.7, 0.9};
  int discriminator_patches = 8;
  int bins = 256;
  std::uint64_t seed = 0;
  std::string split = "test";
};

struct TheoryConfig {
  int K = 2;
  int n = 4;
  int seeds = 10;
  std::uint64_t first_seed = 1;
  std::string mode = "best_response_d";
  int steps = 5000;
  double g_rate = 1.0;
  double d_rate = 1.0;
  int d_steps = 3;
  double threshold = 1e-3;
  bool init_at_mean = false;
  std::vector<double> prior;
};

struct ExperimentConfig {
  std::string output_dir = "run";
  DataConfig data;
  ModelSection model;
  train::TrainConfig train;
  EvalConfig eval;
  TheoryConfig theory;

  /// Throws ConfigError.
  void validate() const;
  train::ModelConfig model_config() const;
  std::vector<synth::DomainProfile> profiles() const;
  synth::PhantomSpec phantom() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Strict: unknown keys anywhere raise ConfigError. Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig parse_toml(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field with defaults applied; parse_toml(to_toml(c)) reproduces c.
std::string to_toml(const ExperimentConfig& c);

/// Applies a JSON merge patch to the config's JSON form.
ExperimentConfig apply_patch(const ExperimentConfig& base, const nlohmann::json& patch);

inline constexpr const char* kOutputRootVar = "ADVNORM_OUTPUT_ROOT";

/// output_dir, resolved against $ADVNORM_OUTPUT_ROOT when it is relative and the variable is set.
std::filesystem::path output_path(const ExperimentConfig& c);

/// Generates the synthetic suite, or loads it from data.manifest.
synth::DomainSuite build_suite(const ExperimentConfig& c);

/// Writes images, labels and manifest.csv under dir; returns the manifest path.
std::filesystem::path write_suite(const synth::DomainSuite& suite, const std::filesystem::path& dir);
synth::DomainSuite read_suite(const std::filesystem::path& manifest);

}  // namespace advnorm::config
