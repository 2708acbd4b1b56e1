#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "advnorm/config.hpp"
#include "advnorm/trainer.hpp"

namespace advnorm::experiments {

/// lhs op rhs with slack: "<=" passes when lhs <= rhs + tol, ">=" when lhs >= rhs - tol,
/// "<" and ">" are strict and ignore tol.
struct Assertion {
  std::string name;
  double lhs = 0.0;
  std::string op;
  double rhs = 0.0;
  double tol = 0.0;
  bool pass = false;
};

Assertion check(std::string name, double lhs, std::string op, double rhs, double tol = 0.0);

struct RecipeResult {
  std::string recipe;
  std::vector<Assertion> assertions;
  bool pass = false;
  nlohmann::json details;
  double seconds = 0.0;
  std::vector<std::filesystem::path> runs;  // one directory per training run
};

void to_json(nlohmann::json& j, const Assertion& a);
void to_json(nlohmann::json& j, const RecipeResult& r);

struct Recipe {
  std::string name;
  std::string description;
  nlohmann::json deltas;  // merge patch over the base config
  std::function<RecipeResult(const config::ExperimentConfig& cfg, const std::filesystem::path& out_dir)> run;
};

std::vector<std::string> recipe_names();
/// Throws std::invalid_argument for an unknown name.
Recipe find_recipe(const std::string& name);

/// Applies the recipe deltas to base, validates, runs and times it.
RecipeResult run_recipe(const std::string& name, const config::ExperimentConfig& base,
                        const std::filesystem::path& out_dir);

/// Appends one JSON line per result.
void append_ledger(const std::filesystem::path& ledger, const RecipeResult& r);

// Building blocks shared by the recipes and the CLI.

/// Trains one model; writes checkpoints, history.csv and config.toml into dir.
std::unique_ptr<train::TrainState> train_run(const config::ExperimentConfig& cfg, const synth::DomainSuite& suite,
                                             const std::filesystem::path& dir);

train::EvalOptions eval_options(const config::ExperimentConfig& cfg, double bias_alpha = 0.0);

/// Evaluates on the configured split of one domain, or all domains when domain = 0.
train::EvalResult evaluate_split(train::TrainState& state, const config::ExperimentConfig& cfg,
                                 const synth::DomainSuite& suite, int domain, double bias_alpha = 0.0);

/// Row K+1 of a confusion matrix restricted to the domain columns and renormalised,
/// compared with the uniform distribution over K domains by total variation. 1 when the row has no mass there.
double generated_row_tv(const std::vector<std::vector<double>>& confusion);

}  // namespace advnorm::experiments
