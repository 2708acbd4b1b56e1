#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnorm/losses.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/nets.hpp"
#include "advnorm/patch.hpp"
#include "advnorm/synth.hpp"

namespace advnorm::train {

using Real = float;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with decoupled weight decay: θ ← θ - lr·(m̂/(√v̂ + ε) + wd·θ).
template <typename T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
  };

  Adam() = default;
  Adam(std::vector<nn::Parameter<T>*> params, Options opt);

  /// Throws NonFiniteError naming the first parameter with a non-finite gradient; nothing is updated then.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return t_; }
  const Options& options() const { return opt_; }

  void store(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  std::vector<nn::Parameter<T>*> params_;
  std::vector<nn::Tensor<T>> m_, v_;
  Options opt_;
  std::int64_t t_ = 0;
};

/// base·gamma^(number of milestones strictly below the 1-based epoch).
double multistep_rate(double base, int epoch, std::span<const int> milestones, double gamma = 0.1);

/// Reduce-on-plateau: after more than `patience` epochs without improvement the rate is multiplied by `factor`.
class PlateauSchedule {
 public:
  PlateauSchedule() = default;
  PlateauSchedule(double base, double factor, int patience);

  /// Feeds one epoch's monitored loss and returns the rate for the next epoch.
  double observe(double loss);
  double rate() const { return rate_; }
  double best() const { return best_; }
  int stale() const { return stale_; }

  /// Rate after replaying a whole loss history from the base rate.
  static double replay(double base, double factor, int patience, std::span<const double> losses);

  nlohmann::json to_json() const;
  void from_json(const nlohmann::json& j);

 private:
  double rate_ = 0.0;
  double factor_ = 0.1;
  int patience_ = 7;
  double best_ = 0.0;
  bool seen_ = false;
  int stale_ = 0;
};

enum class Mode {
  Adversarial,    // G, S and D with weight λ
  Preprocessor,   // G and S on the Dice loss only
  SegmenterOnly,  // S on the (optionally standardized) image
};

enum class InputTransform { None, Standardize };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& s);
const char* transform_name(InputTransform t);
InputTransform parse_transform(const std::string& s);

struct TrainConfig {
  Mode mode = Mode::Adversarial;
  InputTransform input = InputTransform::None;
  int m = 4;
  int n_epochs = 100;
  int n_iter = 0;  // 0 = ⌈patches per epoch / (m·n_steps)⌉
  int n_steps = 3;
  double lambda = 1.5;
  double lr_gs = 1e-3;
  double lr_d = 1e-4;
  double weight_decay = 1e-3;
  std::vector<int> milestones{50, 75};
  double gamma = 0.1;
  double plateau_factor = 0.1;
  int patience = 7;
  double augment_probability = 0.5;
  int augment_axis = 1;
  int patch = 32;
  int train_patches = 2000;  // per domain
  int val_patches = 500;     // per domain
  std::vector<int> domains;  // training domains, empty = all
  std::uint64_t seed = 0;
  losses::DiceConfig dice;

  void validate() const;
  int iterations(int domain_count) const;
  /// Mode tag written to the history: λ = 0 adversarial runs are labelled "pre-processor".
  std::string run_tag() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct ModelConfig {
  UNet3DConfig generator = generator_config(1);
  UNet3DConfig segmenter = segmenter_config(1);
  DiscriminatorConfig discriminator;

  void validate() const;
};

/// Applies the configured transform to a whole volume (before patch extraction).
Volume transform_input(const Volume& v, InputTransform t);

struct PatchRef {
  int volume = 0;
  Vec3i origin;
};

/// Foreground-centred patch origins per domain over transformed copies of the subject volumes.
struct PatchPool {
  std::vector<LabeledVolume> volumes;
  std::vector<int> volume_domain;
  std::vector<int> domains;                  // z values present, ascending
  std::vector<std::vector<PatchRef>> refs;   // parallel to domains
  Vec3i patch;

  int channels() const { return volumes.empty() ? 0 : volumes.front().image.channels(); }
  std::size_t size() const;
};

PatchPool make_pool(std::span<const synth::Subject* const> subjects, std::span<const int> domains, int per_domain,
                    int patch, InputTransform transform, std::uint64_t seed);

struct DomainSample {
  PatchRef ref;
  int z = 1;
};

/// ⌊m/K⌋ samples per domain, the remainder assigned to distinct domains drawn at random,
/// patches drawn uniformly within each domain. Pure function of (pool, m, seed).
std::vector<DomainSample> sample_batch(const PatchPool& pool, int m, std::uint64_t seed);

/// Tensors for one step: the real patches, the augmented network input, one-hot labels, domains.
struct StepBatch {
  losses::Batch<Real> input;  // x = augmented network input, y, z
  nn::Tensor<Real> real;      // unaugmented patches shown to D as real
  std::vector<double> alphas;
};

StepBatch make_step_batch(const PatchPool& pool, std::span<const DomainSample> samples, double augment_probability,
                          int augment_axis, std::uint64_t seed);

nn::Tensor<Real> one_hot(std::span<const LabelMap* const> labels, int classes);

struct EpochRecord {
  int epoch = 0;
  std::string tag;
  double lr_gs = 0.0;
  double lr_d = 0.0;
  double seg_loss = 0.0;
  double adv_loss = 0.0;  // L_dis(D(G(x)), K+1) seen by the G step
  double d_real_loss = 0.0;
  double d_gen_loss = 0.0;
  double d_accuracy = 0.0;
  double val_seg_loss = 0.0;
  double val_dsc = 0.0;
  double val_d_loss = 0.0;
  double val_d_accuracy = 0.0;
  std::int64_t d_updates = 0;
  std::int64_t gs_updates = 0;
};

std::string history_csv(std::span<const EpochRecord> history);
std::vector<EpochRecord> parse_history_csv(const std::string& text);

/// Parameters, optimizer moments, schedules and history. Not movable: the
/// optimizers hold pointers into the networks.
struct TrainState {
  ModelConfig model;
  TrainConfig config;
  Networks<Real> nets;
  Adam<Real> opt_g, opt_s, opt_d;
  PlateauSchedule d_schedule;
  int epoch = 0;  // completed epochs
  std::vector<EpochRecord> history;
  double best_val = 0.0;
  int best_epoch = 0;
  std::int64_t d_updates = 0;
  std::int64_t gs_updates = 0;

  TrainState(const ModelConfig& model, const TrainConfig& cfg);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  double lr_gs() const;
  std::vector<nn::Parameter<Real>*> all_parameters();
};

std::unique_ptr<TrainState> make_state(const ModelConfig& model, const TrainConfig& cfg);

Checkpoint to_checkpoint(TrainState& state);
std::unique_ptr<TrainState> from_checkpoint(const Checkpoint& ckpt);

/// One optimizer step on θ_D. G runs forward in train mode without touching its running statistics.
losses::DiscriminatorOutcome discriminator_step(TrainState& state, const StepBatch& batch, double lr,
                                                std::uint64_t dropout_seed);

/// One optimizer step on θ_S and, unless segmenter-only, θ_G. D is frozen.
losses::GeneratorOutcome generator_segmenter_step(TrainState& state, const StepBatch& batch, double lambda,
                                                  double lr, std::uint64_t dropout_seed);

struct ValidationResult {
  double seg_loss = 0.0;
  double dsc = 0.0;  // voxel-pooled hard DSC over WM, GM, CSF
  double d_loss = 0.0;
  double d_accuracy = 0.0;
};

ValidationResult validate(TrainState& state, const PatchPool& pool, int batch = 4);

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(int epoch, int iter)> on_iteration;
};

/// Runs epochs state.epoch+1 .. n_epochs. When run_dir is set, writes last.ckpt and
/// history.csv after every epoch and best.ckpt whenever validation Dice loss improves.
void train(TrainState& state, const synth::DomainSuite& suite, const std::optional<std::filesystem::path>& run_dir,
           const TrainCallbacks& callbacks = {});

struct EvalOptions {
  int stride = 8;
  int batch = 4;
  double bias_alpha = 0.0;
  int bias_axis = 1;
  int discriminator_patches = 8;  // per volume; 0 skips the discriminator
  int histogram_bins = 256;
  std::uint64_t seed = 0;
  std::string name = "eval";
  int train_domain = 0;
};

/// Whole-volume inference: G then S over the patch grid, probabilities averaged.
struct Segmentation {
  ProbabilityMap probs;
  Volume normalized;  // overlap-averaged G output, or the input itself without G
};

Segmentation segment_volume(Networks<Real>& nets, const Volume& input, Mode mode, int patch, int stride, int batch);

struct DomainEval {
  int domain = 0;
  metrics::MetricReport report;
  double raw_pearson = 0.0;         // mean over volumes of the degraded input
  double normalized_pearson = 0.0;  // same on the normalized volume
  metrics::Histogram raw_hist;
  metrics::Histogram normalized_hist;
  std::vector<double> raw_profile;         // mean foreground intensity per y row
  std::vector<double> normalized_profile;
};

struct EvalResult {
  std::vector<DomainEval> domains;
  metrics::MetricReport overall;
  double raw_jsd = 0.0;
  double normalized_jsd = 0.0;
  double raw_pearson = 0.0;  // mean over all volumes
  double normalized_pearson = 0.0;
};

/// Requires every subject to carry labels. MHD of an empty predicted class is
/// reported as the volume diagonal in mm.
EvalResult evaluate(Networks<Real>& nets, const TrainConfig& cfg, std::span<const synth::Subject* const> subjects,
                    const EvalOptions& opt);

}  // namespace advnorm::train
