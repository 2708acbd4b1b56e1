#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advnorm/volume.hpp"

namespace advnorm::metrics {

/// 2|A∩B| / (|A|+|B|) over binary masks; 1 when both are empty.
double dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double dsc(const LabelMap& pred, const LabelMap& truth, int label);

/// Squared Euclidean distance (mm²) from every voxel to the nearest set voxel
/// of `mask`; +inf everywhere when the mask is empty.
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> mask, Vec3i shape, Spacing spacing);

/// max over a in A of the distance to the nearest b in B, in mm.
double directed_hausdorff(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, Vec3i shape,
                          Spacing spacing);
/// ½(d(A,B) + d(B,A)). Throws std::invalid_argument when either mask is empty.
double mhd(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, Vec3i shape, Spacing spacing = {});
double mhd(const LabelMap& pred, const LabelMap& truth, int label, Spacing spacing = {});

/// Intensity histogram on [lo, hi] (default [0,1]); values outside the range land in the edge bins.
class Histogram {
 public:
  explicit Histogram(int bins = 256, double lo = 0.0, double hi = 1.0);
  /// Rebuilds a histogram from stored bin counts (non-negative).
  static Histogram from_counts(std::vector<double> counts, double lo, double hi);

  /// Adds channel `channel` of v over the voxels where mask != 0 (all voxels when mask is empty).
  void add(const Volume& v, std::span<const std::uint8_t> mask = {}, int channel = 0);
  void add_value(double x);

  int bins() const { return static_cast<int>(counts_.size()); }
  int bin_of(double x) const;
  double total() const { return total_; }
  const std::vector<double>& counts() const { return counts_; }
  std::vector<double> normalized() const;
  double lo() const { return lo_; }
  double hi() const { return hi_; }

 private:
  std::vector<double> counts_;
  double lo_ = 0.0;
  double hi_ = 1.0;
  double total_ = 0.0;
};

double entropy(std::span<const double> p);
/// Generalised JSD with uniform weights, natural log: H(mean p) - mean H(p).
double jsd(const std::vector<std::vector<double>>& distributions);
/// JSD of the normalised per-group histograms. Throws when fewer than two
/// groups are given or a group is empty.
double histogram_jsd(std::span<const Histogram> groups);

/// Pearson correlation between intensity and the y index over mask voxels
/// (all voxels when mask is empty); restricted to axial slice z when given.
double pearson_vs_y(const Volume& v, std::span<const std::uint8_t> mask = {}, std::optional<int> slice = std::nullopt);

/// (K+1)×(K+1) matrix of counts / total, rows = true class, classes 1-based.
std::vector<std::vector<double>> confusion_matrix(std::span<const int> predicted, std::span<const int> truth, int domains);

struct MetricReport {
  std::string name;
  int train_domain = 0;  // 0 = all domains
  int test_domain = 0;
  std::array<double, kNumClasses> dsc{};  // indexed by label; mean over WM, GM, CSF
  std::array<double, kNumClasses> mhd{};
  double mean_dsc = 0.0;
  double mean_mhd = 0.0;
  double jsd = 0.0;
  double pearson = 0.0;
  double discriminator_accuracy = 0.0;
  std::vector<std::vector<double>> confusion;

  void finalize_means();
  void validate() const;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

/// One header row, one row per report; doubles printed round-trip exact.
std::string to_csv(std::span<const MetricReport> reports);
std::vector<MetricReport> from_csv(const std::string& text);

}  // namespace advnorm::metrics
