#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advnorm/volume.hpp"

namespace advnorm::synth {

/// Class-conditional intensity model of one acquisition domain.
struct DomainProfile {
  int domain = 1;                                  // z in 1..K
  std::string name;
  std::array<double, kNumClasses> mean{};          // indexed by Tissue code
  std::array<double, kNumClasses> stddev{};
  double noise = 0.0;                              // global additive Gaussian sigma
  double overlap = 1.0;                            // scales the GM-WM mean separation; 0 → GM mean = WM mean
  std::optional<std::array<double, kNumClasses>> mean2;    // second channel (T2 analogue)
  std::optional<std::array<double, kNumClasses>> stddev2;

  int channels() const { return mean2 ? 2 : 1; }
  /// Per-class means after the overlap factor is applied.
  std::array<double, kNumClasses> effective_mean() const;
  /// Throws std::invalid_argument on means outside [0,1], negative spreads or overlap outside [0,1].
  void validate() const;
};

struct PhantomSpec {
  Vec3i shape = Vec3i::cube(48);
  int shells = 3;            // CSF, GM, WM from the outside in; extra shells alternate GM/WM
  double deformation = 0.08;  // relative radial perturbation amplitude; must keep shells nested (< ~0.12 for 3 shells)
  std::uint64_t seed = 0;
};

/// Nested deformed ellipsoids BG ⊃ CSF ⊃ GM ⊃ WM. Image channel is all ones.
LabeledVolume make_phantom(const PhantomSpec& spec);

/// Voxel of class c ~ clip(Normal(mean_c, std_c), 0, 1) + Normal(0, noise).
Volume render_intensity(const LabelMap& labels, const DomainProfile& profile, std::uint64_t seed,
                        Spacing spacing = {});

enum class Split { Train, Val, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Subject {
  LabeledVolume volume;
  int domain = 1;
  Split split = Split::Train;
  int index = 0;  // subject index within its domain
};

struct SplitCounts {
  int train = 8;
  int val = 1;
  int test = 1;
};

/// Default split for n subjects: about 80/10/10 with at least one val and one test subject.
SplitCounts default_split(int subjects);

struct DomainSuite {
  std::vector<DomainProfile> profiles;
  std::vector<Subject> subjects;

  int domains() const { return static_cast<int>(profiles.size()); }
  std::vector<const Subject*> select(Split split, int domain = 0) const;  // domain 0 = all
};

/// K domains × n subjects, split membership and every volume a pure function of seed.
/// Throws std::invalid_argument for K < 2 or fewer than 3 subjects per domain.
DomainSuite make_domain_suite(const std::vector<DomainProfile>& profiles, int subjects_per_domain,
                              const PhantomSpec& templ, std::uint64_t seed,
                              std::optional<SplitCounts> split = std::nullopt);

// Preset profiles. Adult T1-like contrast, an isointense infant-like domain
// (GM/WM means within 0.05) and a brightness-shifted, compressed-contrast site.
DomainProfile adult_profile(int domain);
DomainProfile infant_profile(int domain);
DomainProfile shifted_profile(int domain);
/// Looks up one of "adult", "infant", "shifted".
DomainProfile preset_profile(const std::string& name, int domain);
/// The profile with its second channel removed.
DomainProfile single_channel(DomainProfile p);

}  // namespace advnorm::synth
