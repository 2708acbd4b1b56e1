#include "advnorm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "advnorm/random.hpp"

namespace advnorm::synth {

std::array<double, kNumClasses> DomainProfile::effective_mean() const {
  auto m = mean;
  const auto wm = static_cast<std::size_t>(Tissue::WhiteMatter);
  const auto gm = static_cast<std::size_t>(Tissue::GrayMatter);
  m[gm] = mean[wm] + overlap * (mean[gm] - mean[wm]);
  return m;
}

void DomainProfile::validate() const {
  auto check = [&](const std::array<double, kNumClasses>& mu, const std::array<double, kNumClasses>& sd) {
    for (int c = 0; c < kNumClasses; ++c) {
      if (mu[c] < 0.0 || mu[c] > 1.0) {
        throw std::invalid_argument("profile '" + name + "': mean of " + tissue_name(c) + " outside [0,1]");
      }
      if (!(sd[c] >= 0.0)) throw std::invalid_argument("profile '" + name + "': negative std-dev");
    }
  };
  check(mean, stddev);
  if (mean2.has_value() != stddev2.has_value()) {
    throw std::invalid_argument("profile '" + name + "': second channel needs both means and std-devs");
  }
  if (mean2) check(*mean2, *stddev2);
  if (overlap < 0.0 || overlap > 1.0) throw std::invalid_argument("profile '" + name + "': overlap outside [0,1]");
  if (noise < 0.0) throw std::invalid_argument("profile '" + name + "': negative noise");
  if (domain < 1) throw std::invalid_argument("profile '" + name + "': domain id must be >= 1");
}

namespace {

struct Ripple {
  std::array<double, 3> dir;
  double freq;
  double phase;
  double amp;
};

std::vector<Ripple> make_ripples(std::mt19937_64& rng, int count, double min_freq, double max_freq) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Ripple> out(static_cast<std::size_t>(count));
  double total = 0.0;
  for (auto& r : out) {
    std::array<double, 3> d{gauss(rng), gauss(rng), gauss(rng)};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
    r.dir = {d[0] / n, d[1] / n, d[2] / n};
    r.freq = min_freq + (max_freq - min_freq) * uni(rng);
    r.phase = 2.0 * M_PI * uni(rng);
    r.amp = 0.2 + uni(rng);
    total += r.amp;
  }
  for (auto& r : out) r.amp /= total;  // |sum| <= 1
  return out;
}

double ripple_value(const std::vector<Ripple>& ripples, const std::array<double, 3>& u) {
  double f = 0.0;
  for (const auto& r : ripples) {
    f += r.amp * std::sin(r.freq * (r.dir[0] * u[0] + r.dir[1] * u[1] + r.dir[2] * u[2]) + r.phase);
  }
  return f;
}

std::uint8_t shell_label(int shell) {
  if (shell == 0) return static_cast<std::uint8_t>(Tissue::Csf);
  return static_cast<std::uint8_t>(shell % 2 == 1 ? Tissue::GrayMatter : Tissue::WhiteMatter);
}

}  // namespace

LabeledVolume make_phantom(const PhantomSpec& spec) {
  if (spec.shape.x < 24 || spec.shape.y < 24 || spec.shape.z < 24) {
    throw std::invalid_argument("phantom shape " + to_string(spec.shape) + " too small to nest shells (need >= 24^3)");
  }
  if (spec.shells < 3) throw std::invalid_argument("phantom needs at least 3 shells for CSF, GM and WM");
  std::vector<double> frac(static_cast<std::size_t>(spec.shells));
  for (int i = 0; i < spec.shells; ++i) frac[static_cast<std::size_t>(i)] = 1.0 - 0.45 * i / (spec.shells - 1);
  const double a = spec.deformation;
  if (a < 0.0) throw std::invalid_argument("deformation amplitude must be >= 0");
  for (std::size_t i = 0; i + 1 < frac.size(); ++i) {
    if (!(frac[i] * (1.0 - a) > frac[i + 1] * (1.0 + a))) {
      throw std::invalid_argument("deformation amplitude " + std::to_string(a) + " would break shell nesting");
    }
  }

  std::mt19937_64 rng(derive_seed(spec.seed, {0x5048414E}));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::array<double, 3> center{};
  std::array<double, 3> radius{};
  for (int ax = 0; ax < 3; ++ax) {
    center[ax] = 0.5 * (spec.shape[ax] - 1) + (uni(rng) - 0.5) * 3.0;
    radius[ax] = spec.shape[ax] * (0.38 + 0.06 * uni(rng));
  }
  std::vector<std::vector<Ripple>> ripples;
  for (int i = 0; i < spec.shells; ++i) {
    // Inner boundaries fold at higher spatial frequency.
    ripples.push_back(make_ripples(rng, 6, 2.0 + 2.0 * i, 5.0 + 4.0 * i));
  }

  LabeledVolume lv{Volume(spec.shape, 1, {}, 1.0F), LabelMap(spec.shape)};
  for (int z = 0; z < spec.shape.z; ++z) {
    for (int y = 0; y < spec.shape.y; ++y) {
      for (int x = 0; x < spec.shape.x; ++x) {
        const std::array<double, 3> p{(x - center[0]) / radius[0], (y - center[1]) / radius[1],
                                      (z - center[2]) / radius[2]};
        const double rho = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        std::array<double, 3> u{0.0, 0.0, 1.0};
        if (rho > 1e-12) u = {p[0] / rho, p[1] / rho, p[2] / rho};
        std::uint8_t label = static_cast<std::uint8_t>(Tissue::Background);
        for (int i = 0; i < spec.shells; ++i) {
          const double boundary =
              frac[static_cast<std::size_t>(i)] * (1.0 + (a > 0.0 ? a * ripple_value(ripples[static_cast<std::size_t>(i)], u) : 0.0));
          if (rho < boundary) {
            label = shell_label(i);
          } else {
            break;
          }
        }
        lv.labels(x, y, z) = label;
      }
    }
  }
  return lv;
}

Volume render_intensity(const LabelMap& labels, const DomainProfile& profile, std::uint64_t seed, Spacing spacing) {
  profile.validate();
  Volume v(labels.shape(), profile.channels(), spacing);
  const std::size_t n = labels.voxel_count();
  for (int c = 0; c < profile.channels(); ++c) {
    const auto mu = c == 0 ? profile.effective_mean() : *profile.mean2;
    const auto sd = c == 0 ? profile.stddev : *profile.stddev2;
    std::mt19937_64 rng(derive_seed(seed, {0x52454E44, static_cast<std::uint64_t>(c)}));
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto dst = v.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      const int cls = labels.data()[i];
      const double tissue = std::clamp(mu[cls] + sd[cls] * gauss(rng), 0.0, 1.0);
      const double noise = profile.noise * gauss(rng);
      dst[i] = static_cast<float>(tissue + noise);
    }
  }
  return v;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

SplitCounts default_split(int subjects) {
  if (subjects < 3) throw std::invalid_argument("need at least 3 subjects per domain to split train/val/test");
  const int val = std::max(1, static_cast<int>(std::lround(0.1 * subjects)));
  const int test = std::max(1, static_cast<int>(std::lround(0.1 * subjects)));
  return {subjects - val - test, val, test};
}

std::vector<const Subject*> DomainSuite::select(Split split, int domain) const {
  std::vector<const Subject*> out;
  for (const auto& s : subjects) {
    if (s.split == split && (domain == 0 || s.domain == domain)) out.push_back(&s);
  }
  return out;
}

DomainSuite make_domain_suite(const std::vector<DomainProfile>& profiles, int subjects_per_domain,
                              const PhantomSpec& templ, std::uint64_t seed, std::optional<SplitCounts> split) {
  if (profiles.size() < 2) throw std::invalid_argument("a domain suite needs K >= 2 profiles");
  if (subjects_per_domain < 3) {
    throw std::invalid_argument("need at least 3 subjects per domain to split train/val/test");
  }
  const SplitCounts counts = split.value_or(default_split(subjects_per_domain));
  if (counts.train < 1 || counts.val < 1 || counts.test < 1 ||
      counts.train + counts.val + counts.test != subjects_per_domain) {
    throw std::invalid_argument("split counts must be positive and sum to the subjects per domain");
  }
  DomainSuite suite;
  suite.profiles = profiles;
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    suite.profiles[k].domain = static_cast<int>(k) + 1;
    suite.profiles[k].validate();
    if (profiles[k].channels() != profiles.front().channels()) {
      throw std::invalid_argument("all domain profiles must have the same channel count");
    }
  }
  for (int d = 1; d <= static_cast<int>(profiles.size()); ++d) {
    std::vector<int> order(static_cast<std::size_t>(subjects_per_domain));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, {0x53504C54, static_cast<std::uint64_t>(d)}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Split> membership(static_cast<std::size_t>(subjects_per_domain));
    for (int r = 0; r < subjects_per_domain; ++r) {
      membership[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
          r < counts.train ? Split::Train : (r < counts.train + counts.val ? Split::Val : Split::Test);
    }
    for (int i = 0; i < subjects_per_domain; ++i) {
      PhantomSpec spec = templ;
      spec.seed = derive_seed(seed, {0x414E4154, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i)});
      LabeledVolume lv = make_phantom(spec);
      lv.image = render_intensity(lv.labels, suite.profiles[static_cast<std::size_t>(d - 1)],
                                  derive_seed(seed, {0x494D4147, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i)}));
      suite.subjects.push_back({std::move(lv), d, membership[static_cast<std::size_t>(i)], i});
    }
  }
  return suite;
}

DomainProfile adult_profile(int domain) {
  DomainProfile p;
  p.domain = domain;
  p.name = "adult";
  p.mean = {0.0, 0.80, 0.50, 0.20};
  p.stddev = {0.0, 0.04, 0.05, 0.05};
  p.noise = 0.02;
  p.mean2 = std::array<double, kNumClasses>{0.0, 0.30, 0.55, 0.90};
  p.stddev2 = std::array<double, kNumClasses>{0.0, 0.05, 0.05, 0.05};
  return p;
}

DomainProfile infant_profile(int domain) {
  DomainProfile p;
  p.domain = domain;
  p.name = "infant";
  p.mean = {0.0, 0.56, 0.52, 0.25};
  p.stddev = {0.0, 0.06, 0.06, 0.06};
  p.noise = 0.04;
  p.mean2 = std::array<double, kNumClasses>{0.0, 0.45, 0.60, 0.85};
  p.stddev2 = std::array<double, kNumClasses>{0.0, 0.06, 0.06, 0.06};
  return p;
}

DomainProfile shifted_profile(int domain) {
  DomainProfile p;
  p.domain = domain;
  p.name = "shifted";
  p.mean = {0.0, 0.95, 0.78, 0.58};
  p.stddev = {0.0, 0.03, 0.04, 0.04};
  p.noise = 0.02;
  p.mean2 = std::array<double, kNumClasses>{0.0, 0.40, 0.60, 0.95};
  p.stddev2 = std::array<double, kNumClasses>{0.0, 0.04, 0.04, 0.04};
  return p;
}

DomainProfile preset_profile(const std::string& name, int domain) {
  if (name == "adult") return adult_profile(domain);
  if (name == "infant") return infant_profile(domain);
  if (name == "shifted") return shifted_profile(domain);
  throw std::invalid_argument("unknown profile preset '" + name + "'");
}

DomainProfile single_channel(DomainProfile p) {
  p.mean2.reset();
  p.stddev2.reset();
  return p;
}

}  // namespace advnorm::synth
