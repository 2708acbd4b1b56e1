#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "advnorm/synth.hpp"

using namespace advnorm;
using namespace advnorm::synth;

namespace {

DomainProfile flat_profile(std::array<double, 4> mean) {
  DomainProfile p;
  p.name = "flat";
  p.mean = mean;
  p.stddev = {0, 0, 0, 0};
  return p;
}

std::vector<double> values_of(const Volume& v, const LabelMap& l, int label) {
  std::vector<double> out;
  for (std::size_t i = 0; i < l.data().size(); ++i) {
    if (l.data()[i] == label) out.push_back(v.data()[i]);
  }
  return out;
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

std::vector<double> histogram(const std::vector<double>& v, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  for (double x : v) h[static_cast<std::size_t>(std::clamp(static_cast<int>(x * bins), 0, bins - 1))] += 1.0;
  for (auto& c : h) c /= static_cast<double>(v.size());
  return h;
}

double jsd2(const std::vector<double>& p, const std::vector<double>& q) {
  double r = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) r += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) r += 0.5 * q[i] * std::log(q[i] / m);
  }
  return r;
}

}  // namespace

TEST_CASE("phantom construction") {
  const auto a = make_phantom({Vec3i::cube(48), 3, 0.0, 5});
  CHECK(a.labels(24, 24, 24) == static_cast<int>(Tissue::WhiteMatter));
  CHECK(make_phantom({Vec3i::cube(48), 3, 0.08, 5}).labels.data() ==
        make_phantom({Vec3i::cube(48), 3, 0.08, 5}).labels.data());
  CHECK(make_phantom({Vec3i::cube(48), 3, 0.08, 5}).labels.data() !=
        make_phantom({Vec3i::cube(48), 3, 0.08, 6}).labels.data());
  CHECK_THROWS_AS(make_phantom({Vec3i::cube(20), 3, 0.05, 1}), std::invalid_argument);
  CHECK_THROWS_AS(make_phantom({Vec3i::cube(48), 3, 0.5, 1}), std::invalid_argument);
  for (float x : a.image.data()) CHECK(x == 1.0F);
}

TEST_CASE("phantom census over many seeds") {
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto lv = make_phantom({Vec3i::cube(48), 3, 0.08, seed});
    const auto c = lv.labels.census();
    for (auto n : c) worst = std::min(worst, static_cast<double>(n) / lv.labels.voxel_count());
  }
  CHECK(worst >= 0.01);
}

TEST_CASE("render intensity") {
  const auto lv = make_phantom({Vec3i::cube(32), 3, 0.05, 2});
  const auto flat = render_intensity(lv.labels, flat_profile({0.1, 0.7, 0.4, 0.2}), 1);
  const std::array<double, 4> m{0.1, 0.7, 0.4, 0.2};
  for (std::size_t i = 0; i < flat.data().size(); ++i) CHECK(flat.data()[i] == static_cast<float>(m[lv.labels.data()[i]]));

  DomainProfile p = adult_profile(1);
  p.mean2.reset();
  p.stddev2.reset();
  p.noise = 0.0;
  const auto img = render_intensity(lv.labels, p, 9);
  for (int c = 1; c < 4; ++c) {
    const auto v = values_of(img, lv.labels, c);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    CHECK(std::abs(mean - p.mean[c]) <= 3.0 * p.stddev[c] / std::sqrt(static_cast<double>(v.size())) + 1e-6);
  }

  DomainProfile iso = p;
  iso.stddev = {0.0, 0.05, 0.05, 0.05};
  iso.overlap = 0.0;
  const auto iso_img = render_intensity(lv.labels, iso, 4);
  const auto wm = values_of(iso_img, lv.labels, 1);
  const auto gm = values_of(iso_img, lv.labels, 2);
  const double n = wm.size(), m2 = gm.size();
  CHECK(ks_statistic(wm, gm) < 1.358 * std::sqrt((n + m2) / (n * m2)));

  // disjoint domain means → between-domain JSD exceeds within-domain JSD per class
  DomainProfile a = p, b = p;
  b.mean = {0.0, 0.35, 0.15, 0.95};
  const auto ia1 = render_intensity(lv.labels, a, 1), ia2 = render_intensity(lv.labels, a, 2);
  const auto ib = render_intensity(lv.labels, b, 3);
  for (int c = 1; c < 4; ++c) {
    const auto h1 = histogram(values_of(ia1, lv.labels, c), 64);
    const auto h2 = histogram(values_of(ia2, lv.labels, c), 64);
    const auto hb = histogram(values_of(ib, lv.labels, c), 64);
    CHECK(jsd2(h1, hb) > jsd2(h1, h2));
  }
}

TEST_CASE("shift strength orders histogram divergence") {
  const auto lv = make_phantom({Vec3i::cube(32), 3, 0.05, 8});
  DomainProfile base = adult_profile(1);
  base.mean2.reset();
  base.stddev2.reset();
  std::vector<double> fg_base;
  const auto ib = render_intensity(lv.labels, base, 1);
  for (std::size_t i = 0; i < ib.data().size(); ++i) {
    if (lv.labels.data()[i] != 0) fg_base.push_back(ib.data()[i]);
  }
  const auto hb = histogram(fg_base, 256);
  double prev = -1.0;
  for (double shift : {0.0, 0.05, 0.1, 0.15}) {
    DomainProfile s = base;
    for (int c = 1; c < 4; ++c) s.mean[c] = std::min(1.0, base.mean[c] + shift);
    const auto is = render_intensity(lv.labels, s, 2);
    std::vector<double> fg;
    for (std::size_t i = 0; i < is.data().size(); ++i) {
      if (lv.labels.data()[i] != 0) fg.push_back(is.data()[i]);
    }
    const double j = jsd2(hb, histogram(fg, 256));
    CHECK(j > prev);
    prev = j;
  }
}

TEST_CASE("domain suite splits") {
  const PhantomSpec templ{Vec3i::cube(24), 3, 0.05, 0};
  const auto suite = make_domain_suite({adult_profile(1), infant_profile(2)}, 10, templ, 3, SplitCounts{8, 1, 1});
  CHECK(suite.select(Split::Train).size() == 16);
  CHECK(suite.select(Split::Val).size() == 2);
  CHECK(suite.select(Split::Test).size() == 2);
  const auto again = make_domain_suite({adult_profile(1), infant_profile(2)}, 10, templ, 3, SplitCounts{8, 1, 1});
  for (std::size_t i = 0; i < suite.subjects.size(); ++i) {
    CHECK(suite.subjects[i].split == again.subjects[i].split);
    CHECK(suite.subjects[i].volume.image.data() == again.subjects[i].volume.image.data());
  }
  const auto k3 = make_domain_suite({adult_profile(1), infant_profile(2), shifted_profile(3)}, 5, templ, 1);
  for (auto sp : {Split::Train, Split::Val, Split::Test})
    for (int d = 1; d <= 3; ++d) CHECK_FALSE(k3.select(sp, d).empty());
  CHECK_THROWS_AS(make_domain_suite({adult_profile(1), infant_profile(2)}, 2, templ, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_domain_suite({adult_profile(1)}, 5, templ, 1), std::invalid_argument);
}

TEST_CASE("profile validation") {
  DomainProfile p = adult_profile(1);
  p.mean[1] = 1.2;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = adult_profile(1);
  p.overlap = 1.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK(std::abs(infant_profile(1).mean[1] - infant_profile(1).mean[2]) <= 0.05);
  CHECK_THROWS(preset_profile("nope", 1));
}
