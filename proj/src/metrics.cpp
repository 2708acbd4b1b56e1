#include "advnorm/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace advnorm::metrics {

namespace {

void check_sizes(std::size_t a, std::size_t b, Vec3i shape) {
  if (a != b || a != shape.product()) {
    throw std::invalid_argument("mask sizes " + std::to_string(a) + " and " + std::to_string(b) +
                                " do not match shape " + to_string(shape));
  }
}

bool any(std::span<const std::uint8_t> m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

// Lower envelope of parabolas f(q) + (p - pos_q)² over positions pos_q = q·s.
void edt_1d(const double* f, double* d, int n, double s, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double pq = q * s;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double sep = 0.0;
    while (true) {
      const int r = v[static_cast<std::size_t>(k)];
      const double pr = r * s;
      sep = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
      if (sep <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = sep;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    std::fill(d, d + n, inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double p = q * s;
    while (z[static_cast<std::size_t>(j) + 1] < p) ++j;
    const int r = v[static_cast<std::size_t>(j)];
    const double dp = p - r * s;
    d[q] = f[r] + dp * dp;
  }
}

std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return x;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

double dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dsc: mask sizes differ");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dsc(const LabelMap& pred, const LabelMap& truth, int label) {
  if (!(pred.shape() == truth.shape())) {
    throw std::invalid_argument("dsc: shapes " + to_string(pred.shape()) + " and " + to_string(truth.shape()));
  }
  return dsc(pred.mask(label), truth.mask(label));
}

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> mask, Vec3i shape, Spacing spacing) {
  check_sizes(mask.size(), mask.size(), shape);
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) d[i] = mask[i] ? 0.0 : inf;
  std::vector<int> v;
  std::vector<double> z;
  const int longest = std::max({shape.x, shape.y, shape.z});
  std::vector<double> fin(static_cast<std::size_t>(longest)), fout(static_cast<std::size_t>(longest));
  for (int axis = 0; axis < 3; ++axis) {
    const int n = shape[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int j = 0; j < shape[a2]; ++j)
      for (int i = 0; i < shape[a1]; ++i) {
        Vec3i p;
        p[a1] = i;
        p[a2] = j;
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          fin[static_cast<std::size_t>(q)] = d[linear_index(shape, p.x, p.y, p.z)];
        }
        edt_1d(fin.data(), fout.data(), n, spacing[axis], v, z);
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          d[linear_index(shape, p.x, p.y, p.z)] = fout[static_cast<std::size_t>(q)];
        }
      }
  }
  return d;
}

double directed_hausdorff(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, Vec3i shape,
                          Spacing spacing) {
  check_sizes(a.size(), b.size(), shape);
  const auto d = squared_distance_transform(b, shape, spacing);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) worst = std::max(worst, d[i]);
  }
  return std::sqrt(worst);
}

double mhd(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, Vec3i shape, Spacing spacing) {
  check_sizes(a.size(), b.size(), shape);
  if (!any(a) || !any(b)) throw std::invalid_argument("mhd: both masks must be non-empty");
  return 0.5 * (directed_hausdorff(a, b, shape, spacing) + directed_hausdorff(b, a, shape, spacing));
}

double mhd(const LabelMap& pred, const LabelMap& truth, int label, Spacing spacing) {
  if (!(pred.shape() == truth.shape())) throw std::invalid_argument("mhd: label map shapes differ");
  const auto a = pred.mask(label), b = truth.mask(label);
  if (!any(a) || !any(b)) {
    throw std::invalid_argument(std::string("mhd: empty ") + (any(a) ? "ground-truth" : "predicted") + " mask for " +
                                tissue_name(label));
  }
  return mhd(a, b, pred.shape(), spacing);
}

Histogram::Histogram(int bins, double lo, double hi) : lo_(lo), hi_(hi) {
  if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
  if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("histogram range must be finite with hi > lo");
  counts_.assign(static_cast<std::size_t>(bins), 0.0);
}

Histogram Histogram::from_counts(std::vector<double> counts, double lo, double hi) {
  Histogram h(static_cast<int>(counts.size()), lo, hi);
  for (double c : counts)
    if (!(c >= 0.0) || !std::isfinite(c)) throw std::invalid_argument("histogram counts must be finite and non-negative");
  h.total_ = 0.0;
  for (double c : counts) h.total_ += c;
  h.counts_ = std::move(counts);
  return h;
}

int Histogram::bin_of(double x) const {
  const int n = bins();
  const double t = (x - lo_) / (hi_ - lo_);
  if (!(t > 0.0)) return 0;
  return std::min(n - 1, static_cast<int>(t * n));
}

void Histogram::add_value(double x) {
  counts_[static_cast<std::size_t>(bin_of(x))] += 1.0;
  total_ += 1.0;
}

void Histogram::add(const Volume& v, std::span<const std::uint8_t> mask, int channel) {
  const auto ch = v.channel(channel);
  if (!mask.empty() && mask.size() != ch.size()) throw std::invalid_argument("histogram mask size mismatch");
  for (std::size_t i = 0; i < ch.size(); ++i) {
    if (mask.empty() || mask[i]) add_value(ch[i]);
  }
}

std::vector<double> Histogram::normalized() const {
  if (total_ <= 0.0) throw std::invalid_argument("histogram is empty");
  std::vector<double> p(counts_);
  for (auto& x : p) x /= total_;
  return p;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

double jsd(const std::vector<std::vector<double>>& distributions) {
  if (distributions.size() < 2) throw std::invalid_argument("jsd needs at least two distributions");
  const std::size_t n = distributions.front().size();
  std::vector<double> mean(n, 0.0);
  double mean_h = 0.0;
  const double w = 1.0 / static_cast<double>(distributions.size());
  for (const auto& p : distributions) {
    if (p.size() != n) throw std::invalid_argument("jsd: distributions differ in length");
    for (std::size_t i = 0; i < n; ++i) mean[i] += w * p[i];
    mean_h += w * entropy(p);
  }
  return std::max(0.0, entropy(mean) - mean_h);
}

double histogram_jsd(std::span<const Histogram> groups) {
  if (groups.size() < 2) throw std::invalid_argument("histogram_jsd needs at least two groups");
  std::vector<std::vector<double>> ps;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].total() <= 0.0) throw std::invalid_argument("histogram_jsd: group " + std::to_string(g) + " is empty");
    if (groups[g].bins() != groups[0].bins() || groups[g].lo() != groups[0].lo() || groups[g].hi() != groups[0].hi())
      throw std::invalid_argument("histogram_jsd: groups use different binnings");
    ps.push_back(groups[g].normalized());
  }
  return jsd(ps);
}

double pearson_vs_y(const Volume& v, std::span<const std::uint8_t> mask, std::optional<int> slice) {
  const Vec3i s = v.shape();
  if (!mask.empty() && mask.size() != v.voxel_count()) throw std::invalid_argument("pearson_vs_y: mask size mismatch");
  if (slice && (*slice < 0 || *slice >= s.z)) throw std::invalid_argument("pearson_vs_y: slice out of range");
  const int z0 = slice ? *slice : 0, z1 = slice ? *slice + 1 : s.z;
  double n = 0, mx = 0, my = 0;
  for (int z = z0; z < z1; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        const auto i = linear_index(s, x, y, z);
        if (!mask.empty() && !mask[i]) continue;
        n += 1;
        mx += v.data()[i];
        my += y;
      }
  if (n < 2) throw std::domain_error("pearson_vs_y: fewer than two voxels");
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (int z = z0; z < z1; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        const auto i = linear_index(s, x, y, z);
        if (!mask.empty() && !mask[i]) continue;
        const double a = v.data()[i] - mx, b = y - my;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
      }
  if (sxx <= 0.0 || syy <= 0.0) throw std::domain_error("pearson_vs_y: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<std::vector<double>> confusion_matrix(std::span<const int> predicted, std::span<const int> truth,
                                                  int domains) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("confusion_matrix: length mismatch");
  const int k1 = domains + 1;
  std::vector<std::vector<double>> m(static_cast<std::size_t>(k1), std::vector<double>(static_cast<std::size_t>(k1)));
  if (predicted.empty()) return m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 1 || t > k1 || p < 1 || p > k1) {
      throw std::invalid_argument("confusion_matrix: class outside 1.." + std::to_string(k1));
    }
    m[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(p - 1)] += 1.0;
  }
  const double n = static_cast<double>(truth.size());
  for (auto& row : m)
    for (auto& x : row) x /= n;
  return m;
}

void MetricReport::finalize_means() {
  mean_dsc = (dsc[1] + dsc[2] + dsc[3]) / 3.0;
  mean_mhd = (mhd[1] + mhd[2] + mhd[3]) / 3.0;
}

void MetricReport::validate() const {
  for (double d : dsc) {
    if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("report DSC outside [0,1]");
  }
  for (double h : mhd) {
    if (!(h >= 0.0)) throw std::invalid_argument("report MHD negative");
  }
  if (name.find_first_of(",\n\"") != std::string::npos) throw std::invalid_argument("report name may not contain , \" or newline");
  if (!confusion.empty()) {
    double s = 0;
    for (const auto& row : confusion)
      for (double x : row) s += x;
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("confusion matrix does not sum to 1");
  }
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"name", r.name},
       {"train_domain", r.train_domain},
       {"test_domain", r.test_domain},
       {"dsc", r.dsc},
       {"mhd", r.mhd},
       {"mean_dsc", r.mean_dsc},
       {"mean_mhd", r.mean_mhd},
       {"jsd", r.jsd},
       {"pearson", r.pearson},
       {"discriminator_accuracy", r.discriminator_accuracy},
       {"confusion", r.confusion}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.name = j.at("name");
  r.train_domain = j.at("train_domain");
  r.test_domain = j.at("test_domain");
  r.dsc = j.at("dsc");
  r.mhd = j.at("mhd");
  r.mean_dsc = j.at("mean_dsc");
  r.mean_mhd = j.at("mean_mhd");
  r.jsd = j.at("jsd");
  r.pearson = j.at("pearson");
  r.discriminator_accuracy = j.at("discriminator_accuracy");
  r.confusion = j.at("confusion").get<std::vector<std::vector<double>>>();
}

namespace {

const char* kCsvHeader =
    "name,train_domain,test_domain,dsc_bg,dsc_wm,dsc_gm,dsc_csf,mhd_bg,mhd_wm,mhd_gm,mhd_csf,mean_dsc,mean_mhd,"
    "jsd,pearson,discriminator_accuracy,confusion";

}  // namespace

std::string to_csv(std::span<const MetricReport> reports) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : reports) {
    r.validate();
    os << r.name << ',' << r.train_domain << ',' << r.test_domain;
    for (double d : r.dsc) os << ',' << fmt(d);
    for (double h : r.mhd) os << ',' << fmt(h);
    os << ',' << fmt(r.mean_dsc) << ',' << fmt(r.mean_mhd) << ',' << fmt(r.jsd) << ',' << fmt(r.pearson) << ','
       << fmt(r.discriminator_accuracy) << ',';
    // rows separated by '|', entries by ';'
    for (std::size_t i = 0; i < r.confusion.size(); ++i) {
      if (i) os << '|';
      for (std::size_t k = 0; k < r.confusion[i].size(); ++k) os << (k ? ";" : "") << fmt(r.confusion[i][k]);
    }
    os << '\n';
  }
  return os.str();
}

std::vector<MetricReport> from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw std::invalid_argument("metric CSV: unexpected header");
  std::vector<MetricReport> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 17) throw std::invalid_argument("metric CSV: expected 17 fields, got " + std::to_string(f.size()));
    MetricReport r;
    r.name = f[0];
    r.train_domain = std::stoi(f[1]);
    r.test_domain = std::stoi(f[2]);
    for (int c = 0; c < kNumClasses; ++c) {
      r.dsc[static_cast<std::size_t>(c)] = parse_double(f[static_cast<std::size_t>(3 + c)]);
      r.mhd[static_cast<std::size_t>(c)] = parse_double(f[static_cast<std::size_t>(7 + c)]);
    }
    r.mean_dsc = parse_double(f[11]);
    r.mean_mhd = parse_double(f[12]);
    r.jsd = parse_double(f[13]);
    r.pearson = parse_double(f[14]);
    r.discriminator_accuracy = parse_double(f[15]);
    if (!f[16].empty()) {
      for (const auto& row : split(f[16], '|')) {
        r.confusion.emplace_back();
        for (const auto& x : split(row, ';')) r.confusion.back().push_back(parse_double(x));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace advnorm::metrics
