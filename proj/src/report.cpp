#include "advnorm/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace advnorm::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_num(const std::string& s) {
  if (s == "nan") return NAN;
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l)) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

bool read_text(const fs::path& p, std::string& s) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  s = ss.str();
  return true;
}

}  // namespace

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw std::invalid_argument("image needs positive size");
  rgb.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill);
}

void Image::set(int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const auto i = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3;
  rgb[i] = c[0];
  rgb[i + 1] = c[1];
  rgb[i + 2] = c[2];
}

std::array<std::uint8_t, 3> Image::get(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3;
  return {rgb.at(i), rgb.at(i + 1), rgb.at(i + 2)};
}

void Image::line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Image::rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) set(x, y, c);
}

void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_pgm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) out.put(static_cast<char>(img.rgb[i]));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  if (!in || magic != "P6" || maxv != 255) throw std::runtime_error("not a binary 8-bit PPM: " + path.string());
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw std::runtime_error("truncated PPM: " + path.string());
  return img;
}

std::array<std::uint8_t, 3> palette(int i) {
  static const std::array<std::array<std::uint8_t, 3>, 6> colors{
      {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}, {255, 127, 14}, {23, 190, 207}}};
  return colors[static_cast<std::size_t>(i) % colors.size()];
}

void plot_lines(Image& img, int x0, int y0, int w, int h, const std::vector<Series>& series) {
  const std::array<std::uint8_t, 3> axis{0, 0, 0};
  img.line(x0, y0, x0, y0 + h - 1, axis);
  img.line(x0, y0 + h - 1, x0 + w - 1, y0 + h - 1, axis);
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!(hi > lo)) {
    if (!std::isfinite(lo)) return;
    hi = lo + 1.0;
  }
  auto px = [&](std::size_t i, std::size_t n) {
    return x0 + 1 + static_cast<int>(std::lround(static_cast<double>(i) * (w - 3) / std::max<std::size_t>(1, n - 1)));
  };
  auto py = [&](double v) { return y0 + h - 2 - static_cast<int>(std::lround((v - lo) / (hi - lo) * (h - 3))); };
  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i]) || !std::isfinite(s.y[i + 1])) continue;
      img.line(px(i, s.y.size()), py(s.y[i]), px(i + 1, s.y.size()), py(s.y[i + 1]), s.color);
    }
    if (s.y.size() == 1 && std::isfinite(s.y[0])) img.set(px(0, 1), py(s.y[0]), s.color);
  }
}

Image heatmap(const std::vector<std::vector<double>>& m, int cell) {
  const int rows = static_cast<int>(m.size());
  const int cols = rows ? static_cast<int>(m.front().size()) : 0;
  if (rows == 0 || cols == 0) throw std::invalid_argument("heatmap of an empty matrix");
  double mx = 0.0;
  for (const auto& r : m)
    for (double v : r) mx = std::max(mx, v);
  Image img(cols * cell, rows * cell);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double t = mx > 0.0 ? m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] / mx : 0.0;
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::clamp(t, 0.0, 1.0))));
      img.rect(c * cell, r * cell, (c + 1) * cell - 1, (r + 1) * cell - 1, {g, g, g});
    }
  return img;
}

std::string histograms_csv(const train::EvalResult& r) {
  std::string out = "domain,kind,lo,hi,bin,count\n";
  for (const auto& d : r.domains) {
    for (const auto* kind : {"raw", "normalized"}) {
      const auto& h = std::string(kind) == "raw" ? d.raw_hist : d.normalized_hist;
      for (int b = 0; b < h.bins(); ++b)
        out += std::to_string(d.domain) + "," + kind + "," + num(h.lo()) + "," + num(h.hi()) + "," +
               std::to_string(b) + "," + num(h.counts()[static_cast<std::size_t>(b)]) + "\n";
    }
  }
  return out;
}

std::vector<HistogramRow> parse_histograms_csv(const std::string& text) {
  const auto ls = lines(text);
  if (ls.empty() || ls.front() != "domain,kind,lo,hi,bin,count") throw std::invalid_argument("bad histograms header");
  struct Acc {
    double lo = 0, hi = 0;
    std::vector<double> counts;
  };
  std::map<std::pair<int, std::string>, Acc> acc;
  std::vector<std::pair<int, std::string>> order;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto f = fields(ls[i]);
    if (f.size() != 6) throw std::invalid_argument("histogram row needs 6 fields");
    const std::pair key{std::stoi(f[0]), f[1]};
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) {
      order.push_back(key);
      it->second.lo = parse_num(f[2]);
      it->second.hi = parse_num(f[3]);
    }
    if (std::stoi(f[4]) != static_cast<int>(it->second.counts.size()))
      throw std::invalid_argument("histogram bins out of order");
    it->second.counts.push_back(parse_num(f[5]));
  }
  std::vector<HistogramRow> out;
  for (const auto& key : order) {
    auto& a = acc[key];
    out.push_back({key.first, key.second, metrics::Histogram::from_counts(a.counts, a.lo, a.hi)});
  }
  return out;
}

std::string profiles_csv(const train::EvalResult& r) {
  std::string out = "domain,y,raw,normalized\n";
  for (const auto& d : r.domains)
    for (std::size_t y = 0; y < d.raw_profile.size(); ++y)
      out += std::to_string(d.domain) + "," + std::to_string(y) + "," + num(d.raw_profile[y]) + "," +
             num(d.normalized_profile[y]) + "\n";
  return out;
}

std::string confusion_csv(const std::vector<std::vector<double>>& m) {
  std::string out;
  for (const auto& row : m) {
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + num(row[c]);
    out += "\n";
  }
  return out;
}

std::vector<std::vector<double>> parse_confusion_csv(const std::string& text) {
  std::vector<std::vector<double>> m;
  for (const auto& l : lines(text)) {
    std::vector<double> row;
    for (const auto& f : fields(l)) row.push_back(parse_num(f));
    if (!m.empty() && row.size() != m.front().size()) throw std::invalid_argument("ragged confusion matrix");
    m.push_back(std::move(row));
  }
  if (!m.empty() && m.size() != m.front().size()) throw std::invalid_argument("confusion matrix must be square");
  return m;
}

void write_eval_outputs(const fs::path& dir, const train::EvalResult& r, const json& meta) {
  fs::create_directories(dir);
  std::vector<metrics::MetricReport> reports;
  for (const auto& d : r.domains) reports.push_back(d.report);
  reports.push_back(r.overall);
  write_text(dir / "reports.csv", metrics::to_csv(reports));
  json j = meta;
  j["raw_jsd"] = r.raw_jsd;
  j["normalized_jsd"] = r.normalized_jsd;
  j["raw_pearson"] = r.raw_pearson;
  j["normalized_pearson"] = r.normalized_pearson;
  json domains = json::array();
  for (const auto& d : r.domains) {
    json rep;
    metrics::to_json(rep, d.report);
    domains.push_back({{"domain", d.domain},
                       {"raw_pearson", d.raw_pearson},
                       {"normalized_pearson", d.normalized_pearson},
                       {"report", rep}});
  }
  j["domains"] = domains;
  json overall;
  metrics::to_json(overall, r.overall);
  j["overall"] = overall;
  write_text(dir / "eval.json", j.dump(2) + "\n");
  write_text(dir / "histograms.csv", histograms_csv(r));
  write_text(dir / "profiles.csv", profiles_csv(r));
  if (!r.overall.confusion.empty()) {
    write_text(dir / "confusion.csv", confusion_csv(r.overall.confusion));
  } else {
    std::error_code ec;
    fs::remove(dir / "confusion.csv", ec);
  }
}

ReportResult make_report(const fs::path& eval_dir, const fs::path& out_dir) {
  if (!fs::is_directory(eval_dir)) throw std::runtime_error("eval directory not found: " + eval_dir.string());
  fs::create_directories(out_dir);
  ReportResult res;
  std::vector<std::pair<std::string, std::string>> summary;
  auto missing = [&](const std::string& name, const std::string& why) {
    res.warnings.push_back(name + ": " + why);
  };

  std::string text;
  if (read_text(eval_dir / "reports.csv", text)) {
    try {
      for (const auto& r : metrics::from_csv(text)) {
        const std::string tag = r.test_domain == 0 ? "overall" : "domain_" + std::to_string(r.test_domain);
        summary.emplace_back(tag + ".mean_dsc", num(r.mean_dsc));
        summary.emplace_back(tag + ".mean_mhd", num(r.mean_mhd));
        summary.emplace_back(tag + ".pearson", num(r.pearson));
      }
    } catch (const std::exception& e) {
      missing("reports.csv", e.what());
    }
  } else {
    missing("reports.csv", "missing");
  }

  if (read_text(eval_dir / "histograms.csv", text)) {
    try {
      const auto rows = parse_histograms_csv(text);
      Image img(640, 240);
      std::map<std::string, std::vector<metrics::Histogram>> groups;
      std::map<std::string, std::vector<Series>> series;
      for (const auto& row : rows) {
        groups[row.kind].push_back(row.hist);
        series[row.kind].push_back({row.hist.normalized(), palette(row.domain - 1)});
      }
      plot_lines(img, 10, 10, 300, 220, series["raw"]);
      plot_lines(img, 330, 10, 300, 220, series["normalized"]);
      write_ppm(out_dir / "histograms.ppm", img);
      res.files.push_back(out_dir / "histograms.ppm");
      for (const auto* kind : {"raw", "normalized"}) {
        const auto& g = groups[kind];
        if (g.size() >= 2) summary.emplace_back(std::string(kind) + "_jsd", num(metrics::histogram_jsd(g)));
      }
    } catch (const std::exception& e) {
      missing("histograms.csv", e.what());
    }
  } else {
    missing("histograms.csv", "missing");
  }

  if (read_text(eval_dir / "profiles.csv", text)) {
    try {
      const auto ls = lines(text);
      if (ls.empty() || ls.front() != "domain,y,raw,normalized") throw std::invalid_argument("bad header");
      std::map<int, std::pair<std::vector<double>, std::vector<double>>> prof;
      for (std::size_t i = 1; i < ls.size(); ++i) {
        const auto f = fields(ls[i]);
        if (f.size() != 4) throw std::invalid_argument("profile row needs 4 fields");
        auto& p = prof[std::stoi(f[0])];
        p.first.push_back(parse_num(f[2]));
        p.second.push_back(parse_num(f[3]));
      }
      std::vector<Series> raw, norm;
      for (const auto& [d, p] : prof) {
        raw.push_back({p.first, palette(d - 1)});
        norm.push_back({p.second, palette(d - 1)});
      }
      Image img(640, 240);
      plot_lines(img, 10, 10, 300, 220, raw);
      plot_lines(img, 330, 10, 300, 220, norm);
      write_ppm(out_dir / "profiles.ppm", img);
      res.files.push_back(out_dir / "profiles.ppm");
    } catch (const std::exception& e) {
      missing("profiles.csv", e.what());
    }
  } else {
    missing("profiles.csv", "missing");
  }

  if (read_text(eval_dir / "confusion.csv", text)) {
    try {
      const auto m = parse_confusion_csv(text);
      write_pgm(out_dir / "confusion.pgm", heatmap(m));
      res.files.push_back(out_dir / "confusion.pgm");
      for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < m[r].size(); ++c)
          summary.emplace_back("confusion." + std::to_string(r + 1) + "." + std::to_string(c + 1), num(m[r][c]));
    } catch (const std::exception& e) {
      missing("confusion.csv", e.what());
    }
  } else {
    missing("confusion.csv", "missing");
  }

  std::string csv = "metric,value\n";
  for (const auto& [k, v] : summary) csv += k + "," + v + "\n";
  write_text(out_dir / "summary.csv", csv);
  res.files.push_back(out_dir / "summary.csv");
  std::string warn;
  for (const auto& w : res.warnings) warn += w + "\n";
  write_text(out_dir / "warnings.txt", warn);
  return res;
}

}  // namespace advnorm::report
