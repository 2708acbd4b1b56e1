#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "advnorm/report.hpp"

using namespace advnorm;
using namespace advnorm::report;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

train::EvalResult fake_result() {
  train::EvalResult r;
  for (int d = 1; d <= 2; ++d) {
    train::DomainEval de;
    de.domain = d;
    de.raw_hist = metrics::Histogram(16, -0.5, 1.25);
    de.normalized_hist = metrics::Histogram(16, 0.0, 2.0);
    for (int i = 0; i < 200; ++i) {
      de.raw_hist.add_value(0.01 * i * d);
      de.normalized_hist.add_value(0.003 * i + 0.1 * d);
    }
    de.raw_profile = {0.1 * d, 0.2, 0.3 / d};
    de.normalized_profile = {0.5, 0.5, 0.5 + 0.01 * d};
    de.report.name = "fake";
    de.report.test_domain = d;
    de.report.dsc = {0.0, 0.9, 0.8 - 0.1 * d, 0.7};
    de.report.mhd = {0.0, 1.0, 2.0, 3.0};
    de.report.finalize_means();
    r.domains.push_back(de);
  }
  r.overall = r.domains[0].report;
  r.overall.test_domain = 0;
  r.overall.confusion = {{0.2, 0.05, 0.0}, {0.0, 0.25, 0.0}, {0.3, 0.1, 0.1}};
  std::vector<metrics::Histogram> raw{r.domains[0].raw_hist, r.domains[1].raw_hist};
  std::vector<metrics::Histogram> norm{r.domains[0].normalized_hist, r.domains[1].normalized_hist};
  r.raw_jsd = metrics::histogram_jsd(raw);
  r.normalized_jsd = metrics::histogram_jsd(norm);
  return r;
}

}  // namespace

TEST_CASE("raster drawing and PPM round trip") {
  Image img(9, 5);
  img.line(0, 0, 8, 4, {255, 0, 0});
  CHECK(img.get(0, 0) == std::array<std::uint8_t, 3>{255, 0, 0});
  CHECK(img.get(8, 4) == std::array<std::uint8_t, 3>{255, 0, 0});
  CHECK(img.get(4, 2) == std::array<std::uint8_t, 3>{255, 0, 0});
  CHECK(img.get(8, 0) == std::array<std::uint8_t, 3>{255, 255, 255});
  img.set(100, 100, {0, 0, 0});
  const auto p = fs::temp_directory_path() / "advnorm_test_report.ppm";
  write_ppm(p, img);
  const auto back = read_ppm(p);
  CHECK(back.width == 9);
  CHECK(back.rgb == img.rgb);
  CHECK_THROWS_AS(Image(0, 3), std::invalid_argument);
}

TEST_CASE("heatmap shades by value") {
  const auto img = heatmap({{0.0, 1.0}, {0.5, 0.25}}, 2);
  CHECK(img.width == 4);
  CHECK(img.get(0, 0)[0] == 255);
  CHECK(img.get(2, 0)[0] == 0);
  CHECK(img.get(1, 3)[0] == 128);
  CHECK_THROWS_AS(heatmap({}), std::invalid_argument);
}

TEST_CASE("histogram CSV reproduces the binning used for JSD") {
  const auto r = fake_result();
  const auto rows = parse_histograms_csv(histograms_csv(r));
  REQUIRE(rows.size() == 4);
  std::vector<metrics::Histogram> raw, norm;
  for (const auto& row : rows) {
    const auto& src = row.kind == "raw" ? r.domains[static_cast<std::size_t>(row.domain - 1)].raw_hist
                                        : r.domains[static_cast<std::size_t>(row.domain - 1)].normalized_hist;
    CHECK(row.hist.counts() == src.counts());
    CHECK(row.hist.lo() == src.lo());
    CHECK(row.hist.hi() == src.hi());
    (row.kind == "raw" ? raw : norm).push_back(row.hist);
  }
  CHECK(metrics::histogram_jsd(raw) == r.raw_jsd);
  CHECK(metrics::histogram_jsd(norm) == r.normalized_jsd);
  CHECK_THROWS_AS(parse_histograms_csv("bins\n"), std::invalid_argument);
}

TEST_CASE("confusion CSV round trip") {
  const std::vector<std::vector<double>> m{{0.1, 0.2}, {1.0 / 3.0, 0.0}};
  CHECK(parse_confusion_csv(confusion_csv(m)) == m);
  CHECK_THROWS_AS(parse_confusion_csv("1,2\n3\n"), std::invalid_argument);
}

TEST_CASE("report is idempotent and degrades to a partial report") {
  const auto root = fs::temp_directory_path() / "advnorm_test_report_run";
  fs::remove_all(root);
  const auto r = fake_result();
  write_eval_outputs(root / "eval", r, {{"checkpoint", "none"}});
  for (const char* f : {"reports.csv", "eval.json", "histograms.csv", "profiles.csv", "confusion.csv"})
    CHECK(fs::exists(root / "eval" / f));
  const auto reports = metrics::from_csv(slurp(root / "eval" / "reports.csv"));
  REQUIRE(reports.size() == 3);
  CHECK(reports[1].mean_dsc == r.domains[1].report.mean_dsc);

  const auto first = make_report(root / "eval", root / "report");
  CHECK(first.warnings.empty());
  const auto summary = slurp(root / "report" / "summary.csv");
  make_report(root / "eval", root / "report");
  CHECK(slurp(root / "report" / "summary.csv") == summary);
  CHECK(summary.find("normalized_jsd,") != std::string::npos);
  CHECK(fs::exists(root / "report" / "histograms.ppm"));
  CHECK(fs::exists(root / "report" / "confusion.pgm"));

  fs::remove(root / "eval" / "confusion.csv");
  const auto partial = make_report(root / "eval", root / "report2");
  REQUIRE(partial.warnings.size() == 1);
  CHECK(partial.warnings[0].rfind("confusion.csv", 0) == 0);
  CHECK(fs::exists(root / "report2" / "summary.csv"));
  CHECK_FALSE(fs::exists(root / "report2" / "confusion.pgm"));
  CHECK_THROWS_AS(make_report(root / "nope", root / "report3"), std::runtime_error);
}
