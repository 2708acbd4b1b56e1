#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "advnorm/trainer.hpp"

namespace advnorm::report {

/// 8-bit RGB raster, row 0 at the top.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::uint8_t fill = 255);
  void set(int x, int y, std::array<std::uint8_t, 3> c);
  std::array<std::uint8_t, 3> get(int x, int y) const;
  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c);
  void rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c);  // filled, inclusive
};

void write_ppm(const std::filesystem::path& path, const Image& img);
/// Grey-scale from the red channel.
void write_pgm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

struct Series {
  std::vector<double> y;  // plotted against the index
  std::array<std::uint8_t, 3> color{0, 0, 0};
};

/// Line chart of several series on shared axes; each series is scaled into the panel.
void plot_lines(Image& img, int x0, int y0, int w, int h, const std::vector<Series>& series);
/// Cells shaded from white (0) to black (max of the matrix).
Image heatmap(const std::vector<std::vector<double>>& m, int cell = 24);

std::array<std::uint8_t, 3> palette(int i);

/// Everything an eval writes: reports.csv, eval.json, histograms.csv, profiles.csv, confusion.csv.
void write_eval_outputs(const std::filesystem::path& dir, const train::EvalResult& r, const nlohmann::json& meta);

struct HistogramRow {
  int domain = 0;
  std::string kind;  // "raw" or "normalized"
  metrics::Histogram hist;
};

std::string histograms_csv(const train::EvalResult& r);
std::vector<HistogramRow> parse_histograms_csv(const std::string& text);
std::string profiles_csv(const train::EvalResult& r);
std::string confusion_csv(const std::vector<std::vector<double>>& m);
std::vector<std::vector<double>> parse_confusion_csv(const std::string& text);

struct ReportResult {
  std::vector<std::string> warnings;  // one per missing or unreadable input, naming it
  std::vector<std::filesystem::path> files;
};

/// Reads <eval_dir>/{reports.csv,histograms.csv,profiles.csv,confusion.csv} and writes
/// plots and summary.csv into out_dir. Throws std::runtime_error when eval_dir does not exist.
ReportResult make_report(const std::filesystem::path& eval_dir, const std::filesystem::path& out_dir);

}  // namespace advnorm::report
