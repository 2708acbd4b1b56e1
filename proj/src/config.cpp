#include "advnorm/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "advnorm/volume_io.hpp"

namespace advnorm::config {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& keys, const std::string& section) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be a table");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError("unknown key '" + k + "' in [" + section + "]");
}

template <typename T>
void get(const json& j, const char* key, T& field, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const json::exception& e) {
    throw ConfigError("bad value for " + section + "." + key + ": " + e.what());
  }
}

json data_json(const DataConfig& d) {
  return {{"profiles", d.profiles}, {"subjects", d.subjects},   {"shape", d.shape},
          {"shells", d.shells},     {"deformation", d.deformation}, {"seed", d.seed},
          {"channels", d.channels}, {"second_channel", d.second_channel}, {"train", d.train},
          {"val", d.val},           {"test", d.test},           {"manifest", d.manifest}};
}

void data_from(const json& j, DataConfig& d) {
  check_keys(j, {"profiles", "subjects", "shape", "shells", "deformation", "seed", "channels", "second_channel",
                 "train", "val", "test", "manifest"},
             "data");
  get(j, "profiles", d.profiles, "data");
  get(j, "subjects", d.subjects, "data");
  get(j, "shape", d.shape, "data");
  get(j, "shells", d.shells, "data");
  get(j, "deformation", d.deformation, "data");
  get(j, "seed", d.seed, "data");
  get(j, "channels", d.channels, "data");
  get(j, "second_channel", d.second_channel, "data");
  get(j, "train", d.train, "data");
  get(j, "val", d.val, "data");
  get(j, "test", d.test, "data");
  get(j, "manifest", d.manifest, "data");
}

json model_json(const ModelSection& m) {
  return {{"base", m.base}, {"depth", m.depth}, {"d_widths", m.d_widths}, {"dropout", m.dropout},
          {"leaky_slope", m.leaky_slope}};
}

void model_from(const json& j, ModelSection& m) {
  check_keys(j, {"base", "depth", "d_widths", "dropout", "leaky_slope"}, "model");
  get(j, "base", m.base, "model");
  get(j, "depth", m.depth, "model");
  get(j, "d_widths", m.d_widths, "model");
  get(j, "dropout", m.dropout, "model");
  get(j, "leaky_slope", m.leaky_slope, "model");
}

json eval_json(const EvalConfig& e) {
  return {{"stride", e.stride},
          {"batch", e.batch},
          {"alphas", e.alphas},
          {"discriminator_patches", e.discriminator_patches},
          {"bins", e.bins},
          {"seed", e.seed},
          {"split", e.split}};
}

void eval_from(const json& j, EvalConfig& e) {
  check_keys(j, {"stride", "batch", "alphas", "discriminator_patches", "bins", "seed", "split"}, "eval");
  get(j, "stride", e.stride, "eval");
  get(j, "batch", e.batch, "eval");
  get(j, "alphas", e.alphas, "eval");
  get(j, "discriminator_patches", e.discriminator_patches, "eval");
  get(j, "bins", e.bins, "eval");
  get(j, "seed", e.seed, "eval");
  get(j, "split", e.split, "eval");
}

json theory_json(const TheoryConfig& t) {
  return {{"K", t.K},
          {"n", t.n},
          {"seeds", t.seeds},
          {"first_seed", t.first_seed},
          {"mode", t.mode},
          {"steps", t.steps},
          {"g_rate", t.g_rate},
          {"d_rate", t.d_rate},
          {"d_steps", t.d_steps},
          {"threshold", t.threshold},
          {"init_at_mean", t.init_at_mean},
          {"prior", t.prior}};
}

void theory_from(const json& j, TheoryConfig& t) {
  check_keys(j, {"K", "n", "seeds", "first_seed", "mode", "steps", "g_rate", "d_rate", "d_steps", "threshold",
                 "init_at_mean", "prior"},
             "theory");
  get(j, "K", t.K, "theory");
  get(j, "n", t.n, "theory");
  get(j, "seeds", t.seeds, "theory");
  get(j, "first_seed", t.first_seed, "theory");
  get(j, "mode", t.mode, "theory");
  get(j, "steps", t.steps, "theory");
  get(j, "g_rate", t.g_rate, "theory");
  get(j, "d_rate", t.d_rate, "theory");
  get(j, "d_steps", t.d_steps, "theory");
  get(j, "threshold", t.threshold, "theory");
  get(j, "init_at_mean", t.init_at_mean, "theory");
  get(j, "prior", t.prior, "theory");
}

json toml_to_json(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (const auto* a = n.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = n.as_string()) return v->get();
  if (const auto* v = n.as_integer()) return v->get();
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_boolean()) return v->get();
  throw ConfigError("unsupported TOML value (dates and times are not accepted)");
}

std::string toml_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string toml_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n') {
      out += "\\n";
    } else if (static_cast<unsigned char>(c) < 0x20) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\u%04x", c);
      out += buf;
    } else {
      out += c;
    }
  }
  return out + "\"";
}

std::string toml_value(const json& v) {
  switch (v.type()) {
    case json::value_t::string: return toml_string(v.get<std::string>());
    case json::value_t::boolean: return v.get<bool>() ? "true" : "false";
    case json::value_t::number_integer: return std::to_string(v.get<std::int64_t>());
    case json::value_t::number_unsigned: {
      const auto u = v.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(INT64_MAX)) throw ConfigError("integer too large for TOML");
      return std::to_string(u);
    }
    case json::value_t::number_float: return toml_double(v.get<double>());
    case json::value_t::array: {
      std::string out = "[";
      for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + toml_value(v[i]);
      return out + "]";
    }
    default: throw ConfigError("cannot write value as TOML");
  }
}

// Double-typed fields must stay floats in TOML even when they hold integral values.
void force_floats(json& j, const std::set<std::string>& keys) {
  for (const auto& k : keys) {
    if (!j.contains(k)) continue;
    auto& v = j[k];
    if (v.is_number()) {
      v = v.get<double>();
    } else if (v.is_array()) {
      for (auto& e : v) e = e.get<double>();
    }
  }
}

json profile_json(const synth::DomainProfile& p) {
  json j = {{"domain", p.domain}, {"name", p.name},       {"mean", p.mean},
            {"stddev", p.stddev}, {"noise", p.noise},     {"overlap", p.overlap}};
  if (p.mean2) j["mean2"] = *p.mean2;
  if (p.stddev2) j["stddev2"] = *p.stddev2;
  return j;
}

synth::DomainProfile profile_from(const json& j) {
  synth::DomainProfile p;
  j.at("domain").get_to(p.domain);
  j.at("name").get_to(p.name);
  j.at("mean").get_to(p.mean);
  j.at("stddev").get_to(p.stddev);
  j.at("noise").get_to(p.noise);
  j.at("overlap").get_to(p.overlap);
  if (j.contains("mean2")) p.mean2 = j["mean2"].get<std::array<double, kNumClasses>>();
  if (j.contains("stddev2")) p.stddev2 = j["stddev2"].get<std::array<double, kNumClasses>>();
  p.validate();
  return p;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  json t;
  train::to_json(t, c.train);
  j = {{"output_dir", c.output_dir}, {"data", data_json(c.data)}, {"model", model_json(c.model)},
       {"train", t},                 {"eval", eval_json(c.eval)}, {"theory", theory_json(c.theory)}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  check_keys(j, {"output_dir", "data", "model", "train", "eval", "theory"}, "root");
  ExperimentConfig d;
  get(j, "output_dir", d.output_dir, "root");
  if (j.contains("data")) data_from(j["data"], d.data);
  if (j.contains("model")) model_from(j["model"], d.model);
  if (j.contains("train")) {
    if (!j["train"].is_object()) throw ConfigError("section 'train' must be a table");
    try {
      train::from_json(j["train"], d.train);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("[train]: ") + e.what());
    }
  }
  if (j.contains("eval")) eval_from(j["eval"], d.eval);
  if (j.contains("theory")) theory_from(j["theory"], d.theory);
  c = d;
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(!output_dir.empty(), "output_dir must not be empty");
  need(data.domains() >= 2, "data.profiles needs at least two domains");
  need(data.subjects >= 3, "data.subjects must be at least 3");
  need(data.shape >= 24, "data.shape must be at least 24");
  need(data.shells >= 3, "data.shells must be at least 3");
  need(data.deformation >= 0.0 && data.deformation < 0.5, "data.deformation must lie in [0, 0.5)");
  need(data.channels == 1 || data.channels == 2, "data.channels must be 1 or 2");
  need(data.second_channel == "preset" || data.second_channel == "noise",
       "data.second_channel must be 'preset' or 'noise'");
  const bool any_split = data.train || data.val || data.test;
  need(!any_split || (data.train > 0 && data.val > 0 && data.test > 0 &&
                      data.train + data.val + data.test == data.subjects),
       "data.train/val/test must be positive and sum to data.subjects");
  need(model.base >= 1 && model.depth >= 1, "model.base and model.depth must be positive");
  need(eval.stride >= 1 && eval.batch >= 1 && eval.bins >= 2 && eval.discriminator_patches >= 0,
       "eval.stride, eval.batch and eval.bins must be positive");
  for (double a : eval.alphas) need(a >= 0.0 && a <= 1.0, "eval.alphas must lie in [0, 1]");
  try {
    (void)synth::parse_split(eval.split);
    (void)theory::parse_mode(theory.mode);
    (void)profiles();
    train.validate();
    model_config().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  need(train.patch <= data.shape, "train.patch must not exceed data.shape");
  need(train.patch % (1 << model.depth) == 0, "train.patch must be divisible by 2^model.depth");
  for (int z : train.domains) need(z >= 1 && z <= data.domains(), "train.domains entries must lie in 1..K");
  need(theory.K >= 2 && theory.n >= 2 && theory.seeds >= 1 && theory.steps >= 1 && theory.d_steps >= 1,
       "theory.K and theory.n must be at least 2; seeds, steps and d_steps positive");
  need(theory.prior.empty() || static_cast<int>(theory.prior.size()) == theory.K,
       "theory.prior must be empty or hold K entries");
}

train::ModelConfig ExperimentConfig::model_config() const {
  train::ModelConfig m;
  m.generator = generator_config(data.channels, model.base, model.depth);
  m.segmenter = segmenter_config(data.channels, model.base, model.depth);
  m.discriminator.in_channels = data.channels;
  m.discriminator.domains = data.domains();
  m.discriminator.input_size = train.patch;
  m.discriminator.leaky_slope = model.leaky_slope;
  m.discriminator.dropout = model.dropout;
  m.discriminator.widths = model.d_widths;
  return m;
}

std::vector<synth::DomainProfile> ExperimentConfig::profiles() const {
  std::vector<synth::DomainProfile> out;
  for (std::size_t i = 0; i < data.profiles.size(); ++i) {
    auto p = synth::preset_profile(data.profiles[i], static_cast<int>(i) + 1);
    if (data.channels == 1) {
      p = synth::single_channel(p);
    } else if (data.second_channel == "noise") {
      p.mean2 = std::array<double, kNumClasses>{0.0, 0.5, 0.5, 0.5};
      p.stddev2 = std::array<double, kNumClasses>{0.0, 0.15, 0.15, 0.15};
      p.name += "+noise";
    }
    out.push_back(p);
  }
  return out;
}

synth::PhantomSpec ExperimentConfig::phantom() const {
  synth::PhantomSpec s;
  s.shape = Vec3i::cube(data.shape);
  s.shells = data.shells;
  s.deformation = data.deformation;
  s.seed = data.seed;
  return s;
}

ExperimentConfig parse_toml(const std::string& text) {
  toml::table tbl;
  try {
    tbl = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(os.str());
  }
  ExperimentConfig c;
  from_json(toml_to_json(tbl), c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_toml(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_toml(const ExperimentConfig& c) {
  json j;
  to_json(j, c);
  force_floats(j["data"], {"deformation"});
  force_floats(j["model"], {"dropout", "leaky_slope"});
  force_floats(j["train"], {"lambda", "lr_gs", "lr_d", "weight_decay", "gamma", "plateau_factor",
                            "augment_probability", "dice_epsilon", "dice_weights"});
  force_floats(j["eval"], {"alphas"});
  force_floats(j["theory"], {"g_rate", "d_rate", "threshold", "prior"});
  std::string out = "output_dir = " + toml_string(c.output_dir) + "\n";
  for (const char* section : {"data", "model", "train", "eval", "theory"}) {
    out += std::string("\n[") + section + "]\n";
    for (const auto& [k, v] : j[section].items()) out += k + " = " + toml_value(v) + "\n";
  }
  return out;
}

ExperimentConfig apply_patch(const ExperimentConfig& base, const nlohmann::json& patch) {
  json j;
  to_json(j, base);
  j.merge_patch(patch);
  ExperimentConfig out;
  from_json(j, out);
  return out;
}

std::filesystem::path output_path(const ExperimentConfig& c) {
  std::filesystem::path p(c.output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootVar); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

synth::DomainSuite build_suite(const ExperimentConfig& c) {
  if (!c.data.manifest.empty()) {
    auto suite = read_suite(c.data.manifest);
    if (suite.domains() != c.data.domains())
      throw ConfigError("manifest has " + std::to_string(suite.domains()) + " domains, config expects " +
                        std::to_string(c.data.domains()));
    for (const auto& s : suite.subjects)
      if (s.volume.image.channels() != c.data.channels)
        throw ConfigError("manifest volumes have " + std::to_string(s.volume.image.channels()) +
                          " channels, config expects " + std::to_string(c.data.channels));
    return suite;
  }
  std::optional<synth::SplitCounts> split;
  if (c.data.train || c.data.val || c.data.test) split = synth::SplitCounts{c.data.train, c.data.val, c.data.test};
  return synth::make_domain_suite(c.profiles(), c.data.subjects, c.phantom(), c.data.seed, split);
}

std::filesystem::path write_suite(const synth::DomainSuite& suite, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  std::string csv = "domain,index,split,profile,image,labels\n";
  for (const auto& s : suite.subjects) {
    char stem[64];
    std::snprintf(stem, sizeof stem, "d%d_s%03d", s.domain, s.index);
    const std::string image = std::string("images/") + stem + ".nii";
    const std::string labels = std::string("labels/") + stem + ".nii";
    io::write_nifti(dir / image, s.volume.image);
    io::write_nifti_labels(dir / labels, s.volume.labels, s.volume.image.spacing());
    csv += std::to_string(s.domain) + "," + std::to_string(s.index) + "," + synth::split_name(s.split) + "," +
           suite.profiles.at(static_cast<std::size_t>(s.domain - 1)).name + "," + image + "," + labels + "\n";
  }
  json profiles = json::array();
  for (const auto& p : suite.profiles) profiles.push_back(profile_json(p));
  {
    std::ofstream out(dir / "profiles.json", std::ios::binary);
    out << profiles.dump(2) << "\n";
  }
  const auto manifest = dir / "manifest.csv";
  std::ofstream out(manifest, std::ios::binary);
  out << csv;
  if (!out) throw io::IoError("cannot write " + manifest.string());
  return manifest;
}

synth::DomainSuite read_suite(const std::filesystem::path& manifest) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw ConfigError("cannot read manifest '" + manifest.string() + "'");
  const auto dir = manifest.parent_path();
  synth::DomainSuite suite;
  std::ifstream pin(dir / "profiles.json", std::ios::binary);
  if (!pin) throw ConfigError("manifest directory lacks profiles.json");
  try {
    for (const auto& p : json::parse(pin)) suite.profiles.push_back(profile_from(p));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad profiles.json: ") + e.what());
  }
  std::string line;
  std::getline(in, line);
  if (split_csv_line(line) != std::vector<std::string>{"domain", "index", "split", "profile", "image", "labels"})
    throw ConfigError("unexpected manifest header '" + line + "'");
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw ConfigError("manifest row " + std::to_string(row) + " needs 6 fields");
    synth::Subject s;
    try {
      s.domain = std::stoi(f[0]);
      s.index = std::stoi(f[1]);
      s.split = synth::parse_split(f[2]);
    } catch (const std::exception& e) {
      throw ConfigError("manifest row " + std::to_string(row) + ": " + e.what());
    }
    if (s.domain < 1 || s.domain > suite.domains())
      throw ConfigError("manifest row " + std::to_string(row) + ": domain out of range");
    s.volume.image = io::load_volume(dir / f[4]);
    s.volume.labels = io::load_labels(dir / f[5]);
    if (s.volume.labels.shape() != s.volume.image.shape())
      throw ConfigError("manifest row " + std::to_string(row) + ": image and labels differ in shape");
    suite.subjects.push_back(std::move(s));
  }
  return suite;
}

}  // namespace advnorm::config
