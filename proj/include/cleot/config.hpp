#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cleot/data.hpp"
#include "cleot/errors.hpp"
#include "cleot/nn.hpp"
#include "cleot/noise.hpp"
#include "cleot/objective.hpp"

namespace cleot {

/// Sectioned key = value text. '#' and ';' start comments; keys outside any
/// section are rejected.
class IniDocument {
 public:
  static IniDocument parse(std::istream& is) {
    IniDocument doc;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("", "line " + std::to_string(lineno) + ": unterminated section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError("", "line " + std::to_string(lineno) + ": empty section name");
        doc.values_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
      if (section.empty()) throw ConfigError("", "line " + std::to_string(lineno) + ": key outside a section");
      const std::string key = detail::trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(section, "line " + std::to_string(lineno) + ": empty key");
      if (doc.values_[section].count(key)) throw ConfigError(section + "." + key, "duplicate key");
      doc.values_[section][key] = detail::trim(line.substr(eq + 1));
    }
    return doc;
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    return s != values_.end() && s->second.count(key);
  }

  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const {
    used_.insert(section + "." + key);
    return has(section, key) ? values_.at(section).at(key) : fallback;
  }

  std::string require(const std::string& section, const std::string& key) const {
    used_.insert(section + "." + key);
    if (!has(section, key)) throw ConfigError(section + "." + key, "missing required key");
    return values_.at(section).at(key);
  }

  double number(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) {
      used_.insert(section + "." + key);
      return fallback;
    }
    const auto v = detail::parse_double(get(section, key, ""));
    if (!v) throw ConfigError(section + "." + key, "expected a number");
    return *v;
  }

  std::size_t count(const std::string& section, const std::string& key, std::size_t fallback) const {
    const double v = number(section, key, static_cast<double>(fallback));
    if (v < 0.0 || v != std::floor(v)) throw ConfigError(section + "." + key, "expected a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& section, const std::string& key, bool fallback) const {
    const std::string v = get(section, key, fallback ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(section + "." + key, "expected true or false");
  }

  std::vector<std::string> list(const std::string& section, const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream is(get(section, key, ""));
    std::string item;
    while (std::getline(is, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<double> numbers(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : list(section, key)) {
      const auto v = detail::parse_double(item);
      if (!v) throw ConfigError(section + "." + key, "'" + item + "' is not a number");
      out.push_back(*v);
    }
    return out;
  }

  /// Keys present in the file but never queried.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [s, kv] : values_)
      for (const auto& [k, v] : kv)
        if (!used_.count(s + "." + k)) out.push_back(s + "." + k);
    return out;
  }

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
  mutable std::set<std::string> used_;
};

struct DatasetSpec {
  enum class Kind { two_moons, csv } kind = Kind::two_moons;
  std::size_t n = 400;
  double noise_std = 0.1;
  std::string path;
};

struct NoiseSpec {
  enum class Kind { none, symmetric, asymmetric } kind = Kind::none;
  std::vector<double> levels{0.0};
  std::vector<FlipPair> pairs;

  TransitionMatrix matrix(std::size_t classes, double level) const {
    switch (kind) {
      case Kind::none: return TransitionMatrix::identity(classes);
      case Kind::symmetric: return symmetric_matrix(classes, level);
      case Kind::asymmetric: return asymmetric_matrix(classes, FlipSpec{pairs, level});
    }
    return TransitionMatrix::identity(classes);
  }
};

struct ExperimentConfig {
  DatasetSpec dataset;
  SplitFractions split;
  NoiseSpec noise;
  std::vector<std::string> methods;
  CleotConfig cleot;
  double bootstrap_beta = 0.95;
  std::vector<std::size_t> hidden{256, 256};
  double dropout = 0.0;
  bool batchnorm = false;
  double l2 = 0.0;
  double lr = 0.01;
  double momentum = 0.9;
  double cleot_lr = 0.1;
  std::size_t batch_size = 128;
  std::size_t cleot_per_class = 50;
  std::size_t max_epochs = 300;
  std::size_t patience = 25;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::string output_dir = "results";
};

inline const std::set<std::string>& known_methods() {
  static const std::set<std::string> tags{"cross_entropy", "unhinged", "sigmoid", "ramp",   "savage",
                                          "bootstrap_soft", "backward", "forward", "cleot"};
  return tags;
}

/// Parses and validates an experiment config. Relative dataset paths resolve
/// against `base_dir`.
inline ExperimentConfig parse_config(std::istream& is, const std::filesystem::path& base_dir = {}) {
  const auto doc = IniDocument::parse(is);
  ExperimentConfig c;

  const std::string kind = doc.get("dataset", "kind", "two_moons");
  if (kind == "two_moons") {
    c.dataset.kind = DatasetSpec::Kind::two_moons;
    c.dataset.n = doc.count("dataset", "n", 400);
    c.dataset.noise_std = doc.number("dataset", "noise_std", 0.1);
    if (c.dataset.n == 0 || c.dataset.n % 2) throw ConfigError("dataset.n", "must be a positive even number");
    if (c.dataset.noise_std < 0.0) throw ConfigError("dataset.noise_std", "must be non-negative");
  } else if (kind == "csv") {
    c.dataset.kind = DatasetSpec::Kind::csv;
    std::filesystem::path p = doc.require("dataset", "path");
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    if (!std::filesystem::exists(p)) throw ConfigError("dataset.path", "file not found: " + p.string());
    c.dataset.path = p.string();
  } else {
    throw ConfigError("dataset.kind", "expected two_moons or csv, got '" + kind + "'");
  }

  c.split.train = doc.number("split", "train", 0.8);
  c.split.val = doc.number("split", "val", 0.1);
  c.split.test = doc.number("split", "test", 0.1);
  if (c.split.train < 0 || c.split.val <= 0 || c.split.test <= 0 ||
      std::abs(c.split.train + c.split.val + c.split.test - 1.0) > 1e-9)
    throw ConfigError("split", "fractions must be positive (val, test) and sum to 1");

  const std::string nk = doc.get("noise", "kind", "none");
  if (nk == "none") c.noise.kind = NoiseSpec::Kind::none;
  else if (nk == "symmetric") c.noise.kind = NoiseSpec::Kind::symmetric;
  else if (nk == "asymmetric") c.noise.kind = NoiseSpec::Kind::asymmetric;
  else throw ConfigError("noise.kind", "expected none, symmetric or asymmetric, got '" + nk + "'");
  if (c.noise.kind == NoiseSpec::Kind::none) {
    c.noise.levels = {0.0};
  } else {
    c.noise.levels = doc.numbers("noise", "levels");
    if (c.noise.levels.empty()) throw ConfigError("noise.levels", "at least one noise level required");
    for (double l : c.noise.levels)
      if (!(l >= 0.0 && l < 1.0)) throw ConfigError("noise.levels", "levels must lie in [0,1)");
  }
  if (c.noise.kind == NoiseSpec::Kind::asymmetric) {
    try {
      c.noise.pairs = parse_flip_pairs(doc.require("noise", "pairs"));
    } catch (const ParseError& e) {
      throw ConfigError("noise.pairs", e.what());
    }
    for (const auto& p : c.noise.pairs)
      if (p.source == p.target) throw ConfigError("noise.pairs", "a class cannot flip to itself");
  }

  c.methods = doc.list("methods", "list");
  if (c.methods.empty()) throw ConfigError("methods.list", "at least one method required");
  for (const auto& m : c.methods)
    if (!known_methods().count(m)) throw ConfigError("methods.list", "unknown method '" + m + "'");

  c.cleot.alpha = doc.number("cleot", "alpha", 1.0);
  c.cleot.beta = doc.number("cleot", "beta", 0.005);
  c.cleot.lambda = doc.number("cleot", "lambda", 0.005);
  c.cleot.unroll_depth = doc.count("cleot", "unroll", 100);
  const std::string mode = doc.get("cleot", "mode", "unrolled");
  if (mode == "unrolled") c.cleot.mode = GradientMode::unrolled;
  else if (mode == "detached") c.cleot.mode = GradientMode::detached;
  else throw ConfigError("cleot.mode", "expected unrolled or detached");
  c.cleot_lr = doc.number("cleot", "lr", 0.1);
  c.cleot_per_class = doc.count("cleot", "samples_per_class", 50);
  try {
    c.cleot.validate();
  } catch (const ContractError& e) {
    throw ConfigError("cleot", e.what());
  }
  if (c.cleot_per_class < 1) throw ConfigError("cleot.samples_per_class", "must be >= 1");

  c.bootstrap_beta = doc.number("losses", "bootstrap_beta", 0.95);
  if (!(c.bootstrap_beta > 0.0 && c.bootstrap_beta <= 1.0)) throw ConfigError("losses.bootstrap_beta", "must lie in (0,1]");

  if (doc.has("net", "hidden")) {
    c.hidden.clear();
    for (double h : doc.numbers("net", "hidden")) {
      if (h < 1 || h != std::floor(h)) throw ConfigError("net.hidden", "layer widths must be positive integers");
      c.hidden.push_back(static_cast<std::size_t>(h));
    }
  } else {
    doc.get("net", "hidden", "");
  }
  c.dropout = doc.number("net", "dropout", 0.0);
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("net.dropout", "must lie in [0,1)");
  c.batchnorm = doc.flag("net", "batchnorm", false);
  c.l2 = doc.number("net", "l2", 0.0);
  if (c.l2 < 0.0) throw ConfigError("net.l2", "must be non-negative");

  c.lr = doc.number("optimizer", "lr", 0.01);
  c.momentum = doc.number("optimizer", "momentum", 0.9);
  if (!(c.lr >= 0.0)) throw ConfigError("optimizer.lr", "must be non-negative");
  if (!(c.cleot_lr >= 0.0)) throw ConfigError("cleot.lr", "must be non-negative");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("optimizer.momentum", "must lie in [0,1)");

  c.batch_size = doc.count("sampler", "batch_size", 128);
  if (c.batch_size < 1) throw ConfigError("sampler.batch_size", "must be >= 1");

  c.max_epochs = doc.count("train", "max_epochs", 300);
  c.patience = doc.count("train", "patience", 25);
  if (c.max_epochs < 1) throw ConfigError("train.max_epochs", "must be >= 1");
  for (double s : doc.numbers("train", "seeds")) {
    if (s < 0 || s != std::floor(s)) throw ConfigError("train.seeds", "seeds must be non-negative integers");
    c.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (c.seeds.empty()) throw ConfigError("train.seeds", "at least one seed required");
  c.workers = doc.count("train", "workers", 1);
  if (c.workers < 1) throw ConfigError("train.workers", "must be >= 1");

  std::filesystem::path out = doc.get("output", "dir", "results");
  if (out.is_relative() && !base_dir.empty()) out = base_dir / out;
  c.output_dir = out.string();

  if (const auto extra = doc.unused(); !extra.empty()) throw ConfigError(extra.front(), "unknown key");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot open config file " + path);
  return parse_config(is, std::filesystem::path(path).parent_path());
}

}  // namespace cleot
