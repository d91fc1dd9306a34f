#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cleot/errors.hpp"
#include "cleot/noise.hpp"
#include "cleot/rng.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

enum class Split : unsigned char { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// Features with clean labels, optional noisy labels and split tags.
/// Labels are stored as class indices; `one_hot` gives the row encoding.
struct LabeledDataset {
  static constexpr int kNoLabel = -1;

  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::vector<int> noisy_labels;  // empty until noise is applied; kNoLabel on test rows
  std::vector<Split> split;       // empty until split() tags the rows

  std::size_t size() const { return labels.size(); }
  std::size_t dims() const { return static_cast<std::size_t>(features.cols()); }
  bool has_noise() const { return !noisy_labels.empty(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

/// Two interleaved half circles with isotropic Gaussian jitter. Class 0 is
/// (cos t, sin t), class 1 is (1 - cos t, 0.5 - sin t), t evenly spaced on [0, pi].
inline LabeledDataset two_moons(std::size_t n, double noise_std, Rng& rng) {
  if (n == 0 || n % 2 != 0) throw ContractError("two_moons: n must be a positive even number");
  if (!(noise_std >= 0.0)) throw ContractError("two_moons: noise_std must be non-negative");
  const std::size_t half = n / 2;
  LabeledDataset ds;
  ds.classes = 2;
  ds.features.resize(static_cast<Eigen::Index>(n), 2);
  ds.labels.resize(n);
  for (std::size_t k = 0; k < half; ++k) {
    const double t = half > 1 ? std::numbers::pi * static_cast<double>(k) / static_cast<double>(half - 1) : 0.0;
    const auto up = static_cast<Eigen::Index>(k), low = static_cast<Eigen::Index>(half + k);
    ds.features(up, 0) = std::cos(t);
    ds.features(up, 1) = std::sin(t);
    ds.features(low, 0) = 1.0 - std::cos(t);
    ds.features(low, 1) = 0.5 - std::sin(t);
    ds.labels[k] = 0;
    ds.labels[half + k] = 1;
  }
  if (noise_std > 0.0)
    for (Eigen::Index i = 0; i < ds.features.size(); ++i) ds.features.data()[i] += noise_std * standard_normal(rng);
  return ds;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(const std::string& raw) {
  const std::string s = trim(raw);
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Reads "f0,...,f{d-1},label" CSV; the class count is max label + 1.
inline LabeledDataset read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("dataset: missing header", 1);
  const auto header = detail::split_csv_line(detail::trim(line));
  if (header.size() < 2 || detail::trim(header.back()) != "label")
    throw ParseError("dataset: header must be f0,...,f{d-1},label", 1);
  const std::size_t d = header.size() - 1;

  std::vector<double> values;
  LabeledDataset ds;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(detail::trim(line));
    if (cells.size() != d + 1)
      throw ParseError("dataset: expected " + std::to_string(d + 1) + " cells, got " + std::to_string(cells.size()), lineno);
    for (std::size_t k = 0; k < d; ++k) {
      const auto v = detail::parse_double(cells[k]);
      if (!v || !std::isfinite(*v)) throw ParseError("dataset: non-numeric feature '" + cells[k] + "'", lineno);
      values.push_back(*v);
    }
    const std::string lab = detail::trim(cells[d]);
    int y = 0;
    auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), y);
    if (lab.empty() || ec != std::errc() || ptr != lab.data() + lab.size())
      throw ParseError("dataset: non-integer label '" + lab + "'", lineno);
    if (y < 0) throw ParseError("dataset: negative label", lineno);
    ds.labels.push_back(y);
  }
  if (ds.labels.empty()) throw ParseError("dataset: no data rows");
  ds.features = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(ds.labels.size()),
                                         static_cast<Eigen::Index>(d));
  ds.classes = static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  return ds;
}

inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("load_csv: cannot open " + path);
  return read_csv(is);
}

/// Writes features with shortest round-trip formatting and the clean labels.
inline void write_csv(const LabeledDataset& ds, std::ostream& os) {
  for (std::size_t k = 0; k < ds.dims(); ++k) os << 'f' << k << ',';
  os << "label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < ds.dims(); ++k)
      os << detail::format_double(ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k))) << ',';
    os << ds.labels[i] << '\n';
  }
}

inline void save_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("save_csv: cannot open " + path);
  write_csv(ds, os);
}

/// One split tag per line, aligned with row order.
inline void write_split_csv(const LabeledDataset& ds, std::ostream& os) {
  os << "split\n";
  for (Split s : ds.split) os << split_name(s) << '\n';
}

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Per-class stratified split: each class gives floor(val * n_c) rows to
/// validation and floor(test * n_c) to test; the remainder goes to train.
inline void split(LabeledDataset& ds, const SplitFractions& fr, Rng& rng) {
  if (fr.train < 0.0 || fr.val < 0.0 || fr.test < 0.0 || std::abs(fr.train + fr.val + fr.test - 1.0) > 1e-9)
    throw ContractError("split: fractions must be non-negative and sum to 1");
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  ds.split.assign(ds.size(), Split::train);
  for (std::size_t k = 0; k < ds.classes; ++k) {
    auto& idx = by_class[k];
    if (idx.size() < 3)
      throw ContractError("split: class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                          " samples, need at least 3");
    shuffle(idx, rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_val = static_cast<std::size_t>(std::floor(fr.val * n + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(fr.test * n + 1e-9));
    for (std::size_t r = 0; r < n_val; ++r) ds.split[idx[r]] = Split::val;
    for (std::size_t r = n_val; r < n_val + n_test; ++r) ds.split[idx[r]] = Split::test;
  }
}

/// Corrupts train and validation labels; test rows never receive a noisy label.
/// Untagged datasets are treated as all-train. Returns flipped row indices.
inline std::vector<std::size_t> corrupt_labels(LabeledDataset& ds, const TransitionMatrix& e, Rng& rng) {
  if (e.classes() != ds.classes) throw ShapeError("corrupt_labels: transition matrix class count mismatch");
  if (ds.split.empty()) ds.split.assign(ds.size(), Split::train);
  std::vector<std::size_t> rows;
  std::vector<int> clean;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] != Split::test) {
      rows.push_back(i);
      clean.push_back(ds.labels[i]);
    }
  const auto noisy = apply_noise(clean, e, rng);
  ds.noisy_labels.assign(ds.size(), LabeledDataset::kNoLabel);
  for (std::size_t r = 0; r < rows.size(); ++r) ds.noisy_labels[rows[r]] = noisy.labels[r];
  std::vector<std::size_t> flipped;
  for (std::size_t r : noisy.flipped) flipped.push_back(rows[r]);
  return flipped;
}

/// A training-ready slice: features with (possibly soft) targets. `labels`
/// holds the hard class of each row, used for stratified sampling.
struct SupervisedSet {
  Matrix features;
  Matrix targets;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
};

inline SupervisedSet make_set(const Matrix& features, std::vector<int> labels, std::size_t classes) {
  SupervisedSet s;
  s.features = features;
  s.targets = one_hot(labels, classes);
  s.labels = std::move(labels);
  s.classes = classes;
  return s;
}

namespace detail {

inline SupervisedSet view(const LabeledDataset& ds, Split which, bool noisy) {
  if (ds.split.empty()) throw StateError("dataset has no split tags");
  if (noisy && !ds.has_noise()) throw StateError("dataset has no noisy labels");
  const auto idx = ds.indices(which);
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(noisy ? ds.noisy_labels[i] : ds.labels[i]);
  return make_set(gather_rows(ds.features, idx), std::move(labels), ds.classes);
}

}  // namespace detail

/// Training rows with their noisy labels.
inline SupervisedSet training_view(const LabeledDataset& ds) { return detail::view(ds, Split::train, true); }
/// Validation rows with their noisy labels.
inline SupervisedSet validation_view(const LabeledDataset& ds) { return detail::view(ds, Split::val, true); }
/// Test rows with their clean labels.
inline SupervisedSet test_view(const LabeledDataset& ds) { return detail::view(ds, Split::test, false); }

struct Batch {
  Matrix features;
  Matrix targets;
  std::vector<std::size_t> indices;  // rows of the source set
};

/// Minibatch planner. Plain mode walks a per-epoch shuffle (the short final
/// batch is kept). Stratified mode draws a fixed count per class; a class that
/// runs out before the epoch ends is resampled with replacement.
class BatchSampler {
 public:
  static BatchSampler plain(std::size_t batch_size) {
    if (batch_size < 1) throw ContractError("BatchSampler: batch size must be >= 1");
    BatchSampler s;
    s.per_class_ = 0;
    s.batch_size_ = batch_size;
    return s;
  }
  static BatchSampler stratified(std::size_t per_class) {
    if (per_class < 1) throw ContractError("BatchSampler: samples per class must be >= 1");
    BatchSampler s;
    s.per_class_ = per_class;
    return s;
  }

  bool is_stratified() const { return per_class_ > 0; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t per_class() const { return per_class_; }

  /// Next batch of the current epoch, or nullopt once the epoch is exhausted
  /// (the following call starts a new epoch).
  std::optional<Batch> next_batch(const SupervisedSet& set, Rng& rng) {
    if (!in_epoch_) {
      plan_epoch(set, rng);
      in_epoch_ = true;
      cursor_ = 0;
    }
    if (cursor_ == plan_.size()) {
      in_epoch_ = false;
      return std::nullopt;
    }
    const auto& idx = plan_[cursor_++];
    return Batch{gather_rows(set.features, idx), gather_rows(set.targets, idx), idx};
  }

  /// Discards any partially consumed epoch.
  void reset() { in_epoch_ = false; }

 private:
  void plan_epoch(const SupervisedSet& set, Rng& rng) {
    if (set.size() == 0) throw ContractError("BatchSampler: empty training set");
    plan_.clear();
    if (!is_stratified()) {
      std::vector<std::size_t> order(set.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle(order, rng);
      for (std::size_t b = 0; b < order.size(); b += batch_size_)
        plan_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch_size_)));
      return;
    }
    std::vector<std::vector<std::size_t>> by_class(set.classes);
    for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);
    std::size_t largest = 0;
    for (std::size_t k = 0; k < set.classes; ++k) {
      if (by_class[k].empty())
        throw ContractError("BatchSampler: class " + std::to_string(k) + " absent from the training split");
      shuffle(by_class[k], rng);
      largest = std::max(largest, by_class[k].size());
    }
    const std::size_t batches = (largest + per_class_ - 1) / per_class_;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> batch;
      batch.reserve(per_class_ * set.classes);
      for (const auto& members : by_class)
        for (std::size_t r = 0; r < per_class_; ++r) {
          const std::size_t pos = b * per_class_ + r;
          batch.push_back(pos < members.size() ? members[pos] : members[uniform_index(rng, members.size())]);
        }
      plan_.push_back(std::move(batch));
    }
  }

  std::size_t per_class_ = 0;
  std::size_t batch_size_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
  bool in_epoch_ = false;
};

}  // namespace cleot
