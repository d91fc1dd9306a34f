#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "cleot/config.hpp"
#include "cleot/data.hpp"
#include "cleot/errors.hpp"
#include "cleot/rng.hpp"
#include "cleot/training.hpp"

namespace cleot {

struct RunKey {
  std::string method;
  std::string noise;  // shortest round-trip text of the noise level
  std::uint64_t seed = 0;
  auto operator<=>(const RunKey&) const = default;
};

struct RunResult {
  RunKey key;
  double test_acc = 0.0;
  std::size_t epochs = 0;
  long long wall_ms = 0;
};

struct AggregateRow {
  std::string method;
  std::string noise;
  std::size_t runs = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;  // sample standard deviation; 0 for a single run
};

struct RunFailure {
  RunKey key;
  std::string message;
};

struct GridReport {
  std::vector<RunResult> results;     // every completed triple, grid order
  std::vector<AggregateRow> aggregates;
  std::vector<RunFailure> failures;
  std::size_t skipped = 0;            // triples already present on disk
};

inline const char* kResultsHeader = "method,noise,seed,test_acc,epochs,wall_ms";

inline std::string format_result_row(const RunResult& r) {
  return r.key.method + "," + r.key.noise + "," + std::to_string(r.key.seed) + "," +
         detail::format_double(r.test_acc) + "," + std::to_string(r.epochs) + "," + std::to_string(r.wall_ms);
}

inline std::vector<RunResult> read_results_csv(std::istream& is) {
  std::vector<RunResult> out;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line)) return out;
  if (detail::trim(line) != kResultsHeader) throw ParseError("results: unexpected header", 1);
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(detail::trim(line));
    if (cells.size() != 6) throw ParseError("results: expected 6 columns", lineno);
    RunResult r;
    r.key.method = cells[0];
    r.key.noise = cells[1];
    const auto seed = detail::parse_double(cells[2]);
    const auto acc = detail::parse_double(cells[3]);
    const auto ep = detail::parse_double(cells[4]);
    const auto ms = detail::parse_double(cells[5]);
    if (!seed || !acc || !ep || !ms) throw ParseError("results: non-numeric cell", lineno);
    r.key.seed = static_cast<std::uint64_t>(*seed);
    r.test_acc = *acc;
    r.epochs = static_cast<std::size_t>(*ep);
    r.wall_ms = static_cast<long long>(*ms);
    out.push_back(r);
  }
  return out;
}

/// Mean and sample standard deviation of test accuracy per (method, noise),
/// in order of first appearance.
inline std::vector<AggregateRow> aggregate(const std::vector<RunResult>& rows) {
  std::vector<AggregateRow> out;
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : rows) {
    auto& g = groups[{r.key.method, r.key.noise}];
    if (g.empty()) out.push_back({r.key.method, r.key.noise, 0, 0.0, 0.0});
    g.push_back(r.test_acc);
  }
  for (auto& a : out) {
    const auto& g = groups[{a.method, a.noise}];
    a.runs = g.size();
    double sum = 0.0;
    for (double v : g) sum += v;
    a.mean_acc = sum / static_cast<double>(g.size());
    double ss = 0.0;
    for (double v : g) ss += (v - a.mean_acc) * (v - a.mean_acc);
    a.std_acc = g.size() > 1 ? std::sqrt(ss / static_cast<double>(g.size() - 1)) : 0.0;
  }
  return out;
}

/// Writes `content` to `path` via a sibling temp file and rename.
inline void write_atomically(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << content;
    if (!os.flush()) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Serialized owner of results.csv / summary.csv / failures.csv. Rows are kept
/// in grid order so the files do not depend on completion order.
class ResultSink {
 public:
  ResultSink(std::filesystem::path dir, std::vector<RunKey> grid_order)
      : dir_(std::move(dir)), order_(std::move(grid_order)) {
    std::filesystem::create_directories(dir_);
    if (std::ifstream is(dir_ / "results.csv"); is)
      for (auto& r : read_results_csv(is)) done_[r.key] = r;
  }

  bool completed(const RunKey& k) const {
    std::lock_guard lock(mu_);
    return done_.count(k) > 0;
  }

  void record(const RunResult& r) {
    std::lock_guard lock(mu_);
    done_[r.key] = r;
    flush();
  }

  void record_failure(const RunKey& k, const std::string& message) {
    std::lock_guard lock(mu_);
    failures_.push_back({k, message});
    std::ostringstream os;
    os << "method,noise,seed,error\n";
    for (const auto& f : failures_) {
      std::string msg = f.message;
      for (char& ch : msg)
        if (ch == ',' || ch == '\n') ch = ' ';
      os << f.key.method << ',' << f.key.noise << ',' << f.key.seed << ',' << msg << '\n';
    }
    write_atomically(dir_ / "failures.csv", os.str());
  }

  std::vector<RunResult> ordered() const {
    std::lock_guard lock(mu_);
    return ordered_locked();
  }

  std::vector<RunFailure> failures() const {
    std::lock_guard lock(mu_);
    return failures_;
  }

 private:
  std::vector<RunResult> ordered_locked() const {
    std::vector<RunResult> out;
    for (const auto& k : order_)
      if (auto it = done_.find(k); it != done_.end()) out.push_back(it->second);
    for (const auto& [k, r] : done_)  // rows from an older grid layout are preserved at the end
      if (std::find(order_.begin(), order_.end(), k) == order_.end()) out.push_back(r);
    return out;
  }

  void flush() {
    const auto rows = ordered_locked();
    std::ostringstream raw;
    raw << kResultsHeader << '\n';
    for (const auto& r : rows) raw << format_result_row(r) << '\n';
    write_atomically(dir_ / "results.csv", raw.str());

    std::ostringstream agg;
    agg << "method,noise,runs,mean_acc,std_acc\n";
    for (const auto& a : aggregate(rows))
      agg << a.method << ',' << a.noise << ',' << a.runs << ',' << detail::format_double(a.mean_acc) << ','
          << detail::format_double(a.std_acc) << '\n';
    write_atomically(dir_ / "summary.csv", agg.str());
  }

  std::filesystem::path dir_;
  std::vector<RunKey> order_;
  std::map<RunKey, RunResult> done_;
  std::vector<RunFailure> failures_;
  mutable std::mutex mu_;
};

/// The dataset realization for one seed and noise level: generated (or
/// loaded) and split from the seed's data stream, corrupted from its noise
/// stream, so every method at that seed sees the same samples and flips.
inline LabeledDataset prepare_dataset(const ExperimentConfig& cfg, std::uint64_t seed, double level) {
  Rng rng = make_rng(seed, Stream::data);
  LabeledDataset ds = cfg.dataset.kind == DatasetSpec::Kind::two_moons
                          ? two_moons(cfg.dataset.n, cfg.dataset.noise_std, rng)
                          : load_csv(cfg.dataset.path);
  split(ds, cfg.split, rng);
  Rng noise = make_rng(seed, Stream::noise);
  corrupt_labels(ds, cfg.noise.matrix(ds.classes, level), noise);
  return ds;
}

inline Method make_method(const ExperimentConfig& cfg, const std::string& tag, const TransitionMatrix& e) {
  if (tag == "cleot") return cfg.cleot;
  return LossKind::from_tag(tag, cfg.bootstrap_beta, e);
}

struct SingleRun {
  TrainResult training;
  double test_acc = 0.0;
};

/// Trains one (method, noise level, seed) triple. The trainer receives only
/// the train and validation views; test accuracy is reported per epoch
/// through an evaluator that cannot influence training.
inline SingleRun run_single(const ExperimentConfig& cfg, const std::string& method_tag, double level,
                            std::uint64_t seed) {
  const LabeledDataset ds = prepare_dataset(cfg, seed, level);
  const auto e = cfg.noise.matrix(ds.classes, level);
  const Method method = make_method(cfg, method_tag, e);
  MlpOptions arch;
  arch.input = ds.dims();
  arch.hidden = cfg.hidden;
  arch.classes = ds.classes;
  arch.dropout = cfg.dropout;
  arch.batchnorm = cfg.batchnorm;
  arch.l2 = cfg.l2;
  DenseNet net = make_mlp(arch);
  Rng init = make_rng(seed, Stream::init);
  net.init(init);
  const bool is_cleot = std::holds_alternative<CleotConfig>(method);
  const auto sampler = is_cleot ? BatchSampler::stratified(cfg.cleot_per_class) : BatchSampler::plain(cfg.batch_size);
  const SgdMomentum opt(is_cleot ? cfg.cleot_lr : cfg.lr, cfg.momentum);
  Rng sampling = make_rng(seed, Stream::sampling);
  Rng dropout = make_rng(seed, Stream::dropout);

  // The transport objective is scored on validation chunks of one training
  // batch, the quantity the minibatch optimizer actually minimizes.
  const TrainOptions options{cfg.max_epochs, cfg.patience, is_cleot ? cfg.cleot_per_class * ds.classes : 512};
  // The clean test view is only ever scored, never trained on.
  const SupervisedSet test = test_view(ds);
  SingleRun run;
  run.training = train(training_view(ds), validation_view(ds), std::move(net), method, sampler, opt, options,
                       sampling, dropout, [&test](const DenseNet& n) { return accuracy(n, test); });
  run.test_acc = accuracy(run.training.best, test);
  return run;
}

inline std::string run_directory_name(const RunKey& k) {
  return k.method + "_noise" + k.noise + "_seed" + std::to_string(k.seed);
}

/// Trains and evaluates every (method, noise, seed) triple not already in
/// `<output>/results.csv`. Failed runs are logged to failures.csv and the grid
/// carries on. Per-run history and best checkpoint go to `<output>/runs/`.
inline GridReport run_grid(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  struct Task {
    RunKey key;
    double level;
  };
  std::vector<Task> tasks;
  std::vector<RunKey> order;
  for (const auto& m : cfg.methods)
    for (double level : cfg.noise.levels)
      for (auto seed : cfg.seeds) {
        RunKey k{m, detail::format_double(level), seed};
        order.push_back(k);
        tasks.push_back({k, level});
      }
  const std::filesystem::path out(cfg.output_dir);
  ResultSink sink(out, order);
  GridReport report;
  std::vector<Task> pending;
  for (const auto& t : tasks) {
    if (sink.completed(t.key)) ++report.skipped;
    else pending.push_back(t);
  }

  std::mutex log_mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const auto& t = pending[i];
      const auto start = std::chrono::steady_clock::now();
      try {
        const auto run = run_single(cfg, t.key.method, t.level, t.key.seed);
        const auto dir = out / "runs" / run_directory_name(t.key);
        std::filesystem::create_directories(dir);
        std::ostringstream hist;
        write_history_csv(run.training.history, hist);
        write_atomically(dir / "history.csv", hist.str());
        save_checkpoint(run.training.best, (dir / "best.clnn").string());
        RunResult r;
        r.key = t.key;
        r.test_acc = run.test_acc;
        r.epochs = run.training.history.size();
        r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
        sink.record(r);
        if (log) {
          std::lock_guard lock(log_mu);
          *log << format_result_row(r) << std::endl;
        }
      } catch (const std::exception& e) {
        sink.record_failure(t.key, e.what());
        if (log) {
          std::lock_guard lock(log_mu);
          *log << "FAILED " << t.key.method << " noise=" << t.key.noise << " seed=" << t.key.seed << ": " << e.what()
               << std::endl;
        }
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.workers, pending.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  report.results = sink.ordered();
  report.aggregates = aggregate(report.results);
  report.failures = sink.failures();
  return report;
}

}  // namespace cleot
