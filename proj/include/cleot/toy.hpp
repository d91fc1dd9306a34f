#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cleot/data.hpp"
#include "cleot/grid.hpp"
#include "cleot/noise.hpp"
#include "cleot/svg.hpp"
#include "cleot/training.hpp"

namespace cleot {

/// Two-moons label-noise demonstration: fit a net on noisy labels, then run
/// full-batch CLEOT rounds (couple, propagate, fine-tune).
struct ToyOptions {
  std::uint64_t seed = 7;
  std::size_t n = 400;
  double noise_std = 0.1;
  double flip = 0.2;
  std::vector<std::size_t> hidden{256, 256};
  std::size_t initial_epochs = 500;
  std::size_t rounds = 3;
  std::size_t epochs_per_round = 100;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  double alpha = 1.0;
  double beta = 0.005;
  double lambda = 0.05;
  std::optional<double> threshold;  // coupling-graph edge threshold; default 0.25 / n^2
  std::size_t resolution = 200;
  bool write_plots = true;
};

struct ToyReport {
  double initial_accuracy = 0.0;
  std::vector<double> round_accuracy;
  std::size_t flipped = 0;
  double seconds = 0.0;
};

/// Runs the demonstration. Accuracy is measured against the clean labels of
/// all n points. When `out_dir` is non-empty it receives the dataset, the
/// initial fit, per-round boundary/coupling plots, propagated labels and
/// accuracy.csv (initial row plus one row per round).
inline ToyReport run_toy(const ToyOptions& o, const std::filesystem::path& out_dir = {}) {
  const auto start = std::chrono::steady_clock::now();
  Rng data = make_rng(o.seed, Stream::data);
  Rng noise = make_rng(o.seed, Stream::noise);
  Rng init = make_rng(o.seed, Stream::init);
  Rng sampling = make_rng(o.seed, Stream::sampling);
  Rng dropout = make_rng(o.seed, Stream::dropout);

  LabeledDataset ds = two_moons(o.n, o.noise_std, data);
  ToyReport report;
  report.flipped = corrupt_labels(ds, symmetric_matrix(2, o.flip), noise).size();
  const SupervisedSet clean = make_set(ds.features, ds.labels, 2);
  const SupervisedSet noisy = make_set(ds.features, ds.noisy_labels, 2);

  MlpOptions arch;
  arch.hidden = o.hidden;
  DenseNet net = make_mlp(arch);
  net.init(init);
  SgdMomentum opt(o.lr, o.momentum);
  auto sampler = BatchSampler::plain(o.batch_size);
  const Method ce = LossKind::cross_entropy();
  for (std::size_t e = 0; e < o.initial_epochs; ++e) run_epoch(net, noisy, ce, sampler, opt, sampling, dropout);
  report.initial_accuracy = accuracy(net, clean);

  const bool emit = !out_dir.empty();
  const auto save = [&](const std::string& name, const std::string& content) {
    if (emit) write_atomically(out_dir / name, content);
  };
  if (emit) {
    std::filesystem::create_directories(out_dir);
    std::ostringstream csv;
    write_csv(ds, csv);
    save("dataset.csv", csv.str());
    if (o.write_plots) {
      save("clean.svg", plot_points(ds.features, ds.labels));
      save("noisy.svg", plot_points(ds.features, ds.noisy_labels));
      save("initial_fit.svg",
           plot_decision_boundary(net, ds.features, ds.noisy_labels, o.resolution, report.initial_accuracy));
    }
  }

  CleotConfig cfg;
  cfg.alpha = o.alpha;
  cfg.beta = o.beta;
  cfg.lambda = o.lambda;
  cfg.mode = GradientMode::detached;
  IterativeOptions io;
  io.rounds = o.rounds;
  io.epochs_per_round = o.epochs_per_round;
  io.batch_size = o.batch_size;
  const auto rounds = iterative_cleot(noisy.features, noisy.targets, net, cfg, io, opt, sampling, dropout,
                                      [&](const DenseNet& n) { return accuracy(n, clean); });
  const double threshold = o.threshold.value_or(0.25 / static_cast<double>(o.n * o.n));
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    report.round_accuracy.push_back(rounds[r].accuracy);
    if (!emit) continue;
    const std::string tag = "round" + std::to_string(r + 1);
    std::ostringstream prop;
    prop.precision(17);
    prop << "p0,p1\n";
    for (Eigen::Index i = 0; i < rounds[r].propagated.rows(); ++i)
      prop << rounds[r].propagated(i, 0) << ',' << rounds[r].propagated(i, 1) << '\n';
    save("propagated_" + tag + ".csv", prop.str());
    std::ostringstream edges;
    write_coupling_csv(rounds[r].coupling.plan, edges, threshold);
    save("coupling_" + tag + ".csv", edges.str());
    if (o.write_plots) {
      const auto prop_labels = argmax_rows(rounds[r].propagated);
      save("coupling_" + tag + ".svg", plot_coupling_graph(rounds[r].coupling.plan, ds.features, ds.noisy_labels, threshold));
      save("boundary_" + tag + ".svg",
           plot_decision_boundary(net, ds.features, prop_labels, o.resolution, rounds[r].accuracy));
    }
  }
  if (emit) {
    std::ostringstream acc;
    acc << "stage,accuracy\ninitial," << detail::format_double(report.initial_accuracy) << '\n';
    for (std::size_t r = 0; r < report.round_accuracy.size(); ++r)
      acc << "round" << r + 1 << ',' << detail::format_double(report.round_accuracy[r]) << '\n';
    save("accuracy.csv", acc.str());
    save_checkpoint(net, (out_dir / "final.clnn").string());
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cleot
