#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <variant>
#include <vector>

#include "cleot/data.hpp"
#include "cleot/errors.hpp"
#include "cleot/losses.hpp"
#include "cleot/nn.hpp"
#include "cleot/objective.hpp"

namespace cleot {

/// A baseline loss or the transport objective.
using Method = std::variant<LossKind, CleotConfig>;

inline std::string method_name(const Method& m) {
  if (const auto* l = std::get_if<LossKind>(&m)) return l->name();
  return "cleot";
}

/// Fraction of rows whose argmax prediction equals the hard label.
inline double accuracy(const DenseNet& net, const SupervisedSet& set) {
  if (set.size() == 0) return 0.0;
  const auto pred = argmax_rows(predict(net, set.features));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == set.labels[i];
  return static_cast<double>(hit) / static_cast<double>(set.size());
}

/// One optimizer step on a batch; returns the batch loss (l2 penalty included).
inline double train_step(DenseNet& net, const Matrix& x, const Matrix& targets, const Method& method, SgdMomentum& opt,
                         Rng& dropout_rng, std::size_t batch_index = 0) {
  if (const auto* cfg = std::get_if<CleotConfig>(&method)) {
    auto res = cleot_batch_loss(x, targets, net, *cfg, &dropout_rng, batch_index);
    opt.step(net, res.grads);
    return res.loss;
  }
  const auto& loss = std::get<LossKind>(method);
  auto fwd = forward(net, x, Mode::train, &dropout_rng);
  const auto lv = loss(targets, fwd.output);
  const auto grads = backward(net, fwd.tape, lv.grad);
  opt.step(net, grads.params);
  return lv.value + net.l2_penalty();
}

/// One pass of the sampler over `set`; returns the row-weighted mean batch loss.
inline double run_epoch(DenseNet& net, const SupervisedSet& set, const Method& method, BatchSampler& sampler,
                        SgdMomentum& opt, Rng& sampling_rng, Rng& dropout_rng) {
  double total = 0.0;
  std::size_t rows = 0, index = 0;
  sampler.reset();
  while (auto batch = sampler.next_batch(set, sampling_rng)) {
    const double l = train_step(net, batch->features, batch->targets, method, opt, dropout_rng, index++);
    total += l * static_cast<double>(batch->indices.size());
    rows += batch->indices.size();
  }
  return rows ? total / static_cast<double>(rows) : 0.0;
}

/// Eval-mode loss over `set`, row-weighted over ceil(n / chunk) strided
/// chunks (chunk k holds rows k, k + K, k + 2K, ...) so each chunk mixes the
/// classes. For the transport objective each chunk is one coupling problem.
inline double evaluate_loss(const DenseNet& net, const SupervisedSet& set, const Method& method,
                            std::size_t chunk = 512) {
  if (set.size() == 0) return 0.0;
  if (chunk < 1) throw ContractError("evaluate_loss: chunk must be >= 1");
  const Matrix p_all = predict(net, set.features);
  if (const auto* loss = std::get_if<LossKind>(&method)) return (*loss)(set.targets, p_all).value + net.l2_penalty();
  const auto& cfg = std::get<CleotConfig>(method);
  const std::size_t chunks = (set.size() + chunk - 1) / chunk;
  double total = 0.0;
  for (std::size_t k = 0; k < chunks; ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = k; i < set.size(); i += chunks) rows.push_back(i);
    const Matrix x = gather_rows(set.features, rows);
    const Matrix y = gather_rows(set.targets, rows);
    const Matrix p = gather_rows(p_all, rows);
    total += cleot_objective(x, y, p, cfg) * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(set.size()) + net.l2_penalty();
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> test_acc;
};

struct TrainOptions {
  std::size_t max_epochs = 300;
  std::size_t patience = 25;
  std::size_t eval_chunk = 512;  // rows per validation-loss chunk
};

struct TrainResult {
  DenseNet best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Reports a test metric for the current net; the trainer never sees test data.
using Evaluator = std::function<double(const DenseNet&)>;

/// Minibatch training with early stopping on the validation loss. From the
/// second epoch on, training stops once `patience` epochs have passed since
/// the best one (so patience 0 runs exactly two epochs); the checkpoint with
/// the lowest validation loss is returned.
inline TrainResult train(const SupervisedSet& train_set, const SupervisedSet& val_set, DenseNet net,
                         const Method& method, BatchSampler sampler, SgdMomentum opt, const TrainOptions& options,
                         Rng& sampling_rng, Rng& dropout_rng, const Evaluator& test_metric = {}) {
  if (train_set.size() == 0) throw ContractError("train: empty training split");
  if (val_set.size() == 0) throw ContractError("train: empty validation split");
  if (options.max_epochs < 1) throw ContractError("train: max_epochs must be >= 1");
  TrainResult res;
  res.best = net;
  for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = run_epoch(net, train_set, method, sampler, opt, sampling_rng, dropout_rng);
    rec.val_loss = evaluate_loss(net, val_set, method, options.eval_chunk);
    if (test_metric) rec.test_acc = test_metric(net);
    res.history.push_back(rec);
    if (!std::isfinite(rec.val_loss)) throw NumericError("train: validation loss diverged at epoch " + std::to_string(epoch));
    if (rec.val_loss < res.best_val_loss) {
      res.best_val_loss = rec.val_loss;
      res.best_epoch = epoch;
      res.best = net;
    }
    if (epoch > 1 && epoch - res.best_epoch >= options.patience) break;
  }
  return res;
}

inline void write_history_csv(const std::vector<EpochRecord>& history, std::ostream& os) {
  os.precision(17);
  os << "epoch,train_loss,val_loss,test_acc\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',';
    if (r.test_acc) os << *r.test_acc;
    os << '\n';
  }
}

struct IterativeOptions {
  std::size_t rounds = 3;
  std::size_t epochs_per_round = 100;
  std::size_t batch_size = 32;      // fine-tuning minibatch size
  std::size_t max_points = 2000;    // full-batch coupling cap
};

struct IterativeRound {
  Coupling coupling;
  Matrix propagated;  // simplex-valued labels used for fine-tuning
  double accuracy = 0.0;
};

/// Full-batch alternation: per round, couple the whole dataset under the
/// joint cost with the current net, propagate the noisy labels through the
/// coupling, then fine-tune on the propagated labels with cross-entropy.
/// `metric` is reported after every round.
inline std::vector<IterativeRound> iterative_cleot(const Matrix& x, const Matrix& noisy_labels, DenseNet& net,
                                                   const CleotConfig& cfg, const IterativeOptions& options,
                                                   SgdMomentum& opt, Rng& sampling_rng, Rng& dropout_rng,
                                                   const Evaluator& metric) {
  if (static_cast<std::size_t>(x.rows()) > options.max_points)
    throw ContractError("iterative_cleot: " + std::to_string(x.rows()) + " points exceed the full-batch cap of " +
                        std::to_string(options.max_points) + "; use cleot_batch_loss on minibatches");
  cfg.validate();
  std::vector<IterativeRound> rounds;
  const Method ce = LossKind::cross_entropy();
  auto sampler = BatchSampler::plain(options.batch_size);
  for (std::size_t r = 0; r < options.rounds; ++r) {
    IterativeRound round;
    const auto cost = ground_cost(x, noisy_labels, predict(net, x), cfg.alpha, cfg.beta);
    round.coupling = solve_coupling(cost, cfg);
    round.propagated = propagate_labels(round.coupling, noisy_labels);
    SupervisedSet set;
    set.features = x;
    set.targets = round.propagated;
    set.labels = argmax_rows(round.propagated);
    set.classes = static_cast<std::size_t>(noisy_labels.cols());
    for (std::size_t e = 0; e < options.epochs_per_round; ++e)
      run_epoch(net, set, ce, sampler, opt, sampling_rng, dropout_rng);
    round.accuracy = metric ? metric(net) : 0.0;
    rounds.push_back(std::move(round));
  }
  return rounds;
}

}  // namespace cleot
