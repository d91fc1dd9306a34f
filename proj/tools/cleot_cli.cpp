#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cleot/config.hpp"
#include "cleot/data.hpp"
#include "cleot/grid.hpp"
#include "cleot/nn.hpp"
#include "cleot/ot.hpp"
#include "cleot/svg.hpp"
#include "cleot/toy.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

int cmd_run(const std::string& path, std::optional<std::size_t> workers, bool quiet) {
  auto cfg = cleot::load_config(path);
  if (workers) cfg.workers = *workers;
  const auto report = cleot::run_grid(cfg, quiet ? nullptr : &std::cout);
  if (!quiet) {
    std::cout << "completed " << report.results.size() << " runs (" << report.skipped << " already done, "
              << report.failures.size() << " failed)\n\n";
    std::cout << "method,noise,runs,mean_acc,std_acc\n";
    for (const auto& a : report.aggregates)
      std::cout << a.method << ',' << a.noise << ',' << a.runs << ',' << cleot::detail::format_double(a.mean_acc) << ','
                << cleot::detail::format_double(a.std_acc) << '\n';
  }
  return report.failures.empty() ? kOk : kRuntimeError;
}

int cmd_toy(const cleot::ToyOptions& opt, const std::string& out) {
  const auto report = cleot::run_toy(opt, out);
  std::cout << "flipped " << report.flipped << " of " << opt.n << " labels\n";
  std::cout << "initial accuracy " << report.initial_accuracy << '\n';
  for (std::size_t r = 0; r < report.round_accuracy.size(); ++r)
    std::cout << "round " << r + 1 << " accuracy " << report.round_accuracy[r] << '\n';
  std::cout << "wrote " << out << " in " << report.seconds << " s\n";
  return kOk;
}

struct PlotArgs {
  std::string data;
  std::string checkpoint;
  std::string coupling;
  std::vector<std::size_t> hidden{256, 256};
  double dropout = 0.0;
  bool batchnorm = false;
  double threshold = 0.0;
  std::size_t resolution = 200;
  std::string out;
};

int cmd_plot(const PlotArgs& a) {
  const auto ds = cleot::load_csv(a.data);
  std::string svg;
  if (!a.checkpoint.empty()) {
    cleot::MlpOptions arch;
    arch.input = ds.dims();
    arch.classes = ds.classes;
    arch.hidden = a.hidden;
    arch.dropout = a.dropout;
    arch.batchnorm = a.batchnorm;
    auto net = cleot::make_mlp(arch);
    cleot::load_checkpoint(net, a.checkpoint);
    const auto acc = cleot::accuracy(net, cleot::make_set(ds.features, ds.labels, ds.classes));
    svg = cleot::plot_decision_boundary(net, ds.features, ds.labels, a.resolution, acc);
  } else if (!a.coupling.empty()) {
    std::ifstream is(a.coupling);
    if (!is) throw cleot::Error("cannot open " + a.coupling);
    const auto n = static_cast<Eigen::Index>(ds.size());
    const auto plan = cleot::read_coupling_csv(is, n, n);
    const double threshold = a.threshold > 0.0 ? a.threshold : 0.25 / static_cast<double>(n * n);
    svg = cleot::plot_coupling_graph(plan, ds.features, ds.labels, threshold);
  } else {
    svg = cleot::plot_points(ds.features, ds.labels);
  }
  if (const auto parent = std::filesystem::path(a.out).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  cleot::write_atomically(a.out, svg);
  return kOk;
}

int cmd_gen_data(std::size_t n, double noise_std, std::uint64_t seed, const std::string& out) {
  auto rng = cleot::make_rng(seed, cleot::Stream::data);
  const auto ds = cleot::two_moons(n, noise_std, rng);
  if (out.empty() || out == "-") {
    cleot::write_csv(ds, std::cout);
  } else {
    if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty())
      std::filesystem::create_directories(parent);
    cleot::save_csv(ds, out);
  }
  return kOk;
}

int cmd_validate(const std::string& path) {
  const auto cfg = cleot::load_config(path);
  std::size_t runs = cfg.methods.size() * cfg.noise.levels.size() * cfg.seeds.size();
  std::cout << path << ": ok (" << cfg.methods.size() << " methods x " << cfg.noise.levels.size() << " noise levels x "
            << cfg.seeds.size() << " seeds = " << runs << " runs)\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Classifier training under label noise with entropic optimal transport"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::size_t> workers;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Train and evaluate every (method, noise, seed) triple of a config");
  run->add_option("config", config_path, "Experiment config file")->required();
  run->add_option("-w,--workers", workers, "Parallel runs (overrides [train] workers)")->check(CLI::PositiveNumber);
  run->add_flag("-q,--quiet", quiet, "Suppress progress output");

  cleot::ToyOptions toy;
  std::string toy_out = "toy_out";
  double toy_threshold = 0.0;
  auto* toy_cmd = app.add_subcommand("toy", "Two-moons demonstration: noisy fit, then iterative CLEOT rounds");
  toy_cmd->add_option("--seed", toy.seed, "Random seed")->capture_default_str();
  toy_cmd->add_option("-o,--out", toy_out, "Output directory")->capture_default_str();
  toy_cmd->add_option("--n", toy.n, "Number of points")->capture_default_str()->check(CLI::PositiveNumber);
  toy_cmd->add_option("--noise-std", toy.noise_std, "Gaussian jitter of the moons")->capture_default_str();
  toy_cmd->add_option("--flip", toy.flip, "Label flip probability")->capture_default_str()->check(CLI::Range(0.0, 0.999));
  toy_cmd->add_option("--hidden", toy.hidden, "Hidden layer widths")->capture_default_str()->delimiter(',');
  toy_cmd->add_option("--rounds", toy.rounds, "CLEOT rounds")->capture_default_str();
  toy_cmd->add_option("--epochs", toy.initial_epochs, "Epochs of the initial noisy fit")->capture_default_str();
  toy_cmd->add_option("--epochs-per-round", toy.epochs_per_round, "Fine-tuning epochs per round")->capture_default_str();
  toy_cmd->add_option("--lr", toy.lr, "SGD learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  toy_cmd->add_option("--momentum", toy.momentum, "SGD momentum")->capture_default_str()->check(CLI::Range(0.0, 0.999));
  toy_cmd->add_option("--batch-size", toy.batch_size, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  toy_cmd->add_option("--alpha", toy.alpha, "Feature cost weight")->capture_default_str();
  toy_cmd->add_option("--beta", toy.beta, "Label cost weight")->capture_default_str();
  toy_cmd->add_option("--lambda", toy.lambda, "Entropic regularization")->capture_default_str();
  toy_cmd->add_option("--threshold", toy_threshold, "Coupling-graph edge threshold (default 0.25/n^2)");
  toy_cmd->add_option("--grid", toy.resolution, "Decision-boundary grid resolution")->capture_default_str()->check(CLI::PositiveNumber);

  PlotArgs plot;
  auto* plot_cmd = app.add_subcommand("plot", "Render a dataset, a decision boundary or a coupling graph as SVG");
  plot_cmd->add_option("--data", plot.data, "Dataset CSV (f0,f1,label)")->required();
  auto* ck = plot_cmd->add_option("--checkpoint", plot.checkpoint, "Trained net (.clnn) for a decision-boundary plot");
  plot_cmd->add_option("--coupling", plot.coupling, "Coupling CSV (row,col,mass) for a coupling graph")->excludes(ck);
  plot_cmd->add_option("--hidden", plot.hidden, "Hidden layer widths of the checkpoint")->delimiter(',')->capture_default_str();
  plot_cmd->add_option("--dropout", plot.dropout, "Dropout of the checkpoint architecture");
  plot_cmd->add_flag("--batchnorm", plot.batchnorm, "Checkpoint architecture has batchnorm before softmax");
  plot_cmd->add_option("--threshold", plot.threshold, "Coupling edge threshold (default 0.25/n^2)");
  plot_cmd->add_option("--grid", plot.resolution, "Grid resolution")->capture_default_str()->check(CLI::PositiveNumber);
  plot_cmd->add_option("-o,--out", plot.out, "Output SVG")->required();

  std::size_t gen_n = 400;
  double gen_std = 0.1;
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a two-moons dataset as CSV");
  gen->add_option("--n", gen_n, "Number of points (even)")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--noise-std", gen_std, "Gaussian jitter")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Random seed")->capture_default_str();
  gen->add_option("-o,--out", gen_out, "Output CSV (stdout if omitted)");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate-config", "Parse and check a config without running it");
  validate->add_option("config", validate_path, "Experiment config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, workers, quiet);
    if (*toy_cmd) {
      if (toy_threshold > 0.0) toy.threshold = toy_threshold;
      return cmd_toy(toy, toy_out);
    }
    if (*plot_cmd) return cmd_plot(plot);
    if (*gen) return cmd_gen_data(gen_n, gen_std, gen_seed, gen_out);
    if (*validate) return cmd_validate(validate_path);
  } catch (const cleot::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const cleot::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return *run || *validate ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}
