#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "cleot/config.hpp"
#include "cleot/grid.hpp"
#include "cleot/svg.hpp"
#include "test_util.hpp"

using namespace cleot;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([dataset]
kind = two_moons
n = 120
noise_std = 0.1

[split]
train = 0.6
val = 0.2
test = 0.2

[noise]
kind = symmetric
levels = 0.2

[methods]
list = cross_entropy

[net]
hidden = 8

[optimizer]
lr = 0.05

[sampler]
batch_size = 16

[train]
max_epochs = 8
patience = 3
seeds = 1

[output]
dir = out
)";

ExperimentConfig parse_text(const std::string& text, const fs::path& base = {}) {
  std::istringstream is(text);
  return parse_config(is, base);
}

std::string config_error_field(const std::string& text) {
  try {
    parse_text(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<none>";
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
  const auto pos = text.find(from);
  if (pos == std::string::npos) throw std::runtime_error("pattern not found: " + from);
  return text.replace(pos, from.size(), to);
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream os(p);
  os << content;
}

std::vector<std::string> lines_without_wall_time(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) out.push_back(line.substr(0, line.rfind(',')));
  return out;
}

// Tag balance check: every element is self-closing or matched by its end tag.
bool well_formed(const std::string& xml) {
  std::vector<std::string> stack;
  std::size_t pos = 0;
  bool root_seen = false;
  while ((pos = xml.find('<', pos)) != std::string::npos) {
    const auto end = xml.find('>', pos);
    if (end == std::string::npos) return false;
    const std::string tag = xml.substr(pos + 1, end - pos - 1);
    pos = end + 1;
    if (tag.empty()) return false;
    if (tag.front() == '?' || tag.front() == '!') continue;
    if (tag.front() == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    if (stack.empty() && root_seen) return false;
    root_seen = true;
    if (tag.back() == '/') continue;
    stack.push_back(tag.substr(0, tag.find_first_of(" \t\n")));
  }
  return root_seen && stack.empty();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + CLEOT_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

DenseNet constant_net() {
  DenseNet net = make_mlp({2, {}, 2});
  net.layer_params(0).bias(0, 1) = 5.0;
  return net;
}

}  // namespace

TEST(Config, ParsesAllSections) {
  const auto c = parse_text(kTinyConfig, "/base");
  EXPECT_EQ(c.dataset.n, 120u);
  EXPECT_DOUBLE_EQ(c.split.train, 0.6);
  EXPECT_EQ(c.noise.levels, std::vector<double>{0.2});
  EXPECT_EQ(c.methods, std::vector<std::string>{"cross_entropy"});
  EXPECT_EQ(c.hidden, std::vector<std::size_t>{8});
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{1});
  EXPECT_EQ(c.output_dir, "/base/out");
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "n = 120", "n = 121")), "dataset.n");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "lr = 0.05", "lr = fast")), "optimizer.lr");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "list = cross_entropy", "list = hinge")), "methods.list");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "seeds = 1", "seeds =")), "train.seeds");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "levels = 0.2", "levels = 1.2")), "noise.levels");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "patience = 3", "patience = 3\ncolour = blue")), "train.colour");
  EXPECT_EQ(config_error_field(replace(kTinyConfig, "kind = two_moons", "kind = csv\npath = missing.csv")),
            "dataset.path");
}

TEST(Config, CsvPathResolvesAgainstConfigDirectory) {
  testutil::TempDir dir("cfgpath");
  write_file(dir.path() / "d.csv", "f0,f1,label\n0,0,0\n1,1,1\n");
  const auto c = parse_text(replace(kTinyConfig, "kind = two_moons\nn = 120\nnoise_std = 0.1", "kind = csv\npath = d.csv"),
                            dir.path());
  EXPECT_EQ(fs::path(c.dataset.path), dir.path() / "d.csv");
}

TEST(Grid, SingleTripleGivesOneRawAndOneAggregateRow) {
  testutil::TempDir dir("grid1");
  const auto cfg = parse_text(kTinyConfig, dir.path());
  const auto report = run_grid(cfg);
  ASSERT_TRUE(report.failures.empty());
  ASSERT_EQ(report.results.size(), 1u);
  ASSERT_EQ(report.aggregates.size(), 1u);
  EXPECT_EQ(report.aggregates[0].runs, 1u);
  EXPECT_EQ(report.aggregates[0].std_acc, 0.0);
  const auto raw = testutil::slurp(dir.path() / "out" / "results.csv");
  EXPECT_EQ(testutil::count(raw, "\n"), 2u);
  EXPECT_EQ(raw.substr(0, raw.find('\n')), kResultsHeader);
  EXPECT_EQ(testutil::count(testutil::slurp(dir.path() / "out" / "summary.csv"), "\n"), 2u);
  const auto run_dir = dir.path() / "out" / "runs" / run_directory_name(report.results[0].key);
  EXPECT_TRUE(fs::exists(run_dir / "history.csv"));
  EXPECT_TRUE(fs::exists(run_dir / "best.clnn"));
}

TEST(Grid, ResumeSkipsCompletedTriples) {
  testutil::TempDir dir("resume");
  const auto cfg = parse_text(replace(kTinyConfig, "seeds = 1", "seeds = 1, 2"), dir.path());
  const auto first = run_grid(cfg);
  EXPECT_EQ(first.skipped, 0u);
  const auto before = testutil::slurp(dir.path() / "out" / "results.csv");
  const auto second = run_grid(cfg);
  EXPECT_EQ(second.skipped, 2u);
  EXPECT_EQ(second.results.size(), 2u);
  EXPECT_EQ(testutil::slurp(dir.path() / "out" / "results.csv"), before);
}

TEST(Grid, AggregatesMatchRecomputation) {
  testutil::TempDir dir("agg");
  const auto cfg = parse_text(replace(replace(kTinyConfig, "seeds = 1", "seeds = 1, 2, 3"), "levels = 0.2", "levels = 0, 0.3"),
                              dir.path());
  const auto report = run_grid(cfg);
  ASSERT_EQ(report.results.size(), 6u);
  std::ifstream raw(dir.path() / "out" / "results.csv");
  const auto rows = read_results_csv(raw);
  std::ifstream summary(dir.path() / "out" / "summary.csv");
  std::string line;
  std::getline(summary, line);
  std::size_t groups = 0;
  while (std::getline(summary, line)) {
    std::istringstream ls(line);
    std::string method, noise, runs, mean, sd;
    std::getline(ls, method, ',');
    std::getline(ls, noise, ',');
    std::getline(ls, runs, ',');
    std::getline(ls, mean, ',');
    std::getline(ls, sd, ',');
    std::vector<double> acc;
    for (const auto& r : rows)
      if (r.key.method == method && r.key.noise == noise) acc.push_back(r.test_acc);
    ASSERT_EQ(acc.size(), 3u);
    double m = 0.0;
    for (double a : acc) m += a / 3.0;
    double v = 0.0;
    for (double a : acc) v += (a - m) * (a - m) / 2.0;
    EXPECT_NEAR(std::stod(mean), m, 1e-12);
    EXPECT_NEAR(std::stod(sd), std::sqrt(v), 1e-12);
    ++groups;
  }
  EXPECT_EQ(groups, 2u);
}

TEST(Grid, DeterministicApartFromWallTime) {
  testutil::TempDir a("det_a"), b("det_b");
  const std::string text = replace(kTinyConfig, "list = cross_entropy", "list = cross_entropy, cleot");
  auto ca = parse_text(text, a.path()), cb = parse_text(text, b.path());
  cb.workers = 2;
  run_grid(ca);
  run_grid(cb);
  EXPECT_EQ(lines_without_wall_time(testutil::slurp(a.path() / "out" / "results.csv")),
            lines_without_wall_time(testutil::slurp(b.path() / "out" / "results.csv")));
}

TEST(Grid, FailuresAreRecordedAndGridContinues) {
  testutil::TempDir dir("fail");
  auto cfg = parse_text(replace(kTinyConfig, "list = cross_entropy", "list = cross_entropy, unhinged"), dir.path());
  cfg.lr = 1e300;
  const auto report = run_grid(cfg);
  EXPECT_EQ(report.results.size() + report.failures.size(), 2u);
  if (!report.failures.empty()) {
    EXPECT_TRUE(fs::exists(dir.path() / "out" / "failures.csv"));
  }
}

TEST(Grid, NoiselessParityAcrossMethods) {
  testutil::TempDir dir("parity");
  std::string text = replace(kTinyConfig, "kind = symmetric\nlevels = 0.2", "kind = none");
  text = replace(text, "n = 120", "n = 400");
  text = replace(text, "list = cross_entropy",
                 "list = cross_entropy, unhinged, sigmoid, ramp, savage, bootstrap_soft, backward, forward, cleot");
  text = replace(text, "hidden = 8", "hidden = 32, 32");
  text = replace(text, "max_epochs = 8", "max_epochs = 150");
  text = replace(text, "patience = 3", "patience = 30");
  text = replace(text, "[sampler]", "[cleot]\nlambda = 0.1\nunroll = 20\nlr = 0.05\nsamples_per_class = 16\n\n[sampler]");
  const auto report = run_grid(parse_text(text, dir.path()));
  ASSERT_TRUE(report.failures.empty());
  double ce = -1.0;
  for (const auto& a : report.aggregates)
    if (a.method == "cross_entropy") ce = a.mean_acc;
  for (const auto& a : report.aggregates) EXPECT_LE(std::abs(a.mean_acc - ce), 0.02) << a.method;
}

TEST(Svg, ConstantNetGivesOneColor) {
  Rng rng = make_rng(1, Stream::data);
  const auto ds = two_moons(40, 0.1, rng);
  const auto svg = plot_decision_boundary(constant_net(), ds.features, ds.labels, 30);
  std::regex fill(R"re(<rect class="cell"[^>]*fill="([^"]+)")re");
  std::set<std::string> colors;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), fill); it != std::sregex_iterator(); ++it)
    colors.insert((*it)[1]);
  EXPECT_EQ(colors.size(), 1u);
}

TEST(Svg, CellCounts) {
  Rng rng = make_rng(1, Stream::data);
  const auto ds = two_moons(400, 0.1, rng);
  auto net = make_mlp({2, {16}, 2});
  Rng init = make_rng(1, Stream::init);
  net.init(init);
  EXPECT_EQ(testutil::count(plot_decision_boundary(net, ds.features, ds.labels, 1), "class=\"cell\""), 1u);
  const auto big = plot_decision_boundary(net, ds.features, ds.labels, 200, 0.5);
  EXPECT_EQ(testutil::count(big, "class=\"cell\""), 40000u);
  EXPECT_EQ(testutil::count(big, "class=\"point\""), 400u);
  EXPECT_TRUE(well_formed(big));
}

TEST(Svg, RejectsNonPlanarData) {
  auto net = make_mlp({3, {}, 2});
  const Matrix x = Matrix::Zero(4, 3);
  const std::vector<int> labels(4, 0);
  EXPECT_THROW(plot_decision_boundary(net, x, labels, 10), ContractError);
  EXPECT_THROW(plot_coupling_graph(Matrix::Identity(4, 4), x, labels, 0.1), ContractError);
}

TEST(Svg, CouplingGraphEdges) {
  Rng rng = make_rng(2, Stream::data);
  const auto ds = two_moons(60, 0.1, rng);
  const Eigen::Index m = 60;
  const Matrix identity = Matrix::Identity(m, m) / static_cast<double>(m);
  const auto self = plot_coupling_graph(identity, ds.features, ds.labels, 0.5 / static_cast<double>(m));
  EXPECT_EQ(testutil::count(self, "class=\"self\""), 60u);
  EXPECT_EQ(testutil::count(self, "class=\"edge\""), 0u);
  EXPECT_TRUE(well_formed(self));
  const auto none = plot_coupling_graph(identity, ds.features, ds.labels, 1.0);
  EXPECT_EQ(testutil::count(none, "class=\"self\"") + testutil::count(none, "class=\"edge\""), 0u);

  const auto cost = ground_cost(ds.features, one_hot(ds.labels, 2), Matrix::Constant(m, 2, 0.5), 1.0, 0.005);
  CleotConfig cfg;
  cfg.lambda = 0.05;
  const Matrix plan = solve_coupling(cost, cfg).plan;
  const double threshold = 0.5 / static_cast<double>(m * m);
  std::size_t scan = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) scan += plan(i, j) >= threshold;
  const auto svg = plot_coupling_graph(plan, ds.features, ds.labels, threshold);
  EXPECT_EQ(testutil::count(svg, "class=\"edge\"") + testutil::count(svg, "class=\"self\""), scan);
  EXPECT_GT(scan, 0u);
}

TEST(Cli, ValidateConfigHasNoSideEffects) {
  testutil::TempDir dir("cli_validate");
  write_file(dir.path() / "tiny.cfg", kTinyConfig);
  EXPECT_EQ(run_cli("validate-config \"" + (dir.path() / "tiny.cfg").string() + "\""), 0);
  EXPECT_FALSE(fs::exists(dir.path() / "out"));
  write_file(dir.path() / "bad.cfg", replace(kTinyConfig, "n = 120", "n = x"));
  EXPECT_EQ(run_cli("validate-config \"" + (dir.path() / "bad.cfg").string() + "\""), 1);
}

TEST(Cli, ShippedConfigsValidate) {
  for (const auto& entry : fs::directory_iterator(CLEOT_CONFIG_DIR))
    if (entry.path().extension() == ".cfg") {
      EXPECT_EQ(run_cli("validate-config \"" + entry.path().string() + "\""), 0) << entry.path();
    }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli("toy --no-such-flag"), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("run /nonexistent/config.cfg"), 1);
}

TEST(Cli, GenDataWritesMoons) {
  testutil::TempDir dir("cli_gen");
  const auto path = dir.path() / "moons.csv";
  ASSERT_EQ(run_cli("gen-data --n 51 --seed 3 -o \"" + path.string() + "\""), 2);  // odd n is a runtime error
  ASSERT_EQ(run_cli("gen-data --n 60 --seed 3 -o \"" + path.string() + "\""), 0);
  const auto ds = load_csv(path.string());
  EXPECT_EQ(ds.size(), 60u);
  EXPECT_EQ(ds.classes, 2u);
}

TEST(Cli, RunResumes) {
  testutil::TempDir dir("cli_run");
  write_file(dir.path() / "tiny.cfg", kTinyConfig);
  const std::string cmd = "run -q \"" + (dir.path() / "tiny.cfg").string() + "\"";
  ASSERT_EQ(run_cli(cmd), 0);
  const auto first = testutil::slurp(dir.path() / "out" / "results.csv");
  ASSERT_EQ(run_cli(cmd), 0);
  EXPECT_EQ(testutil::slurp(dir.path() / "out" / "results.csv"), first);
}

TEST(Cli, ToyProducesPerRoundArtifacts) {
  testutil::TempDir dir("cli_toy");
  const auto out = dir.path() / "toy";
  ASSERT_EQ(run_cli("toy --seed 7 --n 60 --hidden 16,16 --epochs 20 --epochs-per-round 5 --grid 20 -o \"" +
                    out.string() + "\""),
            0);
  std::size_t boundaries = 0, couplings = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    const auto name = e.path().filename().string();
    if (name.starts_with("boundary_round") && name.ends_with(".svg")) ++boundaries;
    if (name.starts_with("coupling_round") && name.ends_with(".svg")) ++couplings;
  }
  EXPECT_EQ(boundaries, 3u);
  EXPECT_EQ(couplings, 3u);
  const auto acc = testutil::slurp(out / "accuracy.csv");
  EXPECT_EQ(testutil::count(acc, "\n"), 5u);
  EXPECT_NE(acc.find("initial,"), std::string::npos);
  EXPECT_NE(acc.find("round3,"), std::string::npos);
  EXPECT_TRUE(well_formed(testutil::slurp(out / "boundary_round3.svg")));
}

TEST(Cli, PlotRendersCheckpointAndCoupling) {
  testutil::TempDir dir("cli_plot");
  const auto data = dir.path() / "d.csv";
  ASSERT_EQ(run_cli("gen-data --n 40 --seed 1 -o \"" + data.string() + "\""), 0);
  auto net = make_mlp({2, {8}, 2});
  Rng init = make_rng(1, Stream::init);
  net.init(init);
  save_checkpoint(net, (dir.path() / "n.clnn").string());
  const auto svg = dir.path() / "b.svg";
  ASSERT_EQ(run_cli("plot --data \"" + data.string() + "\" --checkpoint \"" + (dir.path() / "n.clnn").string() +
                    "\" --hidden 8 --grid 10 -o \"" + svg.string() + "\""),
            0);
  EXPECT_EQ(testutil::count(testutil::slurp(svg), "class=\"cell\""), 100u);

  std::ofstream cs(dir.path() / "c.csv");
  write_coupling_csv(Matrix::Identity(40, 40) / 40.0, cs);
  cs.close();
  const auto csvg = dir.path() / "c.svg";
  ASSERT_EQ(run_cli("plot --data \"" + data.string() + "\" --coupling \"" + (dir.path() / "c.csv").string() +
                    "\" -o \"" + csvg.string() + "\""),
            0);
  EXPECT_EQ(testutil::count(testutil::slurp(csvg), "class=\"self\""), 40u);
  EXPECT_EQ(run_cli("plot --data \"" + data.string() + "\" --checkpoint \"" + (dir.path() / "n.clnn").string() +
                    "\" --hidden 4 -o \"" + svg.string() + "\""),
            2);
}
