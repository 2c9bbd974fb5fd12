// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
//   acceptance [work_dir] [--only N,M,...]
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "throttle/experiment.hpp"
#include "throttle/gradcheck.hpp"

using namespace throttle;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto rows = full_gradcheck(3, 1e-5, 1e-4, 0);
  std::set<std::string> names;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : rows) {
    names.insert(r.name);
    worst = std::max(worst, r.max_error);
    if (!r.passed) failed += " " + r.name;
  }
  bool all_ops = names.count("controller") == 1;
  for (OpKind k : differentiable_ops()) all_ops &= names.count(std::string(op_name(k))) == 1;
  return {failed.empty() && all_ops,
          std::to_string(rows.size()) + " rows, max rel error " + fmt("%.2e", worst) +
              (failed.empty() ? "" : ", failing:" + failed) + (all_ops ? "" : ", missing op rows")};
}

// ---------------------------------------------------------------- 2

ArchConfig small_arch(const std::string& name) {
  ArchConfig c = ArchConfig::defaults(name);
  c.input = {2, 8, 8};
  if (name == "t-vgg") { c.components = 4; c.widths = {8, 8, 16}; c.blocks = 2; c.head_width = 16; }
  if (name == "t-resnext-w") { c.components = 4; c.widths = {8, 16, 16}; c.blocks = 2; }
  if (name == "t-resnet-d") { c.widths = {4, 8, 8}; }
  if (name == "t-densenet") { c.components = 4; c.growth = 3; }
  return c;
}

Outcome skip_equivalence() {
  double worst = 0.0;
  std::size_t bad_counts = 0, pairs = 0;
  for (std::string name : {"t-mlp", "t-vgg", "t-resnext-w", "t-resnet-d", "t-densenet"}) {
    const NetworkSpec net = build_network(small_arch(name), 11);
    Rng rng(derive_seed(12, name));
    for (int trial = 0; trial < 100; ++trial, ++pairs) {
      Tensor x({2, 2, 8, 8});
      for (double& v : x.values()) v = rng.uniform(-1, 1);
      GatePlan plan;
      for (const ModuleLayout& l : net.layouts()) {
        std::vector<double> g(l.size);
        for (double& v : g) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        std::size_t on = static_cast<std::size_t>(std::count(g.begin(), g.end(), 1.0));
        for (std::size_t i = 0; on < l.min_active; ++i)
          if (g[i] == 0.0) g[i] = 1.0, ++on;
        plan.emplace_back(g);
      }
      Graph graph;
      ParamBinder bind(graph, net.params, false);
      std::vector<ComponentCounters> counters;
      const Tensor a = graph.value(forward_with_plan(bind, net, graph.constant(x), plan, &counters));
      const Tensor b = graph.value(reference_network_forward(bind, net, graph.constant(x), plan));
      for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
      for (std::size_t m = 0; m < plan.size(); ++m)
        for (std::size_t i = 0; i < plan[m].size(); ++i)
          if (!plan[m].active(i) && counters[m].evaluations[i] != 0) ++bad_counts;
    }
  }
  return {worst <= 1e-9 && bad_counts == 0, std::to_string(pairs) + " pairs, max rel diff " + fmt("%.2e", worst) +
                                                ", gated-off evaluations " + std::to_string(bad_counts)};
}

// ---------------------------------------------------------------- 3

Outcome estimator_oracles() {
  std::ostringstream detail;
  bool ok = true;

  // (a) three-gate data path, blind controller, exact expectation by enumeration
  ArchConfig c = ArchConfig::defaults("t-mlp");
  c.stages = 1;
  c.components = 3;
  c.widths = {6};
  c.classes = 4;
  const NetworkSpec net = build_network(c, 21);
  const Dataset data = synth_dataset(SynthKind::kBlobs, 16, 22, SynthOptions{4, 1, 8, 0.1});
  const PenaltySpec spec{PenaltySpec::Form::kDist, 2, 10.0};
  const double u = 0.5;
  auto objective = [&](const GateVector& g) {
    const GatePlan plan{g};
    return combined_loss(network_logits(net, data.images, plan), data.labels, plan, u, spec).J;
  };
  Rng init(23);
  BlindController ctl(3, init, 8);
  ctl.set_alpha(0.9);
  const std::vector<double> p = ctl.probabilities(u);
  auto backprop = [&](const Tensor& upstream) {
    BlindController probe = ctl;
    Graph g;
    ParamBinder bind(g, probe.params(), true);
    const NodeId out = probe.forward(bind, u);
    const GradientSeed seed{out, upstream};
    return bind.collect(g.backward(std::span<const GradientSeed>(&seed, 1)));
  };
  auto flatten = [](const std::vector<Tensor>& ts) {
    std::vector<double> v;
    for (const Tensor& t : ts) v.insert(v.end(), t.values().begin(), t.values().end());
    return v;
  };
  std::vector<double> exact;
  std::map<std::vector<double>, std::vector<double>> per_pattern;
  for (int m = 0; m < 8; ++m) {
    const GateVector g({double(m & 1), double(m >> 1 & 1), double(m >> 2 & 1)});
    const auto est = flatten(reinforce_grad(objective(g), g, p, backprop));
    per_pattern[{g.values().begin(), g.values().end()}] = est;
    const double pr = std::exp(log_prob(g, p));
    if (exact.empty()) exact.assign(est.size(), 0.0);
    for (std::size_t i = 0; i < est.size(); ++i) exact[i] += pr * est[i];
  }
  Rng rng(24);
  const std::size_t draws = 100000;
  std::vector<double> sum(exact.size(), 0.0), sq(exact.size(), 0.0);
  for (std::size_t s = 0; s < draws; ++s) {
    const GateVector g = sample_bernoulli(p, rng);
    const auto& est = per_pattern.at({g.values().begin(), g.values().end()});
    for (std::size_t i = 0; i < est.size(); ++i) sum[i] += est[i], sq[i] += est[i] * est[i];
  }
  std::size_t outside = 0;
  double worst_z = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double mean = sum[i] / draws;
    const double se = std::sqrt(std::max(0.0, sq[i] / draws - mean * mean) / draws);
    const double dev = std::abs(mean - exact[i]);
    if (dev > 3.0 * se + 1e-12) ++outside;
    if (se > 0) worst_z = std::max(worst_z, dev / se);
  }
  ok &= outside == 0;
  detail << "(a) " << exact.size() << " coords, max |z| " << fmt("%.2f", worst_z) << ", outside 3se " << outside;

  // (b) hard Concrete against Bernoulli
  double worst_delta = 0.0;
  for (double q : {0.1, 0.3, 0.5, 0.8}) {
    Rng ra(derive_seed(25, "concrete", static_cast<std::uint64_t>(q * 100)));
    Rng rb(derive_seed(26, "bernoulli", static_cast<std::uint64_t>(q * 100)));
    const std::vector<double> pq{q};
    double hard = 0, bern = 0;
    for (std::size_t s = 0; s < draws; ++s) {
      hard += sample_concrete(pq, 0.0, ra).gates[0];
      bern += sample_bernoulli(pq, rb)[0];
    }
    worst_delta = std::max(worst_delta, std::abs(hard - bern) / draws);
  }
  ok &= worst_delta < 0.01;
  detail << "; (b) max |dp| " << fmt("%.4f", worst_delta);

  // (c) normalization over all 8 patterns
  double worst_norm = 0.0;
  Rng rc(27);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> pc{rc.uniform(0.01, 0.99), rc.uniform(0.01, 0.99), rc.uniform(0.01, 0.99)};
    double total = 0;
    for (int m = 0; m < 8; ++m)
      total += std::exp(log_prob(GateVector({double(m & 1), double(m >> 1 & 1), double(m >> 2 & 1)}), pc));
    worst_norm = std::max(worst_norm, std::abs(total - 1.0));
  }
  ok &= worst_norm <= 1e-12;
  detail << "; (c) max |sum-1| " << fmt("%.1e", worst_norm);
  return {ok, detail.str()};
}

// ---------------------------------------------------------------- 4

std::vector<std::size_t> depth_trace(const std::vector<std::size_t>& sizes, double u) {
  std::vector<std::size_t> on(sizes.size(), 0);
  const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
  std::size_t active = 0;
  for (bool progress = true; progress;) {
    progress = false;
    for (std::size_t step = 0; step < sizes.size(); ++step) {
      const std::size_t s = sizes.size() - 1 - step;
      if (on[s] >= sizes[s] || static_cast<double>(on[s] + 1) / sizes[s] > u) continue;
      ++on[s];
      ++active;
      progress = true;
      if (active / total > u) return on;
    }
  }
  return on;
}

Outcome nested_rules() {
  std::size_t formula = 0, superset = 0, depth = 0;
  const int grid = 2000;
  for (std::size_t n : {1u, 2u, 3u, 4u, 8u, 16u, 48u}) {
    for (int i = 0; i <= grid; ++i) {
      const double u = static_cast<double>(i) / grid;
      if (nested_k(n, u) != std::min<std::size_t>(n, static_cast<std::size_t>(std::floor(u * (n + 1))))) ++formula;
    }
    for (int i = 0; i <= 100; ++i) {
      const GateVector a = nested_gate(n, i / 100.0);
      for (int j = i; j <= 100; ++j) {
        const GateVector b = nested_gate(n, j / 100.0);
        for (std::size_t c = 0; c < n; ++c)
          if (a.active(c) && !b.active(c)) ++superset;
      }
    }
  }
  Rng rng(31);
  for (int i = 0; i < 50; ++i) {
    std::vector<std::size_t> sizes(1 + rng.index(5));
    for (auto& s : sizes) s = 1 + rng.index(8);
    const double u = rng.uniform();
    if (depthwise_nested_counts(sizes, u) != depth_trace(sizes, u)) ++depth;
  }
  return {formula + superset + depth == 0, "formula mismatches " + std::to_string(formula) + ", superset violations " +
                                               std::to_string(superset) + ", depth-rule mismatches " +
                                               std::to_string(depth) + "/50"};
}

// ---------------------------------------------------------------- 5-8

const char* kBase = R"([run]
seed = 1

[data]
source = synthetic
kind = glyphs
size = 12
noise = 0.1
train_count = 2000
test_count = 1000

[train]
epochs = 30
batch_size = 32
clip_norm = 2
schedule = cosine
t0 = 30
t_mult = 1

[controller]
epochs = 30
batch_size = 32
optimizer = adam
lr = 0.01
weight_decay = 0
schedule = constant
estimator = reinforce
samples = 4
alpha_anneal_epochs = 20
penalty = dist
exponent = 2
lambda = 10

[sweep]
points = 17
)";

const char* kResnext = R"([model]
name = t-resnext-w
stages = 3
blocks = 1
components = 8
widths = [16, 32, 64]
)";

const char* kVgg = R"([model]
name = t-vgg
stages = 3
blocks = 1
components = 4
widths = [16, 32, 64]
head_width = 64
)";

std::string regime_text(const std::string& regime) {
  if (regime == "ungated") return "[train]\nu = fixed\nu_fixed = 1\n";
  if (regime == "independent") return "[train]\ngating = independent\n[sweep]\nstrategy = independent\n";
  return "[train]\ngating = nested\n[sweep]\nstrategy = nested\n";
}

fs::path write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
  return p;
}

fs::path config_file(const std::string& arch, const std::string& regime) {
  const std::string lr = arch == "vgg" ? "0.02" : "0.1";
  const std::string text = std::string(kBase) + (arch == "vgg" ? kVgg : kResnext) + regime_text(regime) +
                           "[train]\nlr = " + lr + "\n[run]\nout = \"" + (g_work / (arch + "_" + regime)).string() +
                           "\"\n";
  return write_text(g_work / "configs" / (arch + "_" + regime + ".toml"), text);
}

ExperimentConfig load(const fs::path& file) { return resolve_config(read_config_file(file)); }

struct Regime {
  std::vector<CurveRecord> curve;
  double auc = 0.0;
  double acc_at(double u) const {
    for (const auto& r : curve)
      if (std::abs(r.u_target - u) < 1e-12) return r.accuracy;
    return NAN;
  }
};

std::map<std::string, Regime> g_regimes;

const Regime& regime(const std::string& arch, const std::string& name) {
  const std::string key = arch + "_" + name;
  if (auto it = g_regimes.find(key); it != g_regimes.end()) return it->second;
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(config_file(arch, name));
  run_train_datapath(cfg);
  const SweepResult s = run_sweep(cfg, std::nullopt, std::nullopt, std::nullopt);
  Regime r{s.records, s.auc};
  std::printf("  [%s/%s] trained and swept in %.0fs: auc %.3f, acc(1) %.3f, acc(0.5) %.3f\n", arch.c_str(),
              name.c_str(), seconds_since(t0), r.auc, r.acc_at(1.0), r.acc_at(0.5));
  std::fflush(stdout);
  return g_regimes[key] = r;
}

Outcome fig2_tradeoff() {
  const Regime& ungated = regime("resnext", "ungated");
  const Regime& nested = regime("resnext", "nested");
  const double top = ungated.acc_at(1.0);
  double smallest_drop = 1e9;
  for (const auto& r : ungated.curve)
    if (r.u_target <= 0.5 + 1e-12) smallest_drop = std::min(smallest_drop, top - r.accuracy);
  const double nested_gap = nested.acc_at(1.0) - nested.acc_at(0.5);
  const bool i = smallest_drop >= 0.20, ii = std::abs(nested_gap) <= 0.05;
  return {i && ii, "(i) ungated min drop over u<=0.5 " + fmt("%.1f", 100 * smallest_drop) + " pts (need >= 20); " +
                       "(ii) nested acc(1)-acc(0.5) " + fmt("%.1f", 100 * nested_gap) + " pts (need <= 5)"};
}

Outcome fig3_auc() {
  std::ostringstream d;
  bool ok = true;
  for (std::string arch : {"resnext", "vgg"}) {
    const double nested = regime(arch, "nested").auc, indep = regime(arch, "independent").auc;
    ok &= nested - indep >= 0.02;
    d << arch << " nested " << fmt("%.3f", nested) << " vs independent " << fmt("%.3f", indep) << "; ";
  }
  d << "need margin >= 0.02";
  return {ok, d.str()};
}

Outcome peak_gap() {
  const double gated = regime("resnext", "nested").acc_at(1.0), base = regime("resnext", "ungated").acc_at(1.0);
  const double gap = 100 * (base - gated);
  const std::string band = gap <= 3.0 ? "" : (gap <= 5.0 ? " (above 3, below hard-fail 5)" : " (above hard-fail 5)");
  return {gap <= 3.0, "ungated " + fmt("%.3f", base) + ", nested " + fmt("%.3f", gated) + ", gap " + fmt("%.1f", gap) +
                          " pts (need <= 3)" + band};
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double s = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    s += (ra[i] - ma) * (rb[i] - mb);
    sa += (ra[i] - ma) * (ra[i] - ma);
    sb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sa > 0 && sb > 0 ? s / std::sqrt(sa * sb) : 0.0;
}

Outcome controller_tracking() {
  regime("resnext", "nested");
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = load(config_file("resnext", "nested"));
  run_train_controller(cfg, std::nullopt);
  cfg.sweep.strategy = Strategy::kLearned;
  const SweepResult s = run_sweep(cfg, std::nullopt, fs::path(cfg.out) / kControllerCheckpoint,
                                  fs::path(cfg.out) / "curve_learned.csv");
  std::vector<double> us, cs;
  double dev = 0.0;
  for (const auto& r : s.records) {
    us.push_back(r.u_target);
    cs.push_back(r.utilization);
    dev += std::abs(r.utilization - r.u_target);
  }
  dev /= s.records.size();
  const double rho = spearman(us, cs);
  std::printf("  [resnext/controller] trained and swept in %.0fs\n", seconds_since(t0));
  return {s.records.size() == 17 && dev < 0.15 && rho > 0.9,
          std::to_string(s.records.size()) + " points, mean |c-u| " + fmt("%.3f", dev) + " (need < 0.15), spearman " +
              fmt("%.3f", rho) + " (need > 0.9), auc " + fmt("%.3f", s.auc)};
}

// ---------------------------------------------------------------- 9

Outcome monotone_flops() {
  std::ostringstream d;
  bool ok = true;
  for (std::string name : {"t-mlp", "t-vgg", "t-resnext-w", "t-resnet-d", "t-densenet"}) {
    const NetworkSpec net = build_network(ArchConfig::defaults(name), 1);
    std::uint64_t prev = 0;
    std::size_t violations = 0;
    for (double u : default_grid(17)) {
      Rng rng(0);
      const std::uint64_t f = flop_count(net, evaluation_plan(net, Strategy::kNested, u, nullptr, rng));
      if (f < prev) ++violations;
      prev = f;
    }
    ok &= violations == 0;
    d << name << " " << violations << (name == "t-densenet" ? "" : ", ");
  }
  return {ok, "decreasing steps per architecture: " + d.str()};
}

// ---------------------------------------------------------------- 10

int run_cli(const std::string& args) {
  const std::string cmd = std::string(THROTTLENET_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  // Shortened copies of the trade-off configs, every command run twice into the same directory.
  const std::string shorten =
      " --set train.epochs=2 --set train.t0=2 --set controller.epochs=2 --set controller.alpha_anneal_epochs=1"
      " --set data.train_count=300 --set data.test_count=200";
  std::vector<std::string> files;
  bool commands_ok = true;
  for (const std::string& arch : {std::string("resnext"), std::string("vgg")}) {
    for (const std::string& name : {std::string("nested"), std::string("independent")}) {
      const fs::path cfg = config_file(arch, name);
      const fs::path out = g_work / "repeat" / "run" / (arch + "_" + name);
      for (const char* rep : {"a", "b"}) {
        fs::remove_all(out);
        const std::string common = "--config " + cfg.string() + " --out " + out.string() + shorten;
        commands_ok &= run_cli("train-datapath " + common) == 0;
        commands_ok &= run_cli("sweep " + common) == 0;
        if (name == "nested") {
          commands_ok &= run_cli("train-controller " + common) == 0;
          commands_ok &= run_cli("sweep " + common + " --strategy learned --controller " +
                                 (out / kControllerCheckpoint).string() + " --csv " + (out / "learned.csv").string()) == 0;
        }
        const fs::path kept = g_work / "repeat" / rep / (arch + "_" + name);
        fs::remove_all(kept);
        fs::create_directories(kept.parent_path());
        fs::copy(out, kept, fs::copy_options::recursive);
      }
      for (const char* f : {kDatapathCheckpoint, kDatapathMetrics, kCurveCsv, "train-datapath.config.toml",
                            "sweep.config.toml"})
        files.push_back(arch + "_" + name + "/" + f);
      if (name == "nested")
        for (const char* f : {kControllerCheckpoint, kControllerMetrics, "learned.csv", kProfileCsv,
                              "train-controller.config.toml"})
          files.push_back(arch + "_" + name + "/" + f);
    }
  }
  std::size_t differing = 0;
  std::string which;
  for (const std::string& f : files) {
    const std::string a = slurp(g_work / "repeat" / "a" / f), b = slurp(g_work / "repeat" / "b" / f);
    if (a.empty() || a != b) ++differing, which += " " + f;
  }
  return {commands_ok && differing == 0,
          std::to_string(files.size()) + " artifacts compared, " + std::to_string(differing) + " differ" + which +
              (commands_ok ? "" : "; a command failed")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "throttlenet_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      g_work = a;
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"skip-equivalence", skip_equivalence},
      {"estimator oracles", estimator_oracles},
      {"nested-rule exactness", nested_rules},
      {"accuracy trade-off (ungated vs nested)", fig2_tradeoff},
      {"nested vs independent AUC", fig3_auc},
      {"peak-accuracy gap", peak_gap},
      {"learned-controller budget tracking", controller_tracking},
      {"monotone compute", monotone_flops},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %d: %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
