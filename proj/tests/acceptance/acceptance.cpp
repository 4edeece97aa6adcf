#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "cli/csv.hpp"
#include "xstitch/gradcheck.hpp"
#include "xstitch/trainer.hpp"

namespace fs = std::filesystem;
using namespace xstitch;
using namespace xstitch::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path work_root() {
  static const fs::path root = [] {
    auto p = fs::temp_directory_path() / ("xstitch_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

int run_binary(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(XSTITCH_BINARY) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const Json& doc) {
  const auto path = work_root() / name;
  write_text_file(path, doc.dump(2));
  return path;
}

template <typename Scalar>
double max_param_gap(const Network<Scalar>& x, const Network<Scalar>& y) {
  double worst = 0.0;
  for (std::size_t l = 0; l < x.params.size(); ++l) {
    if (x.params[l].weight.empty()) continue;
    worst = std::max(worst, static_cast<double>((x.params[l].weight.data() - y.params[l].weight.data()).cwiseAbs().maxCoeff()));
    worst = std::max(worst, static_cast<double>((x.params[l].bias.data() - y.params[l].bias.data()).cwiseAbs().maxCoeff()));
  }
  return worst;
}

// ---- 1 ------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const auto spec = gradcheck_spec();
  double worst = 0.0;
  Index params = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = build_one_task<double>(spec, 100 + seed, Task::a);
    const auto b = build_one_task<double>(spec, 200 + seed, Task::b);
    const auto st = stitch(a, b, spec.stitch_sites, Granularity::per_channel, 0.9, 0.1);
    params = parameter_count(st);
    const auto classes = spec.head().units;
    const auto batch = smooth_batch(st, spec, 6, classes, classes, seed);
    worst = std::max(worst, check_network(st, batch, {1.0, 1.0}).max_relative_error());
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && params <= 20000 && secs < 120.0,
          fmt("max rel err %.3e over 20 seeds (< 1e-5), %lld params, %.1fs (< 120s)", worst,
              static_cast<long long>(params), secs)};
}

// ---- 2 ------------------------------------------------------------------

Outcome split_extreme() {
  GeneratorConfig g;
  g.count = 400;
  const auto ds = generate(g, 11);
  const auto spec = default_network_spec();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto a = build_one_task<double>(spec, 10 + seed, Task::a);
    const auto b = build_one_task<double>(spec, 20 + seed, Task::b);
    TrainConfig cfg;
    cfg.iterations = 100;
    cfg.momentum = 0.0;
    cfg.seed = seed;
    cfg.freeze_alphas = true;
    const auto joint = train(stitch(a, b, {}, Granularity::per_channel, 1.0, 0.0), ds, cfg).model;
    worst = std::max(worst, max_param_gap(joint.net_a, train(a, ds, cfg).model));
    worst = std::max(worst, max_param_gap(joint.net_b, train(b, ds, cfg).model));
  }
  return {worst <= 1e-10, fmt("max |theta_stitched - theta_independent| %.3e after 100 steps (<= 1e-10)", worst)};
}

// ---- 3 ------------------------------------------------------------------

Outcome shared_extreme() {
  const auto spec = default_network_spec();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  bool equal = true;
  int sites_checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto [a, b] = init_networks<double>(InitStrategy::common_init, spec, spec, seed, {});
    const auto st = stitch(a, b, {}, Granularity::per_channel, 0.5, 0.5);
    Tensor<double> x(Shape{3, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]});
    for (Index k = 0; k < x.size(); ++k) x[k] = normal(rng) * (seed + 1);
    const auto t = forward_trace(st, x);
    for (std::size_t l = 0; l < t.unit_index.size(); ++l) {
      if (t.unit_index[l] < 0) continue;
      equal = equal && t.pre_a[l] == t.pre_b[l] && t.post_a[l] == t.post_b[l];
      ++sites_checked;
    }
    for (std::size_t l = 0; l < t.caches_a.size(); ++l) equal = equal && t.caches_a[l].input == t.caches_b[l].input;
    equal = equal && t.probabilities_a == t.probabilities_b;
  }
  return {equal && sites_checked > 0,
          fmt("%d site activations over 20 random batches %s", sites_checked, equal ? "bit-identical" : "differ")};
}

// ---- 4 ------------------------------------------------------------------

Outcome enumeration() {
  const auto archs = enumerate_splits(default_network_spec());
  const Json doc{{"schema_version", 1}, {"seed", 1}, {"mode", "split_all"}, {"dataset", {{"generate", Json::object()}}}};
  const auto cfg = write_config("split_all.json", doc);
  const auto out = work_root() / "split_all";
  const auto t0 = Clock::now();
  const int code = run_binary("train --config " + cfg.string() + " --out " + out.string(), work_root() / "split_all.log");
  const double secs = seconds_since(t0);
  int dirs = 0;
  for (int k = 0; k < 5; ++k) dirs += fs::exists(out / ("split_" + std::to_string(k)) / "metrics.csv") ? 1 : 0;
  std::size_t rows = 0;
  if (fs::exists(out / "comparison.csv")) rows = read_csv(out / "comparison.csv").rows.size();
  const bool pass = archs.size() == 5 && code == 0 && dirs == 5 && rows == 5 && secs < 600.0;
  return {pass, fmt("%zu architectures, exit %d, %d trained runs, %zu comparison rows, %.1fs (< 600s)", archs.size(),
                    code, dirs, rows, secs)};
}

// ---- 5 ------------------------------------------------------------------

Outcome learnability() {
  const auto spec = default_network_spec();
  int ok_one = 0, ok_split = 0, ok_cross = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GeneratorConfig g;
    g.relatedness = 0.9;
    const auto ds = generate(g, seed);
    TrainConfig cfg;
    cfg.iterations = 2000;
    cfg.eval_every = 2000;
    cfg.seed = seed;
    const auto a = build_one_task<float>(spec, 10 + seed, Task::a);
    const auto b = build_one_task<float>(spec, 20 + seed, Task::b);

    const double one = evaluate(train(a, ds, cfg).model, ds, SplitTag::test).a->overall_accuracy;

    double best_val = -1.0, split_acc = 0.0;
    for (const auto& arch : enumerate_splits(spec)) {
      const auto model = train(build_split(arch, a, b), ds, cfg).model;
      const double val = evaluate(model, ds, SplitTag::val).a->overall_accuracy;
      if (val > best_val) {
        best_val = val;
        split_acc = evaluate(model, ds, SplitTag::test).a->overall_accuracy;
      }
    }

    const auto st = stitch(a, b, {}, Granularity::per_channel, 0.9, 0.1);
    const double cross = evaluate(train(st, ds, cfg).model, ds, SplitTag::test).a->overall_accuracy;

    ok_one += one >= 0.8;
    ok_split += split_acc >= 0.8;
    ok_cross += cross >= 0.8;
    per_seed += fmt(" [%.3f %.3f %.3f]", one, split_acc, cross);
  }
  return {ok_one >= 4 && ok_split >= 4 && ok_cross >= 4,
          fmt("seeds >= 0.80 test acc A: one-task %d/5, best split %d/5, cross-stitch %d/5;", ok_one, ok_split,
              ok_cross) +
              per_seed};
}

// ---- 6 and 7 ------------------------------------------------------------

const std::vector<int> kStarved{0, 2, 4, 6};

struct Pretrained {
  TwoTaskDataset ds;
  Network<float> a, b;
  TrainConfig fine_tune;
};

Pretrained pretrain(std::uint64_t seed) {
  GeneratorConfig g;
  g.relatedness = 0.9;
  g.noise_level = 0.5;
  auto ds = starve(generate(g, seed), kStarved, 0.1, seed).dataset;
  const auto spec = default_network_spec();
  TrainConfig cfg;
  cfg.iterations = 1000;
  cfg.eval_every = 1000;
  cfg.seed = seed;
  auto a = train(build_one_task<float>(spec, 10 + seed, Task::a), ds, cfg).model;
  auto b = train(build_one_task<float>(spec, 20 + seed, Task::b), ds, cfg).model;
  TrainConfig ft = cfg;
  ft.base_lr = 0.001;
  ft.seed = seed + 1000;
  return {std::move(ds), std::move(a), std::move(b), ft};
}

double starved_mean(const Metrics& m) {
  double s = 0.0;
  for (int c : kStarved) s += m.per_class_accuracy[static_cast<std::size_t>(c)];
  return s / static_cast<double>(kStarved.size());
}

double tail_loss(const History& h) {
  if (h.losses.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t from = h.losses.size() > 50 ? h.losses.size() - 50 : 0;
  double s = 0.0;
  for (std::size_t i = from; i < h.losses.size(); ++i) s += h.losses[i].loss.total;
  return s / static_cast<double>(h.losses.size() - from);
}

struct BenefitAndAblation {
  Outcome benefit, ablation;
};

BenefitAndAblation multi_task_benefit_and_ablation() {
  int wins = 0, ablation_ok = 0, diverged_1e5 = 0;
  double total = 0.0;
  std::string deltas, losses;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = pretrain(seed);
    const auto st = stitch(p.a, p.b, {}, Granularity::per_channel, 0.9, 0.1);

    const auto baseline = train(p.b, p.ds, p.fine_tune).model;
    auto cfg = p.fine_tune;
    cfg.alpha_lr_scale = 100.0;
    const auto crossed = train(st, p.ds, cfg).model;
    const double d =
        starved_mean(*evaluate(crossed, p.ds, SplitTag::test).b) - starved_mean(*evaluate(baseline, p.ds, SplitTag::test).b);
    wins += d > 0;
    total += d;
    deltas += fmt(" %+.4f", d);

    double l1 = 0.0, l100 = 0.0;
    losses += " [";
    for (double scale : {1.0, 10.0, 100.0, 1000.0, 1e5}) {
      cfg.alpha_lr_scale = scale;
      const auto r = train(st, p.ds, cfg);
      const double l = tail_loss(r.history);
      if (scale == 1.0) l1 = l;
      if (scale == 100.0) l100 = l;
      if (scale == 1e5 && r.history.diverged) ++diverged_1e5;
      losses += r.history.diverged ? std::string(" div") : fmt(" %.3g", l);
    }
    losses += " ]";
    ablation_ok += l100 <= l1;
  }
  const double mean = total / 5.0;
  return {{wins >= 4 && mean > 0.0,
           fmt("starved-class mean per-class acc delta vs one-task: wins %d/5 (>= 4), mean %+.4f (> 0);", wins, mean) +
               deltas},
          {ablation_ok >= 4,
           fmt("loss(scale 100) <= loss(scale 1) in %d/5 (>= 4); scale 1e5 diverged in %d/5 (recorded);"
               " tail losses per scale {1,10,100,1000,1e5}:",
               ablation_ok, diverged_1e5) +
               losses}};
}

// ---- 8 ------------------------------------------------------------------

Outcome bookkeeping() {
  bool ok = true;
  std::string detail;
  for (const auto& spec : {default_network_spec(), gradcheck_spec()}) {
    for (auto g : {Granularity::per_channel, Granularity::per_map}) {
      const auto a = build_one_task<float>(spec, 1, Task::a);
      const auto st = stitch(a, build_one_task<float>(spec, 2, Task::b), {}, g, 0.9, 0.1);
      const Index expect = 2 * parameter_count(a) + 4 * alpha_matrix_count(st);
      ok = ok && parameter_count(st) == expect;
      detail += fmt("%lld=%lld ", static_cast<long long>(parameter_count(st)), static_cast<long long>(expect));
    }
  }
  const auto wide = make_network_spec({1, 16, 16}, {conv2d("conv1", 96, 5), relu("relu1"), maxpool2d("pool1", 2, 2),
                                                    softmax_ce_head("head", 8)});
  const auto one = build_one_task<float>(wide, 1, Task::a);
  const auto st = stitch(one, build_one_task<float>(wide, 2, Task::b), {"pool1"}, Granularity::per_channel, 0.9, 0.1);
  const Index units = alpha_matrix_count(st);
  ok = ok && units == 96 && parameter_count(st) == 2 * parameter_count(one) + 4 * 96;
  return {ok, "params(stitched) = 2 params(one-task) + 4 matrices: " + detail +
                  fmt("; 96-channel site has %lld units", static_cast<long long>(units))};
}

// ---- 9 ------------------------------------------------------------------

Outcome reproducibility() {
  bool ok = true;
  std::string detail;
  for (const std::string mode : {"one_task_A", "ensemble", "split", "cross_stitch"}) {
    const Json doc{{"schema_version", 1},
                   {"seed", 7},
                   {"mode", mode},
                   {"dataset", {{"generate", {{"count", 600}}}, {"seed", 3}}},
                   {"train", {{"iterations", 150}, {"eval_every", 50}}}};
    const auto cfg = write_config("repro_" + mode + ".json", doc);
    const auto base = work_root() / ("repro_" + mode);
    const auto log = work_root() / "repro.log";
    int codes = run_binary("train --config " + cfg.string() + " --out " + (base / "1").string(), log);
    codes += run_binary("train --config " + cfg.string() + " --out " + (base / "2").string(), log);
    codes += run_binary("train --config " + (base / "1" / "manifest.json").string() + " --out " + (base / "3").string(),
                        log);
    const auto first = read_text_file(base / "1" / "metrics.csv");
    const bool same = codes == 0 && !first.empty() && read_text_file(base / "2" / "metrics.csv") == first &&
                      read_text_file(base / "3" / "metrics.csv") == first;
    ok = ok && same;
    detail += mode + (same ? " identical; " : " DIFFERS; ");
  }
  return {ok, detail + "(rerun and rerun from manifest)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<Outcome()>>> direct{
      {1, gradient_fidelity}, {2, split_extreme}, {3, shared_extreme}, {4, enumeration}, {5, learnability}};
  bool all = true;
  const auto report = [&](int n, const Outcome& o, double secs) {
    all = all && o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
              << fmt("  (%.1fs)", secs) << std::endl;
  };
  const auto guarded = [](const std::function<Outcome()>& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("error: ") + e.what()};
    }
  };
  for (const auto& [n, fn] : direct) {
    const auto t0 = Clock::now();
    const auto o = guarded(fn);
    report(n, o, seconds_since(t0));
  }
  {
    const auto t0 = Clock::now();
    BenefitAndAblation r;
    try {
      r = multi_task_benefit_and_ablation();
    } catch (const std::exception& e) {
      r.benefit = r.ablation = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    report(6, r.benefit, secs);
    report(7, r.ablation, secs);
  }
  for (const auto& [n, fn] : std::vector<std::pair<int, std::function<Outcome()>>>{{8, bookkeeping}, {9, reproducibility}}) {
    const auto t0 = Clock::now();
    const auto o = guarded(fn);
    report(n, o, seconds_since(t0));
  }
  fs::remove_all(work_root());
  return all ? 0 : 1;
}
