#include "cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "xstitch/hash.hpp"
#include "xstitch/split.hpp"

namespace xstitch::cli {
namespace fs = std::filesystem;

namespace {

constexpr const char* kRunFormat = "xstitch-run";

using Clock = std::chrono::steady_clock;

std::string num(double v) { return format_number(v); }
std::string num(Index v) { return format_number(static_cast<std::int64_t>(v)); }

struct RunContext {
  ExperimentConfig cfg;
  std::string hash;
  const TwoTaskDataset* ds = nullptr;
  fs::path dir;

  std::map<std::string, std::string> tags() const { return artifact_tags(hash, cfg.seed); }
  CsvTable table(std::vector<std::string> header) const { return {tags(), std::move(header), {}}; }
  CheckpointMeta meta(std::vector<SeedRecord> lineage) const { return {hash, cfg.seed, std::move(lineage)}; }
};

struct RunStatus {
  bool diverged = false;
  std::string diagnostic;
  std::vector<std::string> artifacts;
  TaskMetrics val;
  TaskMetrics test;
};

TrainConfig train_config(const RunContext& ctx) {
  TrainConfig t = ctx.cfg.train;
  t.seed = derive_seed(ctx.cfg.seed, "train");
  return t;
}

void append_metric_row(CsvTable& t, std::vector<std::string> prefix, const Metrics& m) {
  prefix.push_back(num(m.loss));
  prefix.push_back(num(m.overall_accuracy));
  prefix.push_back(num(m.mean_per_class_accuracy));
  t.rows.push_back(std::move(prefix));
}

CsvTable metrics_table(const RunContext& ctx, const History& h) {
  auto t = ctx.table({"iteration", "task", "loss", "overall_acc", "mean_per_class_acc"});
  for (const auto& e : h.evals) append_metric_row(t, {num(e.iteration), to_string(e.task)}, e.metrics);
  return t;
}

CsvTable loss_table(const RunContext& ctx, const History& h) {
  auto t = ctx.table({"iteration", "loss", "loss_a", "loss_b", "labeled_b"});
  for (const auto& r : h.losses) {
    t.rows.push_back({num(r.iteration), num(r.loss.total), num(r.loss.task_a), num(r.loss.task_b),
                      num(r.loss.labeled_b)});
  }
  return t;
}

CsvTable alpha_history_table(const RunContext& ctx, const History& h) {
  auto t = ctx.table({"iteration", "site", "channel", "alpha_aa", "alpha_ab", "alpha_ba", "alpha_bb"});
  for (const auto& s : h.alphas) {
    for (std::size_t c = 0; c < s.alphas.size(); ++c) {
      const auto& a = s.alphas[c];
      t.rows.push_back({num(s.iteration), s.site, num(static_cast<Index>(c)), num(static_cast<float>(a[0])),
                        num(static_cast<float>(a[1])), num(static_cast<float>(a[2])),
                        num(static_cast<float>(a[3]))});
    }
  }
  return t;
}

CsvTable final_table(const RunContext& ctx, const TaskMetrics& val, const TaskMetrics& test) {
  auto t = ctx.table({"split", "task", "loss", "overall_acc", "mean_per_class_acc"});
  for (const auto& [name, m] : {std::pair<const char*, const TaskMetrics*>{"val", &val}, {"test", &test}}) {
    for (Task task : {Task::a, Task::b}) {
      if ((*m)[task]) append_metric_row(t, {name, to_string(task)}, *(*m)[task]);
    }
  }
  return t;
}

CsvTable per_class_table(const RunContext& ctx, const TaskMetrics& test) {
  auto t = ctx.table({"task", "class", "train_labels", "test_examples", "test_acc"});
  for (Task task : {Task::a, Task::b}) {
    if (!test[task]) continue;
    const auto counts = label_counts(*ctx.ds, task, SplitTag::train);
    const auto& m = *test[task];
    for (std::size_t c = 0; c < m.per_class_accuracy.size(); ++c) {
      t.rows.push_back({to_string(task), num(static_cast<Index>(c)), num(counts[c]), num(m.class_counts[c]),
                        num(m.per_class_accuracy[c])});
    }
  }
  return t;
}

TaskMetrics evaluate_or_empty(const auto& model, const TwoTaskDataset& ds, SplitTag tag) {
  if (ds.indices(tag).empty()) return {};
  return evaluate(model, ds, tag);
}

void write_artifact(RunStatus& st, const RunContext& ctx, const std::string& name, const CsvTable& t) {
  write_csv(ctx.dir / name, t);
  st.artifacts.push_back(name);
}

template <typename Model>
RunStatus finish_run(const RunContext& ctx, const TrainResult<Model>& r, std::vector<SeedRecord> lineage) {
  RunStatus st;
  st.diverged = r.history.diverged;
  st.diagnostic = r.history.diagnostic;
  save_checkpoint(r.model, ctx.meta(std::move(lineage)), ctx.dir / "checkpoint.json");
  st.artifacts.push_back("checkpoint.json");
  st.val = evaluate_or_empty(r.model, *ctx.ds, SplitTag::val);
  st.test = evaluate_or_empty(r.model, *ctx.ds, SplitTag::test);
  write_artifact(st, ctx, "metrics.csv", metrics_table(ctx, r.history));
  write_artifact(st, ctx, "loss.csv", loss_table(ctx, r.history));
  write_artifact(st, ctx, "alphas.csv", alpha_history_table(ctx, r.history));
  write_artifact(st, ctx, "final.csv", final_table(ctx, st.val, st.test));
  write_artifact(st, ctx, "per_class.csv", per_class_table(ctx, st.test));
  return st;
}

void write_manifest(const RunContext& ctx, const RunStatus& st, double seconds) {
  Json m;
  m["format"] = kRunFormat;
  m["config_hash"] = ctx.hash;
  m["seed"] = ctx.cfg.seed;
  m["mode"] = to_string(ctx.cfg.mode);
  m["status"] = st.diverged ? "diverged" : "ok";
  m["diagnostic"] = st.diagnostic;
  m["wall_time_seconds"] = seconds;
  m["dataset_fingerprint"] = hex64(fingerprint(*ctx.ds));
  m["artifacts"] = st.artifacts;
  m["config"] = config_to_json(ctx.cfg);
  write_text_file(ctx.dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<SeedRecord> with_train(std::vector<SeedRecord> lineage, const RunContext& ctx) {
  lineage.push_back({"dataset", ctx.ds->seed});
  lineage.push_back({"train", derive_seed(ctx.cfg.seed, "train")});
  return lineage;
}

RunStatus run_one_task(const RunContext& ctx, Task task, const NetworkSpec& spec) {
  const std::string role = std::string("init.") + to_string(task);
  const auto init = derive_seed(ctx.cfg.seed, role);
  auto r = train(build_one_task<float>(spec, init, task), *ctx.ds, train_config(ctx));
  return finish_run(ctx, r, with_train({{role, init}}, ctx));
}

RunStatus run_split(const RunContext& ctx, const NetworkSpec& spec_a, const NetworkSpec& spec_b) {
  const auto archs = enumerate_splits(spec_a);
  const Index k = ctx.cfg.split_index;
  if (k < 0 || k >= static_cast<Index>(archs.size())) {
    throw ConfigError("split_index " + std::to_string(k) + " outside [0, " + std::to_string(archs.size() - 1) + "]");
  }
  const auto seed_a = derive_seed(ctx.cfg.seed, "init.A");
  const auto seed_b = derive_seed(ctx.cfg.seed, "init.B");
  auto model = build_split(archs[static_cast<std::size_t>(k)], build_one_task<float>(spec_a, seed_a, Task::a),
                           build_one_task<float>(spec_b, seed_b, Task::b));
  auto r = train(std::move(model), *ctx.ds, train_config(ctx));
  return finish_run(ctx, r, with_train({{"init.A", seed_a}, {"init.B", seed_b}}, ctx));
}

RunStatus run_cross_stitch(const RunContext& ctx, const NetworkSpec& spec_a, const NetworkSpec& spec_b) {
  const auto& al = ctx.cfg.alpha;
  std::vector<SeedRecord> lineage;
  const auto init = derive_seed(ctx.cfg.seed, "init");
  if (al.init == InitStrategy::task_init) {
    for (std::size_t i = 0; i < al.checkpoints.size(); ++i) {
      const auto meta = load_checkpoint<Network<float>>(al.checkpoints[i]).meta;
      const std::string prefix = i == 0 ? "A/" : "B/";
      for (const auto& s : meta.seed_lineage) lineage.push_back({prefix + s.role, s.seed});
    }
  } else {
    lineage.push_back({"init", init});
  }
  auto [a, b] = init_networks<float>(al.init, spec_a, spec_b, init, al.checkpoints);
  auto model = stitch(std::move(a), std::move(b), al.sites, al.granularity, al.alpha_same, al.alpha_diff,
                      al.unit_lr_scale);
  auto r = train(std::move(model), *ctx.ds, train_config(ctx));
  return finish_run(ctx, r, with_train(std::move(lineage), ctx));
}

RunStatus run_ensemble(const RunContext& ctx, const NetworkSpec& spec_a, const NetworkSpec& spec_b) {
  RunStatus st;
  auto metrics = ctx.table({"iteration", "task", "loss", "overall_acc", "mean_per_class_acc"});
  auto members = ctx.table({"member", "iteration", "task", "loss", "overall_acc", "mean_per_class_acc"});
  auto losses = ctx.table({"member", "iteration", "loss"});
  std::map<std::string, Network<float>> nets;
  for (const char* name : {"A1", "A2", "B1", "B2"}) {
    const Task task = name[0] == 'A' ? Task::a : Task::b;
    const std::string role = std::string("init.") + name;
    const auto init = derive_seed(ctx.cfg.seed, role);
    TrainConfig tc = train_config(ctx);
    tc.seed = derive_seed(ctx.cfg.seed, std::string("train.") + name);
    auto r = train(build_one_task<float>(task == Task::a ? spec_a : spec_b, init, task), *ctx.ds, tc);
    save_checkpoint(r.model, ctx.meta({{role, init}, {"dataset", ctx.ds->seed}, {"train", tc.seed}}),
                    ctx.dir / ("checkpoint_" + std::string(name) + ".json"));
    st.artifacts.push_back("checkpoint_" + std::string(name) + ".json");
    for (const auto& e : r.history.evals) {
      append_metric_row(members, {name, num(e.iteration), to_string(e.task)}, e.metrics);
    }
    for (const auto& l : r.history.losses) losses.rows.push_back({name, num(l.iteration), num(l.loss.total)});
    if (r.history.diverged && !st.diverged) {
      st.diverged = true;
      st.diagnostic = std::string(name) + ": " + r.history.diagnostic;
    }
    nets.emplace(name, std::move(r.model));
  }
  for (SplitTag tag : {SplitTag::val, SplitTag::test}) {
    if (ctx.ds->indices(tag).empty()) continue;
    TaskMetrics m;
    m.a = ensemble_eval(nets.at("A1"), nets.at("A2"), *ctx.ds, tag);
    m.b = ensemble_eval(nets.at("B1"), nets.at("B2"), *ctx.ds, tag);
    (tag == SplitTag::val ? st.val : st.test) = m;
  }
  for (Task task : {Task::a, Task::b}) {
    if (st.val[task]) append_metric_row(metrics, {num(ctx.cfg.train.iterations), to_string(task)}, *st.val[task]);
  }
  write_artifact(st, ctx, "metrics.csv", metrics);
  write_artifact(st, ctx, "members.csv", members);
  write_artifact(st, ctx, "loss.csv", losses);
  write_artifact(st, ctx, "final.csv", final_table(ctx, st.val, st.test));
  write_artifact(st, ctx, "per_class.csv", per_class_table(ctx, st.test));
  return st;
}

RunStatus run_mode(const RunContext& ctx) {
  const auto [spec_a, spec_b] = task_specs(ctx.cfg, *ctx.ds);
  switch (ctx.cfg.mode) {
    case Mode::one_task_a: return run_one_task(ctx, Task::a, spec_a);
    case Mode::one_task_b: return run_one_task(ctx, Task::b, spec_b);
    case Mode::ensemble: return run_ensemble(ctx, spec_a, spec_b);
    case Mode::split: return run_split(ctx, spec_a, spec_b);
    case Mode::cross_stitch: return run_cross_stitch(ctx, spec_a, spec_b);
    case Mode::split_all: break;
  }
  throw ContractError("split_all is orchestrated by cmd_train");
}

std::string metric_cell(const TaskMetrics& m, Task t, double Metrics::*field) {
  return m[t] ? num((*m[t]).*field) : "";
}

int train_split_all(const ExperimentConfig& cfg, const TwoTaskDataset& ds, const fs::path& out_dir,
                    std::ostream& log) {
  const auto t0 = Clock::now();
  RunContext top{cfg, config_hash(cfg), &ds, out_dir};
  const auto [spec_a, spec_b] = task_specs(cfg, ds);
  const auto archs = enumerate_splits(spec_a);
  auto table = top.table({"split", "shared_layers", "params", "shared_params", "val_acc_a", "val_mpca_a",
                          "val_acc_b", "val_mpca_b", "test_acc_a", "test_mpca_a", "test_acc_b", "test_mpca_b",
                          "status"});
  RunStatus overall;
  double best_score = -1.0;
  Index best = -1;
  for (std::size_t k = 0; k < archs.size(); ++k) {
    ExperimentConfig sub = cfg;
    sub.mode = Mode::split;
    sub.split_index = static_cast<Index>(k);
    sub.seed = cfg.seed + k;
    const std::string name = "split_" + std::to_string(k);
    sub.output_dir = out_dir / name;
    fs::create_directories(*sub.output_dir);
    const auto ts = Clock::now();
    RunContext ctx{sub, config_hash(sub), &ds, *sub.output_dir};
    const auto st = run_mode(ctx);
    write_manifest(ctx, st, std::chrono::duration<double>(Clock::now() - ts).count());
    log << name << ": " << (st.diverged ? "diverged (" + st.diagnostic + ")" : "ok") << "\n";

    const auto model = load_checkpoint<SplitNetwork<float>>(ctx.dir / "checkpoint.json").model;
    std::string shared;
    for (const auto& l : model.shared_layers()) shared += (shared.empty() ? "" : ";") + l.name;
    table.rows.push_back({num(static_cast<Index>(k)), shared, num(parameter_count(model)),
                          num(shared_parameter_count(model)),
                          metric_cell(st.val, Task::a, &Metrics::overall_accuracy),
                          metric_cell(st.val, Task::a, &Metrics::mean_per_class_accuracy),
                          metric_cell(st.val, Task::b, &Metrics::overall_accuracy),
                          metric_cell(st.val, Task::b, &Metrics::mean_per_class_accuracy),
                          metric_cell(st.test, Task::a, &Metrics::overall_accuracy),
                          metric_cell(st.test, Task::a, &Metrics::mean_per_class_accuracy),
                          metric_cell(st.test, Task::b, &Metrics::overall_accuracy),
                          metric_cell(st.test, Task::b, &Metrics::mean_per_class_accuracy),
                          st.diverged ? "diverged" : "ok"});
    overall.artifacts.push_back(name + "/");
    if (st.diverged) {
      overall.diverged = true;
      overall.diagnostic += name + ": " + st.diagnostic + "; ";
    } else if (st.val.a && st.val.b) {
      const double score = 0.5 * (st.val.a->mean_per_class_accuracy + st.val.b->mean_per_class_accuracy);
      if (score > best_score) {
        best_score = score;
        best = static_cast<Index>(k);
      }
    }
  }
  write_artifact(overall, top, "comparison.csv", table);
  if (best >= 0) log << "best split by validation mean per-class accuracy: split_" << best << "\n";
  write_manifest(top, overall, std::chrono::duration<double>(Clock::now() - t0).count());
  return overall.diverged ? kExitDiverged : kExitOk;
}

template <typename Scalar>
CsvTable sorted_alphas_impl(const StitchedNetwork<Scalar>& net, const CheckpointMeta& meta) {
  if (net.units.empty()) throw ConfigError("checkpoint has no cross-stitch units");
  CsvTable t{artifact_tags(meta.config_hash, meta.seed), {"site", "task", "sorted_rank", "alpha_s", "alpha_d"}, {}};
  for (const auto& u : net.units) {
    for (Task task : {Task::a, Task::b}) {
      const Index row = task == Task::a ? 0 : 1;
      std::vector<Scalar> same, diff;
      for (const auto& m : u.alphas) {
        same.push_back(m(row, row));
        diff.push_back(m(row, 1 - row));
      }
      std::sort(same.begin(), same.end());
      std::sort(diff.begin(), diff.end());
      for (std::size_t r = 0; r < same.size(); ++r) {
        t.rows.push_back({u.site, to_string(task), num(static_cast<Index>(r)), format_number(same[r]),
                          format_number(diff[r])});
      }
    }
  }
  return t;
}

struct RunRecord {
  fs::path dir;
  Json manifest;
  CsvTable final_metrics;
  CsvTable per_class;
};

RunRecord read_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("run directory '" + dir.string() + "' does not exist");
  const auto manifest = dir / "manifest.json";
  if (!fs::is_regular_file(manifest)) throw ConfigError("'" + dir.string() + "' has no manifest.json");
  RunRecord r{dir, {}, {}, {}};
  try {
    r.manifest = Json::parse(read_text_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
  if (!r.manifest.contains("format") || r.manifest["format"] != kRunFormat) {
    throw FormatError("'" + manifest.string() + "' is not a run manifest");
  }
  if (!fs::is_regular_file(dir / "final.csv") || !fs::is_regular_file(dir / "per_class.csv")) {
    throw ConfigError("'" + dir.string() + "' is not a completed single-model run (final.csv / per_class.csv)");
  }
  r.final_metrics = read_csv(dir / "final.csv");
  r.per_class = read_csv(dir / "per_class.csv");
  return r;
}

std::string manifest_string(const Json& m, const char* key) {
  if (!m.contains(key)) throw FormatError(std::string("manifest lacks '") + key + "'");
  const auto& v = m.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

// (task, key) -> value for the test split, key = metric name or class index.
std::map<std::pair<std::string, std::string>, std::string> index_final(const CsvTable& t) {
  std::map<std::pair<std::string, std::string>, std::string> out;
  const auto split = t.column("split");
  const auto task = t.column("task");
  for (const auto& row : t.rows) {
    if (row[split] != "test") continue;
    for (const char* metric : {"loss", "overall_acc", "mean_per_class_acc"}) {
      out[{row[task], metric}] = row[t.column(metric)];
    }
  }
  return out;
}

std::string delta(const std::string& a, const std::string& b) { return num(parse_number(a) - parse_number(b)); }

}  // namespace

int cmd_train(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const auto t0 = Clock::now();
  const auto ds = materialize_dataset(cfg.dataset);
  fs::create_directories(out_dir);
  if (cfg.mode == Mode::split_all) return train_split_all(cfg, ds, out_dir, log);
  RunContext ctx{cfg, config_hash(cfg), &ds, out_dir};
  const auto st = run_mode(ctx);
  write_manifest(ctx, st, std::chrono::duration<double>(Clock::now() - t0).count());
  if (st.diverged) {
    log << "diverged: " << st.diagnostic << "\n";
    return kExitDiverged;
  }
  for (Task t : {Task::a, Task::b}) {
    if (st.test[t]) {
      log << "test task " << to_string(t) << ": acc " << num(st.test[t]->overall_accuracy) << " mean per-class "
          << num(st.test[t]->mean_per_class_accuracy) << "\n";
    }
  }
  return kExitOk;
}

CsvTable sorted_alpha_table(const StitchedNetwork<float>& net, const CheckpointMeta& meta) {
  return sorted_alphas_impl(net, meta);
}

CsvTable sorted_alpha_table(const StitchedNetwork<double>& net, const CheckpointMeta& meta) {
  return sorted_alphas_impl(net, meta);
}

int cmd_dump_alphas(const fs::path& checkpoint, const std::optional<fs::path>& out_dir, std::ostream& out) {
  const auto text = read_text_file(checkpoint);
  if (checkpoint_kind(text) != ModelKind::stitched) {
    throw ConfigError("checkpoint '" + checkpoint.string() + "' has no cross-stitch units");
  }
  std::string scalar;
  try {
    scalar = Json::parse(text).at("scalar").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint scalar type: ") + e.what());
  }
  CsvTable table;
  if (scalar == "float32") {
    const auto c = deserialize<StitchedNetwork<float>>(text);
    table = sorted_alpha_table(c.model, c.meta);
  } else {
    const auto c = deserialize<StitchedNetwork<double>>(text);
    table = sorted_alpha_table(c.model, c.meta);
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_csv(*out_dir / "alphas_sorted.csv", table);
  } else {
    out << table.to_string();
  }
  return kExitOk;
}

NetworkSpec gradcheck_spec() {
  auto spec = make_network_spec({1, 10, 10}, {
                                                  conv2d("conv1", 4, 3),
                                                  relu("relu1"),
                                                  maxpool2d("pool1", 2, 2),
                                                  conv2d("conv2", 6, 3),
                                                  relu("relu2"),
                                                  maxpool2d("pool2", 2, 2),
                                                  dense("fc1", 10),
                                                  relu("relu3"),
                                                  dense("fc2", 8),
                                                  relu("relu4"),
                                                  softmax_ce_head("head", 5),
                                              });
  spec.stitch_sites = {"pool1", "pool2", "fc1"};
  validate(spec);
  return spec;
}

GradReport run_gradcheck(const ExperimentConfig& cfg, GradMutation mutation) {
  const NetworkSpec spec = cfg.architecture ? *cfg.architecture : gradcheck_spec();
  const Index classes = spec.head().units;
  const auto a = build_one_task<double>(spec, derive_seed(cfg.seed, "init.A"), Task::a);
  const auto b = build_one_task<double>(spec, derive_seed(cfg.seed, "init.B"), Task::b);
  const auto& al = cfg.alpha;
  const auto model = stitch(a, b, al.sites, al.granularity, al.alpha_same, al.alpha_diff, al.unit_lr_scale);
  const auto batch = smooth_batch(model, spec, cfg.gradcheck.batch_size, classes, classes,
                                  derive_seed(cfg.seed, "batch"));
  GradCheckOptions opt;
  opt.epsilon = cfg.gradcheck.epsilon;
  opt.tolerance = cfg.gradcheck.tolerance;
  opt.oracle = cfg.gradcheck.oracle;
  opt.mutation = mutation;
  return check_network(model, batch, cfg.train.loss_weights, opt);
}

int cmd_gradcheck(const ExperimentConfig& cfg, GradMutation mutation, std::ostream& out) {
  const auto report = run_gradcheck(cfg, mutation);
  out << format_report(report);
  return report.pass ? kExitOk : kExitFailure;
}

int cmd_report(const std::vector<fs::path>& runs, const fs::path& baseline_dir,
               const std::optional<fs::path>& out_dir, std::ostream& out) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  const auto baseline = read_run(baseline_dir);
  const auto base_fp = manifest_string(baseline.manifest, "dataset_fingerprint");
  const auto base_final = index_final(baseline.final_metrics);

  std::vector<RunRecord> records;
  Fnv1a combined;
  for (const auto& dir : runs) {
    records.push_back(read_run(dir));
    const auto fp = manifest_string(records.back().manifest, "dataset_fingerprint");
    if (fp != base_fp) {
      throw ConfigError("run '" + dir.string() + "' used a different dataset than baseline '" +
                        baseline_dir.string() + "'");
    }
    combined.update(manifest_string(records.back().manifest, "config_hash"));
  }
  auto tags = artifact_tags(records.size() == 1 ? manifest_string(records[0].manifest, "config_hash")
                                                : hex64(combined.digest()),
                            records[0].manifest.at("seed").get<std::uint64_t>());
  tags["baseline_hash"] = manifest_string(baseline.manifest, "config_hash");

  CsvTable summary{tags, {"run", "task", "metric", "value", "baseline", "delta"}, {}};
  CsvTable per_class{tags, {"run", "task", "class", "train_labels", "value", "baseline", "delta"}, {}};
  for (const auto& r : records) {
    const std::string name = r.dir.filename().empty() ? r.dir.parent_path().filename().string()
                                                      : r.dir.filename().string();
    for (const auto& [key, value] : index_final(r.final_metrics)) {
      const auto it = base_final.find(key);
      if (it == base_final.end()) continue;
      summary.rows.push_back({name, key.first, key.second, value, it->second, delta(value, it->second)});
    }

    struct ClassRow {
      std::string task;
      Index cls;
      Index labels;
      std::string value;
      std::string base;
    };
    std::map<std::pair<std::string, std::string>, std::string> base_acc;
    const auto& bp = baseline.per_class;
    for (const auto& row : bp.rows) base_acc[{row[bp.column("task")], row[bp.column("class")]}] = row[bp.column("test_acc")];
    std::vector<ClassRow> rows;
    const auto& pc = r.per_class;
    for (const auto& row : pc.rows) {
      const auto it = base_acc.find({row[pc.column("task")], row[pc.column("class")]});
      if (it == base_acc.end()) continue;
      rows.push_back({row[pc.column("task")], static_cast<Index>(parse_number(row[pc.column("class")])),
                      static_cast<Index>(parse_number(row[pc.column("train_labels")])), row[pc.column("test_acc")],
                      it->second});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const ClassRow& x, const ClassRow& y) {
      return std::tie(x.task, x.labels, x.cls) < std::tie(y.task, y.labels, y.cls);
    });
    for (const auto& c : rows) {
      per_class.rows.push_back({name, c.task, num(c.cls), num(c.labels), c.value, c.base, delta(c.value, c.base)});
    }
  }
  out << summary.to_string() << "\n" << per_class.to_string();
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_csv(*out_dir / "report.csv", summary);
    write_csv(*out_dir / "per_class_delta.csv", per_class);
  }
  return kExitOk;
}

int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  if (cfg.dataset.path) throw ConfigError("gen-data needs a 'generate' dataset section");
  const auto hash = config_hash(cfg);
  auto ds = generate(cfg.dataset.generate, cfg.dataset.seed);
  std::optional<StarveReport> report;
  if (cfg.dataset.starve && !cfg.dataset.starve->classes.empty()) {
    auto r = starve(ds, cfg.dataset.starve->classes, cfg.dataset.starve->keep_fraction, cfg.dataset.starve->seed);
    ds = std::move(r.dataset);
    report = std::move(r.report);
    for (const auto& w : report->warnings) log << "warning: " << w << "\n";
  }
  ds.config_hash = hash;
  fs::create_directories(out_dir);
  save_dataset(ds, out_dir / "dataset.bin");

  const auto tags = artifact_tags(hash, cfg.dataset.seed);
  CsvTable counts{tags, {"task", "class", "split", "labeled"}, {}};
  for (Task task : {Task::a, Task::b}) {
    for (SplitTag tag : {SplitTag::train, SplitTag::val, SplitTag::test}) {
      const auto c = label_counts(ds, task, tag);
      for (std::size_t k = 0; k < c.size(); ++k) {
        counts.rows.push_back({to_string(task), num(static_cast<Index>(k)), to_string(tag), num(c[k])});
      }
    }
  }
  write_csv(out_dir / "label_counts.csv", counts);
  if (report) {
    CsvTable st{tags, {"class", "starved", "train_before", "train_after"}, {}};
    for (std::size_t k = 0; k < report->labels_before.size(); ++k) {
      const bool starved =
          std::find(report->classes.begin(), report->classes.end(), static_cast<int>(k)) != report->classes.end();
      st.rows.push_back({num(static_cast<Index>(k)), starved ? "1" : "0", num(report->labels_before[k]),
                         num(report->labels_after[k])});
    }
    write_csv(out_dir / "starve_report.csv", st);
  }
  log << "wrote " << (out_dir / "dataset.bin").string() << " (" << ds.size() << " examples, fingerprint "
      << hex64(fingerprint(ds)) << ")\n";
  return kExitOk;
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-stitch multi-task networks: training, gradient checks and reports", "xstitch"};
  app.require_subcommand(1);

  std::string config_path, out_path, baseline_path, checkpoint_path, mutation_name = "none";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> run_paths;

  auto* train_cmd = app.add_subcommand("train", "Train the configured mode and write run artifacts");
  train_cmd->add_option("--config", config_path, "Experiment config JSON (or a run manifest)")->required();
  train_cmd->add_option("--seed", seed, "Override the config seed");
  train_cmd->add_option("--out", out_path, "Output directory (overrides output_dir)");

  auto* dump_cmd = app.add_subcommand("dump-alphas", "Sorted alpha table of a cross-stitch checkpoint");
  dump_cmd->add_option("checkpoint", checkpoint_path, "Checkpoint JSON")->required();
  dump_cmd->add_option("--out", out_path, "Write alphas_sorted.csv here instead of stdout");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad_cmd->add_option("--config", config_path, "Experiment config JSON (architecture, alpha, gradcheck)");
  grad_cmd->add_option("--seed", seed, "Override the config seed");
  grad_cmd->add_option("--mutation", mutation_name, "Corrupt analytic gradients before comparing")
      ->check(CLI::IsMember({"none", "flip_alpha_ba"}));

  auto* report_cmd = app.add_subcommand("report", "Compare runs against a baseline run");
  report_cmd->add_option("runs", run_paths, "Run directories")->required();
  report_cmd->add_option("--baseline", baseline_path, "Baseline run directory")->required();
  report_cmd->add_option("--out", out_path, "Also write report.csv and per_class_delta.csv here");

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate (and starve) a synthetic two-task dataset");
  gen_cmd->add_option("--config", config_path, "Experiment config JSON with a dataset.generate section")->required();
  gen_cmd->add_option("--seed", seed, "Override the dataset seed");
  gen_cmd->add_option("--out", out_path, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      auto cfg = load_config(config_path);
      if (seed) cfg.seed = *seed;
      if (!out_path.empty()) cfg.output_dir = fs::absolute(out_path);
      if (!cfg.output_dir) throw ConfigError("no output directory: pass --out or set output_dir");
      return cmd_train(cfg, *cfg.output_dir, out);
    }
    if (*dump_cmd) {
      std::optional<fs::path> dir;
      if (!out_path.empty()) dir = fs::path(out_path);
      return cmd_dump_alphas(checkpoint_path, dir, out);
    }
    if (*grad_cmd) {
      ExperimentConfig cfg;
      if (!config_path.empty()) cfg = load_config(config_path);
      if (seed) cfg.seed = *seed;
      const auto mutation = mutation_name == "flip_alpha_ba" ? GradMutation::flip_alpha_ba : GradMutation::none;
      return cmd_gradcheck(cfg, mutation, out);
    }
    if (*report_cmd) {
      std::vector<fs::path> runs(run_paths.begin(), run_paths.end());
      std::optional<fs::path> dir;
      if (!out_path.empty()) dir = fs::path(out_path);
      return cmd_report(runs, baseline_path, dir, out);
    }
    if (*gen_cmd) {
      auto cfg = load_config(config_path);
      if (seed) cfg.dataset.seed = *seed;
      return cmd_gen_data(cfg, out_path, out);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace xstitch::cli
