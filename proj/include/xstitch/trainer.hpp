#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xstitch/network.hpp"
#include "xstitch/split.hpp"
#include "xstitch/stitched.hpp"
#include "xstitch/synthtask.hpp"

namespace xstitch {

struct TrainConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double alpha_lr_scale = 100.0;  // alpha learning rate = base_lr * alpha_lr_scale * unit.lr_scale
  LossWeights loss_weights;
  Index iterations = 1000;
  Index batch_size = 20;
  std::uint64_t seed = 0;
  Index eval_every = 100;
  bool freeze_alphas = false;

  void validate() const;
};

struct Metrics {
  double overall_accuracy = 0.0;
  double mean_per_class_accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes with no examples
  std::vector<Index> class_counts;
  Index examples = 0;

  friend bool operator==(const Metrics& a, const Metrics& b);
};

/// Accuracy bookkeeping from probability rows. `labels` negative entries are skipped.
template <typename Scalar>
Metrics metrics_from_probabilities(const Tensor<Scalar>& probabilities, std::span<const int> labels) {
  const Index classes = probabilities.dim(1);
  std::vector<Index> correct(static_cast<std::size_t>(classes), 0);
  Metrics m;
  m.class_counts.assign(static_cast<std::size_t>(classes), 0);
  const auto p = probabilities.matrix();
  double loss = 0.0;
  Index hits = 0;
  for (Index n = 0; n < p.rows(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0) continue;
    Index guess = 0;
    p.row(n).maxCoeff(&guess);
    ++m.class_counts[static_cast<std::size_t>(y)];
    if (guess == y) {
      ++correct[static_cast<std::size_t>(y)];
      ++hits;
    }
    loss -= std::log(std::max(static_cast<double>(p(n, y)), std::numeric_limits<double>::min()));
    ++m.examples;
  }
  if (m.examples == 0) throw ContractError("evaluation split has no labeled examples");
  m.overall_accuracy = static_cast<double>(hits) / static_cast<double>(m.examples);
  m.loss = loss / static_cast<double>(m.examples);
  double sum = 0.0;
  Index present = 0;
  for (std::size_t c = 0; c < correct.size(); ++c) {
    if (m.class_counts[c] == 0) {
      m.per_class_accuracy.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double acc = static_cast<double>(correct[c]) / static_cast<double>(m.class_counts[c]);
    m.per_class_accuracy.push_back(acc);
    sum += acc;
    ++present;
  }
  m.mean_per_class_accuracy = sum / static_cast<double>(present);
  return m;
}

/// Metrics per task the model predicts.
struct TaskMetrics {
  std::optional<Metrics> a;
  std::optional<Metrics> b;
  const std::optional<Metrics>& operator[](Task t) const { return t == Task::a ? a : b; }
};

namespace detail {

constexpr Index kEvalChunk = 256;

inline std::vector<int> eval_labels(const TwoTaskDataset& ds, std::span<const Index> rows, Task t) {
  std::vector<int> out;
  for (Index r : rows) {
    const auto i = static_cast<std::size_t>(r);
    out.push_back(t == Task::a ? ds.labels_a[i] : (ds.mask_b[i] ? ds.labels_b[i] : -1));
  }
  return out;
}

template <typename Scalar, typename Fn>
Predictions<Scalar> predict_chunks(Fn&& fn, const TwoTaskDataset& ds, std::span<const Index> rows) {
  Predictions<Scalar> all;
  std::vector<Tensor<Scalar>> parts_a, parts_b;
  for (std::size_t begin = 0; begin < rows.size(); begin += kEvalChunk) {
    const auto len = std::min<std::size_t>(kEvalChunk, rows.size() - begin);
    const auto batch = make_batch<Scalar>(ds, rows.subspan(begin, len));
    auto p = fn(batch.inputs);
    if (!p.a.empty()) parts_a.push_back(std::move(p.a));
    if (!p.b.empty()) parts_b.push_back(std::move(p.b));
  }
  auto concat = [](const std::vector<Tensor<Scalar>>& parts) {
    if (parts.empty()) return Tensor<Scalar>();
    Index n = 0;
    for (const auto& t : parts) n += t.dim(0);
    Tensor<Scalar> out(Shape{n, parts.front().dim(1)});
    Index at = 0;
    for (const auto& t : parts) {
      out.data().segment(at, t.size()) = t.data();
      at += t.size();
    }
    return out;
  };
  all.a = concat(parts_a);
  all.b = concat(parts_b);
  return all;
}

}  // namespace detail

template <typename Scalar, template <typename> class Model>
TaskMetrics evaluate(const Model<Scalar>& model, const TwoTaskDataset& ds, SplitTag tag) {
  const auto rows = ds.indices(tag);
  if (rows.empty()) throw ContractError(std::string("evaluation split '") + to_string(tag) + "' is empty");
  const auto preds = detail::predict_chunks<Scalar>([&](const Tensor<Scalar>& x) { return predict(model, x); }, ds,
                                                    std::span<const Index>(rows));
  TaskMetrics out;
  for (Task t : {Task::a, Task::b}) {
    if (!has_task(model, t)) continue;
    const auto labels = detail::eval_labels(ds, rows, t);
    (t == Task::a ? out.a : out.b) = metrics_from_probabilities(preds[t], std::span<const int>(labels));
  }
  return out;
}

/// Averages the class probabilities of two networks trained for the same task.
template <typename Scalar>
Tensor<Scalar> ensemble_probabilities(const Tensor<Scalar>& p1, const Tensor<Scalar>& p2) {
  if (p1.shape() != p2.shape()) throw ShapeError("ensemble members disagree on output shape");
  return Tensor<Scalar>(p1.shape(), (p1.data() + p2.data()) * Scalar(0.5));
}

template <typename Scalar>
Metrics ensemble_eval(const Network<Scalar>& n1, const Network<Scalar>& n2, const TwoTaskDataset& ds, SplitTag tag) {
  if (!(n1.spec == n2.spec) || n1.task != n2.task) throw ConfigError("ensemble members must share spec and task");
  const auto rows = ds.indices(tag);
  if (rows.empty()) throw ContractError(std::string("evaluation split '") + to_string(tag) + "' is empty");
  const auto fn = [&](const Tensor<Scalar>& x) {
    auto p = predict(n1, x);
    const auto q = predict(n2, x);
    p.a = p.a.empty() ? p.a : ensemble_probabilities(p.a, q.a);
    p.b = p.b.empty() ? p.b : ensemble_probabilities(p.b, q.b);
    return p;
  };
  const auto preds = detail::predict_chunks<Scalar>(fn, ds, std::span<const Index>(rows));
  const auto labels = detail::eval_labels(ds, rows, n1.task);
  return metrics_from_probabilities(preds[n1.task], std::span<const int>(labels));
}

/// Momentum velocities, one buffer per ParamRef in model order.
template <typename Scalar>
struct SgdState {
  std::vector<std::vector<Scalar>> velocity;
};

/// v <- momentum * v + lr * g;  theta <- theta - v.
/// Alphas use base_lr * alpha_lr_scale * unit lr_scale; everything else base_lr.
/// Throws DivergenceError, leaving the model untouched, if any gradient is non-finite.
template <typename Model, typename Scalar>
void sgd_step(Model& model, Model& grads, const TrainConfig& cfg, SgdState<Scalar>& state) {
  auto params = param_refs(model);
  auto gs = param_refs(grads);
  if (params.size() != gs.size()) throw ContractError("gradients do not align with parameters");
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (gs[i].values.size() != params[i].values.size()) throw ContractError("gradient block size mismatch");
    for (Scalar g : gs[i].values) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw DivergenceError("non-finite gradient in '" + gs[i].name + "'");
      }
    }
  }
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.values.size(), Scalar(0));
  }
  const auto momentum = static_cast<Scalar>(cfg.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].alpha && cfg.freeze_alphas) continue;
    const double lr = params[i].alpha ? cfg.base_lr * cfg.alpha_lr_scale * params[i].lr_mult : cfg.base_lr;
    const auto rate = static_cast<Scalar>(lr);
    auto& v = state.velocity[i];
    auto theta = params[i].values;
    const auto g = gs[i].values;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = momentum * v[k] + rate * g[k];
      theta[k] -= v[k];
    }
  }
}

struct IterationRecord {
  Index iteration = 0;
  LossBreakdown loss;
  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct EvalRecord {
  Index iteration = 0;
  Task task = Task::a;
  Metrics metrics;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

/// Alpha matrices of one unit, each stored as (a_AA, a_AB, a_BA, a_BB).
struct AlphaSnapshot {
  Index iteration = 0;
  std::string site;
  std::vector<std::array<double, 4>> alphas;
  friend bool operator==(const AlphaSnapshot&, const AlphaSnapshot&) = default;
};

struct History {
  std::vector<IterationRecord> losses;
  std::vector<EvalRecord> evals;
  std::vector<AlphaSnapshot> alphas;
  bool diverged = false;
  std::string diagnostic;
  friend bool operator==(const History&, const History&) = default;
};

template <typename Model>
struct TrainResult {
  Model model;
  History history;
};

template <typename Scalar>
std::vector<AlphaSnapshot> snapshot_alphas(const StitchedNetwork<Scalar>& s, Index iteration) {
  std::vector<AlphaSnapshot> out;
  for (const auto& u : s.units) {
    AlphaSnapshot snap{iteration, u.site, {}};
    for (const auto& m : u.alphas) {
      snap.alphas.push_back({static_cast<double>(m(0, 0)), static_cast<double>(m(0, 1)),
                             static_cast<double>(m(1, 0)), static_cast<double>(m(1, 1))});
    }
    out.push_back(std::move(snap));
  }
  return out;
}

template <typename Model>
std::vector<AlphaSnapshot> snapshot_alphas(const Model&, Index) {
  return {};
}

/// Epoch-wise seeded shuffles of the training split; a new permutation is
/// drawn whenever fewer than batch_size examples remain.
class BatchSchedule {
 public:
  BatchSchedule(std::vector<Index> rows, Index batch_size, std::uint64_t seed)
      : rows_(std::move(rows)), batch_(static_cast<std::size_t>(batch_size)), rng_(seed) {
    if (rows_.empty()) throw ContractError("training split is empty");
    batch_ = std::min(batch_, rows_.size());
    reshuffle();
  }

  std::span<const Index> next() {
    if (pos_ + batch_ > rows_.size()) reshuffle();
    std::span<const Index> out(rows_.data() + pos_, batch_);
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(rows_.begin(), rows_.end(), rng_);
    pos_ = 0;
  }

  std::vector<Index> rows_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

/// Mini-batch SGD on the training split. Records the loss every iteration,
/// validation metrics and alpha snapshots every eval_every iterations (and at
/// the last one). Stops early, flagging the history, on a non-finite loss or
/// gradient. Deterministic for a given (model, dataset, cfg).
template <typename Scalar, template <typename> class Net>
TrainResult<Net<Scalar>> train(Net<Scalar> model, const TwoTaskDataset& ds, const TrainConfig& cfg) {
  using Model = Net<Scalar>;
  cfg.validate();
  TrainResult<Model> r{std::move(model), {}};
  BatchSchedule schedule(ds.indices(SplitTag::train), cfg.batch_size, cfg.seed);
  SgdState<Scalar> sgd;
  const bool has_val = !ds.indices(SplitTag::val).empty();
  for (auto& s : snapshot_alphas(r.model, 0)) r.history.alphas.push_back(std::move(s));

  for (Index it = 1; it <= cfg.iterations; ++it) {
    const auto batch = make_batch<Scalar>(ds, schedule.next());
    auto lg = loss_and_gradients(r.model, batch, cfg.loss_weights);
    if (!std::isfinite(lg.loss.total)) {
      r.history.diverged = true;
      r.history.diagnostic = "non-finite loss at iteration " + std::to_string(it);
      break;
    }
    r.history.losses.push_back({it, lg.loss});
    try {
      sgd_step(r.model, lg.gradients, cfg, sgd);
    } catch (const DivergenceError& e) {
      r.history.diverged = true;
      r.history.diagnostic = std::string(e.what()) + " at iteration " + std::to_string(it);
      break;
    }
    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      if (has_val) {
        const auto m = evaluate(r.model, ds, SplitTag::val);
        for (Task t : {Task::a, Task::b}) {
          if (m[t]) r.history.evals.push_back({it, t, *m[t]});
        }
      }
      for (auto& s : snapshot_alphas(r.model, it)) r.history.alphas.push_back(std::move(s));
    }
  }
  return r;
}

}  // namespace xstitch
