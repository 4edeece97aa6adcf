#pragma once

#include <vector>

#include "xstitch/network.hpp"

namespace xstitch {

/// Layers [0, split) are shared; layers [split, L) and the heads are
/// duplicated per task. split == 0 is two separate networks, split == L a
/// fully shared trunk with sibling heads.
struct SplitArchitecture {
  NetworkSpec base;
  Index split = 0;

  friend bool operator==(const SplitArchitecture&, const SplitArchitecture&) = default;
};

/// All L + 1 split points of `spec`, ordered by split index.
std::vector<SplitArchitecture> enumerate_splits(const NetworkSpec& spec);

template <typename Scalar>
struct SplitNetwork {
  NetworkSpec spec_a;
  NetworkSpec spec_b;
  Index split = 0;
  std::vector<LayerParams<Scalar>> shared;
  std::vector<LayerParams<Scalar>> branch_a;
  std::vector<LayerParams<Scalar>> branch_b;

  std::span<const LayerSpec> shared_layers() const {
    return std::span<const LayerSpec>(spec_a.layers).first(static_cast<std::size_t>(split));
  }
  std::span<const LayerSpec> branch_layers(Task t) const {
    return std::span<const LayerSpec>(t == Task::a ? spec_a.layers : spec_b.layers)
        .subspan(static_cast<std::size_t>(split));
  }

  template <typename Other>
  SplitNetwork<Other> cast() const {
    SplitNetwork<Other> s{spec_a, spec_b, split, {}, {}, {}};
    for (const auto& p : shared) s.shared.push_back(p.template cast<Other>());
    for (const auto& p : branch_a) s.branch_a.push_back(p.template cast<Other>());
    for (const auto& p : branch_b) s.branch_b.push_back(p.template cast<Other>());
    return s;
  }

  friend bool operator==(const SplitNetwork&, const SplitNetwork&) = default;
};

/// Instantiates `arch` from two one-task networks: the shared trunk takes
/// network A's parameters (weights and biases), each branch its own task's.
template <typename Scalar>
SplitNetwork<Scalar> build_split(const SplitArchitecture& arch, const Network<Scalar>& a, const Network<Scalar>& b) {
  if (!same_topology(arch.base, a.spec) || !same_topology(a.spec, b.spec)) {
    throw ConfigError("split: networks do not match the architecture's topology");
  }
  if (arch.split < 0 || arch.split > arch.base.trunk_depth()) {
    throw ConfigError("split index " + std::to_string(arch.split) + " outside [0, " +
                      std::to_string(arch.base.trunk_depth()) + "]");
  }
  const auto k = static_cast<std::size_t>(arch.split);
  SplitNetwork<Scalar> s{a.spec, b.spec, arch.split, {}, {}, {}};
  s.shared.assign(a.params.begin(), a.params.begin() + static_cast<std::ptrdiff_t>(k));
  s.branch_a.assign(a.params.begin() + static_cast<std::ptrdiff_t>(k), a.params.end());
  s.branch_b.assign(b.params.begin() + static_cast<std::ptrdiff_t>(k), b.params.end());
  return s;
}

template <typename Scalar>
Index parameter_count(const SplitNetwork<Scalar>& s) {
  return detail::count_params<Scalar>(s.shared) + detail::count_params<Scalar>(s.branch_a) +
         detail::count_params<Scalar>(s.branch_b);
}

template <typename Scalar>
Index shared_parameter_count(const SplitNetwork<Scalar>& s) {
  return detail::count_params<Scalar>(s.shared);
}

template <typename Scalar>
SplitNetwork<Scalar> zeros_like(const SplitNetwork<Scalar>& s) {
  SplitNetwork<Scalar> z{s.spec_a, s.spec_b, s.split, {}, {}, {}};
  for (const auto& p : s.shared) z.shared.push_back(zeros_like(p));
  for (const auto& p : s.branch_a) z.branch_a.push_back(zeros_like(p));
  for (const auto& p : s.branch_b) z.branch_b.push_back(zeros_like(p));
  return z;
}

template <typename Scalar>
std::vector<ParamRef<Scalar>> param_refs(SplitNetwork<Scalar>& s) {
  std::vector<ParamRef<Scalar>> refs;
  detail::append_layer_refs<Scalar>(refs, s.shared_layers(), s.shared, "shared/");
  detail::append_layer_refs<Scalar>(refs, s.branch_layers(Task::a), s.branch_a, "A/");
  detail::append_layer_refs<Scalar>(refs, s.branch_layers(Task::b), s.branch_b, "B/");
  return refs;
}

template <typename Scalar>
bool has_task(const SplitNetwork<Scalar>&, Task) {
  return true;
}

template <typename Scalar>
struct SplitTrace {
  StreamTrace<Scalar> trunk;
  StreamTrace<Scalar> a;
  StreamTrace<Scalar> b;
};

template <typename Scalar>
SplitTrace<Scalar> forward_trace(const SplitNetwork<Scalar>& s, const Tensor<Scalar>& inputs,
                                 std::span<const int> labels_a = {}, std::span<const int> labels_b = {}) {
  detail::check_inputs(s.spec_a, inputs);
  SplitTrace<Scalar> t;
  t.trunk = detail::forward_layers<Scalar>(s.shared_layers(), s.shared, inputs);
  t.a = detail::forward_layers<Scalar>(s.branch_layers(Task::a), s.branch_a, t.trunk.output, labels_a);
  t.b = detail::forward_layers<Scalar>(s.branch_layers(Task::b), s.branch_b, t.trunk.output, labels_b);
  return t;
}

template <typename Scalar>
Predictions<Scalar> predict(const SplitNetwork<Scalar>& s, const Tensor<Scalar>& inputs) {
  auto t = forward_trace(s, inputs);
  return {std::move(t.a.output), std::move(t.b.output)};
}

template <typename Scalar>
LossBreakdown compute_loss(const SplitNetwork<Scalar>& s, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  LossBreakdown r;
  r.task_a = detail::mean_labeled_loss(t.a.losses, std::span<const int>(batch.labels_a));
  r.task_b = detail::mean_labeled_loss(t.b.losses, std::span<const int>(labels_b), &r.labeled_b);
  r.total = w.a * r.task_a + w.b * r.task_b;
  return r;
}

/// Total loss computed in Scalar throughout.
template <typename Scalar>
Scalar objective(const SplitNetwork<Scalar>& s, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  return static_cast<Scalar>(w.a) * detail::labeled_mean(t.a.losses, std::span<const int>(batch.labels_a)) +
         static_cast<Scalar>(w.b) * detail::labeled_mean(t.b.losses, std::span<const int>(labels_b));
}

/// The shared trunk receives the sum of both branches' input gradients.
template <typename Scalar>
LossAndGradients<SplitNetwork<Scalar>> loss_and_gradients(const SplitNetwork<Scalar>& s,
                                                          const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  LossAndGradients<SplitNetwork<Scalar>> r{{}, zeros_like(s)};
  r.loss.task_a = detail::mean_labeled_loss(t.a.losses, std::span<const int>(batch.labels_a));
  r.loss.task_b = detail::mean_labeled_loss(t.b.losses, std::span<const int>(labels_b), &r.loss.labeled_b);
  r.loss.total = w.a * r.loss.task_a + w.b * r.loss.task_b;

  Tensor<Scalar> ga = detail::backward_layers<Scalar>(s.branch_layers(Task::a), s.branch_a, t.a.caches,
                                                      detail::head_upstream<Scalar>(batch.labels_a, w.a),
                                                      r.gradients.branch_a);
  const Tensor<Scalar> gb = detail::backward_layers<Scalar>(s.branch_layers(Task::b), s.branch_b, t.b.caches,
                                                            detail::head_upstream<Scalar>(labels_b, w.b),
                                                            r.gradients.branch_b);
  ga.data() += gb.data();
  detail::backward_layers<Scalar>(s.shared_layers(), s.shared, t.trunk.caches, std::move(ga), r.gradients.shared);
  return r;
}

}  // namespace xstitch
