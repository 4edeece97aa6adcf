#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xstitch/cross_stitch.hpp"
#include "xstitch/network.hpp"

namespace xstitch {

/// Two same-topology networks joined by cross-stitch units. Network A is
/// supervised by task A, network B by task B.
template <typename Scalar>
struct StitchedNetwork {
  Network<Scalar> net_a;
  Network<Scalar> net_b;
  std::vector<CrossStitchUnit<Scalar>> units;

  const CrossStitchUnit<Scalar>* unit_at(const std::string& site) const {
    for (const auto& u : units) {
      if (u.site == site) return &u;
    }
    return nullptr;
  }

  template <typename Other>
  StitchedNetwork<Other> cast() const {
    StitchedNetwork<Other> s{net_a.template cast<Other>(), net_b.template cast<Other>(), {}};
    for (const auto& u : units) s.units.push_back(u.template cast<Other>());
    return s;
  }

  friend bool operator==(const StitchedNetwork&, const StitchedNetwork&) = default;
};

/// Every matrix set to [[alpha_same, alpha_diff], [alpha_diff, alpha_same]].
/// per_channel sites get one matrix per channel of the site's activation.
template <typename Scalar>
std::vector<CrossStitchUnit<Scalar>> init_alphas(double alpha_same, double alpha_diff, Granularity granularity,
                                                 const NetworkSpec& spec, const std::vector<std::string>& sites,
                                                 double lr_scale = 1.0) {
  if (!std::isfinite(alpha_same) || !std::isfinite(alpha_diff)) {
    throw ConfigError("alpha initial values must be finite");
  }
  const auto shapes = activation_shapes(spec);
  AlphaMatrix<Scalar> m;
  m << static_cast<Scalar>(alpha_same), static_cast<Scalar>(alpha_diff), static_cast<Scalar>(alpha_diff),
      static_cast<Scalar>(alpha_same);
  std::vector<CrossStitchUnit<Scalar>> units;
  for (const auto& site : sites) {
    const auto at = spec.find(site);
    if (!at || *at + 1 == spec.layers.size()) throw ConfigError("unknown stitch site '" + site + "'");
    const Index channels = shapes[*at].front();
    const std::size_t count = granularity == Granularity::per_map ? 1 : static_cast<std::size_t>(channels);
    units.push_back({granularity, std::vector<AlphaMatrix<Scalar>>(count, m), site, lr_scale});
  }
  return units;
}

/// Joins two one-task networks. An empty `sites` list means the spec's
/// default stitch sites.
template <typename Scalar>
StitchedNetwork<Scalar> stitch(Network<Scalar> a, Network<Scalar> b, std::vector<std::string> sites,
                               Granularity granularity, double alpha_same, double alpha_diff, double lr_scale = 1.0) {
  if (!same_topology(a.spec, b.spec)) throw ConfigError("stitch: networks A and B have different topologies");
  if (sites.empty()) sites = a.spec.stitch_sites;
  a.task = Task::a;
  b.task = Task::b;
  auto units = init_alphas<Scalar>(alpha_same, alpha_diff, granularity, a.spec, sites, lr_scale);
  return {std::move(a), std::move(b), std::move(units)};
}

template <typename Scalar>
Index alpha_matrix_count(const StitchedNetwork<Scalar>& s) {
  Index n = 0;
  for (const auto& u : s.units) n += static_cast<Index>(u.alphas.size());
  return n;
}

template <typename Scalar>
Index parameter_count(const StitchedNetwork<Scalar>& s) {
  return parameter_count(s.net_a) + parameter_count(s.net_b) + 4 * alpha_matrix_count(s);
}

template <typename Scalar>
StitchedNetwork<Scalar> zeros_like(const StitchedNetwork<Scalar>& s) {
  StitchedNetwork<Scalar> z{zeros_like(s.net_a), zeros_like(s.net_b), s.units};
  for (auto& u : z.units) {
    for (auto& m : u.alphas) m.setZero();
  }
  return z;
}

template <typename Scalar>
std::vector<ParamRef<Scalar>> param_refs(StitchedNetwork<Scalar>& s) {
  std::vector<ParamRef<Scalar>> refs;
  detail::append_layer_refs<Scalar>(refs, s.net_a.spec.layers, s.net_a.params, "A/");
  detail::append_layer_refs<Scalar>(refs, s.net_b.spec.layers, s.net_b.params, "B/");
  for (auto& u : s.units) {
    refs.push_back({"alpha." + u.site, true, u.lr_scale,
                    std::span<Scalar>(u.alphas.front().data(), 4 * u.alphas.size())});
  }
  return refs;
}

template <typename Scalar>
bool has_task(const StitchedNetwork<Scalar>&, Task) {
  return true;
}

template <typename Scalar>
struct StitchedTrace {
  std::vector<ForwardCache<Scalar>> caches_a;
  std::vector<ForwardCache<Scalar>> caches_b;
  // Per layer: index into units, or -1.
  std::vector<int> unit_index;
  // Per layer at sites: activations entering and leaving the unit.
  std::vector<Tensor<Scalar>> pre_a, pre_b, post_a, post_b;
  Tensor<Scalar> probabilities_a, probabilities_b;
  Tensor<Scalar> losses_a, losses_b;
};

template <typename Scalar>
StitchedTrace<Scalar> forward_trace(const StitchedNetwork<Scalar>& s, const Tensor<Scalar>& inputs,
                                    std::span<const int> labels_a = {}, std::span<const int> labels_b = {}) {
  const auto& layers_a = s.net_a.spec.layers;
  const auto& layers_b = s.net_b.spec.layers;
  detail::check_inputs(s.net_a.spec, inputs);
  const std::size_t n = layers_a.size();
  StitchedTrace<Scalar> t;
  t.unit_index.assign(n, -1);
  for (std::size_t u = 0; u < s.units.size(); ++u) {
    const auto at = s.net_a.spec.find(s.units[u].site);
    if (!at || *at + 1 == n) throw ConfigError("unit site '" + s.units[u].site + "' is not a trunk layer");
    t.unit_index[*at] = static_cast<int>(u);
  }
  t.pre_a.resize(n);
  t.pre_b.resize(n);
  t.post_a.resize(n);
  t.post_b.resize(n);

  Tensor<Scalar> xa = inputs;
  Tensor<Scalar> xb = inputs;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    auto fa = layer_forward(layers_a[i], s.net_a.params[i], xa);
    auto fb = layer_forward(layers_b[i], s.net_b.params[i], xb);
    t.caches_a.push_back(std::move(fa.cache));
    t.caches_b.push_back(std::move(fb.cache));
    xa = std::move(fa.output);
    xb = std::move(fb.output);
    if (t.unit_index[i] >= 0) {
      auto mixed = cross_stitch_forward(xa, xb, s.units[static_cast<std::size_t>(t.unit_index[i])]);
      t.pre_a[i] = std::move(xa);
      t.pre_b[i] = std::move(xb);
      t.post_a[i] = mixed.a;
      t.post_b[i] = mixed.b;
      xa = std::move(mixed.a);
      xb = std::move(mixed.b);
    }
  }
  auto ha = layer_forward(layers_a.back(), s.net_a.params.back(), xa, labels_a);
  auto hb = layer_forward(layers_b.back(), s.net_b.params.back(), xb, labels_b);
  t.caches_a.push_back(std::move(ha.cache));
  t.caches_b.push_back(std::move(hb.cache));
  t.probabilities_a = std::move(ha.output);
  t.probabilities_b = std::move(hb.output);
  t.losses_a = std::move(ha.losses);
  t.losses_b = std::move(hb.losses);
  return t;
}

template <typename Scalar>
Predictions<Scalar> predict(const StitchedNetwork<Scalar>& s, const Tensor<Scalar>& inputs) {
  auto t = forward_trace(s, inputs);
  return {std::move(t.probabilities_a), std::move(t.probabilities_b)};
}

template <typename Scalar>
LossBreakdown compute_loss(const StitchedNetwork<Scalar>& s, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  LossBreakdown r;
  r.task_a = detail::mean_labeled_loss(t.losses_a, std::span<const int>(batch.labels_a));
  r.task_b = detail::mean_labeled_loss(t.losses_b, std::span<const int>(labels_b), &r.labeled_b);
  r.total = w.a * r.task_a + w.b * r.task_b;
  return r;
}

/// Total loss computed in Scalar throughout.
template <typename Scalar>
Scalar objective(const StitchedNetwork<Scalar>& s, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  return static_cast<Scalar>(w.a) * detail::labeled_mean(t.losses_a, std::span<const int>(batch.labels_a)) +
         static_cast<Scalar>(w.b) * detail::labeled_mean(t.losses_b, std::span<const int>(labels_b));
}

template <typename Scalar>
LossAndGradients<StitchedNetwork<Scalar>> loss_and_gradients(const StitchedNetwork<Scalar>& s,
                                                             const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const auto labels_b = batch.effective_labels_b();
  const auto t = forward_trace(s, batch.inputs, batch.labels_a, labels_b);
  LossAndGradients<StitchedNetwork<Scalar>> r{{}, zeros_like(s)};
  r.loss.task_a = detail::mean_labeled_loss(t.losses_a, std::span<const int>(batch.labels_a));
  r.loss.task_b = detail::mean_labeled_loss(t.losses_b, std::span<const int>(labels_b), &r.loss.labeled_b);
  r.loss.total = w.a * r.loss.task_a + w.b * r.loss.task_b;

  const auto& layers_a = s.net_a.spec.layers;
  const auto& layers_b = s.net_b.spec.layers;
  auto& grads_a = r.gradients.net_a.params;
  auto& grads_b = r.gradients.net_b.params;
  const std::size_t n = layers_a.size();

  auto step_a = layer_backward(layers_a.back(), s.net_a.params.back(), t.caches_a.back(),
                               detail::head_upstream<Scalar>(batch.labels_a, w.a));
  auto step_b = layer_backward(layers_b.back(), s.net_b.params.back(), t.caches_b.back(),
                               detail::head_upstream<Scalar>(labels_b, w.b));
  grads_a.back() = std::move(step_a.param_grads);
  grads_b.back() = std::move(step_b.param_grads);
  Tensor<Scalar> ga = std::move(step_a.input_grad);
  Tensor<Scalar> gb = std::move(step_b.input_grad);

  for (std::size_t i = n - 1; i-- > 0;) {
    if (const int u = t.unit_index[i]; u >= 0) {
      auto sg = cross_stitch_backward(t.pre_a[i], t.pre_b[i], ga, gb, s.units[static_cast<std::size_t>(u)]);
      r.gradients.units[static_cast<std::size_t>(u)].alphas = std::move(sg.alphas);
      ga = std::move(sg.a);
      gb = std::move(sg.b);
    }
    auto ba = layer_backward(layers_a[i], s.net_a.params[i], t.caches_a[i], ga);
    auto bb = layer_backward(layers_b[i], s.net_b.params[i], t.caches_b[i], gb);
    if (layers_a[i].has_params()) {
      grads_a[i] = std::move(ba.param_grads);
      grads_b[i] = std::move(bb.param_grads);
    }
    ga = std::move(ba.input_grad);
    gb = std::move(bb.input_grad);
  }
  return r;
}

}  // namespace xstitch
