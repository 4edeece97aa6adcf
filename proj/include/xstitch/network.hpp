#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xstitch/batch.hpp"
#include "xstitch/layer.hpp"
#include "xstitch/network_spec.hpp"

namespace xstitch {

/// One trainable scalar block, as seen by optimizers and the gradient checker.
template <typename Scalar>
struct ParamRef {
  std::string name;  // "<layer>.weight", "<layer>.bias", "alpha.<site>"
  bool alpha = false;
  double lr_mult = 1.0;
  std::span<Scalar> values;
};

/// Instantiated parameters of one spec, trained for one task.
template <typename Scalar>
struct Network {
  NetworkSpec spec;
  std::vector<LayerParams<Scalar>> params;  // one entry per spec layer
  Task task = Task::a;

  template <typename Other>
  Network<Other> cast() const {
    Network<Other> n{spec, {}, task};
    for (const auto& p : params) n.params.push_back(p.template cast<Other>());
    return n;
  }

  friend bool operator==(const Network&, const Network&) = default;
};

/// Per-task class probabilities; a tensor is empty when the model has no head for that task.
template <typename Scalar>
struct Predictions {
  Tensor<Scalar> a;
  Tensor<Scalar> b;
  const Tensor<Scalar>& operator[](Task t) const { return t == Task::a ? a : b; }
};

template <typename Model>
struct LossAndGradients {
  LossBreakdown loss;
  Model gradients;
};

/// Forward record of a contiguous run of layers.
template <typename Scalar>
struct StreamTrace {
  std::vector<ForwardCache<Scalar>> caches;
  Tensor<Scalar> output;
  Tensor<Scalar> losses;
};

namespace detail {

template <typename Scalar>
void init_layer(LayerParams<Scalar>& p, const LayerSpec& spec, const Shape& input, std::mt19937_64& rng) {
  const auto [wshape, bshape] = layer_param_shapes(spec, input);
  if (wshape.empty()) return;
  p.weight = Tensor<Scalar>(wshape);
  p.bias = Tensor<Scalar>(bshape);
  const double fan_in = static_cast<double>(p.weight.size() / p.weight.dim(0));
  const double limit = std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Index i = 0; i < p.weight.size(); ++i) p.weight[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
StreamTrace<Scalar> forward_layers(std::span<const LayerSpec> layers, std::span<const LayerParams<Scalar>> params,
                                   Tensor<Scalar> input, std::span<const int> labels = {}) {
  StreamTrace<Scalar> trace;
  trace.caches.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto step = layer_forward(layers[i], params[i], input, labels);
    input = std::move(step.output);
    if (layers[i].kind == LayerKind::softmax_ce_head) trace.losses = std::move(step.losses);
    trace.caches.push_back(std::move(step.cache));
  }
  trace.output = std::move(input);
  return trace;
}

/// Accumulates parameter gradients into `grads` and returns dL/d(input).
template <typename Scalar>
Tensor<Scalar> backward_layers(std::span<const LayerSpec> layers, std::span<const LayerParams<Scalar>> params,
                               std::span<const ForwardCache<Scalar>> caches, Tensor<Scalar> upstream,
                               std::span<LayerParams<Scalar>> grads) {
  for (std::size_t i = layers.size(); i-- > 0;) {
    auto step = layer_backward(layers[i], params[i], caches[i], upstream);
    if (layers[i].has_params()) {
      grads[i].weight.data() += step.param_grads.weight.data();
      grads[i].bias.data() += step.param_grads.bias.data();
    }
    upstream = std::move(step.input_grad);
  }
  return upstream;
}

template <typename Scalar>
void append_layer_refs(std::vector<ParamRef<Scalar>>& refs, std::span<const LayerSpec> layers,
                       std::span<LayerParams<Scalar>> params, const std::string& prefix = {}) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_params()) continue;
    auto& p = params[i];
    refs.push_back({prefix + layers[i].name + ".weight", false, 1.0,
                    std::span<Scalar>(p.weight.data().data(), static_cast<std::size_t>(p.weight.size()))});
    refs.push_back({prefix + layers[i].name + ".bias", false, 1.0,
                    std::span<Scalar>(p.bias.data().data(), static_cast<std::size_t>(p.bias.size()))});
  }
}

template <typename Scalar>
Index count_params(std::span<const LayerParams<Scalar>> params) {
  Index n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

template <typename Scalar>
void check_inputs(const NetworkSpec& spec, const Tensor<Scalar>& inputs) {
  if (inputs.rank() != 4 || Shape(inputs.shape().begin() + 1, inputs.shape().end()) != spec.input_shape) {
    throw ShapeError("network expects inputs of shape (N, " + to_string(spec.input_shape) + "), got " +
                     to_string(inputs.shape()));
  }
}

}  // namespace detail

/// Fresh one-task network: fan-in scaled uniform weights, zero biases,
/// drawn from a generator seeded with `seed`.
template <typename Scalar>
Network<Scalar> build_one_task(const NetworkSpec& spec, std::uint64_t seed, Task task = Task::a) {
  validate(spec);
  Network<Scalar> net{spec, std::vector<LayerParams<Scalar>>(spec.layers.size()), task};
  std::mt19937_64 rng(seed);
  Shape input = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    detail::init_layer(net.params[i], spec.layers[i], input, rng);
    input = layer_output_shape(spec.layers[i], input);
  }
  return net;
}

template <typename Scalar>
Index parameter_count(const Network<Scalar>& net) {
  return detail::count_params<Scalar>(net.params);
}

template <typename Scalar>
Network<Scalar> zeros_like(const Network<Scalar>& net) {
  Network<Scalar> z{net.spec, {}, net.task};
  for (const auto& p : net.params) z.params.push_back(zeros_like(p));
  return z;
}

template <typename Scalar>
std::vector<ParamRef<Scalar>> param_refs(Network<Scalar>& net) {
  std::vector<ParamRef<Scalar>> refs;
  detail::append_layer_refs<Scalar>(refs, net.spec.layers, net.params);
  return refs;
}

template <typename Scalar>
bool has_task(const Network<Scalar>& net, Task t) {
  return net.task == t;
}

template <typename Scalar>
StreamTrace<Scalar> forward_trace(const Network<Scalar>& net, const Tensor<Scalar>& inputs,
                                  std::span<const int> labels = {}) {
  detail::check_inputs(net.spec, inputs);
  return detail::forward_layers<Scalar>(net.spec.layers, net.params, inputs, labels);
}

template <typename Scalar>
Predictions<Scalar> predict(const Network<Scalar>& net, const Tensor<Scalar>& inputs) {
  Predictions<Scalar> p;
  (net.task == Task::a ? p.a : p.b) = forward_trace(net, inputs).output;
  return p;
}

template <typename Scalar>
LossBreakdown compute_loss(const Network<Scalar>& net, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  LossBreakdown r;
  if (net.task == Task::a) {
    const auto trace = forward_trace(net, batch.inputs, batch.labels_a);
    r.task_a = detail::mean_labeled_loss(trace.losses, std::span<const int>(batch.labels_a));
    r.total = w.a * r.task_a;
  } else {
    const auto labels = batch.effective_labels_b();
    const auto trace = forward_trace(net, batch.inputs, labels);
    r.task_b = detail::mean_labeled_loss(trace.losses, std::span<const int>(labels), &r.labeled_b);
    r.total = w.b * r.task_b;
  }
  return r;
}

/// Total loss computed in Scalar throughout.
template <typename Scalar>
Scalar objective(const Network<Scalar>& net, const TaskBatch<Scalar>& batch, LossWeights w) {
  batch.validate();
  const bool on_a = net.task == Task::a;
  const std::vector<int> labels = on_a ? batch.labels_a : batch.effective_labels_b();
  const auto trace = forward_trace(net, batch.inputs, labels);
  return static_cast<Scalar>(on_a ? w.a : w.b) * detail::labeled_mean(trace.losses, std::span<const int>(labels));
}

template <typename Scalar>
LossAndGradients<Network<Scalar>> loss_and_gradients(const Network<Scalar>& net, const TaskBatch<Scalar>& batch,
                                                     LossWeights w) {
  batch.validate();
  LossAndGradients<Network<Scalar>> r{{}, zeros_like(net)};
  const bool on_a = net.task == Task::a;
  const std::vector<int> labels = on_a ? batch.labels_a : batch.effective_labels_b();
  const auto trace = forward_trace(net, batch.inputs, labels);
  const double weight = on_a ? w.a : w.b;
  if (on_a) {
    r.loss.task_a = detail::mean_labeled_loss(trace.losses, std::span<const int>(labels));
    r.loss.total = w.a * r.loss.task_a;
  } else {
    r.loss.task_b = detail::mean_labeled_loss(trace.losses, std::span<const int>(labels), &r.loss.labeled_b);
    r.loss.total = w.b * r.loss.task_b;
  }
  detail::backward_layers<Scalar>(net.spec.layers, net.params, trace.caches,
                                  detail::head_upstream<Scalar>(labels, weight), r.gradients.params);
  return r;
}

}  // namespace xstitch
