#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "xstitch/network.hpp"
#include "xstitch/split.hpp"
#include "xstitch/stitched.hpp"

namespace xstitch {

/// |a - n| / max(|a|, |n|, 1e-12).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

/// Central differences (f(t + eps) - f(t - eps)) / 2 eps, one coordinate at a time.
/// Throws DivergenceError if f is non-finite at any probe.
std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& loss_fn,
                                std::vector<double> params, double eps = 1e-6);

/// Precision of the loss evaluations behind the central differences. The
/// analytic gradients are always those of the model's own scalar type.
enum class GradOracle {
  extended,  // long double forward passes
  native,    // the model's scalar type
};

struct GroupReport {
  std::string name;
  Index size = 0;
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  Index worst_coordinate = 0;  // offset within the group
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradReport {
  std::vector<GroupReport> groups;
  double tolerance = 0.0;
  double epsilon = 0.0;
  GradOracle oracle = GradOracle::extended;
  bool pass = false;

  const GroupReport& worst() const;
  double max_relative_error() const;
  Index coordinates() const;
};

/// Text rendering: one line per group, then a verdict line.
std::string format_report(const GradReport& report);

enum class GradMutation {
  none,
  flip_alpha_ba,  // negates every analytic dL/da_BA before comparison
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  double tolerance = 1e-5;
  GradMutation mutation = GradMutation::none;
  GradOracle oracle = GradOracle::extended;
};

namespace detail {

template <typename Scalar>
void mutate_gradients(StitchedNetwork<Scalar>& grads, GradMutation m) {
  if (m != GradMutation::flip_alpha_ba) return;
  for (auto& u : grads.units) {
    for (auto& a : u.alphas) a(1, 0) = -a(1, 0);
  }
}

template <typename Model>
void mutate_gradients(Model&, GradMutation) {}

template <typename Scalar>
double trace_margin(const std::vector<ForwardCache<Scalar>>& caches) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& c : caches) m = std::min(m, c.kink_margin);
  return m;
}

}  // namespace detail

/// Distance of the nearest ReLU input to zero, or the nearest max-pool
/// runner-up to its window maximum, over one forward pass.
template <typename Scalar>
double kink_margin(const Network<Scalar>& net, const Tensor<Scalar>& inputs) {
  return detail::trace_margin(forward_trace(net, inputs).caches);
}

template <typename Scalar>
double kink_margin(const SplitNetwork<Scalar>& s, const Tensor<Scalar>& inputs) {
  const auto t = forward_trace(s, inputs);
  return std::min({detail::trace_margin(t.trunk.caches), detail::trace_margin(t.a.caches),
                   detail::trace_margin(t.b.caches)});
}

template <typename Scalar>
double kink_margin(const StitchedNetwork<Scalar>& s, const Tensor<Scalar>& inputs) {
  const auto t = forward_trace(s, inputs);
  return std::min(detail::trace_margin(t.caches_a), detail::trace_margin(t.caches_b));
}

/// Draws standard-normal inputs and random labels (about half of task B
/// masked off) until every kink lies at least `margin` away. Throws
/// ContractError after `attempts` failures.
template <typename Scalar, template <typename> class Net>
TaskBatch<Scalar> smooth_batch(const Net<Scalar>& model, const NetworkSpec& spec, Index batch_size, Index classes_a,
                               Index classes_b, std::uint64_t seed, double margin = 1e-4, int attempts = 1000) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> pick_a(0, static_cast<int>(classes_a) - 1);
  std::uniform_int_distribution<int> pick_b(0, static_cast<int>(classes_b) - 1);
  Shape shape{batch_size};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  for (int attempt = 0; attempt < attempts; ++attempt) {
    TaskBatch<Scalar> b{Tensor<Scalar>(shape), {}, {}, {}};
    for (Index i = 0; i < b.inputs.size(); ++i) b.inputs[i] = static_cast<Scalar>(normal(rng));
    for (Index i = 0; i < batch_size; ++i) {
      b.labels_a.push_back(pick_a(rng));
      b.labels_b.push_back(pick_b(rng));
      b.mask_b.push_back(static_cast<std::uint8_t>(i % 2 == 0 || (rng() & 1U)));
    }
    if (kink_margin(model, b.inputs) >= margin) return b;
  }
  throw ContractError("could not draw a batch clear of activation kinks");
}

namespace detail {

/// Central differences of objective() over every entry of param_refs(model), in model order.
template <typename Model, typename Scalar>
std::vector<std::vector<double>> numeric_gradients(Model model, const TaskBatch<Scalar>& batch, LossWeights weights,
                                                   double epsilon) {
  auto params = param_refs(model);
  const auto loss = [&] {
    const Scalar v = objective(model, batch, weights);
    if (!std::isfinite(v)) throw DivergenceError("non-finite loss during gradient check");
    return v;
  };
  const auto eps = static_cast<Scalar>(epsilon);
  std::vector<std::vector<double>> out;
  for (auto& p : params) {
    std::vector<double> g(p.values.size());
    for (std::size_t k = 0; k < p.values.size(); ++k) {
      Scalar& theta = p.values[k];
      const Scalar saved = theta;
      const Scalar hi = saved + eps;
      const Scalar lo = saved - eps;
      theta = hi;
      const Scalar up = loss();
      theta = lo;
      const Scalar down = loss();
      theta = saved;
      g[k] = static_cast<double>((up - down) / (hi - lo));
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace detail

/// Compares every analytic parameter gradient of `model` (all layer
/// weights and biases, plus every alpha entry of a stitched model) with
/// central differences of the total loss.
template <typename Scalar, template <typename> class Net>
GradReport check_network(const Net<Scalar>& model, const TaskBatch<Scalar>& batch, LossWeights weights,
                         const GradCheckOptions& options = {}) {
  if (!(options.epsilon > 0.0)) throw ConfigError("gradient check epsilon must be positive");
  auto analytic = loss_and_gradients(model, batch, weights).gradients;
  detail::mutate_gradients(analytic, options.mutation);
  const auto grads = param_refs(analytic);
  const auto numeric =
      options.oracle == GradOracle::extended
          ? detail::numeric_gradients(model.template cast<long double>(), batch.template cast<long double>(), weights,
                                      options.epsilon)
          : detail::numeric_gradients(model, batch, weights, options.epsilon);

  GradReport report;
  report.tolerance = options.tolerance;
  report.epsilon = options.epsilon;
  report.oracle = options.oracle;
  for (std::size_t g = 0; g < grads.size(); ++g) {
    GroupReport gr;
    gr.name = grads[g].name;
    gr.size = static_cast<Index>(grads[g].values.size());
    for (std::size_t k = 0; k < grads[g].values.size(); ++k) {
      const double a = static_cast<double>(grads[g].values[k]);
      const double n = numeric[g][k];
      const double rel = relative_error(a, n);
      gr.max_absolute_error = std::max(gr.max_absolute_error, std::abs(a - n));
      if (rel > gr.max_relative_error || k == 0) {
        gr.max_relative_error = rel;
        gr.worst_coordinate = static_cast<Index>(k);
        gr.worst_analytic = a;
        gr.worst_numeric = n;
      }
    }
    report.groups.push_back(std::move(gr));
  }
  report.pass = report.max_relative_error() < options.tolerance;
  return report;
}

}  // namespace xstitch
