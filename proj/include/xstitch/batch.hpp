#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xstitch/tensor.hpp"

namespace xstitch {

enum class Task { a, b };

inline const char* to_string(Task t) { return t == Task::a ? "A" : "B"; }

/// Shared inputs with two label streams. Task-B labels of examples whose
/// mask is false are ignored everywhere.
template <typename Scalar>
struct TaskBatch {
  Tensor<Scalar> inputs;
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  std::vector<std::uint8_t> mask_b;

  Index size() const { return inputs.empty() ? 0 : inputs.dim(0); }

  void validate() const {
    const auto n = static_cast<std::size_t>(size());
    if (n == 0) throw ContractError("batch has zero examples");
    if (labels_a.size() != n || labels_b.size() != n || mask_b.size() != n) {
      throw ShapeError("batch label streams must match the input batch extent " + std::to_string(n));
    }
  }

  /// Task-B labels with unlabeled examples replaced by -1.
  std::vector<int> effective_labels_b() const {
    std::vector<int> out(labels_b);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!mask_b[i]) out[i] = -1;
    }
    return out;
  }

  std::span<const int> labels(Task t) const { return t == Task::a ? labels_a : labels_b; }

  template <typename Other>
  TaskBatch<Other> cast() const {
    return {inputs.template cast<Other>(), labels_a, labels_b, mask_b};
  }
};

struct LossWeights {
  double a = 1.0;
  double b = 1.0;
};

/// total = w_A * mean_A + w_B * mean over labeled B examples.
/// A task a model does not predict contributes 0.
struct LossBreakdown {
  double total = 0.0;
  double task_a = 0.0;
  double task_b = 0.0;
  Index labeled_b = 0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

namespace detail {

/// dL/d(loss_n) for one head. `labels` negative = unlabeled.
template <typename Scalar>
Tensor<Scalar> head_upstream(std::span<const int> labels, double weight) {
  const auto n = static_cast<Index>(labels.size());
  Index labeled = 0;
  for (int y : labels) labeled += y >= 0;
  Tensor<Scalar> up(Shape{n});
  if (labeled == 0) return up;
  const Scalar w = static_cast<Scalar>(weight / static_cast<double>(labeled));
  for (Index i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] >= 0) up[i] = w;
  }
  return up;
}

/// Mean per-example loss over labeled entries; 0 when nothing is labeled.
template <typename Scalar>
double mean_labeled_loss(const Tensor<Scalar>& losses, std::span<const int> labels, Index* labeled_out = nullptr) {
  double sum = 0.0;
  Index labeled = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    sum += static_cast<double>(losses[static_cast<Index>(i)]);
    ++labeled;
  }
  if (labeled_out) *labeled_out = labeled;
  return labeled ? sum / static_cast<double>(labeled) : 0.0;
}

/// mean_labeled_loss carried out in the loss tensor's own scalar type.
template <typename Scalar>
Scalar labeled_mean(const Tensor<Scalar>& losses, std::span<const int> labels) {
  Scalar sum(0);
  Index labeled = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    sum += losses[static_cast<Index>(i)];
    ++labeled;
  }
  return labeled ? sum / static_cast<Scalar>(labeled) : Scalar(0);
}

}  // namespace detail

}  // namespace xstitch
