#include "xstitch/trainer.hpp"

#include <bit>

namespace xstitch {

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(alpha_lr_scale > 0.0)) throw ConfigError("alpha_lr_scale must be positive");
  if (!(loss_weights.a >= 0.0) || !(loss_weights.b >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
}

bool operator==(const Metrics& a, const Metrics& b) {
  auto same = [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); };
  if (!same(a.overall_accuracy, b.overall_accuracy) || !same(a.mean_per_class_accuracy, b.mean_per_class_accuracy) ||
      !same(a.loss, b.loss) || a.class_counts != b.class_counts || a.examples != b.examples ||
      a.per_class_accuracy.size() != b.per_class_accuracy.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.per_class_accuracy.size(); ++i) {
    if (!same(a.per_class_accuracy[i], b.per_class_accuracy[i])) return false;
  }
  return true;
}

}  // namespace xstitch
