#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xstitch/batch.hpp"
#include "xstitch/tensor.hpp"

namespace xstitch {

enum class SplitTag : std::uint8_t { train = 0, val = 1, test = 2 };

const char* to_string(SplitTag s);

/// Generator knobs. Each example renders one glyph: its shape class is the
/// task-A label, its rotation bin the task-B label. With probability
/// `relatedness` the rotation is a fixed function of the shape class,
/// otherwise it is drawn uniformly.
struct GeneratorConfig {
  Index count = 2000;
  Index height = 16;
  Index width = 16;
  Index classes_a = 8;
  Index classes_b = 8;
  double noise_level = 0.3;
  double relatedness = 0.9;
  double shape_size = 11.0;  // glyph extent in pixels
  Index jitter = 1;          // max translation in pixels, per axis
  double train_fraction = 0.7;
  double val_fraction = 0.1;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct StarveRecord {
  std::vector<int> classes;
  double keep_fraction = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const StarveRecord&, const StarveRecord&) = default;
};

struct TwoTaskDataset {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  Tensor<float> inputs;  // (N, 1, H, W)
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  std::vector<std::uint8_t> mask_b;
  std::vector<SplitTag> split;
  std::vector<StarveRecord> starvations;
  std::string config_hash;  // of the experiment config that produced the file, if any

  Index size() const { return static_cast<Index>(labels_a.size()); }
  std::vector<Index> indices(SplitTag tag) const;

  friend bool operator==(const TwoTaskDataset&, const TwoTaskDataset&) = default;
};

/// Number of glyph templates available for task A.
Index glyph_count();

TwoTaskDataset generate(const GeneratorConfig& config, std::uint64_t seed);

struct StarveReport {
  std::vector<int> classes;
  std::vector<Index> labels_before;  // per task-B class, labeled training examples
  std::vector<Index> labels_after;
  std::vector<std::string> warnings;
};

struct StarveResult {
  TwoTaskDataset dataset;
  StarveReport report;
};

/// Masks task-B labels of the listed classes in the training split down to
/// floor(keep_fraction * count) seeded survivors (at least one if the class
/// had any). Validation and test examples are untouched.
StarveResult starve(const TwoTaskDataset& dataset, const std::vector<int>& classes, double keep_fraction,
                    std::uint64_t seed);

/// Labeled examples per class of `task` within `tag`.
std::vector<Index> label_counts(const TwoTaskDataset& dataset, Task task, SplitTag tag);

/// Single file: one line of JSON header, then the raw little-endian float32 pixels.
void save_dataset(const TwoTaskDataset& dataset, const std::filesystem::path& path);
TwoTaskDataset load_dataset(const std::filesystem::path& path);

/// Stable 64-bit fingerprint of the dataset content (pixels, labels, masks, splits).
/// Provenance fields (seed, config echo, config_hash) do not enter it.
std::uint64_t fingerprint(const TwoTaskDataset& dataset);

template <typename Scalar>
TaskBatch<Scalar> make_batch(const TwoTaskDataset& ds, std::span<const Index> rows) {
  const Index per = ds.inputs.size() / ds.inputs.dim(0);
  Shape shape = ds.inputs.shape();
  shape[0] = static_cast<Index>(rows.size());
  TaskBatch<Scalar> b{Tensor<Scalar>(shape), {}, {}, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i];
    b.inputs.data().segment(static_cast<Index>(i) * per, per) =
        ds.inputs.data().segment(r * per, per).template cast<Scalar>();
    b.labels_a.push_back(ds.labels_a[static_cast<std::size_t>(r)]);
    b.labels_b.push_back(ds.labels_b[static_cast<std::size_t>(r)]);
    b.mask_b.push_back(ds.mask_b[static_cast<std::size_t>(r)]);
  }
  return b;
}

}  // namespace xstitch
