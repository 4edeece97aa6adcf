#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xstitch/checkpoint.hpp"
#include "xstitch/cross_stitch.hpp"
#include "xstitch/gradcheck.hpp"
#include "xstitch/synthtask.hpp"
#include "xstitch/trainer.hpp"

namespace xstitch::cli {

inline constexpr int kSchemaVersion = 1;

enum class Mode { one_task_a, one_task_b, ensemble, split, split_all, cross_stitch };

std::string_view to_string(Mode m);
Mode parse_mode(std::string_view text);

struct StarveSettings {
  std::vector<int> classes;
  double keep_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct DatasetSettings {
  std::optional<std::filesystem::path> path;  // resolved; exclusive with generate
  GeneratorConfig generate;
  std::uint64_t seed = 0;
  std::optional<StarveSettings> starve;
};

struct AlphaSettings {
  double alpha_same = 0.9;
  double alpha_diff = 0.1;
  Granularity granularity = Granularity::per_channel;
  double unit_lr_scale = 1.0;
  InitStrategy init = InitStrategy::common_init;
  std::vector<std::filesystem::path> checkpoints;  // resolved
  std::vector<std::string> sites;                  // empty: the spec's defaults
};

struct GradcheckSettings {
  double epsilon = 1e-6;
  double tolerance = 1e-5;
  Index batch_size = 6;
  GradOracle oracle = GradOracle::extended;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  DatasetSettings dataset;
  std::optional<NetworkSpec> architecture;  // task-A spec; task B swaps the head's class count
  Mode mode = Mode::one_task_a;
  Index split_index = 0;
  TrainConfig train;
  AlphaSettings alpha;
  GradcheckSettings gradcheck;
  std::optional<std::filesystem::path> output_dir;  // resolved
};

/// Parses and validates a config document. Relative paths resolve against `base_dir`.
/// Throws ConfigError.
ExperimentConfig parse_config(const Json& doc, const std::filesystem::path& base_dir);
/// Reads a config file, or the config echo inside a run manifest.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON echo. Paths appear as given after resolution.
Json config_to_json(const ExperimentConfig& cfg);

/// Hash of everything that determines a run's results: the canonical config
/// without output_dir, with input file paths replaced by content fingerprints.
std::string config_hash(const ExperimentConfig& cfg);

/// Deterministic sub-seed for one role (e.g. "init.A") of a run.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view role);

/// Loads or generates (then starves) the dataset described by `settings`.
TwoTaskDataset materialize_dataset(const DatasetSettings& settings);

/// Task-A and task-B specs for a dataset: the configured architecture or
/// default_network_spec sized to the dataset.
std::pair<NetworkSpec, NetworkSpec> task_specs(const ExperimentConfig& cfg, const TwoTaskDataset& ds);

}  // namespace xstitch::cli
