#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xstitch/network.hpp"
#include "xstitch/split.hpp"
#include "xstitch/stitched.hpp"

namespace xstitch {

using Json = nlohmann::ordered_json;

Json to_json(const LayerSpec& spec);
LayerSpec layer_spec_from_json(const Json& j);
Json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const Json& j);

/// One seeded step in the history of a set of parameters,
/// e.g. {"init.A", 3} or {"train", 11}.
struct SeedRecord {
  std::string role;
  std::uint64_t seed = 0;
  friend bool operator==(const SeedRecord&, const SeedRecord&) = default;
};

struct CheckpointMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<SeedRecord> seed_lineage;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

enum class ModelKind { one_task, split, stitched };

std::string_view to_string(ModelKind k);

template <typename Model>
struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

/// Checkpoints are JSON text: meta, scalar type, spec(s), per-layer flat
/// parameter arrays and, for stitched models, the alpha matrices of each
/// site as [a_AA, a_AB, a_BA, a_BB] rows. Numbers use shortest round-trip
/// formatting, so save -> load -> save reproduces the file byte for byte.
template <typename Scalar>
std::string serialize(const Network<Scalar>& net, const CheckpointMeta& meta);
template <typename Scalar>
std::string serialize(const SplitNetwork<Scalar>& net, const CheckpointMeta& meta);
template <typename Scalar>
std::string serialize(const StitchedNetwork<Scalar>& net, const CheckpointMeta& meta);

/// Parses checkpoint text written by serialize; parameters are converted to
/// Scalar. Throws FormatError on malformed input or a kind mismatch.
template <typename Model>
Checkpoint<Model> deserialize(std::string_view text);

ModelKind checkpoint_kind(std::string_view text);

template <typename Model>
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path);

template <typename Model>
Checkpoint<Model> load_checkpoint(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

enum class InitStrategy { task_init, common_init };

std::string_view to_string(InitStrategy s);
InitStrategy parse_init_strategy(std::string_view text);

/// task_init loads network A and network B from two one-task checkpoints.
/// common_init builds one fresh network from `seed` and copies it to both
/// streams; only the heads differ when the task class counts differ.
template <typename Scalar>
std::pair<Network<Scalar>, Network<Scalar>> init_networks(InitStrategy strategy, const NetworkSpec& spec_a,
                                                          const NetworkSpec& spec_b, std::uint64_t seed,
                                                          const std::vector<std::filesystem::path>& checkpoints);

}  // namespace xstitch
