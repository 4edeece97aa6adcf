#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cli/config.hpp"
#include "cli/csv.hpp"
#include "xstitch/gradcheck.hpp"

namespace xstitch::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

/// Trains the configured mode into `out_dir`. Returns kExitOk or kExitDiverged;
/// throws ConfigError / FormatError on invalid input.
int cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

/// Sorted alpha table of a stitched checkpoint: (site, task, sorted_rank,
/// alpha_s, alpha_d), each column ascending on its own within a site and task.
/// Task A rows hold (a_AA, a_AB), task B rows (a_BB, a_BA).
CsvTable sorted_alpha_table(const StitchedNetwork<float>& net, const CheckpointMeta& meta);
CsvTable sorted_alpha_table(const StitchedNetwork<double>& net, const CheckpointMeta& meta);

int cmd_dump_alphas(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& out_dir,
                    std::ostream& out);

/// Two conv and two dense layers per stream with per_channel sites at both
/// pools and the first dense layer.
NetworkSpec gradcheck_spec();

/// Checks a freshly initialized 64-bit stitched pair on a kink-free batch.
/// Uses cfg.architecture when set, otherwise gradcheck_spec().
GradReport run_gradcheck(const ExperimentConfig& cfg, GradMutation mutation = GradMutation::none);

int cmd_gradcheck(const ExperimentConfig& cfg, GradMutation mutation, std::ostream& out);

int cmd_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& baseline,
               const std::optional<std::filesystem::path>& out_dir, std::ostream& out);

int cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

/// Entry point behind the xstitch executable.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace xstitch::cli
