#pragma once

// Ablation arms and sweeps: train each configuration over a seed set and score
// it on the held-out retrieval split.

#include "isr/eval.hpp"
#include "isr/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace isr {

struct ArmSpec {
  std::string name;
  TrainConfig config;
  int training_videos = 0;  // 0 uses every training video
};

/// instance_discrimination, cp_only, cp+rc, cp+q, cp+rc+q.
std::vector<ArmSpec> component_arms(const TrainConfig& base);
/// cp+rc against cp+focal, both without the queue term.
std::vector<ArmSpec> focal_arms(const TrainConfig& base);
std::vector<ArmSpec> delta_sweep(const TrainConfig& base, const std::vector<double>& deltas);
std::vector<ArmSpec> gamma_sweep(const TrainConfig& base, const std::vector<double>& gammas);
std::vector<ArmSpec> lambda_sweep(const TrainConfig& base, const std::vector<double>& lambdas);
std::vector<ArmSpec> data_sweep(const TrainConfig& base, const std::vector<int>& video_counts);

struct ArmRun {
  std::string arm;
  std::uint64_t seed = 0;
  EvalReport report;
  bool aborted = false;
  std::string abort_reason;
  double final_loss = 0.0;
};

/// Trains `arm` with `seed` (the world is fixed by the dataset) and evaluates
/// on the held-out split drawn with `split_seed`.
ArmRun run_arm(const Dataset& dataset, const ArmSpec& arm, std::uint64_t seed, std::uint64_t split_seed);

struct ArmSummary {
  std::string arm;
  int runs = 0;
  double rank_1_mean = 0.0;
  double rank_1_std = 0.0;
  double map_mean = 0.0;
  double map_std = 0.0;
};

std::vector<ArmSummary> summarize(const std::vector<ArmSpec>& arms, const std::vector<ArmRun>& runs);

/// One row per run; summaries (mean and sample std per arm) in their own file.
void write_runs_csv(const std::filesystem::path& path, const std::vector<ArmRun>& runs);
void write_summary_csv(const std::filesystem::path& path, const std::vector<ArmSummary>& summaries);

/// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace isr
