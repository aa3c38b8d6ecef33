#pragma once

// Training loop: super-frame sampling, within-video positive mining,
// reliability-guided contrastive loss plus queue negatives, AdamW steps.

#include "isr/core.hpp"
#include "isr/encoder.hpp"
#include "isr/memory_queue.hpp"
#include "isr/synthetic_data.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace isr {

enum class Objective { isr, instance_discrimination, isr_no_rc, isr_no_queue, isr_focal };

std::string to_string(Objective objective);
Objective parse_objective(std::string_view text);

struct TrainConfig {
  LossConfig loss;
  double delta_max_seconds = 4.0;
  int videos_per_super_frame = 4;
  int super_frame_budget = kDefaultSuperFrameBudget;
  int frames_per_video = 3;
  int epochs = 50;
  int samples_per_video_per_epoch = 16;
  int queue_capacity = 8192;
  EncoderConfig encoder;  // input_dim is taken from the dataset
  AdamWConfig optimizer;  // total_steps is derived from the schedule
  std::uint64_t seed = 0;
  Objective objective = Objective::isr;
  /// Per-view white-noise sigma for instance discrimination; negative uses the
  /// world's appearance_noise_sigma.
  double augmentation_sigma = -1.0;

  void validate() const;
  /// The loss configuration the objective actually trains with.
  LossConfig effective_loss() const;
};

nlohmann::json train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepLog {
  long step = 0;
  int epoch = 0;
  double loss_rc = 0.0;
  double loss_q = 0.0;
  double loss_total = 0.0;
  double alpha = 1.0;
  double mean_reliability = 0.0;
  double min_reliability = 0.0;
  double mined_precision = 0.0;  // NaN when no pairs were mined
  int mined_pairs = 0;
  int queue_size = 0;
  double learning_rate = 0.0;
  double wall_ms = 0.0;
};

/// CSV header and row. `include_timing = false` drops the wall-clock column.
std::string step_log_header(bool include_timing = true);
std::string step_log_row(const StepLog& log, bool include_timing = true);
void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& logs, bool include_timing = true);

/// Anchor columns on one side of a super-frame pair and their matched columns
/// on the other side.
struct AnchorGroup {
  std::vector<int> anchors;
  std::vector<int> matched;
};

struct SuperFrameLoss {
  double loss = 0.0;
  double alpha = 1.0;
  std::vector<double> reliabilities;  // from_x anchors first, then from_y
  Matrix grad_x;                      // gradient of `loss` with alpha and modulation factors frozen
  Matrix grad_y;
};

/// Contrastive term of one super-frame pair. `from_x` anchors live in X with
/// their softmax over every column of Y; `from_y` is the reverse direction.
SuperFrameLoss super_frame_loss(const FeatureMatrix& x, const FeatureMatrix& y, const AnchorGroup& from_x,
                                const AnchorGroup& from_y, const LossConfig& cfg);

struct TrainResult {
  Encoder encoder;
  AdamW optimizer;
  std::vector<StepLog> log;
  bool aborted = false;
  std::string abort_reason;
  std::string objective_tag;
};

/// Owns the model, optimizer, queue and sampling stream for one run.
class Trainer {
 public:
  Trainer(const Dataset& dataset, TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  const Encoder& encoder() const { return encoder_; }
  const AdamW& optimizer() const { return optimizer_; }
  const NegativeQueue& queue() const { return queue_; }
  const std::vector<StepLog>& log() const { return log_; }
  long steps_per_epoch() const { return steps_per_epoch_; }
  bool aborted() const { return aborted_; }
  const std::string& abort_reason() const { return abort_reason_; }

  /// Runs one epoch; returns false if training aborted.
  bool run_epoch();
  bool run(std::function<void(const StepLog&)> on_step = {});

  TrainResult finish() &&;

  /// Invoked after every mined pair with (anchor crop, matched crop). Testing hook.
  std::function<void(const CropRecord&, const CropRecord&)> on_positive_pair;

 private:
  struct PairOutcome {
    double loss_rc = 0.0;
    double loss_q = 0.0;
    double alpha = 1.0;
    std::vector<double> reliabilities;
    int mined = 0;
    int correct = 0;
  };

  bool step(const std::vector<const Video*>& videos);
  PairOutcome accumulate_pair(const std::vector<const CropRecord*>& x_crops,
                              const std::vector<const CropRecord*>& y_crops, bool instance_views, double weight,
                              std::vector<Matrix>& grads, std::vector<std::pair<Matrix, std::vector<int>>>& enqueue);

  const Dataset& dataset_;
  TrainConfig cfg_;
  LossConfig loss_;
  std::vector<const Video*> videos_;
  Encoder encoder_;
  AdamW optimizer_;
  NegativeQueue queue_;
  Rng sampling_rng_;
  Rng augment_rng_;
  long steps_per_epoch_ = 0;
  int epoch_ = 0;
  std::vector<StepLog> log_;
  bool aborted_ = false;
  std::string abort_reason_;
};

/// Full ISR training (objective taken from cfg).
TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  std::function<void(const StepLog&)> on_step = {});

/// Instance-discrimination baseline: positives are two noise re-draws of one crop.
TrainResult train_instance_discrimination(const Dataset& dataset, TrainConfig cfg,
                                          std::function<void(const StepLog&)> on_step = {});

struct ScalingPoint {
  int videos = 0;
  double seconds_per_epoch = 0.0;
};

struct ScalingReport {
  std::vector<ScalingPoint> points;
  double log_log_slope = 0.0;
};

/// Wall-clock per epoch (after one warm-up epoch that fills the queue) for each
/// training-set size, plus the least-squares slope of log time on log size.
ScalingReport measure_training_scaling(const Dataset& dataset, const std::vector<int>& video_counts,
                                       TrainConfig cfg, int timed_epochs = 1);

double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace isr
