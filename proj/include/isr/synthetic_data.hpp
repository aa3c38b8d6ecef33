#pragma once

// Ground-truth-labelled synthetic video streams of pedestrian observations.
//
// Each video is one camera: a linear map of identity prototypes into
// observation space plus a per-camera bias. A fixed number of on-screen slots
// are occupied by identities that are replaced every `dwell_seconds` (identity
// turnover). Appearance has a slowly drifting pose component (an
// Ornstein-Uhlenbeck process in a shared nuisance subspace) and white noise.
// Detector misses come from per-frame presence draws and frame-level dropout.

#include "isr/core.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace isr {

struct WorldConfig {
  int num_identities = 200;
  int identity_dim = 16;
  int obs_dim = 48;
  int num_videos = 100;  // training videos
  int identities_per_video = 8;
  int frames_per_video = 40;
  double frame_interval_seconds = 7.0 / 30.0;
  double presence_prob = 0.9;
  double appearance_noise_sigma = 0.25;
  double camera_shift_sigma = 0.5;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;

  // Temporal structure.
  int pose_dim = 4;
  double pose_scale = 2.0;              // pose magnitude relative to the white noise
  double pose_correlation_seconds = 1.5;
  double dwell_seconds = 5.0;           // 0 disables identity turnover

  // Held-out evaluation domains.
  int eval_videos = 20;
  int eval_identities = 40;  // identities reserved for held-out videos; 0 shares the training pool

  void validate() const;
  double video_duration_seconds() const { return (frames_per_video - 1) * frame_interval_seconds; }
};

struct CropRecord {
  Vector observation;
  int video_id = 0;
  int frame_index = 0;
  double timestamp_seconds = 0.0;
  int true_identity = 0;
};

struct FrameSet {
  int video_id = 0;
  int frame_index = 0;
  double timestamp_seconds = 0.0;
  std::vector<CropRecord> crops;
};

struct Video {
  int video_id = 0;
  bool held_out = false;
  std::vector<FrameSet> frames;
};

struct Dataset {
  WorldConfig config;
  std::vector<Video> videos;  // training videos first, then held-out videos

  std::vector<const Video*> training_videos() const;
  std::vector<const Video*> held_out_videos() const;
  std::size_t crop_count() const;
};

Dataset generate_world(const WorldConfig& cfg);

nlohmann::json world_config_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const nlohmann::json& j);

/// Writes `manifest.json` and `observations.f32` (little-endian float32 in
/// manifest order) into `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Training videos restricted to the first `count`.
Dataset with_training_videos(const Dataset& dataset, int count);

/// Two distinct frame indices with |t1 - t2| <= delta_max, uniform over the
/// eligible unordered pairs (orientation randomized). nullopt when the video
/// has no eligible pair.
std::optional<std::pair<int, int>> sample_frame_pair(const Video& video, double delta_max_seconds, Rng& rng);

/// Up to `count` distinct frames, all pairwise within delta_max.
std::vector<int> sample_frame_group(const Video& video, int count, double delta_max_seconds, Rng& rng);

inline constexpr int kDefaultSuperFrameBudget = 80;

struct SuperFramePair {
  std::vector<const CropRecord*> x;
  std::vector<const CropRecord*> y;
  std::vector<int> video_ids;  // contributing videos, ascending
};

/// For every video: draw `frames_per_video` frames within delta_max and team
/// them into all pairs. The k-th pair of every video is merged into the k-th
/// super-frame pair; each side is ordered by (video id, crop index) and
/// truncated to `budget`. Ineligible videos are skipped.
std::vector<SuperFramePair> sample_super_frames(const std::vector<const Video*>& videos, int frames_per_video,
                                                double delta_max_seconds, Rng& rng,
                                                int budget = kDefaultSuperFrameBudget);

/// Stacks observations as columns.
Matrix observation_matrix(const std::vector<const CropRecord*>& crops);

}  // namespace isr
