#include "isr/synthetic_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace isr {

using json = nlohmann::json;

void WorldConfig::validate() const {
  auto require = [](bool ok, const char* message) {
    if (!ok) throw InvalidConfigError(message);
  };
  require(num_identities >= 1, "num_identities: must be >= 1");
  require(identity_dim >= 2, "identity_dim: must be >= 2");
  require(obs_dim >= identity_dim, "obs_dim: must be >= identity_dim");
  require(num_videos >= 0, "num_videos: must be >= 0");
  require(identities_per_video >= 1, "identities_per_video: must be >= 1");
  require(identities_per_video <= num_identities, "identities_per_video: must be <= num_identities");
  require(frames_per_video >= 1, "frames_per_video: must be >= 1");
  require(frame_interval_seconds > 0.0, "frame_interval_seconds: must be > 0");
  require(presence_prob > 0.0 && presence_prob <= 1.0, "presence_prob: must be in (0, 1]");
  require(appearance_noise_sigma >= 0.0, "appearance_noise_sigma: must be >= 0");
  require(camera_shift_sigma >= 0.0, "camera_shift_sigma: must be >= 0");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate: must be in [0, 1)");
  require(pose_dim >= 0, "pose_dim: must be >= 0");
  require(pose_scale >= 0.0, "pose_scale: must be >= 0");
  require(pose_correlation_seconds > 0.0, "pose_correlation_seconds: must be > 0");
  require(dwell_seconds >= 0.0, "dwell_seconds: must be >= 0");
  require(eval_videos >= 0, "eval_videos: must be >= 0");
  require(eval_identities >= 0, "eval_identities: must be >= 0");
  require(eval_identities == 0 || identities_per_video <= eval_identities,
          "eval_identities: must be 0 or >= identities_per_video");
}

std::vector<const Video*> Dataset::training_videos() const {
  std::vector<const Video*> out;
  for (const auto& v : videos) {
    if (!v.held_out) out.push_back(&v);
  }
  return out;
}

std::vector<const Video*> Dataset::held_out_videos() const {
  std::vector<const Video*> out;
  for (const auto& v : videos) {
    if (v.held_out) out.push_back(&v);
  }
  return out;
}

std::size_t Dataset::crop_count() const {
  std::size_t total = 0;
  for (const auto& v : videos) {
    for (const auto& f : v.frames) total += f.crops.size();
  }
  return total;
}

namespace {

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix out(rows, cols);
  // Column-major fill order is part of the determinism contract.
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = stddev * rng.normal();
  }
  return out;
}

Vector gaussian_vector(Eigen::Index size, double stddev, Rng& rng) {
  Vector out(size);
  for (Eigen::Index i = 0; i < size; ++i) out(i) = stddev * rng.normal();
  return out;
}

// Observations are stored as float32 on disk; rounding in memory keeps a
// freshly generated dataset identical to a reloaded one.
Vector round_to_float(const Vector& v) { return v.cast<float>().cast<double>(); }

struct SharedWorld {
  std::vector<Vector> prototypes;  // identity_dim, unit norm
  Matrix base_camera;              // obs_dim x identity_dim
  Matrix pose_basis;               // obs_dim x pose_dim
};

SharedWorld make_shared(const WorldConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "world/shared"));
  SharedWorld world;
  const int total_ids = cfg.num_identities + cfg.eval_identities;
  world.prototypes.reserve(static_cast<std::size_t>(total_ids));
  for (int id = 0; id < total_ids; ++id) {
    world.prototypes.push_back(l2_normalize(gaussian_vector(cfg.identity_dim, 1.0, rng)));
  }
  const double unit = 1.0 / std::sqrt(static_cast<double>(cfg.obs_dim));
  world.base_camera = gaussian_matrix(cfg.obs_dim, cfg.identity_dim, unit, rng);
  world.pose_basis = gaussian_matrix(cfg.obs_dim, cfg.pose_dim, unit, rng);
  return world;
}

// One identity's stay in one slot.
struct Occupancy {
  int identity = 0;
  std::vector<Vector> pose;  // per frame
};

Video make_video(const WorldConfig& cfg, const SharedWorld& world, int video_id, bool held_out) {
  Rng rng(derive_seed(cfg.seed, (held_out ? "world/heldout/" : "world/video/") + std::to_string(video_id)));
  const double unit = 1.0 / std::sqrt(static_cast<double>(cfg.obs_dim));

  const Matrix camera = world.base_camera + gaussian_matrix(cfg.obs_dim, cfg.identity_dim,
                                                            cfg.camera_shift_sigma * unit, rng);
  const Vector bias = gaussian_vector(cfg.obs_dim, 0.5 * cfg.camera_shift_sigma * unit, rng);

  // Identity pool for this video.
  int pool_first = 0;
  int pool_size = cfg.num_identities;
  if (held_out && cfg.eval_identities > 0) {
    pool_first = cfg.num_identities;
    pool_size = cfg.eval_identities;
  }

  // Slot schedule: occupant changes every dwell_seconds with a random phase.
  const int slots = cfg.identities_per_video;
  const double duration = cfg.video_duration_seconds();
  std::vector<double> phase(static_cast<std::size_t>(slots), 0.0);
  std::vector<int> stints(static_cast<std::size_t>(slots), 1);
  for (int s = 0; s < slots; ++s) {
    if (cfg.dwell_seconds > 0.0) {
      phase[static_cast<std::size_t>(s)] = rng.uniform(0.0, cfg.dwell_seconds);
      stints[static_cast<std::size_t>(s)] =
          static_cast<int>(std::floor((duration + phase[static_cast<std::size_t>(s)]) / cfg.dwell_seconds)) + 1;
    }
  }
  int needed = 0;
  for (int n : stints) needed += n;

  std::vector<int> pool(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) pool[static_cast<std::size_t>(i)] = pool_first + i;
  rng.shuffle(pool);
  std::vector<int> cast;
  cast.reserve(static_cast<std::size_t>(needed));
  // When the pool is smaller than the cast, identities are reused in order;
  // duplicates within one frame are dropped below.
  for (int i = 0; i < needed; ++i) cast.push_back(pool[static_cast<std::size_t>(i % pool_size)]);

  const double rho = std::exp(-cfg.frame_interval_seconds / cfg.pose_correlation_seconds);
  const double innovation = std::sqrt(1.0 - rho * rho);
  std::vector<std::vector<Occupancy>> occupancy(static_cast<std::size_t>(slots));
  int next_cast = 0;
  for (int s = 0; s < slots; ++s) {
    for (int stint = 0; stint < stints[static_cast<std::size_t>(s)]; ++stint) {
      Occupancy occ;
      occ.identity = cast[static_cast<std::size_t>(next_cast++)];
      Vector z = gaussian_vector(cfg.pose_dim, 1.0, rng);
      for (int f = 0; f < cfg.frames_per_video; ++f) {
        if (f > 0) z = rho * z + innovation * gaussian_vector(cfg.pose_dim, 1.0, rng);
        occ.pose.push_back(z);
      }
      occupancy[static_cast<std::size_t>(s)].push_back(std::move(occ));
    }
  }

  Video video;
  video.video_id = video_id;
  video.held_out = held_out;
  for (int f = 0; f < cfg.frames_per_video; ++f) {
    FrameSet frame;
    frame.video_id = video_id;
    frame.frame_index = f;
    frame.timestamp_seconds = f * cfg.frame_interval_seconds;

    std::vector<std::pair<int, const Occupancy*>> present;
    for (int s = 0; s < slots; ++s) {
      int stint = 0;
      if (cfg.dwell_seconds > 0.0) {
        stint = static_cast<int>(std::floor((frame.timestamp_seconds + phase[static_cast<std::size_t>(s)]) /
                                            cfg.dwell_seconds));
      }
      const auto& stints_of_slot = occupancy[static_cast<std::size_t>(s)];
      stint = std::min(stint, static_cast<int>(stints_of_slot.size()) - 1);
      const Occupancy& occ = stints_of_slot[static_cast<std::size_t>(stint)];
      const bool seen = rng.bernoulli(cfg.presence_prob);
      const bool duplicate = std::any_of(present.begin(), present.end(),
                                         [&](const auto& p) { return p.second->identity == occ.identity; });
      if (seen && !duplicate) present.emplace_back(s, &occ);
    }
    if (!present.empty() && rng.bernoulli(cfg.dropout_rate)) {
      present.erase(present.begin() + static_cast<std::ptrdiff_t>(rng.uniform_index(present.size())));
    }
    rng.shuffle(present);

    for (const auto& [slot, occ] : present) {
      const Vector& proto = world.prototypes[static_cast<std::size_t>(occ->identity)];
      Vector obs = camera * proto + bias;
      if (cfg.pose_dim > 0) {
        obs += cfg.appearance_noise_sigma * cfg.pose_scale * (world.pose_basis * occ->pose[static_cast<std::size_t>(f)]);
      }
      obs += gaussian_vector(cfg.obs_dim, cfg.appearance_noise_sigma * unit, rng);
      CropRecord crop;
      crop.observation = round_to_float(obs);
      crop.video_id = video_id;
      crop.frame_index = f;
      crop.timestamp_seconds = frame.timestamp_seconds;
      crop.true_identity = occ->identity;
      frame.crops.push_back(std::move(crop));
    }
    video.frames.push_back(std::move(frame));
  }
  return video;
}

json config_to_json(const WorldConfig& c) {
  return json{{"num_identities", c.num_identities},
              {"identity_dim", c.identity_dim},
              {"obs_dim", c.obs_dim},
              {"num_videos", c.num_videos},
              {"identities_per_video", c.identities_per_video},
              {"frames_per_video", c.frames_per_video},
              {"frame_interval_seconds", c.frame_interval_seconds},
              {"presence_prob", c.presence_prob},
              {"appearance_noise_sigma", c.appearance_noise_sigma},
              {"camera_shift_sigma", c.camera_shift_sigma},
              {"dropout_rate", c.dropout_rate},
              {"seed", c.seed},
              {"pose_dim", c.pose_dim},
              {"pose_scale", c.pose_scale},
              {"pose_correlation_seconds", c.pose_correlation_seconds},
              {"dwell_seconds", c.dwell_seconds},
              {"eval_videos", c.eval_videos},
              {"eval_identities", c.eval_identities}};
}

WorldConfig config_from_json(const json& j) {
  WorldConfig c;
  c.num_identities = j.at("num_identities").get<int>();
  c.identity_dim = j.at("identity_dim").get<int>();
  c.obs_dim = j.at("obs_dim").get<int>();
  c.num_videos = j.at("num_videos").get<int>();
  c.identities_per_video = j.at("identities_per_video").get<int>();
  c.frames_per_video = j.at("frames_per_video").get<int>();
  c.frame_interval_seconds = j.at("frame_interval_seconds").get<double>();
  c.presence_prob = j.at("presence_prob").get<double>();
  c.appearance_noise_sigma = j.at("appearance_noise_sigma").get<double>();
  c.camera_shift_sigma = j.at("camera_shift_sigma").get<double>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.pose_dim = j.at("pose_dim").get<int>();
  c.pose_scale = j.at("pose_scale").get<double>();
  c.pose_correlation_seconds = j.at("pose_correlation_seconds").get<double>();
  c.dwell_seconds = j.at("dwell_seconds").get<double>();
  c.eval_videos = j.at("eval_videos").get<int>();
  c.eval_identities = j.at("eval_identities").get<int>();
  return c;
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffU) << 24) | ((v & 0xff00U) << 8) | ((v >> 8) & 0xff00U) | (v >> 24);
  }
  return v;
}

}  // namespace

json world_config_json(const WorldConfig& cfg) { return config_to_json(cfg); }
WorldConfig world_config_from_json(const json& j) { return config_from_json(j); }

Dataset generate_world(const WorldConfig& cfg) {
  cfg.validate();
  const SharedWorld world = make_shared(cfg);
  Dataset dataset;
  dataset.config = cfg;
  for (int v = 0; v < cfg.num_videos; ++v) dataset.videos.push_back(make_video(cfg, world, v, false));
  for (int v = 0; v < cfg.eval_videos; ++v) {
    dataset.videos.push_back(make_video(cfg, world, cfg.num_videos + v, true));
  }
  return dataset;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json videos = json::array();
  std::ofstream bin(dir / "observations.f32", std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("save_dataset: cannot open " + (dir / "observations.f32").string());
  std::size_t crops = 0;
  for (const auto& video : dataset.videos) {
    json frames = json::array();
    for (const auto& frame : video.frames) {
      json ids = json::array();
      for (const auto& crop : frame.crops) {
        ids.push_back(crop.true_identity);
        for (Eigen::Index i = 0; i < crop.observation.size(); ++i) {
          const float value = static_cast<float>(crop.observation(i));
          std::uint32_t bits;
          std::memcpy(&bits, &value, sizeof bits);
          bits = to_little_endian(bits);
          bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
        ++crops;
      }
      frames.push_back(json{{"frame_index", frame.frame_index},
                            {"timestamp_seconds", frame.timestamp_seconds},
                            {"crop_count", frame.crops.size()},
                            {"identities", std::move(ids)}});
    }
    videos.push_back(json{{"video_id", video.video_id}, {"held_out", video.held_out}, {"frames", std::move(frames)}});
  }
  if (!bin) throw Error("save_dataset: write failed");
  json manifest{{"format", "isr-synthetic-dataset/1"},
                {"world", config_to_json(dataset.config)},
                {"crop_count", crops},
                {"observation_file", "observations.f32"},
                {"videos", std::move(videos)}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("save_dataset: cannot open " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("load_dataset: missing " + (dir / "manifest.json").string());
  const json manifest = json::parse(in);
  if (manifest.at("format") != "isr-synthetic-dataset/1") throw Error("load_dataset: unsupported format");
  Dataset dataset;
  dataset.config = config_from_json(manifest.at("world"));
  const int dim = dataset.config.obs_dim;

  std::ifstream bin(dir / manifest.at("observation_file").get<std::string>(), std::ios::binary);
  if (!bin) throw Error("load_dataset: missing observation file");
  for (const auto& jv : manifest.at("videos")) {
    Video video;
    video.video_id = jv.at("video_id").get<int>();
    video.held_out = jv.at("held_out").get<bool>();
    for (const auto& jf : jv.at("frames")) {
      FrameSet frame;
      frame.video_id = video.video_id;
      frame.frame_index = jf.at("frame_index").get<int>();
      frame.timestamp_seconds = jf.at("timestamp_seconds").get<double>();
      for (const auto& id : jf.at("identities")) {
        CropRecord crop;
        crop.video_id = video.video_id;
        crop.frame_index = frame.frame_index;
        crop.timestamp_seconds = frame.timestamp_seconds;
        crop.true_identity = id.get<int>();
        crop.observation.resize(dim);
        for (int i = 0; i < dim; ++i) {
          std::uint32_t bits;
          bin.read(reinterpret_cast<char*>(&bits), sizeof bits);
          bits = to_little_endian(bits);
          float value;
          std::memcpy(&value, &bits, sizeof value);
          crop.observation(i) = value;
        }
        frame.crops.push_back(std::move(crop));
      }
      video.frames.push_back(std::move(frame));
    }
    dataset.videos.push_back(std::move(video));
  }
  if (!bin) throw Error("load_dataset: observation file truncated");
  return dataset;
}

Dataset with_training_videos(const Dataset& dataset, int count) {
  Dataset out;
  out.config = dataset.config;
  int kept = 0;
  for (const auto& video : dataset.videos) {
    if (video.held_out) {
      out.videos.push_back(video);
    } else if (kept < count) {
      out.videos.push_back(video);
      ++kept;
    }
  }
  out.config.num_videos = kept;
  return out;
}

std::optional<std::pair<int, int>> sample_frame_pair(const Video& video, double delta_max_seconds, Rng& rng) {
  const auto& frames = video.frames;
  const std::size_t n = frames.size();
  // upper[a]: number of frames b > a with t_b - t_a <= delta_max (timestamps ascend).
  std::vector<std::uint64_t> upper(n, 0);
  std::uint64_t total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t b = a + 1;
    while (b < n && frames[b].timestamp_seconds - frames[a].timestamp_seconds <= delta_max_seconds) ++b;
    upper[a] = b - a - 1;
    total += upper[a];
  }
  if (total == 0) return std::nullopt;
  std::uint64_t pick = rng.uniform_index(total);
  std::size_t a = 0;
  while (pick >= upper[a]) {
    pick -= upper[a];
    ++a;
  }
  int first = static_cast<int>(a);
  int second = static_cast<int>(a + 1 + pick);
  if (rng.bernoulli(0.5)) std::swap(first, second);
  return std::make_pair(first, second);
}

std::vector<int> sample_frame_group(const Video& video, int count, double delta_max_seconds, Rng& rng) {
  const auto pair = sample_frame_pair(video, delta_max_seconds, rng);
  if (!pair) return {};
  std::vector<int> group{pair->first, pair->second};
  while (static_cast<int>(group.size()) < count) {
    std::vector<int> candidates;
    for (int f = 0; f < static_cast<int>(video.frames.size()); ++f) {
      if (std::find(group.begin(), group.end(), f) != group.end()) continue;
      const bool close = std::all_of(group.begin(), group.end(), [&](int g) {
        return std::abs(video.frames[static_cast<std::size_t>(f)].timestamp_seconds -
                        video.frames[static_cast<std::size_t>(g)].timestamp_seconds) <= delta_max_seconds;
      });
      if (close) candidates.push_back(f);
    }
    if (candidates.empty()) break;
    group.push_back(candidates[rng.uniform_index(candidates.size())]);
  }
  return group;
}

std::vector<SuperFramePair> sample_super_frames(const std::vector<const Video*>& videos, int frames_per_video,
                                                double delta_max_seconds, Rng& rng, int budget) {
  if (frames_per_video < 2) throw InvalidConfigError("frames_per_video: must be >= 2");
  if (budget < 1) throw InvalidConfigError("super_frame_budget: must be >= 1");

  struct Contribution {
    int video_id;
    const FrameSet* x;
    const FrameSet* y;
  };
  const int max_pairs = frames_per_video * (frames_per_video - 1) / 2;
  std::vector<std::vector<Contribution>> slots(static_cast<std::size_t>(max_pairs));
  for (const Video* video : videos) {
    const std::vector<int> group = sample_frame_group(*video, frames_per_video, delta_max_seconds, rng);
    std::size_t slot = 0;
    for (std::size_t a = 0; a < group.size(); ++a) {
      for (std::size_t b = a + 1; b < group.size(); ++b) {
        slots[slot++].push_back({video->video_id, &video->frames[static_cast<std::size_t>(group[a])],
                                 &video->frames[static_cast<std::size_t>(group[b])]});
      }
    }
  }

  std::vector<SuperFramePair> out;
  for (auto& contributions : slots) {
    if (contributions.empty()) continue;
    std::sort(contributions.begin(), contributions.end(),
              [](const Contribution& a, const Contribution& b) { return a.video_id < b.video_id; });
    SuperFramePair pair;
    for (const auto& c : contributions) {
      pair.video_ids.push_back(c.video_id);
      for (const auto& crop : c.x->crops) pair.x.push_back(&crop);
      for (const auto& crop : c.y->crops) pair.y.push_back(&crop);
    }
    if (static_cast<int>(pair.x.size()) > budget) pair.x.resize(static_cast<std::size_t>(budget));
    if (static_cast<int>(pair.y.size()) > budget) pair.y.resize(static_cast<std::size_t>(budget));
    out.push_back(std::move(pair));
  }
  return out;
}

Matrix observation_matrix(const std::vector<const CropRecord*>& crops) {
  if (crops.empty()) return Matrix(0, 0);
  Matrix out(crops.front()->observation.size(), static_cast<Eigen::Index>(crops.size()));
  for (std::size_t i = 0; i < crops.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = crops[i]->observation;
  return out;
}

}  // namespace isr
