#include "isr/trainer.hpp"

#include "isr/losses.hpp"
#include "isr/matching.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_set>

namespace isr {

using json = nlohmann::json;

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::isr: return "isr";
    case Objective::instance_discrimination: return "instance_discrimination";
    case Objective::isr_no_rc: return "isr_no_rc";
    case Objective::isr_no_queue: return "isr_no_queue";
    case Objective::isr_focal: return "isr_focal";
  }
  return "unknown";
}

Objective parse_objective(std::string_view text) {
  for (Objective o : {Objective::isr, Objective::instance_discrimination, Objective::isr_no_rc,
                      Objective::isr_no_queue, Objective::isr_focal}) {
    if (text == to_string(o)) return o;
  }
  throw InvalidConfigError("objective: unknown value '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  loss.validate();
  auto require = [](bool ok, const char* message) {
    if (!ok) throw InvalidConfigError(message);
  };
  require(delta_max_seconds > 0.0, "delta_max: must be > 0");
  require(videos_per_super_frame >= 1, "videos_per_super_frame: must be >= 1");
  require(super_frame_budget >= 1, "super_frame_budget: must be >= 1");
  require(frames_per_video >= 2, "frames_per_video: must be >= 2");
  require(epochs >= 1, "epochs: must be >= 1");
  require(samples_per_video_per_epoch >= 1, "samples_per_video_per_epoch: must be >= 1");
  require(queue_capacity >= 1, "queue_capacity: must be >= 1");
  require(optimizer.learning_rate >= 0.0, "lr: must be >= 0");
  require(optimizer.weight_decay >= 0.0, "weight_decay: must be >= 0");
}

LossConfig TrainConfig::effective_loss() const {
  LossConfig out = loss;
  switch (objective) {
    case Objective::isr: break;
    case Objective::isr_no_rc: out.gamma = 0.0; break;
    case Objective::isr_no_queue: out.lambda = 0.0; break;
    case Objective::isr_focal: out.modulation = Modulation::focal; break;
    case Objective::instance_discrimination: out.modulation = Modulation::none; break;
  }
  return out;
}

json train_config_json(const TrainConfig& c) {
  return json{{"tau", c.loss.tau},
              {"gamma", c.loss.gamma},
              {"k", c.loss.k},
              {"lambda", c.loss.lambda},
              {"negative_selection", to_string(c.loss.negative_selection)},
              {"modulation", to_string(c.loss.modulation)},
              {"delta_max_seconds", c.delta_max_seconds},
              {"videos_per_super_frame", c.videos_per_super_frame},
              {"super_frame_budget", c.super_frame_budget},
              {"frames_per_video", c.frames_per_video},
              {"epochs", c.epochs},
              {"samples_per_video_per_epoch", c.samples_per_video_per_epoch},
              {"queue_capacity", c.queue_capacity},
              {"hidden", c.encoder.hidden},
              {"output_dim", c.encoder.output_dim},
              {"learning_rate", c.optimizer.learning_rate},
              {"beta1", c.optimizer.beta1},
              {"beta2", c.optimizer.beta2},
              {"epsilon", c.optimizer.epsilon},
              {"weight_decay", c.optimizer.weight_decay},
              {"seed", c.seed},
              {"objective", to_string(c.objective)},
              {"augmentation_sigma", c.augmentation_sigma}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.loss.tau = j.at("tau").get<double>();
  c.loss.gamma = j.at("gamma").get<double>();
  c.loss.k = j.at("k").get<int>();
  c.loss.lambda = j.at("lambda").get<double>();
  c.loss.negative_selection = parse_negative_selection(j.at("negative_selection").get<std::string>());
  c.loss.modulation = parse_modulation(j.at("modulation").get<std::string>());
  c.delta_max_seconds = j.at("delta_max_seconds").get<double>();
  c.videos_per_super_frame = j.at("videos_per_super_frame").get<int>();
  c.super_frame_budget = j.at("super_frame_budget").get<int>();
  c.frames_per_video = j.at("frames_per_video").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.samples_per_video_per_epoch = j.at("samples_per_video_per_epoch").get<int>();
  c.queue_capacity = j.at("queue_capacity").get<int>();
  c.encoder.hidden = j.at("hidden").get<std::vector<int>>();
  c.encoder.output_dim = j.at("output_dim").get<int>();
  c.optimizer.learning_rate = j.at("learning_rate").get<double>();
  c.optimizer.beta1 = j.at("beta1").get<double>();
  c.optimizer.beta2 = j.at("beta2").get<double>();
  c.optimizer.epsilon = j.at("epsilon").get<double>();
  c.optimizer.weight_decay = j.at("weight_decay").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.objective = parse_objective(j.at("objective").get<std::string>());
  c.augmentation_sigma = j.at("augmentation_sigma").get<double>();
  return c;
}

std::string step_log_header(bool include_timing) {
  std::string header =
      "step,epoch,loss_rc,loss_q,loss_total,alpha,mean_reliability,min_reliability,mined_precision,mined_pairs,"
      "queue_size,learning_rate";
  if (include_timing) header += ",wall_ms";
  return header;
}

std::string step_log_row(const StepLog& s, bool include_timing) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g", s.step, s.epoch,
                s.loss_rc, s.loss_q, s.loss_total, s.alpha, s.mean_reliability, s.min_reliability, s.mined_precision,
                s.mined_pairs, s.queue_size, s.learning_rate);
  std::string row = buf;
  if (include_timing) {
    std::snprintf(buf, sizeof buf, ",%.3f", s.wall_ms);
    row += buf;
  }
  return row;
}

void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& logs, bool include_timing) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_step_log: cannot open " + path.string());
  out << step_log_header(include_timing) << '\n';
  for (const auto& s : logs) out << step_log_row(s, include_timing) << '\n';
}

Trainer::Trainer(const Dataset& dataset, TrainConfig cfg)
    : dataset_(dataset),
      cfg_(std::move(cfg)),
      loss_(cfg_.effective_loss()),
      videos_(dataset.training_videos()),
      queue_(cfg_.queue_capacity, cfg_.encoder.output_dim),
      sampling_rng_(derive_seed(cfg_.seed, "train/sampling")),
      augment_rng_(derive_seed(cfg_.seed, "train/augment")) {
  cfg_.validate();
  if (videos_.empty()) throw InvalidConfigError("train: dataset has no training videos");
  cfg_.encoder.input_dim = dataset.config.obs_dim;
  Rng init(derive_seed(cfg_.seed, "train/init"));
  encoder_ = Encoder(cfg_.encoder, init);
  const long samples = static_cast<long>(videos_.size()) * cfg_.samples_per_video_per_epoch;
  steps_per_epoch_ = (samples + cfg_.videos_per_super_frame - 1) / cfg_.videos_per_super_frame;
  cfg_.optimizer.total_steps = steps_per_epoch_ * cfg_.epochs;
  optimizer_ = AdamW(cfg_.optimizer, encoder_.parameters());
  if (cfg_.augmentation_sigma < 0.0) cfg_.augmentation_sigma = dataset.config.appearance_noise_sigma;
}

bool Trainer::run_epoch() {
  if (aborted_) return false;
  std::vector<const Video*> schedule;
  schedule.reserve(videos_.size() * static_cast<std::size_t>(cfg_.samples_per_video_per_epoch));
  for (int r = 0; r < cfg_.samples_per_video_per_epoch; ++r) {
    schedule.insert(schedule.end(), videos_.begin(), videos_.end());
  }
  sampling_rng_.shuffle(schedule);
  const auto per_step = static_cast<std::size_t>(cfg_.videos_per_super_frame);
  for (std::size_t first = 0; first < schedule.size(); first += per_step) {
    const std::size_t last = std::min(schedule.size(), first + per_step);
    // A super-frame draws each video once.
    std::vector<const Video*> chosen;
    for (std::size_t i = first; i < last; ++i) {
      if (std::find(chosen.begin(), chosen.end(), schedule[i]) == chosen.end()) chosen.push_back(schedule[i]);
    }
    if (!step(chosen)) return false;
  }
  ++epoch_;
  return true;
}

bool Trainer::run(std::function<void(const StepLog&)> on_step) {
  while (epoch_ < cfg_.epochs) {
    const std::size_t before = log_.size();
    if (!run_epoch()) return false;
    if (on_step) {
      for (std::size_t i = before; i < log_.size(); ++i) on_step(log_[i]);
    }
  }
  return true;
}

TrainResult Trainer::finish() && {
  TrainResult result;
  result.encoder = std::move(encoder_);
  result.optimizer = std::move(optimizer_);
  result.log = std::move(log_);
  result.aborted = aborted_;
  result.abort_reason = std::move(abort_reason_);
  result.objective_tag = to_string(cfg_.objective);
  return result;
}

namespace {

Matrix gather_columns(const Matrix& m, const std::vector<int>& columns) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(columns[i]);
  return out;
}

void scatter_add_columns(Matrix& target, const std::vector<int>& columns, const Matrix& values) {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    target.col(columns[i]) += values.col(static_cast<Eigen::Index>(i));
  }
}

}  // namespace

SuperFrameLoss super_frame_loss(const FeatureMatrix& x, const FeatureMatrix& y, const AnchorGroup& from_x,
                                const AnchorGroup& from_y, const LossConfig& cfg) {
  SuperFrameLoss out;
  out.grad_x = Matrix::Zero(x.dim(), x.size());
  out.grad_y = Matrix::Zero(y.dim(), y.size());
  std::vector<ReliabilityReport> reports;
  const std::array<const AnchorGroup*, 2> groups{&from_x, &from_y};
  for (int g = 0; g < 2; ++g) {
    const AnchorGroup& group = *groups[static_cast<std::size_t>(g)];
    if (group.anchors.size() != group.matched.size()) {
      throw DimensionMismatchError("super_frame_loss: anchors and matches differ in length");
    }
    if (group.anchors.empty()) {
      reports.emplace_back();
      continue;
    }
    const Matrix& anchor_side = g == 0 ? x.matrix() : y.matrix();
    const Matrix& other_side = g == 0 ? y.matrix() : x.matrix();
    const Matrix sims = gather_columns(anchor_side, group.anchors).transpose() * other_side;
    const AssociationMatrix pi(group.matched, static_cast<int>(other_side.cols()));
    reports.push_back(reliability_from_similarities(sims, pi, cfg.tau));
    out.reliabilities.insert(out.reliabilities.end(), reports.back().reliability.begin(),
                             reports.back().reliability.end());
  }
  if (out.reliabilities.empty()) return out;

  const AnchorLosses losses = modulated_loss(out.reliabilities, cfg.modulation, cfg.gamma);
  const double count = static_cast<double>(out.reliabilities.size());
  if (cfg.modulation == Modulation::focal || cfg.modulation == Modulation::none) {
    out.loss = std::accumulate(losses.values.begin(), losses.values.end(), 0.0) / count;
  } else {
    const BatchScale scale = rc_batch_loss(losses.values, rc_loss(out.reliabilities, 0.0).values);
    out.alpha = scale.alpha;
    out.loss = scale.loss;
  }
  std::size_t offset = 0;
  for (int g = 0; g < 2; ++g) {
    const AnchorGroup& group = *groups[static_cast<std::size_t>(g)];
    if (group.anchors.empty()) continue;
    std::vector<double> coeff(group.anchors.size());
    for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i] = out.alpha / count * losses.grad_logp[offset + i];
    offset += coeff.size();
    const Matrix grad_s = similarity_gradient(reports[static_cast<std::size_t>(g)], coeff, cfg.tau);
    const Matrix& anchor_side = g == 0 ? x.matrix() : y.matrix();
    const Matrix& other_side = g == 0 ? y.matrix() : x.matrix();
    Matrix& anchor_grad = g == 0 ? out.grad_x : out.grad_y;
    Matrix& other_grad = g == 0 ? out.grad_y : out.grad_x;
    scatter_add_columns(anchor_grad, group.anchors, other_side * grad_s.transpose());
    other_grad += gather_columns(anchor_side, group.anchors) * grad_s;
  }
  return out;
}

Trainer::PairOutcome Trainer::accumulate_pair(const std::vector<const CropRecord*>& x_crops,
                                              const std::vector<const CropRecord*>& y_crops, bool instance_views,
                                              double weight, std::vector<Matrix>& grads,
                                              std::vector<std::pair<Matrix, std::vector<int>>>& enqueue) {
  PairOutcome outcome;
  Matrix ox = observation_matrix(x_crops);
  Matrix oy = observation_matrix(y_crops);
  if (instance_views) {
    const double sigma = cfg_.augmentation_sigma / std::sqrt(static_cast<double>(dataset_.config.obs_dim));
    for (Eigen::Index c = 0; c < ox.cols(); ++c) {
      for (Eigen::Index r = 0; r < ox.rows(); ++r) ox(r, c) += sigma * augment_rng_.normal();
    }
    for (Eigen::Index c = 0; c < oy.cols(); ++c) {
      for (Eigen::Index r = 0; r < oy.rows(); ++r) oy(r, c) += sigma * augment_rng_.normal();
    }
  }
  const Eigen::Index nx = static_cast<Eigen::Index>(x_crops.size());
  const Eigen::Index ny = static_cast<Eigen::Index>(y_crops.size());
  const int d = cfg_.encoder.output_dim;

  Encoder::Cache cache_x;
  Encoder::Cache cache_y;
  const FeatureMatrix fx = encoder_.forward(ox, &cache_x);
  const FeatureMatrix fy = encoder_.forward(oy, &cache_y);
  Matrix grad_x = Matrix::Zero(d, nx);
  Matrix grad_y = Matrix::Zero(d, ny);

  AnchorGroup from_x;  // anchors in X, softmax over Y
  AnchorGroup from_y;  // anchors in Y, softmax over X
  if (instance_views) {
    for (Eigen::Index i = 0; i < nx; ++i) {
      from_x.anchors.push_back(static_cast<int>(i));
      from_x.matched.push_back(static_cast<int>(i));
    }
  } else {
    std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_video;
    for (Eigen::Index i = 0; i < nx; ++i) by_video[x_crops[static_cast<std::size_t>(i)]->video_id].first.push_back(static_cast<int>(i));
    for (Eigen::Index j = 0; j < ny; ++j) by_video[y_crops[static_cast<std::size_t>(j)]->video_id].second.push_back(static_cast<int>(j));
    for (const auto& [video, sides] : by_video) {
      const auto& [xi, yi] = sides;
      const auto mined = mine_positive_pairs(fx.select(xi), fy.select(yi));
      if (!mined) continue;  // empty frame on either side
      const auto& rows = mined->swapped ? yi : xi;
      const auto& cols = mined->swapped ? xi : yi;
      AnchorGroup& group = mined->swapped ? from_y : from_x;
      for (int r = 0; r < mined->pi.rows(); ++r) {
        const int anchor = rows[static_cast<std::size_t>(r)];
        const int match = cols[static_cast<std::size_t>(mined->pi.matched_column(r))];
        group.anchors.push_back(anchor);
        group.matched.push_back(match);
        const CropRecord& a = mined->swapped ? *y_crops[static_cast<std::size_t>(anchor)] : *x_crops[static_cast<std::size_t>(anchor)];
        const CropRecord& b = mined->swapped ? *x_crops[static_cast<std::size_t>(match)] : *y_crops[static_cast<std::size_t>(match)];
        ++outcome.mined;
        if (a.true_identity == b.true_identity) ++outcome.correct;
        if (on_positive_pair) on_positive_pair(a, b);
      }
    }
  }

  const SuperFrameLoss rc = super_frame_loss(fx, fy, from_x, from_y, loss_);
  outcome.loss_rc = rc.loss;
  outcome.alpha = rc.alpha;
  outcome.reliabilities = rc.reliabilities;
  grad_x += weight * rc.grad_x;
  grad_y += weight * rc.grad_y;

  // Memory-queue negatives against a frozen snapshot of the queue.
  if (loss_.lambda > 0.0 && !queue_.empty() && nx + ny > 0) {
    Matrix all(d, nx + ny);
    all << fx.matrix(), fy.matrix();
    std::vector<int> videos;
    for (const auto* c : x_crops) videos.push_back(c->video_id);
    for (const auto* c : y_crops) videos.push_back(c->video_id);
    auto selections = queue_.select_negatives(all, videos, loss_.k, loss_.negative_selection);
    std::vector<Matrix> blocks;
    blocks.reserve(selections.size());
    for (auto& s : selections) blocks.push_back(std::move(s.negatives));
    const LossOutput q = queue_loss(FeatureMatrix::trusted(all), blocks);
    outcome.loss_q = q.value;
    grad_x += weight * loss_.lambda * q.grad_x.leftCols(nx);
    grad_y += weight * loss_.lambda * q.grad_x.rightCols(ny);
  }

  const auto gx = encoder_.backward(cache_x, grad_x);
  const auto gy = encoder_.backward(cache_y, grad_y);
  for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += gx[i] + gy[i];

  std::vector<int> x_videos;
  for (const auto* c : x_crops) x_videos.push_back(c->video_id);
  enqueue.emplace_back(fx.matrix(), std::move(x_videos));
  if (!instance_views) {
    std::vector<int> y_videos;
    for (const auto* c : y_crops) y_videos.push_back(c->video_id);
    enqueue.emplace_back(fy.matrix(), std::move(y_videos));
  }
  return outcome;
}

bool Trainer::step(const std::vector<const Video*>& videos) {
  const auto start = std::chrono::steady_clock::now();
  const bool instance_views = cfg_.objective == Objective::instance_discrimination;
  const auto pairs = sample_super_frames(videos, cfg_.frames_per_video, cfg_.delta_max_seconds, sampling_rng_,
                                         cfg_.super_frame_budget);
  if (pairs.empty()) return true;

  std::vector<Matrix> grads = encoder_.zero_gradients();
  std::vector<std::pair<Matrix, std::vector<int>>> enqueue;
  // Crops already queued this step; frames shared by several pairs go in once.
  std::vector<std::vector<const CropRecord*>> enqueue_crops;
  const double weight = 1.0 / static_cast<double>(pairs.size());

  StepLog entry;
  entry.step = optimizer_.step_count();
  entry.epoch = epoch_;
  std::vector<double> reliabilities;
  int mined = 0;
  int correct = 0;
  double alpha_sum = 0.0;
  for (const auto& pair : pairs) {
    const auto& y_side = instance_views ? pair.x : pair.y;
    const PairOutcome outcome = accumulate_pair(pair.x, y_side, instance_views, weight, grads, enqueue);
    enqueue_crops.push_back(pair.x);
    if (!instance_views) enqueue_crops.push_back(pair.y);
    entry.loss_rc += weight * outcome.loss_rc;
    entry.loss_q += weight * outcome.loss_q;
    alpha_sum += outcome.alpha;
    reliabilities.insert(reliabilities.end(), outcome.reliabilities.begin(), outcome.reliabilities.end());
    mined += outcome.mined;
    correct += outcome.correct;
  }
  entry.loss_total = total_loss(entry.loss_rc, entry.loss_q, loss_.lambda);
  entry.alpha = alpha_sum * weight;
  if (!reliabilities.empty()) {
    entry.mean_reliability = std::accumulate(reliabilities.begin(), reliabilities.end(), 0.0) /
                             static_cast<double>(reliabilities.size());
    entry.min_reliability = *std::min_element(reliabilities.begin(), reliabilities.end());
  }
  entry.mined_pairs = mined;
  entry.mined_precision = mined > 0 ? static_cast<double>(correct) / mined : std::numeric_limits<double>::quiet_NaN();
  entry.learning_rate = optimizer_.current_learning_rate();

  if (!std::isfinite(entry.loss_total)) {
    aborted_ = true;
    abort_reason_ = "non-finite loss at step " + std::to_string(entry.step);
    return false;
  }
  // Overflowing parameters can yield zero or NaN embeddings while the loss stays finite.
  for (const auto& batch : enqueue) {
    const Matrix& z = batch.first;
    const bool unit = z.allFinite() && ((z.colwise().norm().array() - 1.0).abs() <= kUnitNormTolerance).all();
    if (!unit) {
      aborted_ = true;
      abort_reason_ = "degenerate embeddings at step " + std::to_string(entry.step);
      return false;
    }
  }
  const StepReport report = optimizer_.step(encoder_.parameters(), grads);
  if (report.status != StepStatus::ok) {
    aborted_ = true;
    abort_reason_ = report.diagnostics;
    return false;
  }

  std::unordered_set<const CropRecord*> queued;
  for (std::size_t b = 0; b < enqueue.size(); ++b) {
    const auto& [embeddings, video_ids] = enqueue[b];
    const auto& crops = enqueue_crops[b];
    std::vector<int> keep;
    for (std::size_t i = 0; i < crops.size(); ++i) {
      if (queued.insert(crops[i]).second) keep.push_back(static_cast<int>(i));
    }
    std::vector<int> kept_videos;
    for (int i : keep) kept_videos.push_back(video_ids[static_cast<std::size_t>(i)]);
    queue_.enqueue(gather_columns(embeddings, keep), kept_videos);
  }
  entry.queue_size = queue_.size();
  entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  log_.push_back(entry);
  return true;
}

TrainResult train(const Dataset& dataset, const TrainConfig& cfg, std::function<void(const StepLog&)> on_step) {
  Trainer trainer(dataset, cfg);
  trainer.run(std::move(on_step));
  return std::move(trainer).finish();
}

TrainResult train_instance_discrimination(const Dataset& dataset, TrainConfig cfg,
                                          std::function<void(const StepLog&)> on_step) {
  cfg.objective = Objective::instance_discrimination;
  return train(dataset, cfg, std::move(on_step));
}

double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

ScalingReport measure_training_scaling(const Dataset& dataset, const std::vector<int>& video_counts, TrainConfig cfg,
                                       int timed_epochs) {
  if (video_counts.size() < 3) throw InvalidConfigError("measure_training_scaling: need at least 3 sizes");
  ScalingReport report;
  std::vector<double> log_size;
  std::vector<double> log_time;
  cfg.epochs = 1 + timed_epochs;
  for (int count : video_counts) {
    const Dataset subset = with_training_videos(dataset, count);
    Trainer trainer(subset, cfg);
    trainer.run_epoch();  // warm-up: fills the queue
    const auto start = std::chrono::steady_clock::now();
    for (int e = 0; e < timed_epochs; ++e) trainer.run_epoch();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
                           timed_epochs;
    report.points.push_back({count, seconds});
    log_size.push_back(std::log(static_cast<double>(count)));
    log_time.push_back(std::log(seconds));
  }
  report.log_log_slope = least_squares_slope(log_size, log_time);
  return report;
}

}  // namespace isr
