#include "doctest.h"
#include "test_support.hpp"

#include "isr/losses.hpp"
#include "isr/matching.hpp"
#include "isr/trainer.hpp"

#include <cmath>
#include <map>
#include <sstream>

using namespace isr;
using isr::testing::random_matrix;
using isr::testing::random_unit_columns;

namespace {

WorldConfig micro_world(int videos, std::uint64_t seed) {
  WorldConfig cfg;
  cfg.num_identities = 40;
  cfg.num_videos = videos;
  cfg.identities_per_video = 6;
  cfg.frames_per_video = 20;
  cfg.eval_videos = 0;
  cfg.eval_identities = 0;
  cfg.seed = seed;
  return cfg;
}

TrainConfig micro_train(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.samples_per_video_per_epoch = 4;
  cfg.videos_per_super_frame = 2;
  cfg.queue_capacity = 64;
  cfg.loss.k = 8;
  cfg.delta_max_seconds = 1.0;
  cfg.encoder.hidden = {16};
  cfg.encoder.output_dim = 8;
  cfg.optimizer.learning_rate = 1e-3;
  cfg.seed = seed;
  return cfg;
}

std::string log_text(const std::vector<StepLog>& log) {
  std::ostringstream out;
  out << step_log_header(false) << '\n';
  for (const auto& s : log) out << step_log_row(s, false) << '\n';
  return out.str();
}

// Naive mean of -log p over both anchor directions.
double naive_gamma0_loss(const Matrix& x, const Matrix& y, const AnchorGroup& from_x, const AnchorGroup& from_y,
                         double tau) {
  double total = 0.0;
  int count = 0;
  auto direction = [&](const Matrix& a, const Matrix& b, const AnchorGroup& g) {
    for (std::size_t i = 0; i < g.anchors.size(); ++i) {
      double denom = 0.0;
      for (Eigen::Index j = 0; j < b.cols(); ++j) denom += std::exp(a.col(g.anchors[i]).dot(b.col(j)) / tau);
      const double num = std::exp(a.col(g.anchors[i]).dot(b.col(g.matched[i])) / tau);
      total += -std::log(num / denom);
      ++count;
    }
  };
  direction(x, y, from_x);
  direction(y, x, from_y);
  return count > 0 ? total / count : 0.0;
}

AnchorGroup random_group(int anchor_pool, int match_pool, Rng& rng) {
  std::vector<int> anchors(static_cast<std::size_t>(anchor_pool));
  std::vector<int> matches(static_cast<std::size_t>(match_pool));
  for (int i = 0; i < anchor_pool; ++i) anchors[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < match_pool; ++i) matches[static_cast<std::size_t>(i)] = i;
  rng.shuffle(anchors);
  rng.shuffle(matches);
  const int count = isr::testing::random_int(rng, 0, std::min(anchor_pool, match_pool));
  AnchorGroup g;
  g.anchors.assign(anchors.begin(), anchors.begin() + count);
  g.matched.assign(matches.begin(), matches.begin() + count);
  return g;
}

}  // namespace

TEST_CASE("objective names and effective losses") {
  for (auto o : {Objective::isr, Objective::instance_discrimination, Objective::isr_no_rc, Objective::isr_no_queue,
                 Objective::isr_focal}) {
    CHECK(parse_objective(to_string(o)) == o);
  }
  CHECK_THROWS_AS(parse_objective("rc"), InvalidConfigError);

  TrainConfig cfg;
  cfg.objective = Objective::isr_no_rc;
  CHECK(cfg.effective_loss().gamma == 0.0);
  CHECK(cfg.effective_loss().lambda == cfg.loss.lambda);
  cfg.objective = Objective::isr_no_queue;
  CHECK(cfg.effective_loss().lambda == 0.0);
  cfg.objective = Objective::isr_focal;
  CHECK(cfg.effective_loss().modulation == Modulation::focal);
  cfg.objective = Objective::instance_discrimination;
  CHECK(cfg.effective_loss().modulation == Modulation::none);
}

TEST_CASE("train config validation and json round trip") {
  TrainConfig cfg = micro_train(4);
  cfg.objective = Objective::isr_focal;
  cfg.loss.negative_selection = NegativeSelection::most_dissimilar;
  const TrainConfig back = train_config_from_json(train_config_json(cfg));
  CHECK(train_config_json(back) == train_config_json(cfg));
  CHECK(back.encoder.hidden == cfg.encoder.hidden);
  CHECK(back.objective == Objective::isr_focal);

  TrainConfig bad = cfg;
  bad.delta_max_seconds = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);
  bad = cfg;
  bad.frames_per_video = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);
  bad = cfg;
  bad.loss.tau = -1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);

  const Dataset d = generate_world(micro_world(2, 1));
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(Trainer(d, bad), InvalidConfigError);
  WorldConfig only_eval = micro_world(0, 1);
  only_eval.eval_videos = 2;
  const Dataset no_train = generate_world(only_eval);
  CHECK_THROWS_AS(Trainer(no_train, cfg), InvalidConfigError);
}

TEST_CASE("step log formatting") {
  StepLog s;
  s.step = 3;
  s.loss_rc = 0.1;
  s.mined_precision = std::nan("");
  s.wall_ms = 1.23456;
  CHECK(step_log_header(true).ends_with(",wall_ms"));
  CHECK_FALSE(step_log_header(false).ends_with(",wall_ms"));
  const std::string row = step_log_row(s, true);
  CHECK(row.starts_with("3,0,0.10000000000000001,"));
  CHECK(row.ends_with(",1.235"));
  CHECK(row.find("nan") != std::string::npos);
  std::size_t header_commas = 0;
  for (char c : step_log_header(false)) header_commas += c == ',';
  std::size_t row_commas = 0;
  for (char c : step_log_row(s, false)) row_commas += c == ',';
  CHECK(header_commas == row_commas);
}

TEST_CASE("super_frame_loss matches a naive oracle and finite differences") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = isr::testing::random_int(rng, 2, 6);
    const int nx = isr::testing::random_int(rng, 1, 7);
    const int ny = isr::testing::random_int(rng, 1, 7);
    const Matrix x = random_unit_columns(d, nx, rng);
    const Matrix y = random_unit_columns(d, ny, rng);
    const AnchorGroup from_x = random_group(nx, ny, rng);
    const AnchorGroup from_y = random_group(ny, nx, rng);
    LossConfig cfg;
    cfg.tau = rng.uniform(0.05, 1.0);
    cfg.gamma = 0.0;
    const Modulation modes[] = {Modulation::reliability_stopgrad, Modulation::none, Modulation::focal};
    cfg.modulation = modes[trial % 3];
    if (cfg.modulation == Modulation::focal) cfg.gamma = rng.uniform(0.0, 3.0);

    auto value = [&](const Matrix& a, const Matrix& b) {
      return super_frame_loss(FeatureMatrix::trusted(a), FeatureMatrix::trusted(b), from_x, from_y, cfg).loss;
    };
    const SuperFrameLoss out = super_frame_loss(FeatureMatrix(x), FeatureMatrix(y), from_x, from_y, cfg);
    REQUIRE(out.reliabilities.size() == from_x.anchors.size() + from_y.anchors.size());
    if (cfg.modulation != Modulation::focal) {
      CHECK(out.loss == doctest::Approx(naive_gamma0_loss(x, y, from_x, from_y, cfg.tau)).epsilon(1e-10));
    }
    if (out.reliabilities.empty()) {
      CHECK(out.loss == 0.0);
      CHECK(out.grad_x.isZero(0.0));
      continue;
    }
    const double h = 1e-6;
    double worst = 0.0;
    for (int side = 0; side < 2; ++side) {
      const Matrix& base = side == 0 ? x : y;
      const Matrix& analytic = side == 0 ? out.grad_x : out.grad_y;
      for (Eigen::Index i = 0; i < base.size(); ++i) {
        Matrix plus = base;
        Matrix minus = base;
        plus.data()[i] += h;
        minus.data()[i] -= h;
        const double numeric = side == 0 ? (value(plus, y) - value(minus, y)) / (2 * h)
                                         : (value(x, plus) - value(x, minus)) / (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / std::max(1.0, std::abs(numeric)));
      }
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("super_frame_loss rejects ragged groups") {
  Rng rng(1);
  const FeatureMatrix x(random_unit_columns(3, 2, rng));
  AnchorGroup bad;
  bad.anchors = {0, 1};
  bad.matched = {0};
  CHECK_THROWS_AS(super_frame_loss(x, x, bad, {}, LossConfig{}), DimensionMismatchError);
}

TEST_CASE("end-to-end gradient through the encoder") {
  // Mining and queue negatives are held fixed; gamma = 0 makes the objective
  // exactly differentiable so every parameter can be checked numerically.
  const Dataset d = generate_world(micro_world(2, 9));
  Rng rng(3);
  const auto pairs = sample_super_frames(d.training_videos(), 2, 1.0, rng);
  REQUIRE_FALSE(pairs.empty());
  const auto& pair = pairs.front();
  const Matrix ox = observation_matrix(pair.x);
  const Matrix oy = observation_matrix(pair.y);
  Rng init(5);
  const Encoder base({d.config.obs_dim, {12}, 6}, init);
  LossConfig cfg;
  cfg.gamma = 0.0;
  cfg.lambda = 0.7;

  AnchorGroup from_x;
  AnchorGroup from_y;
  {
    const FeatureMatrix fx = base.forward(ox);
    const FeatureMatrix fy = base.forward(oy);
    std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_video;
    for (std::size_t i = 0; i < pair.x.size(); ++i) by_video[pair.x[i]->video_id].first.push_back(static_cast<int>(i));
    for (std::size_t j = 0; j < pair.y.size(); ++j) by_video[pair.y[j]->video_id].second.push_back(static_cast<int>(j));
    for (const auto& [video, sides] : by_video) {
      const auto mined = mine_positive_pairs(fx.select(sides.first), fy.select(sides.second));
      if (!mined) continue;
      const auto& rows = mined->swapped ? sides.second : sides.first;
      const auto& cols = mined->swapped ? sides.first : sides.second;
      AnchorGroup& g = mined->swapped ? from_y : from_x;
      for (int r = 0; r < mined->pi.rows(); ++r) {
        g.anchors.push_back(rows[static_cast<std::size_t>(r)]);
        g.matched.push_back(cols[static_cast<std::size_t>(mined->pi.matched_column(r))]);
      }
    }
  }
  const Eigen::Index nx = ox.cols();
  const Eigen::Index ny = oy.cols();
  std::vector<Matrix> negatives;
  for (Eigen::Index i = 0; i < nx + ny; ++i) negatives.push_back(random_unit_columns(6, 3, rng));

  auto objective = [&](const Encoder& enc) {
    const FeatureMatrix fx = enc.forward(ox);
    const FeatureMatrix fy = enc.forward(oy);
    Matrix all(6, nx + ny);
    all << fx.matrix(), fy.matrix();
    return super_frame_loss(fx, fy, from_x, from_y, cfg).loss +
           cfg.lambda * queue_loss(FeatureMatrix::trusted(all), negatives).value;
  };

  Encoder::Cache cx;
  Encoder::Cache cy;
  const FeatureMatrix fx = base.forward(ox, &cx);
  const FeatureMatrix fy = base.forward(oy, &cy);
  const SuperFrameLoss rc = super_frame_loss(fx, fy, from_x, from_y, cfg);
  Matrix all(6, nx + ny);
  all << fx.matrix(), fy.matrix();
  const LossOutput q = queue_loss(FeatureMatrix::trusted(all), negatives);
  const auto gx = base.backward(cx, rc.grad_x + cfg.lambda * q.grad_x.leftCols(nx));
  const auto gy = base.backward(cy, rc.grad_y + cfg.lambda * q.grad_x.rightCols(ny));

  const double h = 1e-6;
  for (std::size_t p = 0; p < gx.size(); ++p) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < gx[p].size(); ++i) {
      Encoder plus = base;
      Encoder minus = base;
      plus.parameters()[p].data()[i] += h;
      minus.parameters()[p].data()[i] -= h;
      const double numeric = (objective(plus) - objective(minus)) / (2 * h);
      const double analytic = gx[p].data()[i] + gy[p].data()[i];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max(1.0, std::abs(numeric)));
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("trainer schedule and smoke run") {
  const Dataset d = generate_world(micro_world(2, 2));
  TrainConfig cfg = micro_train(1);
  cfg.epochs = 5;
  Trainer trainer(d, cfg);
  CHECK(trainer.steps_per_epoch() == 4);
  CHECK(trainer.optimizer().config().total_steps == 20);
  CHECK(trainer.config().encoder.input_dim == d.config.obs_dim);

  int mined_outside_video = 0;
  int mined_outside_delta = 0;
  trainer.on_positive_pair = [&](const CropRecord& a, const CropRecord& b) {
    mined_outside_video += a.video_id != b.video_id;
    mined_outside_delta += std::abs(a.timestamp_seconds - b.timestamp_seconds) > cfg.delta_max_seconds;
  };
  int streamed = 0;
  CHECK(trainer.run([&](const StepLog&) { ++streamed; }));
  CHECK_FALSE(trainer.aborted());
  CHECK(mined_outside_video == 0);
  CHECK(mined_outside_delta == 0);
  const auto& log = trainer.log();
  REQUIRE(log.size() == 20);
  CHECK(streamed == 20);
  double first = 0.0;
  double last = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(log[i].step == static_cast<long>(i));
    CHECK(std::isfinite(log[i].loss_total));
    CHECK(log[i].loss_total == doctest::Approx(log[i].loss_rc + cfg.loss.lambda * log[i].loss_q));
    CHECK(log[i].queue_size <= cfg.queue_capacity);
    CHECK(log[i].mined_pairs > 0);
    CHECK(log[i].learning_rate == doctest::Approx(cosine_learning_rate(1e-3, log[i].step, 20)));
    CHECK(log[i].min_reliability <= log[i].mean_reliability);
    if (i < 4) first += log[i].mined_precision / 4;
    if (i >= 16) last += log[i].mined_precision / 4;
  }
  MESSAGE("mined precision first epoch " << first << ", last epoch " << last);
  CHECK(last >= first);
  CHECK(log.back().queue_size == cfg.queue_capacity);
  CHECK(log.front().loss_q == 0.0);
}

TEST_CASE("training is reproducible from the seed") {
  const Dataset d = generate_world(micro_world(3, 4));
  const TrainResult a = train(d, micro_train(7));
  const TrainResult b = train(d, micro_train(7));
  const TrainResult c = train(d, micro_train(8));
  CHECK(parameter_hash(a.encoder.parameters()) == parameter_hash(b.encoder.parameters()));
  CHECK(log_text(a.log) == log_text(b.log));
  CHECK(parameter_hash(a.encoder.parameters()) != parameter_hash(c.encoder.parameters()));
  CHECK(a.objective_tag == "isr");
}

TEST_CASE("ablation objectives equal their explicit hyperparameters") {
  const Dataset d = generate_world(micro_world(3, 5));
  TrainConfig tagged = micro_train(2);
  tagged.objective = Objective::isr_no_rc;
  TrainConfig explicit_cfg = micro_train(2);
  explicit_cfg.loss.gamma = 0.0;
  const TrainResult a = train(d, tagged);
  const TrainResult b = train(d, explicit_cfg);
  CHECK(log_text(a.log) == log_text(b.log));
  CHECK(a.objective_tag == "isr_no_rc");

  tagged.objective = Objective::isr_no_queue;
  explicit_cfg = micro_train(2);
  explicit_cfg.loss.lambda = 0.0;
  const TrainResult c = train(d, tagged);
  const TrainResult e = train(d, explicit_cfg);
  CHECK(log_text(c.log) == log_text(e.log));
  for (const auto& s : c.log) CHECK(s.loss_q == 0.0);
}

TEST_CASE("instance discrimination baseline") {
  const Dataset d = generate_world(micro_world(2, 6));
  TrainConfig cfg = micro_train(3);
  const TrainResult r = train_instance_discrimination(d, cfg);
  CHECK(r.objective_tag == "instance_discrimination");
  CHECK_FALSE(r.aborted);
  REQUIRE_FALSE(r.log.empty());
  for (const auto& s : r.log) {
    CHECK(s.mined_pairs == 0);
    CHECK(std::isnan(s.mined_precision));
    CHECK(s.alpha == 1.0);
    CHECK(std::isfinite(s.loss_total));
  }
}

TEST_CASE("kept-gradient modulation either completes or aborts cleanly") {
  const Dataset d = generate_world(micro_world(2, 7));
  TrainConfig cfg = micro_train(5);
  cfg.loss.modulation = Modulation::reliability_kept;
  const TrainResult r = train(d, cfg);
  if (r.aborted) {
    CHECK_FALSE(r.abort_reason.empty());
  } else {
    for (const auto& s : r.log) CHECK(std::isfinite(s.loss_total));
  }
}

TEST_CASE("least_squares_slope") {
  CHECK(least_squares_slope({1, 2, 3, 4}, {3, 5, 7, 9}) == doctest::Approx(2.0));
  CHECK(least_squares_slope({1, 1, 1}, {1, 2, 3}) == 0.0);
  Rng rng(2);
  std::vector<double> x;
  std::vector<double> y;
  for (int i = 0; i < 50; ++i) {
    x.push_back(rng.uniform(0.0, 10.0));
    y.push_back(-0.5 * x.back() + 4.0);
  }
  CHECK(least_squares_slope(x, y) == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("overflowing parameters abort instead of queueing degenerate embeddings") {
  const Dataset d = generate_world(micro_world(2, 3));
  TrainConfig cfg = micro_train(1);
  cfg.optimizer.learning_rate = 1e30;
  const TrainResult r = train(d, cfg);
  CHECK(r.aborted);
  CHECK(r.abort_reason.find("degenerate embeddings") != std::string::npos);
  for (const auto& s : r.log) CHECK(std::isfinite(s.loss_total));
}
