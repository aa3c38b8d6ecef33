#include "doctest.h"
#include "test_support.hpp"

#include "isr/matching.hpp"
#include "isr/synthetic_data.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace isr;

namespace {

WorldConfig small_world(std::uint64_t seed) {
  WorldConfig cfg;
  cfg.num_identities = 30;
  cfg.num_videos = 4;
  cfg.identities_per_video = 5;
  cfg.frames_per_video = 12;
  cfg.eval_videos = 2;
  cfg.eval_identities = 10;
  cfg.seed = seed;
  return cfg;
}

Video bare_video(int frames, double interval) {
  Video v;
  for (int f = 0; f < frames; ++f) {
    FrameSet frame;
    frame.frame_index = f;
    frame.timestamp_seconds = f * interval;
    v.frames.push_back(frame);
  }
  return v;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("isr_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.videos.size() != b.videos.size()) return false;
  for (std::size_t v = 0; v < a.videos.size(); ++v) {
    const auto& va = a.videos[v];
    const auto& vb = b.videos[v];
    if (va.video_id != vb.video_id || va.held_out != vb.held_out || va.frames.size() != vb.frames.size()) return false;
    for (std::size_t f = 0; f < va.frames.size(); ++f) {
      const auto& fa = va.frames[f];
      const auto& fb = vb.frames[f];
      if (fa.timestamp_seconds != fb.timestamp_seconds || fa.crops.size() != fb.crops.size()) return false;
      for (std::size_t c = 0; c < fa.crops.size(); ++c) {
        if (fa.crops[c].true_identity != fb.crops[c].true_identity) return false;
        if (fa.crops[c].observation != fb.crops[c].observation) return false;
      }
    }
  }
  return true;
}

}  // namespace

TEST_CASE("world config validation") {
  WorldConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.num_identities = 200;
  cfg.identities_per_video = 300;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
  CHECK_THROWS_AS(generate_world(cfg), InvalidConfigError);

  WorldConfig bad;
  bad.presence_prob = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);
  bad = WorldConfig{};
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);
  bad = WorldConfig{};
  bad.obs_dim = bad.identity_dim - 1;
  CHECK_THROWS_AS(bad.validate(), InvalidConfigError);
}

TEST_CASE("generation is deterministic in the seed") {
  const Dataset a = generate_world(small_world(7));
  const Dataset b = generate_world(small_world(7));
  const Dataset c = generate_world(small_world(8));
  CHECK(same_dataset(a, b));
  CHECK_FALSE(same_dataset(a, c));
  CHECK(a.training_videos().size() == 4);
  CHECK(a.held_out_videos().size() == 2);
}

TEST_CASE("held-out videos draw from the reserved identity pool") {
  const Dataset d = generate_world(small_world(3));
  for (const auto& video : d.videos) {
    for (const auto& frame : video.frames) {
      CHECK(frame.crops.size() <= 5);
      std::set<int> ids;
      for (const auto& crop : frame.crops) {
        ids.insert(crop.true_identity);
        CHECK(crop.video_id == video.video_id);
        CHECK(crop.frame_index == frame.frame_index);
        if (video.held_out) {
          CHECK(crop.true_identity >= 30);
          CHECK(crop.true_identity < 40);
        } else {
          CHECK(crop.true_identity < 30);
        }
      }
      CHECK(ids.size() == frame.crops.size());
    }
  }
}

TEST_CASE("full presence without turnover shows every slot in every frame") {
  WorldConfig cfg = small_world(4);
  cfg.presence_prob = 1.0;
  cfg.dwell_seconds = 0.0;
  const Dataset d = generate_world(cfg);
  for (const auto& video : d.videos) {
    const auto first = video.frames.front().crops;
    std::set<int> expected;
    for (const auto& crop : first) expected.insert(crop.true_identity);
    for (const auto& frame : video.frames) {
      CHECK(frame.crops.size() == 5);
      std::set<int> ids;
      for (const auto& crop : frame.crops) ids.insert(crop.true_identity);
      CHECK(ids == expected);
    }
  }
}

TEST_CASE("save and load are bit-exact") {
  const Dataset d = generate_world(small_world(11));
  const auto dir = scratch_dir("dataset");
  save_dataset(d, dir);
  const Dataset back = load_dataset(dir);
  CHECK(same_dataset(d, back));
  CHECK(world_config_json(back.config) == world_config_json(d.config));
  CHECK(back.crop_count() == d.crop_count());
  CHECK(std::filesystem::file_size(dir / "observations.f32") == d.crop_count() * 48 * 4);

  const auto again = scratch_dir("dataset_again");
  save_dataset(back, again);
  std::ifstream a(dir / "observations.f32", std::ios::binary);
  std::ifstream b(again / "observations.f32", std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
  CHECK(bytes_a == bytes_b);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(again);
  CHECK_THROWS_AS(load_dataset(dir), Error);
}

TEST_CASE("with_training_videos keeps held-out videos") {
  const Dataset d = generate_world(small_world(5));
  const Dataset two = with_training_videos(d, 2);
  CHECK(two.training_videos().size() == 2);
  CHECK(two.held_out_videos().size() == 2);
  CHECK(two.training_videos()[0]->video_id == 0);
  CHECK(two.training_videos()[1]->video_id == 1);
}

TEST_CASE("sample_frame_pair") {
  Rng rng(21);
  SUBCASE("no eligible pair when delta is below the frame spacing") {
    const Video v = bare_video(10, 1.0);
    CHECK_FALSE(sample_frame_pair(v, 0.5, rng).has_value());
    CHECK_FALSE(sample_frame_pair(bare_video(1, 1.0), 100.0, rng).has_value());
  }
  SUBCASE("pairs are within delta and distinct") {
    const Video v = bare_video(40, 7.0 / 30.0);
    for (int i = 0; i < 2000; ++i) {
      const auto p = sample_frame_pair(v, 1.0, rng);
      REQUIRE(p);
      CHECK(p->first != p->second);
      CHECK(std::abs(v.frames[static_cast<std::size_t>(p->first)].timestamp_seconds -
                     v.frames[static_cast<std::size_t>(p->second)].timestamp_seconds) <= 1.0);
    }
  }
  SUBCASE("uniform over eligible unordered pairs") {
    // 10 frames at 1 s, delta 2.5: 9 + 8 = 17 eligible pairs.
    const Video v = bare_video(10, 1.0);
    std::map<std::pair<int, int>, int> counts;
    int forward = 0;
    const int n = 17000;
    for (int i = 0; i < n; ++i) {
      const auto p = sample_frame_pair(v, 2.5, rng);
      REQUIRE(p);
      forward += p->first < p->second;
      ++counts[{std::min(p->first, p->second), std::max(p->first, p->second)}];
    }
    REQUIRE(counts.size() == 17);
    double chi2 = 0.0;
    for (const auto& [pair, c] : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
    // 16 degrees of freedom, p = 0.001 critical value.
    CHECK(chi2 < 39.25);
    CHECK(std::abs(forward - n / 2) < 4 * std::sqrt(n / 4.0));
  }
}

TEST_CASE("sample_frame_group keeps all members within delta") {
  Rng rng(5);
  const Video v = bare_video(40, 0.25);
  for (int i = 0; i < 300; ++i) {
    const auto g = sample_frame_group(v, 4, 1.0, rng);
    REQUIRE(g.size() == 4);
    for (int a : g) {
      for (int b : g) CHECK(std::abs(a - b) <= 4);
    }
    CHECK(std::set<int>(g.begin(), g.end()).size() == 4);
  }
  CHECK(sample_frame_group(v, 3, 0.1, rng).empty());
}

TEST_CASE("super-frames") {
  WorldConfig cfg = small_world(9);
  cfg.presence_prob = 1.0;
  cfg.dwell_seconds = 0.0;
  const Dataset d = generate_world(cfg);
  const auto train = d.training_videos();
  Rng rng(2);

  SUBCASE("a single video reduces to its frame pairs") {
    const auto pairs = sample_super_frames({train[0]}, 3, 1.0, rng);
    REQUIRE(pairs.size() == 3);
    for (const auto& p : pairs) {
      CHECK(p.video_ids == std::vector<int>{train[0]->video_id});
      CHECK(p.x.size() == 5);
      CHECK(p.y.size() == 5);
      CHECK(p.x.front()->frame_index != p.y.front()->frame_index);
    }
  }
  SUBCASE("four videos contribute every identity, ordered by video") {
    const auto pairs = sample_super_frames(train, 2, 1.0, rng);
    REQUIRE(pairs.size() == 1);
    const auto& p = pairs.front();
    CHECK(p.video_ids == std::vector<int>{0, 1, 2, 3});
    CHECK(p.x.size() == 20);
    CHECK(p.y.size() == 20);
    for (std::size_t i = 1; i < p.x.size(); ++i) CHECK(p.x[i - 1]->video_id <= p.x[i]->video_id);
    std::multiset<std::pair<int, int>> xs;
    std::multiset<std::pair<int, int>> ys;
    for (const auto* c : p.x) xs.insert({c->video_id, c->true_identity});
    for (const auto* c : p.y) ys.insert({c->video_id, c->true_identity});
    CHECK(xs == ys);
  }
  SUBCASE("budget truncates each side") {
    const auto pairs = sample_super_frames(train, 2, 1.0, rng, 7);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs.front().x.size() == 7);
    CHECK(pairs.front().y.size() == 7);
    CHECK(pairs.front().x.back()->video_id == 1);
  }
  SUBCASE("argument checks") {
    CHECK_THROWS_AS(sample_super_frames(train, 1, 1.0, rng), InvalidConfigError);
    CHECK_THROWS_AS(sample_super_frames(train, 2, 1.0, rng, 0), InvalidConfigError);
    CHECK(sample_super_frames(train, 2, 0.01, rng).empty());
  }
}

TEST_CASE("noise-free frames are perfectly pairable") {
  WorldConfig cfg = small_world(13);
  cfg.presence_prob = 1.0;
  cfg.dwell_seconds = 0.0;
  cfg.appearance_noise_sigma = 0.0;
  cfg.num_videos = 6;
  const Dataset d = generate_world(cfg);
  Rng rng(4);
  for (const Video* video : d.training_videos()) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto p = sample_frame_pair(*video, 2.0, rng);
      REQUIRE(p);
      const auto& fx = video->frames[static_cast<std::size_t>(p->first)];
      const auto& fy = video->frames[static_cast<std::size_t>(p->second)];
      std::vector<const CropRecord*> cx;
      std::vector<const CropRecord*> cy;
      for (const auto& c : fx.crops) cx.push_back(&c);
      for (const auto& c : fy.crops) cy.push_back(&c);
      const auto mined = mine_positive_pairs(FeatureMatrix::normalized(observation_matrix(cx)),
                                             FeatureMatrix::normalized(observation_matrix(cy)));
      REQUIRE(mined);
      REQUIRE_FALSE(mined->swapped);
      for (int i = 0; i < mined->pi.rows(); ++i) {
        CHECK(cx[static_cast<std::size_t>(i)]->true_identity ==
              cy[static_cast<std::size_t>(mined->pi.matched_column(i))]->true_identity);
      }
    }
  }
}

TEST_CASE("observation_matrix stacks columns") {
  CropRecord a;
  a.observation = Vector::Unit(3, 0);
  CropRecord b;
  b.observation = Vector::Unit(3, 2);
  const Matrix m = observation_matrix({&a, &b});
  CHECK(m.rows() == 3);
  CHECK(m.cols() == 2);
  CHECK(m.col(1) == b.observation);
  CHECK(observation_matrix({}).size() == 0);
}
