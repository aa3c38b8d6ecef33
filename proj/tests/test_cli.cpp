#include "doctest.h"

#include "isr/cli.hpp"
#include "isr/encoder.hpp"
#include "isr/eval.hpp"
#include "isr/synthetic_data.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using isr::cli::run_cli;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("isr_test_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::vector<std::string> tiny_world(const fs::path& out) {
  return {"gen-data", "--out", out.string(), "--seed", "5", "--num-identities", "40", "--num-videos", "4",
          "--identities-per-video", "6", "--frames-per-video", "16", "--eval-videos", "4", "--eval-identities",
          "12"};
}

std::vector<std::string> tiny_train(const fs::path& data, const fs::path& out) {
  return {"train", "--data", data.string(), "--out", out.string(), "--seed", "2", "--epochs", "2", "--hidden",
          "16", "--output-dim", "8", "--queue-cap", "64", "--k", "8", "--lr", "1e-3"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("gen-data is deterministic and records artifact hashes") {
  const fs::path a = scratch("gen_a");
  const fs::path b = scratch("gen_b");
  REQUIRE(cli(tiny_world(a)).code == isr::cli::kExitOk);
  REQUIRE(cli(tiny_world(b)).code == isr::cli::kExitOk);
  CHECK(isr::cli::file_hash(a / "dataset" / "observations.f32") ==
        isr::cli::file_hash(b / "dataset" / "observations.f32"));
  CHECK(slurp(a / "dataset" / "manifest.json") == slurp(b / "dataset" / "manifest.json"));

  const auto manifest = isr::cli::read_run_manifest(a);
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("seed") == 5);
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);
  CHECK(manifest.at("artifacts").at("observations").at("fnv1a64") ==
        isr::cli::file_hash(a / "dataset" / "observations.f32"));
  CHECK(manifest.at("config_hash") == isr::cli::read_run_manifest(b).at("config_hash"));

  const fs::path c = scratch("gen_c");
  auto other = tiny_world(c);
  other[4] = "6";
  REQUIRE(cli(other).code == isr::cli::kExitOk);
  CHECK(isr::cli::file_hash(c / "dataset" / "observations.f32") !=
        isr::cli::file_hash(a / "dataset" / "observations.f32"));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("gen-data --config reuses a manifest") {
  const fs::path a = scratch("cfg_a");
  const fs::path b = scratch("cfg_b");
  REQUIRE(cli(tiny_world(a)).code == 0);
  REQUIRE(cli({"gen-data", "--out", b.string(), "--config", (a / "run_manifest.json").string()}).code == 0);
  CHECK(isr::cli::file_hash(a / "dataset" / "observations.f32") ==
        isr::cli::file_hash(b / "dataset" / "observations.f32"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("invalid configurations exit with the validation code") {
  const fs::path out = scratch("invalid");
  const Run r = cli({"gen-data", "--out", out.string(), "--num-identities", "200", "--identities-per-video", "300"});
  CHECK(r.code == isr::cli::kExitValidation);
  CHECK(r.err.find("identities_per_video") != std::string::npos);

  CHECK(cli({}).code == isr::cli::kExitValidation);
  CHECK(cli({"frobnicate"}).code == isr::cli::kExitValidation);
  CHECK(cli({"gen-data"}).code == isr::cli::kExitValidation);
  CHECK(cli({"gen-data", "--out", out.string(), "--presence", "oops"}).code == isr::cli::kExitValidation);
  CHECK(cli({"verify", "--suite", "nonsense"}).code == isr::cli::kExitValidation);
  CHECK(cli({"--help"}).code == isr::cli::kExitOk);
  fs::remove_all(out);
}

TEST_CASE("missing inputs exit with the I/O code") {
  const fs::path out = scratch("missing");
  CHECK(cli({"train", "--data", "/nonexistent/isr", "--out", out.string()}).code == isr::cli::kExitIo);
  const fs::path data = scratch("missing_data");
  REQUIRE(cli(tiny_world(data)).code == 0);
  CHECK(cli({"eval", "--data", data.string(), "--checkpoint", "/nonexistent/ckpt", "--out", out.string()}).code ==
        isr::cli::kExitIo);
  fs::remove_all(out);
  fs::remove_all(data);
}

TEST_CASE("verify runs selected suites") {
  const fs::path out = scratch("verify");
  const Run r = cli({"verify", "--suite", "matching,curves", "--instances", "50", "--out", out.string()});
  CHECK(r.code == isr::cli::kExitOk);
  CHECK(r.out.find("matching") != std::string::npos);
  CHECK(r.out.find("curves") != std::string::npos);
  CHECK(r.out.find("gradients") == std::string::npos);
  CHECK(fs::exists(out / "reports" / "verify.csv"));
  std::ifstream curves(out / "reports" / "curves.csv");
  std::string header;
  std::getline(curves, header);
  CHECK(header == "gamma,p,loss,grad_stopgrad,grad_kept");
  int rows = 0;
  for (std::string line; std::getline(curves, line);) ++rows;
  CHECK(rows == 5 * 1000);
  CHECK(isr::cli::read_run_manifest(out).at("status") == "ok");
  fs::remove_all(out);

  CHECK(cli({"verify", "--suite", "queue", "--instances", "20"}).code == isr::cli::kExitOk);
}

TEST_CASE("train and eval produce deterministic artifacts") {
  const fs::path data = scratch("te_data");
  const fs::path t1 = scratch("te_t1");
  const fs::path t2 = scratch("te_t2");
  const fs::path e1 = scratch("te_e1");
  const fs::path e2 = scratch("te_e2");
  REQUIRE(cli(tiny_world(data)).code == 0);
  REQUIRE(cli(tiny_train(data, t1)).code == 0);
  REQUIRE(cli(tiny_train(data, t2)).code == 0);
  for (const char* f : {"checkpoints/final.bin", "checkpoints/final.json", "logs/steps.csv",
                        "reports/train_summary.json"}) {
    CHECK_MESSAGE(isr::cli::file_hash(t1 / f) == isr::cli::file_hash(t2 / f), f);
  }
  CHECK(fs::exists(t1 / "logs" / "timing.csv"));

  // The same dataset at another location trains to the same bytes.
  const fs::path moved = scratch("te_moved");
  const fs::path t3 = scratch("te_t3");
  fs::copy(data, moved, fs::copy_options::recursive);
  REQUIRE(cli(tiny_train(moved, t3)).code == 0);
  CHECK(isr::cli::file_hash(t1 / "checkpoints/final.json") == isr::cli::file_hash(t3 / "checkpoints/final.json"));
  CHECK(isr::cli::file_hash(t1 / "checkpoints/final.bin") == isr::cli::file_hash(t3 / "checkpoints/final.bin"));
  CHECK(isr::cli::read_run_manifest(t3).at("inputs").at("data") == (moved / "dataset").generic_string());
  fs::remove_all(moved);
  fs::remove_all(t3);

  // Re-running from a manifest reproduces the artifacts, including a video subset.
  const fs::path sub1 = scratch("te_sub1");
  const fs::path sub2 = scratch("te_sub2");
  auto subset = tiny_train(data, sub1);
  subset.insert(subset.end(), {"--training-videos", "2"});
  REQUIRE(cli(subset).code == 0);
  REQUIRE(cli({"train", "--data", data.string(), "--out", sub2.string(), "--config",
               (sub1 / "run_manifest.json").string()})
              .code == 0);
  CHECK(isr::cli::file_hash(sub1 / "checkpoints/final.bin") == isr::cli::file_hash(sub2 / "checkpoints/final.bin"));
  CHECK(isr::cli::file_hash(sub1 / "checkpoints/final.bin") != isr::cli::file_hash(t1 / "checkpoints/final.bin"));
  CHECK(isr::cli::read_run_manifest(sub2).at("config_hash") == isr::cli::read_run_manifest(sub1).at("config_hash"));
  fs::remove_all(sub1);
  fs::remove_all(sub2);
  const auto manifest = isr::cli::read_run_manifest(t1);
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("config").at("train").at("epochs") == 2);
  CHECK(manifest.at("config").at("dataset").at("observations_fnv1a64") ==
        isr::cli::file_hash(data / "dataset" / "observations.f32"));

  // The checkpoint stem, a file in it, or the train output directory all resolve.
  REQUIRE(cli({"eval", "--data", data.string(), "--checkpoint", t1.string(), "--out", e1.string(), "--seed", "1",
               "--export-embeddings"})
              .code == 0);
  REQUIRE(cli({"eval", "--data", (data / "dataset").string(), "--checkpoint",
               (t2 / "checkpoints" / "final.json").string(), "--out", e2.string(), "--seed", "1"})
              .code == 0);
  CHECK(slurp(e1 / "reports" / "eval.json") == slurp(e2 / "reports" / "eval.json"));
  CHECK(slurp(e1 / "reports" / "eval.csv") == slurp(e2 / "reports" / "eval.csv"));
  CHECK_FALSE(fs::exists(e2 / "reports" / "embeddings.csv"));

  const auto report = nlohmann::json::parse(slurp(e1 / "reports" / "eval.json"));
  CHECK(report.at("num_queries").get<int>() > 0);
  CHECK(report.at("chance_rank_1").get<double>() > 0.0);

  // Embeddings match a forward pass of the saved checkpoint.
  const auto ckpt = isr::load_checkpoint(t1 / "checkpoints" / "final");
  const auto dataset = isr::load_dataset(data / "dataset");
  std::ifstream emb(e1 / "reports" / "embeddings.csv");
  std::string line;
  std::getline(emb, line);
  CHECK(line.rfind("id,video_id,e0", 0) == 0);
  const auto split = isr::make_retrieval_split(dataset, 1);
  std::vector<const isr::CropRecord*> crops = split.queries;
  crops.insert(crops.end(), split.gallery.begin(), split.gallery.end());
  const isr::Matrix z = ckpt.encoder.forward(isr::observation_matrix(crops)).matrix();
  std::size_t row = 0;
  double worst = 0.0;
  while (std::getline(emb, line)) {
    REQUIRE(row < crops.size());
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    CHECK(std::stoi(cell) == crops[row]->true_identity);
    std::getline(ss, cell, ',');
    CHECK(std::stoi(cell) == crops[row]->video_id);
    for (Eigen::Index d = 0; d < z.rows(); ++d) {
      std::getline(ss, cell, ',');
      worst = std::max(worst, std::abs(std::stod(cell) - z(d, static_cast<Eigen::Index>(row))));
    }
    ++row;
  }
  CHECK(row == crops.size());
  CHECK(worst == 0.0);

  for (const auto& d : {data, t1, t2, e1, e2}) fs::remove_all(d);
}

TEST_CASE("ablate requires three seeds and writes summaries") {
  const fs::path data = scratch("ab_data");
  const fs::path out = scratch("ab_out");
  REQUIRE(cli(tiny_world(data)).code == 0);
  CHECK(cli({"ablate", "--data", data.string(), "--out", out.string(), "--seeds", "1,2"}).code ==
        isr::cli::kExitValidation);
  CHECK(cli({"ablate", "--data", data.string(), "--out", out.string(), "--study", "nope"}).code ==
        isr::cli::kExitValidation);
  const Run r = cli({"ablate", "--data", data.string(), "--out", out.string(), "--study", "gamma", "--values", "0,4",
                     "--epochs", "1", "--hidden", "8", "--output-dim", "4", "--lambda", "0", "--k", "4"});
  CHECK(r.code == isr::cli::kExitOk);
  std::ifstream summary(out / "reports" / "ablation_summary.csv");
  int lines = 0;
  for (std::string line; std::getline(summary, line);) ++lines;
  CHECK(lines == 3);
  std::ifstream runs(out / "reports" / "ablation_runs.csv");
  lines = 0;
  for (std::string line; std::getline(runs, line);) ++lines;
  CHECK(lines == 1 + 2 * 3);
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST_CASE("a diverging run exits with the abort code and keeps its artifacts") {
  const fs::path data = scratch("abort_data");
  const fs::path out = scratch("abort_out");
  REQUIRE(cli(tiny_world(data)).code == 0);
  auto args = tiny_train(data, out);
  args.back() = "1e30";  // --lr
  const Run r = cli(args);
  CHECK(r.code == isr::cli::kExitRuntimeAbort);
  CHECK(r.err.find("aborted") != std::string::npos);
  CHECK(isr::cli::read_run_manifest(out).at("status") == "aborted");
  const auto summary = nlohmann::json::parse(slurp(out / "reports" / "train_summary.json"));
  CHECK(summary.at("aborted") == true);
  CHECK(fs::exists(out / "checkpoints" / "final.bin"));
  fs::remove_all(data);
  fs::remove_all(out);
}
