#include "isr/cli.hpp"

#include "isr/encoder.hpp"
#include "isr/eval.hpp"
#include "isr/experiments.hpp"
#include "isr/synthetic_data.hpp"
#include "isr/trainer.hpp"
#include "isr/verify.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace isr::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestName = "run_manifest.json";

// Raised for errors that should map to a specific exit code.
struct CommandError : std::runtime_error {
  CommandError(ExitCode c, const std::string& message) : std::runtime_error(message), code(c) {}
  ExitCode code;
};

enum class Level { quiet, info, debug };

class Logger {
 public:
  explicit Logger(std::ostream& os) : os_(os) {
    const char* env = std::getenv(kLogEnv);
    const std::string value = env ? env : "info";
    if (value == "quiet") {
      level_ = Level::quiet;
    } else if (value == "debug") {
      level_ = Level::debug;
    }
  }
  void info(const std::string& message) const {
    if (level_ != Level::quiet) os_ << message << '\n';
  }
  void debug(const std::string& message) const {
    if (level_ == Level::debug) os_ << message << '\n';
  }

 private:
  std::ostream& os_;
  Level level_ = Level::info;
};

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

class RunManifest {
 public:
  RunManifest(fs::path out, std::string command, json config, std::uint64_t seed) : out_(std::move(out)) {
    body_ = json{{"format", "isr-run-manifest/1"},
                 {"command", std::move(command)},
                 {"config", std::move(config)},
                 {"seed", seed},
                 {"started_at", utc_now()},
                 {"finished_at", nullptr},
                 {"status", "running"},
                 {"inputs", json::object()},
                 {"artifacts", json::object()}};
    body_["config_hash"] = hex64(fnv1a64(body_["config"].dump()));
    write();
  }

  void add_input(const std::string& name, const fs::path& path) {
    body_["inputs"][name] = path.generic_string();
    write();
  }

  void add_artifact(const std::string& name, const fs::path& relative) {
    body_["artifacts"][name] = {{"path", relative.generic_string()}, {"fnv1a64", file_hash(out_ / relative)}};
  }

  void finish(const std::string& status) {
    body_["status"] = status;
    body_["finished_at"] = utc_now();
    write();
  }

 private:
  void write() const {
    fs::create_directories(out_);
    std::ofstream f(out_ / kManifestName, std::ios::trunc);
    if (!f) throw CommandError(kExitIo, "cannot write " + (out_ / kManifestName).string());
    f << body_.dump(2) << '\n';
  }

  fs::path out_;
  json body_;
};

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CommandError(kExitIo, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CommandError(kExitValidation, path.string() + ": " + e.what());
  }
}

// Accepts a gen-data output directory or the dataset directory itself.
fs::path resolve_dataset_dir(const fs::path& path) {
  if (fs::exists(path / "dataset" / "manifest.json")) return path / "dataset";
  if (fs::exists(path / "manifest.json")) return path;
  throw CommandError(kExitIo, "no dataset found at " + path.string());
}

// Content hashes only, so the config hash does not depend on where the data lives.
json dataset_identity(const fs::path& dir) {
  return {{"manifest_fnv1a64", file_hash(dir / "manifest.json")},
          {"observations_fnv1a64", file_hash(dir / "observations.f32")}};
}

// A config block from --config: either a run manifest or the bare block.
json config_block(const fs::path& path, const std::string& key) {
  const json j = load_json(path);
  if (j.contains("config") && j["config"].contains(key)) return j["config"][key];
  if (j.contains(key)) return j[key];
  return j;
}

// ---------------------------------------------------------------- flags

struct WorldFlags {
  WorldConfig cfg;
  std::string config_file;
};

void add_world_flags(CLI::App* cmd, WorldFlags& f) {
  auto& c = f.cfg;
  cmd->add_option("--num-identities", c.num_identities, "Training identity pool size")->capture_default_str();
  cmd->add_option("--identity-dim", c.identity_dim, "Latent identity dimension")->capture_default_str();
  cmd->add_option("--obs-dim", c.obs_dim, "Observation dimension")->capture_default_str();
  cmd->add_option("--num-videos", c.num_videos, "Training videos")->capture_default_str();
  cmd->add_option("--identities-per-video", c.identities_per_video, "On-screen slots per video")->capture_default_str();
  cmd->add_option("--frames-per-video", c.frames_per_video, "Frames per video")->capture_default_str();
  cmd->add_option("--frame-interval", c.frame_interval_seconds, "Seconds between frames")->capture_default_str();
  cmd->add_option("--presence", c.presence_prob, "Per-frame detection probability")->capture_default_str();
  cmd->add_option("--noise-sigma", c.appearance_noise_sigma, "Appearance noise sigma")->capture_default_str();
  cmd->add_option("--camera-shift", c.camera_shift_sigma, "Per-camera shift sigma")->capture_default_str();
  cmd->add_option("--dropout-rate", c.dropout_rate, "Probability a frame loses one detection")->capture_default_str();
  cmd->add_option("--pose-dim", c.pose_dim, "Pose nuisance dimension")->capture_default_str();
  cmd->add_option("--pose-scale", c.pose_scale, "Pose magnitude relative to noise")->capture_default_str();
  cmd->add_option("--pose-correlation", c.pose_correlation_seconds, "Pose correlation time (s)")->capture_default_str();
  cmd->add_option("--dwell", c.dwell_seconds, "Identity dwell time per slot (s); 0 disables turnover")
      ->capture_default_str();
  cmd->add_option("--eval-videos", c.eval_videos, "Held-out videos")->capture_default_str();
  cmd->add_option("--eval-identities", c.eval_identities, "Identities reserved for held-out videos")
      ->capture_default_str();
  cmd->add_option("--config", f.config_file, "Take the world config from a run manifest or JSON file");
}

struct TrainFlags {
  TrainConfig cfg;
  std::string objective = "isr";
  std::string neg_mode = "most_similar";
  std::string modulation = "reliability_stopgrad";
  int training_videos = 0;
  std::string config_file;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  auto& c = f.cfg;
  c.optimizer.learning_rate = 1e-4;
  cmd->add_option("--gamma", c.loss.gamma, "Reliability exponent")->capture_default_str();
  cmd->add_option("--lambda", c.loss.lambda, "Queue loss weight")->capture_default_str();
  cmd->add_option("--tau", c.loss.tau, "Softmax temperature")->capture_default_str();
  cmd->add_option("--k", c.loss.k, "Negatives per anchor")->capture_default_str();
  cmd->add_option("--delta-max", c.delta_max_seconds, "Maximum frame gap of a pair (s)")->capture_default_str();
  cmd->add_option("--epochs", c.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", c.optimizer.learning_rate, "Base learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", c.optimizer.weight_decay, "AdamW weight decay")->capture_default_str();
  cmd->add_option("--objective", f.objective, "isr, instance_discrimination, isr_no_rc, isr_no_queue, isr_focal")
      ->capture_default_str();
  cmd->add_option("--neg-mode", f.neg_mode, "most_similar or most_dissimilar")->capture_default_str();
  cmd->add_option("--modulation", f.modulation, "reliability_stopgrad, reliability_kept, focal or none")
      ->capture_default_str();
  cmd->add_option("--queue-cap", c.queue_capacity, "Memory queue capacity")->capture_default_str();
  cmd->add_option("--videos-per-super-frame", c.videos_per_super_frame, "Videos merged per step")
      ->capture_default_str();
  cmd->add_option("--frames-per-sample", c.frames_per_video, "Frames drawn per video per step")
      ->capture_default_str();
  cmd->add_option("--samples-per-video", c.samples_per_video_per_epoch, "Draws of each video per epoch")
      ->capture_default_str();
  cmd->add_option("--budget", c.super_frame_budget, "Crops per super-frame side")->capture_default_str();
  cmd->add_option("--hidden", c.encoder.hidden, "Hidden layer widths")->delimiter(',')->capture_default_str();
  cmd->add_option("--output-dim", c.encoder.output_dim, "Embedding dimension")->capture_default_str();
  cmd->add_option("--augmentation-sigma", c.augmentation_sigma,
                  "View noise for instance discrimination; negative uses the world sigma")
      ->capture_default_str();
  cmd->add_option("--training-videos", f.training_videos, "Use only the first N training videos (0 = all)")
      ->capture_default_str();
  cmd->add_option("--config", f.config_file, "Take the training config from a run manifest or JSON file");
}

TrainConfig resolve_train_config(const TrainFlags& f, std::uint64_t seed) {
  TrainConfig cfg = f.cfg;
  if (!f.config_file.empty()) {
    cfg = train_config_from_json(config_block(f.config_file, "train"));
    return cfg;
  }
  cfg.objective = parse_objective(f.objective);
  cfg.loss.negative_selection = parse_negative_selection(f.neg_mode);
  cfg.loss.modulation = parse_modulation(f.modulation);
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const WorldFlags& flags, std::uint64_t seed, bool seed_given, const fs::path& out,
                 std::ostream& os, const Logger& log) {
  WorldConfig cfg = flags.cfg;
  if (!flags.config_file.empty()) cfg = world_config_from_json(config_block(flags.config_file, "world"));
  if (flags.config_file.empty() || seed_given) cfg.seed = seed;
  cfg.validate();
  RunManifest manifest(out, "gen-data", {{"world", world_config_json(cfg)}}, cfg.seed);
  log.info("generating " + std::to_string(cfg.num_videos) + " training and " + std::to_string(cfg.eval_videos) +
           " held-out videos");
  const Dataset dataset = generate_world(cfg);
  save_dataset(dataset, out / "dataset");
  manifest.add_artifact("dataset_manifest", "dataset/manifest.json");
  manifest.add_artifact("observations", "dataset/observations.f32");
  manifest.finish("ok");
  os << "wrote " << dataset.crop_count() << " crops to " << (out / "dataset").string() << '\n';
  return kExitOk;
}

int cmd_train(const TrainFlags& flags, const fs::path& data, std::uint64_t seed, const fs::path& out,
              std::ostream& os, const Logger& log) {
  const TrainConfig cfg = resolve_train_config(flags, seed);
  const fs::path dir = resolve_dataset_dir(data);
  json config{{"train", train_config_json(cfg)}, {"dataset", dataset_identity(dir)}};
  int training_videos = flags.training_videos;
  if (!flags.config_file.empty()) {
    const json previous = load_json(flags.config_file);
    if (previous.contains("config")) training_videos = previous["config"].value("training_videos", 0);
  }
  if (training_videos > 0) config["training_videos"] = training_videos;
  RunManifest manifest(out, "train", config, cfg.seed);
  manifest.add_input("data", dir);

  const Dataset full = load_dataset(dir);
  const Dataset dataset = training_videos > 0 ? with_training_videos(full, training_videos) : full;
  Trainer trainer(dataset, cfg);
  log.info("training " + to_string(cfg.objective) + ": " + std::to_string(cfg.epochs) + " epochs x " +
           std::to_string(trainer.steps_per_epoch()) + " steps");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::size_t before = trainer.log().size();
    const bool ok = trainer.run_epoch();
    for (std::size_t i = before; i < trainer.log().size(); ++i) {
      const StepLog& s = trainer.log()[i];
      log.debug("step " + std::to_string(s.step) + " loss " + fixed(s.loss_total) + " precision " +
                fixed(s.mined_precision));
    }
    if (!ok) break;
    if (!trainer.log().empty()) {
      const StepLog& s = trainer.log().back();
      log.info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " loss " +
               fixed(s.loss_total) + " mean reliability " + fixed(s.mean_reliability) + " mined precision " +
               fixed(s.mined_precision));
    }
  }
  const bool aborted = trainer.aborted();
  const std::string reason = trainer.abort_reason();
  const std::size_t steps = trainer.log().size();
  TrainResult result = std::move(trainer).finish();

  save_checkpoint(out / "checkpoints" / "final", result.encoder, result.optimizer,
                  {{"objective", result.objective_tag}, {"config_hash", hex64(fnv1a64(config.dump()))}});
  write_step_log(out / "logs" / "steps.csv", result.log, false);
  {
    fs::create_directories(out / "logs");
    std::ofstream timing(out / "logs" / "timing.csv", std::ios::trunc);
    timing << "step,wall_ms\n";
    for (const auto& s : result.log) timing << s.step << ',' << fixed(s.wall_ms, 3) << '\n';
  }
  json summary{{"objective", result.objective_tag}, {"steps", steps}, {"aborted", aborted},
               {"abort_reason", reason},
               {"parameter_hash", hex64(parameter_hash(result.encoder.parameters()))}};
  if (!result.log.empty()) {
    summary["final_loss"] = result.log.back().loss_total;
    summary["final_mean_reliability"] = result.log.back().mean_reliability;
  }
  fs::create_directories(out / "reports");
  std::ofstream(out / "reports" / "train_summary.json", std::ios::trunc) << summary.dump(2) << '\n';

  manifest.add_artifact("checkpoint_metadata", "checkpoints/final.json");
  manifest.add_artifact("checkpoint_parameters", "checkpoints/final.bin");
  manifest.add_artifact("step_log", "logs/steps.csv");
  manifest.add_artifact("train_summary", "reports/train_summary.json");
  manifest.finish(aborted ? "aborted" : "ok");
  if (aborted) throw CommandError(kExitRuntimeAbort, "training aborted: " + reason);
  os << "trained " << steps << " steps; checkpoint " << (out / "checkpoints" / "final").string() << '\n';
  return kExitOk;
}

fs::path checkpoint_stem(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".bin") return fs::path(path).replace_extension();
  if (fs::is_directory(path) && fs::exists(path / "checkpoints" / "final.json")) return path / "checkpoints" / "final";
  return path;
}

int cmd_eval(const fs::path& data, const fs::path& checkpoint, std::uint64_t split_seed, bool export_embeddings_flag,
             const fs::path& out, std::ostream& os, const Logger& log) {
  const fs::path dir = resolve_dataset_dir(data);
  const fs::path stem = checkpoint_stem(checkpoint);
  if (!fs::exists(fs::path(stem.string() + ".json"))) throw CommandError(kExitIo, "no checkpoint at " + stem.string());
  json config{{"eval",
               {{"checkpoint_fnv1a64", file_hash(stem.string() + ".bin")},
                {"split_seed", split_seed},
                {"export_embeddings", export_embeddings_flag}}},
              {"dataset", dataset_identity(dir)}};
  RunManifest manifest(out, "eval", config, split_seed);
  manifest.add_input("data", dir);
  manifest.add_input("checkpoint", stem);

  const Dataset dataset = load_dataset(dir);
  const Checkpoint ckpt = load_checkpoint(stem);
  if (ckpt.encoder.config().input_dim != dataset.config.obs_dim) {
    throw CommandError(kExitValidation, "checkpoint input_dim does not match the dataset obs_dim");
  }
  const RetrievalSplit split = make_retrieval_split(dataset, split_seed);
  log.info("evaluating " + std::to_string(split.queries.size()) + " queries against " +
           std::to_string(split.gallery.size()) + " gallery crops");
  const EvalReport report = evaluate(ckpt.encoder, split);
  json j = eval_report_json(report);
  j["chance_rank_1"] = chance_rank1(split);
  fs::create_directories(out / "reports");
  std::ofstream(out / "reports" / "eval.json", std::ios::trunc) << j.dump(2) << '\n';
  std::ofstream(out / "reports" / "eval.csv", std::ios::trunc)
      << eval_report_csv_header() << '\n'
      << eval_report_csv_row(report) << '\n';
  manifest.add_artifact("eval_report", "reports/eval.json");
  manifest.add_artifact("eval_csv", "reports/eval.csv");
  if (export_embeddings_flag) {
    std::vector<const CropRecord*> crops = split.queries;
    crops.insert(crops.end(), split.gallery.begin(), split.gallery.end());
    export_embeddings(out / "reports" / "embeddings.csv", ckpt.encoder, crops);
    manifest.add_artifact("embeddings", "reports/embeddings.csv");
  }
  manifest.finish("ok");
  os << "rank_1 " << fixed(report.rank_1) << "  rank_5 " << fixed(report.rank_5) << "  rank_10 "
     << fixed(report.rank_10) << "  mAP " << fixed(report.mean_ap) << "  (chance rank_1 "
     << fixed(chance_rank1(split)) << ", " << report.num_queries << " queries, " << report.excluded_queries
     << " excluded)\n";
  return kExitOk;
}

int cmd_verify(std::vector<std::string> suites, int instances, std::uint64_t seed, const std::string& out,
               std::ostream& os) {
  if (suites.empty()) suites = verify_suite_names();
  for (const auto& s : suites) {
    const auto names = verify_suite_names();
    if (std::find(names.begin(), names.end(), s) == names.end()) {
      throw CommandError(kExitValidation, "--suite: unknown suite '" + s + "'");
    }
  }
  std::optional<RunManifest> manifest;
  VerifyOptions options;
  options.instances = instances;
  options.seed = seed;
  if (!out.empty()) {
    manifest.emplace(out, "verify", json{{"verify", {{"suites", suites}, {"instances", instances}}}}, seed);
    options.curves_csv = fs::path(out) / "reports" / "curves.csv";
  }
  bool all = true;
  std::ostringstream table;
  table << "suite,passed,cases,failures,worst_error,tolerance,seconds\n";
  for (const auto& name : suites) {
    const SuiteResult r = run_verify_suite(name, options);
    all = all && r.passed;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-10s %s  %6d checks  worst %.3g (tol %.0e)  %.2f s", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.cases, r.worst_error, r.tolerance, r.seconds);
    os << buf << '\n';
    if (!r.passed) os << "  first failure: " << r.detail << '\n';
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6g,%.6g,%.3f\n", r.name.c_str(), r.passed ? 1 : 0, r.cases,
                  r.failures, r.worst_error, r.tolerance, r.seconds);
    table << buf;
  }
  if (manifest) {
    fs::create_directories(fs::path(out) / "reports");
    std::ofstream(fs::path(out) / "reports" / "verify.csv", std::ios::trunc) << table.str();
    manifest->add_artifact("verify_table", "reports/verify.csv");
    if (std::find(suites.begin(), suites.end(), "curves") != suites.end()) {
      manifest->add_artifact("curves", "reports/curves.csv");
    }
    manifest->finish(all ? "ok" : "failed");
  }
  return all ? kExitOk : kExitVerificationFailed;
}

std::vector<ArmSpec> study_arms(const std::string& study, const TrainConfig& base, const std::vector<double>& values) {
  auto or_default = [&](std::vector<double> fallback) { return values.empty() ? fallback : values; };
  if (study == "components") return component_arms(base);
  if (study == "focal") return focal_arms(base);
  if (study == "delta") return delta_sweep(base, or_default({0.5, 1.0, 2.0, 4.0, 8.0}));
  if (study == "gamma") return gamma_sweep(base, or_default({0, 2, 4, 6, 8}));
  if (study == "lambda") return lambda_sweep(base, or_default({0, 1, 3, 5, 7, 9}));
  if (study == "data") {
    std::vector<int> counts;
    for (double v : or_default({12, 25, 50, 100})) {
      if (v < 1 || v != std::floor(v)) throw CommandError(kExitValidation, "--values: video counts must be positive integers");
      counts.push_back(static_cast<int>(v));
    }
    return data_sweep(base, counts);
  }
  throw CommandError(kExitValidation, "--study: unknown study '" + study + "'");
}

int cmd_ablate(const TrainFlags& flags, const fs::path& data, const std::string& study,
               const std::vector<double>& values, const std::vector<std::uint64_t>& seeds, std::uint64_t split_seed,
               const fs::path& out, std::ostream& os, const Logger& log) {
  if (seeds.size() < 3) throw CommandError(kExitValidation, "--seeds: at least 3 seeds are required");
  const TrainConfig base = resolve_train_config(flags, 0);
  std::vector<ArmSpec> arms = study_arms(study, base, values);
  for (auto& arm : arms) {
    if (arm.training_videos == 0) arm.training_videos = flags.training_videos;
  }
  const fs::path dir = resolve_dataset_dir(data);
  json arm_configs = json::array();
  for (const auto& arm : arms) {
    arm_configs.push_back({{"name", arm.name}, {"train", train_config_json(arm.config)},
                           {"training_videos", arm.training_videos}});
  }
  RunManifest manifest(out,
                       "ablate",
                       {{"study", study}, {"arms", arm_configs}, {"seeds", seeds}, {"split_seed", split_seed},
                        {"dataset", dataset_identity(dir)}},
                       seeds.front());
  manifest.add_input("data", dir);
  const Dataset dataset = load_dataset(dir);
  std::vector<ArmRun> runs;
  bool any_aborted = false;
  for (const auto& arm : arms) {
    for (std::uint64_t seed : seeds) {
      const auto start = std::chrono::steady_clock::now();
      ArmRun run = run_arm(dataset, arm, seed, split_seed);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log.info(arm.name + " seed " + std::to_string(seed) + ": rank_1 " + fixed(run.report.rank_1) + " mAP " +
               fixed(run.report.mean_ap) + (run.aborted ? " (aborted)" : "") + " [" + fixed(seconds, 1) + " s]");
      any_aborted = any_aborted || run.aborted;
      runs.push_back(std::move(run));
    }
  }
  const auto summaries = summarize(arms, runs);
  write_runs_csv(out / "reports" / "ablation_runs.csv", runs);
  write_summary_csv(out / "reports" / "ablation_summary.csv", summaries);
  manifest.add_artifact("runs", "reports/ablation_runs.csv");
  manifest.add_artifact("summary", "reports/ablation_summary.csv");
  manifest.finish(any_aborted ? "aborted" : "ok");
  for (const auto& s : summaries) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-24s rank_1 %.4f +- %.4f   mAP %.4f +- %.4f   (%d runs)", s.arm.c_str(),
                  s.rank_1_mean, s.rank_1_std, s.map_mean, s.map_std, s.runs);
    os << buf << '\n';
  }
  if (any_aborted) throw CommandError(kExitRuntimeAbort, "at least one run aborted; see ablation_runs.csv");
  return kExitOk;
}

}  // namespace

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError(kExitIo, "cannot read " + path.string());
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    hash = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), hash);
  }
  return hex64(hash);
}

json read_run_manifest(const fs::path& out_dir) { return load_json(out_dir / kManifestName); }

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Identity-seeking self-supervised representation learning on synthetic video"};
  app.name("isr");
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out_dir;
  std::string data_dir;

  WorldFlags world;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic video dataset");
  gen->add_option("--seed", seed, "World seed")->capture_default_str();
  gen->add_option("--out", out_dir, "Output directory")->required();
  add_world_flags(gen, world);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train an encoder");
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--seed", seed, "Training seed")->capture_default_str();
  add_train_flags(train_cmd, train_flags);

  std::string checkpoint;
  bool export_flag = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint stem, file, or train output directory")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();
  eval_cmd->add_option("--seed", seed, "Split seed")->capture_default_str();
  eval_cmd->add_flag("--export-embeddings", export_flag, "Also write reports/embeddings.csv");

  std::vector<std::string> suites;
  int instances = 0;
  auto* verify_cmd = app.add_subcommand("verify", "Run the property suites");
  verify_cmd->add_option("--suite", suites, "matching, gradients, curves, queue, metrics (default: all)")->delimiter(',');
  verify_cmd->add_option("--instances", instances, "Instances per suite (0 = suite default)")->capture_default_str();
  verify_cmd->add_option("--seed", seed, "Suite seed")->capture_default_str();
  verify_cmd->add_option("--out", out_dir, "Optional output directory for reports and the curve CSV");

  TrainFlags ablate_flags;
  std::string study = "components";
  std::vector<double> values;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t split_seed = 0;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare ablation arms over several seeds");
  ablate_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  ablate_cmd->add_option("--out", out_dir, "Output directory")->required();
  ablate_cmd->add_option("--study", study, "components, focal, delta, gamma, lambda or data")->capture_default_str();
  ablate_cmd->add_option("--values", values, "Sweep values (defaults per study)")->delimiter(',');
  ablate_cmd->add_option("--seeds", seeds, "Training seeds (at least 3)")->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--split-seed", split_seed, "Held-out split seed")->capture_default_str();
  add_train_flags(ablate_cmd, ablate_flags);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  const Logger log(err);
  try {
    if (*gen) return cmd_gen_data(world, seed, gen->count("--seed") > 0, out_dir, out, log);
    if (*train_cmd) return cmd_train(train_flags, data_dir, seed, out_dir, out, log);
    if (*eval_cmd) return cmd_eval(data_dir, checkpoint, seed, export_flag, out_dir, out, log);
    if (*verify_cmd) return cmd_verify(suites, instances, seed, out_dir, out);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, data_dir, study, values, seeds, split_seed, out_dir, out, log);
  } catch (const CommandError& e) {
    err << "error: " << e.what() << '\n';
    return e.code;
  } catch (const InvalidConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const json::exception& e) {
    err << "error: malformed config: " << e.what() << '\n';
    return kExitValidation;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace isr::cli
