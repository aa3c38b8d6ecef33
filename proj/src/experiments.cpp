#include "isr/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace isr {

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

ArmSpec make_arm(std::string name, TrainConfig cfg, double gamma, double lambda) {
  cfg.loss.gamma = gamma;
  cfg.loss.lambda = lambda;
  return {std::move(name), std::move(cfg), 0};
}

}  // namespace

std::vector<ArmSpec> component_arms(const TrainConfig& base) {
  TrainConfig id = base;
  id.objective = Objective::instance_discrimination;
  TrainConfig isr = base;
  isr.objective = Objective::isr;
  return {{"instance_discrimination", id, 0},
          make_arm("cp_only", isr, 0.0, 0.0),
          make_arm("cp+rc", isr, base.loss.gamma, 0.0),
          make_arm("cp+q", isr, 0.0, base.loss.lambda),
          make_arm("cp+rc+q", isr, base.loss.gamma, base.loss.lambda)};
}

std::vector<ArmSpec> focal_arms(const TrainConfig& base) {
  TrainConfig rc = base;
  rc.objective = Objective::isr;
  rc.loss.lambda = 0.0;
  TrainConfig focal = rc;
  focal.objective = Objective::isr_focal;
  return {{"cp+rc", rc, 0}, {"cp+focal", focal, 0}};
}

std::vector<ArmSpec> delta_sweep(const TrainConfig& base, const std::vector<double>& deltas) {
  std::vector<ArmSpec> arms;
  for (double d : deltas) {
    TrainConfig c = base;
    c.delta_max_seconds = d;
    arms.push_back({"delta_max=" + format_number(d), c, 0});
  }
  return arms;
}

std::vector<ArmSpec> gamma_sweep(const TrainConfig& base, const std::vector<double>& gammas) {
  std::vector<ArmSpec> arms;
  for (double g : gammas) {
    TrainConfig c = base;
    c.loss.gamma = g;
    arms.push_back({"gamma=" + format_number(g), c, 0});
  }
  return arms;
}

std::vector<ArmSpec> lambda_sweep(const TrainConfig& base, const std::vector<double>& lambdas) {
  std::vector<ArmSpec> arms;
  for (double l : lambdas) {
    TrainConfig c = base;
    c.loss.lambda = l;
    arms.push_back({"lambda=" + format_number(l), c, 0});
  }
  return arms;
}

std::vector<ArmSpec> data_sweep(const TrainConfig& base, const std::vector<int>& video_counts) {
  std::vector<ArmSpec> arms;
  for (int n : video_counts) arms.push_back({"videos=" + std::to_string(n), base, n});
  return arms;
}

ArmRun run_arm(const Dataset& dataset, const ArmSpec& arm, std::uint64_t seed, std::uint64_t split_seed) {
  TrainConfig cfg = arm.config;
  cfg.seed = seed;
  const Dataset subset = arm.training_videos > 0 ? with_training_videos(dataset, arm.training_videos) : dataset;
  const TrainResult result = train(subset, cfg);
  ArmRun run;
  run.arm = arm.name;
  run.seed = seed;
  run.aborted = result.aborted;
  run.abort_reason = result.abort_reason;
  if (!result.log.empty()) run.final_loss = result.log.back().loss_total;
  run.report = evaluate(result.encoder, make_retrieval_split(dataset, split_seed));
  return run;
}

std::vector<ArmSummary> summarize(const std::vector<ArmSpec>& arms, const std::vector<ArmRun>& runs) {
  std::vector<ArmSummary> out;
  for (const auto& arm : arms) {
    std::vector<double> r1;
    std::vector<double> map;
    for (const auto& run : runs) {
      if (run.arm != arm.name) continue;
      r1.push_back(run.report.rank_1);
      map.push_back(run.report.mean_ap);
    }
    ArmSummary s;
    s.arm = arm.name;
    s.runs = static_cast<int>(r1.size());
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      if (v.empty()) return;
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    stats(r1, s.rank_1_mean, s.rank_1_std);
    stats(map, s.map_mean, s.map_std);
    out.push_back(s);
  }
  return out;
}

void write_runs_csv(const std::filesystem::path& path, const std::vector<ArmRun>& runs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_runs_csv: cannot open " + path.string());
  out << "arm,seed,aborted," << eval_report_csv_header() << '\n';
  for (const auto& r : runs) {
    out << r.arm << ',' << r.seed << ',' << (r.aborted ? 1 : 0) << ',' << eval_report_csv_row(r.report) << '\n';
  }
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<ArmSummary>& summaries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_summary_csv: cannot open " + path.string());
  out << "arm,runs,rank_1_mean,rank_1_std,mAP_mean,mAP_std\n";
  char buf[256];
  for (const auto& s : summaries) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%.6f,%.6f", s.arm.c_str(), s.runs, s.rank_1_mean, s.rank_1_std,
                  s.map_mean, s.map_std);
    out << buf << '\n';
  }
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidConfigError("spearman: need two equal-length samples");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace isr
