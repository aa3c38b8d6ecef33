#include "isr/eval.hpp"

#include "isr/matching.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace isr {

using json = nlohmann::json;

std::vector<int> RetrievalSplit::query_identities() const {
  std::vector<int> out;
  for (const auto* c : queries) out.push_back(c->true_identity);
  return out;
}

std::vector<int> RetrievalSplit::gallery_identities() const {
  std::vector<int> out;
  for (const auto* c : gallery) out.push_back(c->true_identity);
  return out;
}

namespace {

// One crop per identity seen in the video, from a random frame it appears in.
std::vector<const CropRecord*> one_crop_per_identity(const Video& video, Rng& rng) {
  std::map<int, std::vector<const CropRecord*>> by_identity;
  for (const auto& frame : video.frames) {
    for (const auto& crop : frame.crops) by_identity[crop.true_identity].push_back(&crop);
  }
  std::vector<const CropRecord*> out;
  for (const auto& [identity, crops] : by_identity) {
    out.push_back(crops[static_cast<std::size_t>(rng.uniform_index(crops.size()))]);
  }
  return out;
}

}  // namespace

RetrievalSplit make_retrieval_split(const std::vector<const Video*>& videos, std::uint64_t seed) {
  if (videos.size() < 2) throw InvalidConfigError("retrieval split: need at least 2 videos");
  Rng rng(derive_seed(seed, "eval/split"));
  RetrievalSplit split;
  const std::size_t half = videos.size() / 2;
  std::vector<const CropRecord*> candidates;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    auto crops = one_crop_per_identity(*videos[v], rng);
    auto& side = v < half ? candidates : split.gallery;
    side.insert(side.end(), crops.begin(), crops.end());
  }
  std::set<int> gallery_ids;
  for (const auto* c : split.gallery) gallery_ids.insert(c->true_identity);
  for (const auto* c : candidates) {
    if (gallery_ids.count(c->true_identity)) {
      split.queries.push_back(c);
    } else {
      ++split.excluded_queries;
    }
  }
  return split;
}

RetrievalSplit make_retrieval_split(const Dataset& dataset, std::uint64_t seed) {
  return make_retrieval_split(dataset.held_out_videos(), seed);
}

double chance_rank1(const RetrievalSplit& split) {
  if (split.queries.empty() || split.gallery.empty()) return 0.0;
  std::map<int, int> counts;
  for (const auto* c : split.gallery) ++counts[c->true_identity];
  double total = 0.0;
  for (const auto* q : split.queries) {
    total += static_cast<double>(counts[q->true_identity]) / static_cast<double>(split.gallery.size());
  }
  return total / static_cast<double>(split.queries.size());
}

double average_precision(const std::vector<bool>& ranked_relevance) {
  int hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
    if (ranked_relevance[r]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return hits > 0 ? sum / hits : 0.0;
}

EvalReport evaluate_embeddings(const Matrix& queries, const std::vector<int>& query_ids, const Matrix& gallery,
                               const std::vector<int>& gallery_ids) {
  if (queries.cols() != static_cast<Eigen::Index>(query_ids.size()) ||
      gallery.cols() != static_cast<Eigen::Index>(gallery_ids.size())) {
    throw DimensionMismatchError("evaluate: label count does not match embedding count");
  }
  if (queries.cols() > 0 && gallery.cols() > 0 && queries.rows() != gallery.rows()) {
    throw DimensionMismatchError("evaluate: query and gallery dimensions differ");
  }
  EvalReport report;
  const Matrix sims = gallery.transpose() * queries;  // gallery x queries
  std::vector<int> order(static_cast<std::size_t>(gallery.cols()));
  int hit1 = 0;
  int hit5 = 0;
  int hit10 = 0;
  for (Eigen::Index q = 0; q < queries.cols(); ++q) {
    const int identity = query_ids[static_cast<std::size_t>(q)];
    if (std::find(gallery_ids.begin(), gallery_ids.end(), identity) == gallery_ids.end()) {
      ++report.excluded_queries;
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sims(a, q) > sims(b, q); });
    std::vector<bool> relevant(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
      relevant[r] = gallery_ids[static_cast<std::size_t>(order[r])] == identity;
    }
    const auto first = static_cast<std::size_t>(std::find(relevant.begin(), relevant.end(), true) - relevant.begin());
    hit1 += first < 1;
    hit5 += first < 5;
    hit10 += first < 10;
    report.average_precision.push_back(average_precision(relevant));
  }
  report.num_queries = static_cast<int>(report.average_precision.size());
  if (report.num_queries > 0) {
    const double n = report.num_queries;
    report.rank_1 = hit1 / n;
    report.rank_5 = hit5 / n;
    report.rank_10 = hit10 / n;
    report.mean_ap = std::accumulate(report.average_precision.begin(), report.average_precision.end(), 0.0) / n;
  }
  return report;
}

EvalReport evaluate(const Encoder& encoder, const RetrievalSplit& split) {
  if (split.queries.empty() || split.gallery.empty()) throw InvalidConfigError("evaluate: empty split");
  const FeatureMatrix q = encoder.forward(observation_matrix(split.queries));
  const FeatureMatrix g = encoder.forward(observation_matrix(split.gallery));
  EvalReport report = evaluate_embeddings(q.matrix(), split.query_identities(), g.matrix(), split.gallery_identities());
  report.excluded_queries += split.excluded_queries;
  return report;
}

json eval_report_json(const EvalReport& r) {
  return json{{"rank_1", r.rank_1},
              {"rank_5", r.rank_5},
              {"rank_10", r.rank_10},
              {"mAP", r.mean_ap},
              {"num_queries", r.num_queries},
              {"excluded_queries", r.excluded_queries},
              {"average_precision", r.average_precision}};
}

std::string eval_report_csv_header() { return "rank_1,rank_5,rank_10,mAP,num_queries,excluded_queries"; }

std::string eval_report_csv_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%d,%d", r.rank_1, r.rank_5, r.rank_10, r.mean_ap,
                r.num_queries, r.excluded_queries);
  return buf;
}

std::optional<double> mining_precision(const Encoder& encoder, const std::vector<FramePair>& pairs) {
  int mined = 0;
  int correct = 0;
  for (const auto& [a, b] : pairs) {
    if (a->crops.empty() || b->crops.empty()) continue;
    std::vector<const CropRecord*> xa;
    std::vector<const CropRecord*> xb;
    for (const auto& c : a->crops) xa.push_back(&c);
    for (const auto& c : b->crops) xb.push_back(&c);
    const auto result =
        mine_positive_pairs(encoder.forward(observation_matrix(xa)), encoder.forward(observation_matrix(xb)));
    if (!result) continue;
    const auto& rows = result->swapped ? xb : xa;
    const auto& cols = result->swapped ? xa : xb;
    for (int r = 0; r < result->pi.rows(); ++r) {
      ++mined;
      const auto* match = cols[static_cast<std::size_t>(result->pi.matched_column(r))];
      correct += rows[static_cast<std::size_t>(r)]->true_identity == match->true_identity;
    }
  }
  if (mined == 0) return std::nullopt;
  return static_cast<double>(correct) / mined;
}

std::vector<FramePair> sample_mining_pairs(const std::vector<const Video*>& videos, double delta_max_seconds,
                                           Rng& rng) {
  std::vector<FramePair> out;
  for (const auto* video : videos) {
    const auto pair = sample_frame_pair(*video, delta_max_seconds, rng);
    if (!pair) continue;
    out.emplace_back(&video->frames[static_cast<std::size_t>(pair->first)],
                     &video->frames[static_cast<std::size_t>(pair->second)]);
  }
  return out;
}

void export_embeddings(const std::filesystem::path& path, const Encoder& encoder,
                       const std::vector<const CropRecord*>& crops) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("export_embeddings: cannot open " + path.string());
  const int d = encoder.config().output_dim;
  out << "id,video_id";
  for (int k = 0; k < d; ++k) out << ",e" << k;
  out << '\n';
  if (crops.empty()) return;
  const FeatureMatrix emb = encoder.forward(observation_matrix(crops));
  char buf[32];
  for (std::size_t i = 0; i < crops.size(); ++i) {
    out << crops[i]->true_identity << ',' << crops[i]->video_id;
    for (int k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, ",%.17g", emb.matrix()(k, static_cast<Eigen::Index>(i)));
      out << buf;
    }
    out << '\n';
  }
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_embeddings: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("read_embeddings: missing header");
  const auto d = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',')) - 1;
  EmbeddingTable table;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    table.identities.push_back(std::stoi(cell));
    std::getline(ss, cell, ',');
    table.video_ids.push_back(std::stoi(cell));
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) values.push_back(std::strtod(cell.c_str(), nullptr));
    if (static_cast<Eigen::Index>(values.size()) != d) throw Error("read_embeddings: ragged row");
    rows.push_back(std::move(values));
  }
  table.embeddings.resize(d, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) table.embeddings(k, static_cast<Eigen::Index>(i)) = rows[i][static_cast<std::size_t>(k)];
  }
  return table;
}

}  // namespace isr
