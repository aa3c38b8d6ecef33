#pragma once

// Retrieval evaluation on held-out videos: CMC rank-k, mAP, pair-mining
// precision against hidden identities, and embedding export.

#include "isr/core.hpp"
#include "isr/encoder.hpp"
#include "isr/synthetic_data.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace isr {

struct RetrievalSplit {
  std::vector<const CropRecord*> queries;
  std::vector<const CropRecord*> gallery;
  int excluded_queries = 0;  // identity never shows up in the gallery

  std::vector<int> query_identities() const;
  std::vector<int> gallery_identities() const;
};

/// Query videos are the first half of `videos`, gallery videos the second
/// half. Each side keeps one crop per (video, identity), taken from a random
/// frame of that identity.
RetrievalSplit make_retrieval_split(const std::vector<const Video*>& videos, std::uint64_t seed);
RetrievalSplit make_retrieval_split(const Dataset& dataset, std::uint64_t seed);

/// Expected rank-1 of a uniformly random ranking.
double chance_rank1(const RetrievalSplit& split);

struct EvalReport {
  double rank_1 = 0.0;
  double rank_5 = 0.0;
  double rank_10 = 0.0;
  double mean_ap = 0.0;
  std::vector<double> average_precision;  // per scored query
  int num_queries = 0;
  int excluded_queries = 0;
};

EvalReport evaluate(const Encoder& encoder, const RetrievalSplit& split);

/// Queries and gallery as unit columns. Ranking is by descending dot product,
/// ties to the lower gallery index. Queries with no correct gallery item are
/// skipped and counted.
EvalReport evaluate_embeddings(const Matrix& queries, const std::vector<int>& query_ids, const Matrix& gallery,
                               const std::vector<int>& gallery_ids);

/// Mean over correct positions r (1-based) of hits_in_top_r / r.
double average_precision(const std::vector<bool>& ranked_relevance);

nlohmann::json eval_report_json(const EvalReport& report);
std::string eval_report_csv_header();
std::string eval_report_csv_row(const EvalReport& report);

using FramePair = std::pair<const FrameSet*, const FrameSet*>;

/// Fraction of mined pairs (optimal matching on encoder features) whose hidden
/// identities agree. nullopt when nothing was mined.
std::optional<double> mining_precision(const Encoder& encoder, const std::vector<FramePair>& pairs);

/// One eligible frame pair per video, drawn with `rng`.
std::vector<FramePair> sample_mining_pairs(const std::vector<const Video*>& videos, double delta_max_seconds,
                                           Rng& rng);

struct EmbeddingTable {
  std::vector<int> identities;
  std::vector<int> video_ids;
  Matrix embeddings;  // d x n
};

/// CSV: `id,video_id,e0..e{d-1}`, one row per crop.
void export_embeddings(const std::filesystem::path& path, const Encoder& encoder,
                       const std::vector<const CropRecord*>& crops);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

}  // namespace isr
