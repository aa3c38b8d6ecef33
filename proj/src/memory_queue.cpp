#include "isr/memory_queue.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace isr {

NegativeQueue::NegativeQueue(int capacity, int dim)
    : capacity_(capacity),
      dim_(dim),
      storage_(Matrix::Zero(dim, capacity)),
      videos_(static_cast<std::size_t>(capacity), 0),
      indices_(static_cast<std::size_t>(capacity), 0) {
  if (capacity < 1) throw InvalidConfigError("queue capacity: must be >= 1");
  if (dim < 1) throw InvalidConfigError("queue dimension: must be >= 1");
}

int NegativeQueue::slot(int age) const { return (head_ + age) % capacity_; }

int NegativeQueue::enqueue(const std::vector<QueueEntry>& batch) {
  Matrix embeddings(dim_, static_cast<Eigen::Index>(batch.size()));
  std::vector<int> videos;
  videos.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].embedding.size() != dim_) throw DimensionMismatchError("enqueue: embedding dimension differs");
    embeddings.col(static_cast<Eigen::Index>(i)) = batch[i].embedding;
    videos.push_back(batch[i].video_id);
  }
  return enqueue(embeddings, videos);
}

int NegativeQueue::enqueue(const Matrix& embeddings, const std::vector<int>& video_ids) {
  if (embeddings.rows() != dim_ && embeddings.cols() > 0) {
    throw DimensionMismatchError("enqueue: embedding dimension differs");
  }
  if (static_cast<std::size_t>(embeddings.cols()) != video_ids.size()) {
    throw DimensionMismatchError("enqueue: one video id per embedding required");
  }
  int evicted = 0;
  for (Eigen::Index i = 0; i < embeddings.cols(); ++i) {
    if (std::abs(embeddings.col(i).norm() - 1.0) > kUnitNormTolerance) {
      throw DegenerateVectorError("enqueue: entries must be unit norm");
    }
    int target;
    if (size_ < capacity_) {
      target = slot(size_);
      ++size_;
    } else {
      target = head_;
      head_ = (head_ + 1) % capacity_;
      ++evicted;
    }
    storage_.col(target) = embeddings.col(i);
    videos_[static_cast<std::size_t>(target)] = video_ids[static_cast<std::size_t>(i)];
    indices_[static_cast<std::size_t>(target)] = next_index_++;
  }
  return evicted;
}

std::vector<QueueEntry> NegativeQueue::entries() const {
  std::vector<QueueEntry> out;
  out.reserve(static_cast<std::size_t>(size_));
  for (int age = 0; age < size_; ++age) {
    const int s = slot(age);
    out.push_back({storage_.col(s), videos_[static_cast<std::size_t>(s)], indices_[static_cast<std::size_t>(s)]});
  }
  return out;
}

NegativeSelectionResult NegativeQueue::select_from_scores(const Vector& scores, int anchor_video, int k,
                                                          NegativeSelection mode) const {
  if (k < 1) throw InvalidConfigError("select_negatives: k must be >= 1");
  struct Candidate {
    double key;  // ascending key is preferred
    std::uint64_t index;
    int slot;
  };
  const bool most_similar = mode == NegativeSelection::most_similar;
  std::vector<Candidate> eligible;
  eligible.reserve(static_cast<std::size_t>(size_));
  for (int age = 0; age < size_; ++age) {
    const int s = slot(age);
    if (videos_[static_cast<std::size_t>(s)] == anchor_video) continue;
    eligible.push_back({most_similar ? -scores(s) : scores(s), indices_[static_cast<std::size_t>(s)], s});
  }
  auto before = [](const Candidate& a, const Candidate& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.index < b.index;
  };
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), eligible.size());
  std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take), eligible.end(), before);

  NegativeSelectionResult result;
  result.shortfall = take < static_cast<std::size_t>(k);
  result.negatives.resize(dim_, static_cast<Eigen::Index>(take));
  for (std::size_t i = 0; i < take; ++i) {
    result.negatives.col(static_cast<Eigen::Index>(i)) = storage_.col(eligible[i].slot);
    result.insertion_indices.push_back(eligible[i].index);
  }
  return result;
}

NegativeSelectionResult NegativeQueue::select_negatives(const Vector& anchor, int anchor_video, int k,
                                                        NegativeSelection mode) const {
  if (anchor.size() != dim_) throw DimensionMismatchError("select_negatives: anchor dimension differs");
  const Vector scores = storage_.leftCols(capacity_).transpose() * anchor;
  return select_from_scores(scores, anchor_video, k, mode);
}

std::vector<NegativeSelectionResult> NegativeQueue::select_negatives(const Matrix& anchors,
                                                                     const std::vector<int>& anchor_videos, int k,
                                                                     NegativeSelection mode) const {
  if (anchors.cols() > 0 && anchors.rows() != dim_) {
    throw DimensionMismatchError("select_negatives: anchor dimension differs");
  }
  if (static_cast<std::size_t>(anchors.cols()) != anchor_videos.size()) {
    throw DimensionMismatchError("select_negatives: one video id per anchor required");
  }
  std::vector<NegativeSelectionResult> out;
  out.reserve(anchor_videos.size());
  if (anchors.cols() == 0) return out;
  const Matrix scores = storage_.transpose() * anchors;  // capacity x anchors
  for (Eigen::Index i = 0; i < anchors.cols(); ++i) {
    out.push_back(select_from_scores(scores.col(i), anchor_videos[static_cast<std::size_t>(i)], k, mode));
  }
  return out;
}

}  // namespace isr
