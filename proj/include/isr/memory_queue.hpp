#pragma once

// FIFO queue of detached embeddings used as cross-video negatives.

#include "isr/core.hpp"

#include <cstdint>
#include <vector>

namespace isr {

struct QueueEntry {
  Vector embedding;
  int video_id = 0;
  std::uint64_t insertion_index = 0;  // assigned by the queue on enqueue
};

struct NegativeSelectionResult {
  Matrix negatives;                     // d x count, ordered by rank
  std::vector<std::uint64_t> insertion_indices;
  bool shortfall = false;               // fewer than k eligible entries
};

class NegativeQueue {
 public:
  NegativeQueue(int capacity, int dim);

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int size() const { return size_; }
  bool empty() const { return size_ == 0; }

  /// Appends entries in order and evicts the oldest beyond capacity.
  /// Returns the number of evicted entries.
  int enqueue(const std::vector<QueueEntry>& batch);
  int enqueue(const Matrix& embeddings, const std::vector<int>& video_ids);

  /// Entries in insertion order (oldest first).
  std::vector<QueueEntry> entries() const;

  /// The k eligible entries (video id differs from the anchor's) with the lowest
  /// (most_dissimilar) or highest (most_similar) dot product with the anchor.
  /// Ties resolve toward the older entry.
  NegativeSelectionResult select_negatives(const Vector& anchor, int anchor_video, int k,
                                           NegativeSelection mode) const;

  /// Batched selection for the columns of `anchors`.
  std::vector<NegativeSelectionResult> select_negatives(const Matrix& anchors, const std::vector<int>& anchor_videos,
                                                        int k, NegativeSelection mode) const;

  std::uint64_t next_insertion_index() const { return next_index_; }

 private:
  int slot(int age) const;  // age 0 = oldest
  NegativeSelectionResult select_from_scores(const Vector& scores, int anchor_video, int k,
                                             NegativeSelection mode) const;

  int capacity_;
  int dim_;
  int size_ = 0;
  int head_ = 0;  // slot of the oldest entry
  std::uint64_t next_index_ = 0;
  Matrix storage_;  // dim x capacity ring buffer
  std::vector<int> videos_;
  std::vector<std::uint64_t> indices_;
};

}  // namespace isr
