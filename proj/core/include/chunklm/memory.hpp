#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/tape.hpp"
#include "chunklm/tensor.hpp"

namespace chunklm {

struct MemoryEntry {
  std::vector<double> key;    // length d_mem, stored L2-normalized by callers
  std::vector<double> value;  // length d_mem
  std::int64_t seq_id = 0;
  std::int64_t chunk_index = 0;
};

// Provenance predicate: an entry is admissible unless it belongs to seq_id
// and has chunk_index >= before_chunk (the anti-leak rule). A default filter
// admits everything.
struct ProvenanceFilter {
  bool enabled = false;
  std::int64_t seq_id = 0;
  std::int64_t before_chunk = 0;

  static ProvenanceFilter none() { return {}; }
  static ProvenanceFilter same_seq_before(std::int64_t seq, std::int64_t chunk) {
    return {true, seq, chunk};
  }
  bool admits(std::int64_t seq, std::int64_t chunk) const {
    return !enabled || !(seq == seq_id && chunk >= before_chunk);
  }
};

struct ApproxIndexConfig {
  int n_list = 64;
  int n_probe = 8;
  int rebuild_every = 1024;  // inserts between automatic index rebuilds
  int kmeans_iters = 10;
  std::uint64_t seed = 0x5eedULL;
};

// Bounded FIFO ring of chunk summaries with exact and IVF (k-means coarse
// quantizer) cosine top-k search. Key/value storage is preallocated at
// capacity so the live-float count is independent of fill level.
class MemoryStore {
 public:
  enum class Mode { kExact, kApprox };

  MemoryStore(int d_mem, int capacity, Mode mode = Mode::kExact,
              ApproxIndexConfig approx = {});

  void store(const MemoryEntry& entry);

  // Brute-force cosine over admissible entries, descending similarity,
  // ties broken by (seq_id, chunk_index) ascending.
  std::vector<MemoryEntry> query_exact(const std::vector<double>& q, int k,
                                       const ProvenanceFilter& filter) const;
  // IVF candidates (probed lists + unindexed tail) re-ranked exactly.
  std::vector<MemoryEntry> query_approx(const std::vector<double>& q, int k,
                                        const ProvenanceFilter& filter);
  // Dispatch by mode.
  std::vector<MemoryEntry> query(const std::vector<double>& q, int k,
                                 const ProvenanceFilter& filter);

  void rebuild_index();

  int dim() const { return d_; }
  int capacity() const { return capacity_; }
  int count() const { return count_; }
  Mode mode() const { return mode_; }
  const ApproxIndexConfig& approx_config() const { return approx_; }

  // Entry by age, 0 = oldest, at full double precision.
  MemoryEntry entry(int logical) const;

  // Snapshot: "<path>.manifest" (text) + "<path>.bin" (little-endian f32
  // keys/values + int32 provenance pairs). save(load(x)) is byte-identical.
  void save_snapshot(const std::string& path) const;
  static MemoryStore load_snapshot(const std::string& path);

 private:
  int slot_of(int logical) const { return (head_ + logical) % capacity_; }
  MemoryEntry entry_at_slot(int slot) const;
  std::vector<MemoryEntry> rank_slots(std::vector<int>& slots, const std::vector<double>& qn,
                                      int k, const ProvenanceFilter& filter) const;

  int d_;
  int capacity_;
  Mode mode_;
  ApproxIndexConfig approx_;

  CountedDoubles keys_;    // capacity x d, slot-major
  CountedDoubles values_;  // capacity x d
  std::vector<std::int64_t> seq_ids_;
  std::vector<std::int64_t> chunk_indices_;
  int head_ = 0;   // slot of the oldest entry
  int count_ = 0;

  // IVF state. Every live slot is in exactly one inverted list or in the
  // unindexed tail, so exhaustive probing covers the store exactly once.
  CountedDoubles centroids_;            // n_list x d (normalized)
  int built_lists_ = 0;
  std::vector<std::vector<int>> lists_;  // slot ids per centroid
  std::vector<int> slot_list_;           // list id per slot, -1 = tail
  std::vector<int> tail_;                // slots inserted since last rebuild
  int inserts_since_rebuild_ = 0;
};

// L2-normalize (returns zeros for a zero vector).
std::vector<double> normalized(const std::vector<double>& v);

// Mean of retrieved values as a [B x d_mem] tensor; rows with no retrieval
// stay zero. retrieved is per batch row.
Tensor mean_retrieved(const std::vector<std::vector<MemoryEntry>>& retrieved, int d_mem);

// Fusion gate c' = tanh(concat(c_m, rbar) W_fuse). rbar must be a constant
// (retrieved values carry no gradient).
Value fuse(Tape& tape, Value c_m, Value rbar_const, Value w_fuse);

}  // namespace chunklm
