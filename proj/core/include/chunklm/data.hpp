#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Byte-level token stream; every token is in [0, 256).
struct TokenSeq {
  std::vector<int> tokens;
  std::string origin;
};

constexpr int kVocab = 256;
constexpr int kIgnoreTarget = 65535;
constexpr int kKeyMarker = 0x01;
constexpr int kQueryMarker = 0x02;

TokenSeq tokenize_bytes(const std::string& text, std::string origin = "");
std::string detokenize(const TokenSeq& seq);

// Contiguous, non-overlapping chunk layout: all chunks length c except
// possibly the last; chunk_count == ceil(n / c).
struct ChunkPlan {
  std::int64_t n = 0;
  int c = 0;
  std::int64_t chunk_count = 0;
  struct Piece {
    std::int64_t offset;
    int length;
  };
  std::vector<Piece> pieces;
};

ChunkPlan split_chunks(std::int64_t n, int c);

// One long-range-recall sample: [KEY marker, key, filler(gap), QUERY marker,
// key again]. answer_offset/answer_len point at the trailing key copy which
// is the supervised continuation.
struct RecallSample {
  TokenSeq seq;
  std::int64_t answer_offset = 0;
  int answer_len = 0;
};

std::vector<RecallSample> make_recall_corpus(std::uint64_t seed, int key_len, int gap,
                                             int n_samples);

// ---------------------------------------------------------------------------
// Batching. Targets are the inputs shifted left by one across the whole
// sequence (the target for the last position of chunk m is the first token
// of chunk m+1); positions without a target carry kIgnoreTarget.
// ---------------------------------------------------------------------------
struct ChunkBatch {
  std::vector<int> inputs;   // B*c token ids, padded rows use token 0
  std::vector<int> targets;  // B*c, kIgnoreTarget where masked
  int batch = 0;
  int chunk = 0;
  bool first_chunk = false;  // start of a new group of sequences
};

class Batcher {
 public:
  // Groups sequences in corpus order, batch at a time. Every sequence must
  // have length >= 2; throws ConfigError if batch > corpus size.
  Batcher(const std::vector<TokenSeq>& corpus, int batch, int chunk);

  // Next chunk batch, or false when the stream is exhausted.
  bool next(ChunkBatch& out);
  void reset();

  int group_count() const { return static_cast<int>(corpus_->size()) / batch_; }

 private:
  const std::vector<TokenSeq>* corpus_;
  int batch_;
  int chunk_;
  std::int64_t group_ = 0;
  std::int64_t chunk_index_ = 0;
  std::int64_t group_chunks_ = 0;
};

// Raw-bytes corpus: the whole file as one sequence.
TokenSeq load_raw_corpus(const std::string& path);

// Synthetic corpus export: one hex-encoded sample per line plus a sidecar
// "<path>.manifest" recording seed/key_len/gap.
void save_recall_corpus(const std::vector<RecallSample>& corpus, const std::string& path,
                        std::uint64_t seed, int key_len, int gap);
std::vector<RecallSample> load_recall_corpus(const std::string& path);

}  // namespace chunklm
