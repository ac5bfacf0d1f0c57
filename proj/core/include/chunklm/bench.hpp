#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/model.hpp"

namespace chunklm {

// One scaling measurement. Peak floats come from the tensor layer's
// allocation counter, not OS statistics.
struct BenchRecord {
  std::string tag;  // "chunked" | "attention"
  std::int64_t n = 0;
  int c = 0;            // chunk size (0 for attention)
  int reps = 0;         // 0 marks a guard-refusal row
  double sec_per_token = 0.0;
  std::int64_t peak_floats = 0;
};

struct ScalingFit {
  double alpha = 0.0;  // exponent of t ~ n^alpha
  double r2 = 0.0;
  int points = 0;
};

struct BenchConfig {
  std::vector<std::int64_t> chunked_n{8192, 16384, 32768, 65536};
  std::vector<std::int64_t> attention_n{512, 1024, 2048, 4096};
  int reps = 3;
  int attn_d = 128;
  std::uint64_t seed = 42;
};

// Forward-only timing of the chunked model at each n (untrained params,
// random bytes, per-chunk tape lifetime). Median of reps.
std::vector<BenchRecord> bench_chunked(const ModelConfig& cfg, const std::vector<std::int64_t>& ns,
                                       int reps, std::uint64_t seed);

// Same for the attention baseline; n over the guard produces a refusal row
// (reps = 0) instead of a timing.
std::vector<BenchRecord> bench_attention(int d, const std::vector<std::int64_t>& ns, int reps,
                                         std::uint64_t seed);

// Least-squares fit of log(total_seconds) = alpha * log(n) + const over the
// records with reps > 0 (total_seconds = sec_per_token * n).
ScalingFit fit_scaling(const std::vector<BenchRecord>& records);

// Schema-stable CSV: tag,n,c,reps,sec_per_token,peak_floats.
void write_bench_csv(const std::vector<BenchRecord>& records, const std::string& path);
std::vector<BenchRecord> read_bench_csv(const std::string& path);

}  // namespace chunklm
