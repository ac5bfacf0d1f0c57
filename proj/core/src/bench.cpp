#include "chunklm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "chunklm/attention.hpp"
#include "chunklm/rng.hpp"

namespace chunklm {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<int> random_bytes(std::int64_t n, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = static_cast<int>(rng.uniform_int(0, kVocab - 1));
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

std::vector<BenchRecord> bench_chunked(const ModelConfig& cfg, const std::vector<std::int64_t>& ns,
                                       int reps, std::uint64_t seed) {
  cfg.validate();
  const ModelParams params = ModelParams::init(cfg, seed);
  std::vector<BenchRecord> records;
  for (std::int64_t n : ns) {
    Rng rng(seed ^ static_cast<std::uint64_t>(n));
    const std::vector<int> tokens = random_bytes(n, rng);
    const ChunkPlan plan = split_chunks(n, cfg.chunk);

    BenchRecord rec;
    rec.tag = "chunked";
    rec.n = n;
    rec.c = cfg.chunk;
    rec.reps = reps;
    std::vector<double> times;
    for (int r = -1; r < reps; ++r) {  // rep -1 is an untimed warmup
      ChunkState state = ChunkState::fresh(cfg, {0});
      Tensor h_g = state.h_g;
      Tensor c_prev = state.c_prev;
      float_count::reset_peak();
      const auto t0 = Clock::now();
      for (const auto& piece : plan.pieces) {
        Tape tape;
        ParamLeaves leaves = lift(tape, params);
        Value h = tape.constant(h_g);
        Value cp = tape.constant(c_prev);
        std::vector<int> chunk_tokens(static_cast<std::size_t>(cfg.chunk), 0);
        for (int t = 0; t < piece.length; ++t) {
          chunk_tokens[static_cast<std::size_t>(t)] = tokens[static_cast<std::size_t>(piece.offset + t)];
        }
        ChunkForward fwd = forward_chunk(tape, leaves, cfg, chunk_tokens, state, h, cp);
        h_g = tape.val(fwd.h_g_new);
        c_prev = tape.val(fwd.c_fused);
      }
      const auto t1 = Clock::now();
      if (r >= 0) times.push_back(std::chrono::duration<double>(t1 - t0).count());
      if (r == 0) rec.peak_floats = float_count::peak();
    }
    rec.sec_per_token = median(times) / static_cast<double>(n);
    records.push_back(rec);
  }
  return records;
}

std::vector<BenchRecord> bench_attention(int d, const std::vector<std::int64_t>& ns, int reps,
                                         std::uint64_t seed) {
  const AttnParams params = AttnParams::init(kVocab, d, seed);
  std::vector<BenchRecord> records;
  for (std::int64_t n : ns) {
    BenchRecord rec;
    rec.tag = "attention";
    rec.n = n;
    rec.c = 0;
    if (n > kAttnGuardMaxTokens) {
      rec.reps = 0;  // refusal row: the guard declined the n x n allocation
      records.push_back(rec);
      continue;
    }
    Rng rng(seed ^ static_cast<std::uint64_t>(n));
    const std::vector<int> tokens = random_bytes(n, rng);
    rec.reps = reps;
    std::vector<double> times;
    for (int r = -1; r < reps; ++r) {  // rep -1 is an untimed warmup
      float_count::reset_peak();
      const auto t0 = Clock::now();
      Tensor logits = attn_forward(tokens, 1, static_cast<int>(n), params);
      const auto t1 = Clock::now();
      if (r >= 0) times.push_back(std::chrono::duration<double>(t1 - t0).count());
      if (r == 0) rec.peak_floats = float_count::peak();
    }
    rec.sec_per_token = median(times) / static_cast<double>(n);
    records.push_back(rec);
  }
  return records;
}

ScalingFit fit_scaling(const std::vector<BenchRecord>& records) {
  std::vector<double> xs, ys;
  for (const BenchRecord& r : records) {
    if (r.reps <= 0 || r.sec_per_token <= 0.0) continue;
    xs.push_back(std::log(static_cast<double>(r.n)));
    ys.push_back(std::log(r.sec_per_token * static_cast<double>(r.n)));
  }
  ScalingFit fit;
  fit.points = static_cast<int>(xs.size());
  if (fit.points < 2) return fit;
  const double n = static_cast<double>(fit.points);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < fit.points; ++i) {
    sx += xs[static_cast<std::size_t>(i)];
    sy += ys[static_cast<std::size_t>(i)];
    sxx += xs[static_cast<std::size_t>(i)] * xs[static_cast<std::size_t>(i)];
    sxy += xs[static_cast<std::size_t>(i)] * ys[static_cast<std::size_t>(i)];
  }
  fit.alpha = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double intercept = (sy - fit.alpha * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double ybar = sy / n;
  for (int i = 0; i < fit.points; ++i) {
    const double pred = fit.alpha * xs[static_cast<std::size_t>(i)] + intercept;
    ss_res += (ys[static_cast<std::size_t>(i)] - pred) * (ys[static_cast<std::size_t>(i)] - pred);
    ss_tot += (ys[static_cast<std::size_t>(i)] - ybar) * (ys[static_cast<std::size_t>(i)] - ybar);
  }
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

void write_bench_csv(const std::vector<BenchRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write bench csv: " + path);
  out << "tag,n,c,reps,sec_per_token,peak_floats\n";
  out.precision(12);
  for (const BenchRecord& r : records) {
    out << r.tag << "," << r.n << "," << r.c << "," << r.reps << "," << r.sec_per_token << ","
        << r.peak_floats << "\n";
  }
}

std::vector<BenchRecord> read_bench_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read bench csv: " + path);
  std::vector<BenchRecord> records;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    BenchRecord r;
    std::getline(ss, r.tag, ',');
    std::getline(ss, field, ',');
    r.n = std::stoll(field);
    std::getline(ss, field, ',');
    r.c = std::stoi(field);
    std::getline(ss, field, ',');
    r.reps = std::stoi(field);
    std::getline(ss, field, ',');
    r.sec_per_token = std::stod(field);
    std::getline(ss, field, ',');
    r.peak_floats = std::stoll(field);
    records.push_back(r);
  }
  return records;
}

}  // namespace chunklm
