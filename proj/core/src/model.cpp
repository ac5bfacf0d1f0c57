#include "chunklm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "chunklm/gradcheck.hpp"
#include "chunklm/rng.hpp"

namespace chunklm {

void ModelConfig::validate() const {
  if (vocab != kVocab) throw ConfigError("model: byte vocabulary must be 256");
  if (d < 1 || d_h < 1 || d_mem < 1) throw ConfigError("model: dims must be positive");
  if (d_mem != d) throw ConfigError("model: d_mem must equal d (no projection)");
  if (chunk < 2) throw ConfigError("model: chunk must be >= 2");
  if (ssm_taps < 1) throw ConfigError("model: ssm_taps must be >= 1");
  if (ssm_taps > chunk) throw ConfigError("model: ssm kernel longer than chunk");
  if (ssm_delta <= 0.0) throw ConfigError("model: ssm_delta must be positive");
  if (top_k < 1) throw ConfigError("model: top_k must be >= 1");
  if (mem_capacity < 1) throw ConfigError("model: mem_capacity must be >= 1");
  chunklm::validate(mrc);
}

std::shared_ptr<MemoryStore> ModelConfig::make_store() const {
  return std::make_shared<MemoryStore>(
      d_mem, mem_capacity, approx_memory ? MemoryStore::Mode::kApprox : MemoryStore::Mode::kExact,
      approx);
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.embed = Tensor({cfg.vocab, cfg.d});
  p.cond_in = Tensor({cfg.d_h, cfg.d});
  p.cond_out = Tensor({cfg.d_mem, cfg.d});
  p.ssm_rho = Tensor({cfg.d});
  p.ssm_b = Tensor({cfg.d});
  p.ssm_c = Tensor({cfg.d});
  p.gate_w = Tensor({cfg.d, cfg.d});
  p.gate_b = Tensor({cfg.d});
  for (std::size_t k = 0; k < cfg.mrc.dilations.size(); ++k) {
    p.conv_kernels.emplace_back(Shape{cfg.mrc.taps, cfg.d});
  }
  p.mix_w = Tensor({cfg.d, cfg.d});
  p.fuse_w = Tensor({2 * cfg.d_mem, cfg.d_mem});
  p.gru_wz = Tensor({cfg.d_mem, cfg.d_h});
  p.gru_wr = Tensor({cfg.d_mem, cfg.d_h});
  p.gru_wh = Tensor({cfg.d_mem, cfg.d_h});
  p.gru_uz = Tensor({cfg.d_h, cfg.d_h});
  p.gru_ur = Tensor({cfg.d_h, cfg.d_h});
  p.gru_uh = Tensor({cfg.d_h, cfg.d_h});
  p.gru_bz = Tensor({cfg.d_h});
  p.gru_br = Tensor({cfg.d_h});
  p.gru_bh = Tensor({cfg.d_h});
  p.w_lm = Tensor({cfg.d, cfg.vocab});
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros(cfg);
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  p.embed = rng.gaussian_tensor({cfg.vocab, cfg.d}, sd);
  // cond_in / cond_out stay zero: training starts equivalent to the plain
  // Z_Conv -> logits path.
  p.ssm_rho = rng.uniform_tensor({cfg.d}, std::log(0.01), 0.0);  // a in [-1, -0.01]
  p.ssm_b = rng.gaussian_tensor({cfg.d}, sd);
  p.ssm_c = rng.gaussian_tensor({cfg.d}, sd);
  p.gate_w = rng.gaussian_tensor({cfg.d, cfg.d}, sd);
  const double kd = 1.0 / std::sqrt(static_cast<double>(cfg.d) * cfg.mrc.taps);
  for (std::size_t k = 0; k < p.conv_kernels.size(); ++k) {
    p.conv_kernels[k] = rng.gaussian_tensor({cfg.mrc.taps, cfg.d}, kd);
  }
  {
    double* m = p.mix_w.mutable_data();
    for (int i = 0; i < cfg.d; ++i) m[i * cfg.d + i] = 1.0;
  }
  p.fuse_w = rng.gaussian_tensor({2 * cfg.d_mem, cfg.d_mem},
                                 1.0 / std::sqrt(2.0 * cfg.d_mem));
  const double sm = 1.0 / std::sqrt(static_cast<double>(cfg.d_mem));
  const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
  p.gru_wz = rng.gaussian_tensor({cfg.d_mem, cfg.d_h}, sm);
  p.gru_wr = rng.gaussian_tensor({cfg.d_mem, cfg.d_h}, sm);
  p.gru_wh = rng.gaussian_tensor({cfg.d_mem, cfg.d_h}, sm);
  p.gru_uz = rng.gaussian_tensor({cfg.d_h, cfg.d_h}, sh);
  p.gru_ur = rng.gaussian_tensor({cfg.d_h, cfg.d_h}, sh);
  p.gru_uh = rng.gaussian_tensor({cfg.d_h, cfg.d_h}, sh);
  p.w_lm = rng.gaussian_tensor({cfg.d, cfg.vocab}, sd);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out = {
      {"embed", &embed},     {"cond_in", &cond_in}, {"cond_out", &cond_out},
      {"ssm_rho", &ssm_rho}, {"ssm_b", &ssm_b},     {"ssm_c", &ssm_c},
      {"gate_w", &gate_w},   {"gate_b", &gate_b},
  };
  for (std::size_t k = 0; k < conv_kernels.size(); ++k) {
    out.emplace_back("conv_kernel" + std::to_string(k), &conv_kernels[k]);
  }
  out.insert(out.end(), {
      {"mix_w", &mix_w},   {"fuse_w", &fuse_w}, {"gru_wz", &gru_wz}, {"gru_wr", &gru_wr},
      {"gru_wh", &gru_wh}, {"gru_uz", &gru_uz}, {"gru_ur", &gru_ur}, {"gru_uh", &gru_uh},
      {"gru_bz", &gru_bz}, {"gru_br", &gru_br}, {"gru_bh", &gru_bh}, {"w_lm", &w_lm},
  });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  auto mutable_view = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_view.size());
  for (auto& [n, t] : mutable_view) out.emplace_back(n, t);
  return out;
}

std::int64_t ModelParams::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

ChunkState ChunkState::fresh(const ModelConfig& cfg, std::vector<std::int64_t> ids) {
  ChunkState s;
  const int B = static_cast<int>(ids.size());
  s.h_g = Tensor({B, cfg.d_h});
  s.c_prev = Tensor({B, cfg.d_mem});
  s.seq_ids = std::move(ids);
  s.chunk_index = 0;
  for (int b = 0; b < B; ++b) s.memory.push_back(cfg.make_store());
  return s;
}

ParamLeaves lift(Tape& tape, const ModelParams& p) {
  ParamLeaves l;
  l.embed = tape.leaf(p.embed);
  l.cond_in = tape.leaf(p.cond_in);
  l.cond_out = tape.leaf(p.cond_out);
  l.ssm.rho = tape.leaf(p.ssm_rho);
  l.ssm.b = tape.leaf(p.ssm_b);
  l.ssm.cvec = tape.leaf(p.ssm_c);
  l.ssm.gate_w = tape.leaf(p.gate_w);
  l.ssm.gate_b = tape.leaf(p.gate_b);
  for (const Tensor& k : p.conv_kernels) l.mrc.kernels.push_back(tape.leaf(k));
  l.mrc.mix_w = tape.leaf(p.mix_w);
  l.fuse_w = tape.leaf(p.fuse_w);
  l.gru.w_z = tape.leaf(p.gru_wz);
  l.gru.w_r = tape.leaf(p.gru_wr);
  l.gru.w_h = tape.leaf(p.gru_wh);
  l.gru.u_z = tape.leaf(p.gru_uz);
  l.gru.u_r = tape.leaf(p.gru_ur);
  l.gru.u_h = tape.leaf(p.gru_uh);
  l.gru.b_z = tape.leaf(p.gru_bz);
  l.gru.b_r = tape.leaf(p.gru_br);
  l.gru.b_h = tape.leaf(p.gru_bh);
  l.w_lm = tape.leaf(p.w_lm);
  return l;
}

ChunkForward forward_chunk(Tape& tape, const ParamLeaves& leaves, const ModelConfig& cfg,
                           const std::vector<int>& tokens, ChunkState& state, Value h_g,
                           Value c_prev, RetrievalTrace* trace, bool advance) {
  const int B = state.batch();
  const int c = cfg.chunk;
  if (static_cast<std::int64_t>(tokens.size()) != static_cast<std::int64_t>(B) * c) {
    throw ShapeError("forward_chunk: tokens must be B x chunk");
  }
  if (tape.val(h_g).shape() != Shape{B, cfg.d_h} || tape.val(c_prev).shape() != Shape{B, cfg.d_mem}) {
    throw ShapeError("forward_chunk: state does not match this batch");
  }
  if (static_cast<int>(state.memory.size()) != B) {
    throw ConfigError("forward_chunk: state has wrong memory handle count");
  }
  const bool replaying = trace && trace->replay;

  // (a) embed, (b) condition on the supervisor state and the previous
  // chunk's fused embedding (both zero for chunk 1).
  Value e = tape.embedding(leaves.embed, tokens, B, c);
  if (!cfg.ablate.no_rnn) e = tape.add_rows(e, tape.matmul(h_g, leaves.cond_in));
  e = tape.add_rows(e, tape.matmul(c_prev, leaves.cond_out));

  // (c) intra-chunk state-space mixing, (d) multi-resolution refinement.
  Value z_ssm = cfg.ablate.no_ssm ? e : ssm_forward(tape, e, leaves.ssm, cfg.ssm_delta, cfg.ssm_taps);
  Value z_conv = multires_forward(tape, z_ssm, leaves.mrc, cfg.mrc);

  // (e) token logits come from Z_Conv alone; retrieval influences only
  // later chunks via the conditioning path.
  Value logits = tape.reshape(
      tape.matmul(tape.reshape(z_conv, {B * c, cfg.d}), leaves.w_lm), {B, c, cfg.vocab});

  // (f) pooled chunk summary; query memory before storing this chunk.
  Value c_m = tape.mean_pool_tokens(z_conv);
  Value rbar;
  if (cfg.ablate.no_retrieval || !advance) {
    rbar = tape.constant(Tensor({B, cfg.d_mem}));
  } else if (replaying) {
    if (trace->cursor >= trace->rbar.size()) throw IndexError("retrieval replay exhausted");
    rbar = tape.constant(trace->rbar[trace->cursor++]);
  } else {
    const Tensor& pooled = tape.val(c_m);
    std::vector<std::vector<MemoryEntry>> retrieved(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::vector<double> q(pooled.data() + static_cast<std::int64_t>(b) * cfg.d_mem,
                            pooled.data() + static_cast<std::int64_t>(b + 1) * cfg.d_mem);
      retrieved[static_cast<std::size_t>(b)] = state.memory[static_cast<std::size_t>(b)]->query(
          q, cfg.top_k,
          ProvenanceFilter::same_seq_before(state.seq_ids[static_cast<std::size_t>(b)],
                                            state.chunk_index));
    }
    Tensor mean = mean_retrieved(retrieved, cfg.d_mem);
    if (trace) trace->rbar.push_back(mean);
    rbar = tape.constant(std::move(mean));
  }

  // (g) fusion gate, (h) supervisor update, (i) memory write with this
  // chunk's provenance.
  Value c_fused = fuse(tape, c_m, rbar, leaves.fuse_w);
  Value h_new = cfg.ablate.no_rnn ? h_g : gru_cell(tape, c_fused, h_g, leaves.gru);

  if (!cfg.ablate.no_retrieval && !replaying && advance) {
    const Tensor& pooled = tape.val(c_m);
    for (int b = 0; b < B; ++b) {
      MemoryEntry entry;
      entry.value.assign(pooled.data() + static_cast<std::int64_t>(b) * cfg.d_mem,
                         pooled.data() + static_cast<std::int64_t>(b + 1) * cfg.d_mem);
      entry.key = normalized(entry.value);
      entry.seq_id = state.seq_ids[static_cast<std::size_t>(b)];
      entry.chunk_index = state.chunk_index;
      state.memory[static_cast<std::size_t>(b)]->store(entry);
    }
  }
  if (!replaying && advance) ++state.chunk_index;

  return {logits, h_new, c_fused};
}

namespace {

std::vector<int> padded_chunk_tokens(const std::vector<int>& toks, std::int64_t offset, int c) {
  std::vector<int> out(static_cast<std::size_t>(c), 0);
  const std::int64_t n = static_cast<std::int64_t>(toks.size());
  for (int t = 0; t < c; ++t) {
    if (offset + t < n) out[static_cast<std::size_t>(t)] = toks[static_cast<std::size_t>(offset + t)];
  }
  return out;
}

}  // namespace

EvalResult forward_sequence(const ModelParams& p, const ModelConfig& cfg, const TokenSeq& seq) {
  cfg.validate();
  if (seq.tokens.size() < 2) throw ConfigError("forward_sequence: sequence needs >= 2 tokens");
  const std::int64_t n = static_cast<std::int64_t>(seq.tokens.size());
  const ChunkPlan plan = split_chunks(n, cfg.chunk);
  ChunkState state = ChunkState::fresh(cfg, {0});

  EvalResult result;
  double total = 0.0;
  std::int64_t count = 0;
  Tensor h_g = state.h_g;
  Tensor c_prev = state.c_prev;
  for (const auto& piece : plan.pieces) {
    Tape tape;
    ParamLeaves leaves = lift(tape, p);
    Value h = tape.constant(h_g);
    Value cp = tape.constant(c_prev);
    std::vector<int> tokens = padded_chunk_tokens(seq.tokens, piece.offset, cfg.chunk);
    std::vector<int> targets(static_cast<std::size_t>(cfg.chunk), kIgnoreTarget);
    std::int64_t chunk_targets = 0;
    for (int t = 0; t < cfg.chunk; ++t) {
      const std::int64_t pos = piece.offset + t;
      if (pos + 1 < n) {
        targets[static_cast<std::size_t>(t)] = seq.tokens[static_cast<std::size_t>(pos + 1)];
        ++chunk_targets;
      }
    }
    ChunkForward fwd = forward_chunk(tape, leaves, cfg, tokens, state, h, cp);
    const Tensor sums = tape.val(tape.masked_ce_row_sums(fwd.logits, targets));
    total += sums[0];
    count += chunk_targets;
    result.per_chunk_loss.push_back(chunk_targets > 0 ? sums[0] / static_cast<double>(chunk_targets)
                                                      : 0.0);
    h_g = tape.val(fwd.h_g_new);
    c_prev = tape.val(fwd.c_fused);
  }
  result.token_count = count;
  result.mean_loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  return result;
}

namespace {

int pick_token(const double* logits, int vocab, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    int best = 0;
    for (int j = 1; j < vocab; ++j) {
      if (logits[j] > logits[best]) best = j;
    }
    return best;
  }
  std::vector<double> probs(static_cast<std::size_t>(vocab));
  double mx = logits[0];
  for (int j = 1; j < vocab; ++j) mx = std::max(mx, logits[j]);
  double sum = 0.0;
  for (int j = 0; j < vocab; ++j) {
    probs[static_cast<std::size_t>(j)] = std::exp((logits[j] - mx) / temperature);
    sum += probs[static_cast<std::size_t>(j)];
  }
  double u = rng.next_double() * sum;
  for (int j = 0; j < vocab; ++j) {
    u -= probs[static_cast<std::size_t>(j)];
    if (u <= 0.0) return j;
  }
  return vocab - 1;
}

}  // namespace

TokenSeq generate(const ModelParams& p, const ModelConfig& cfg, const TokenSeq& prompt,
                  int max_new, double temperature, std::uint64_t seed) {
  cfg.validate();
  TokenSeq out = prompt;
  out.origin = "generated";
  if (max_new <= 0) return out;
  if (prompt.tokens.empty()) throw ConfigError("generate: prompt must be non-empty");

  Rng rng(seed);
  ChunkState state = ChunkState::fresh(cfg, {0});
  Tensor h_g = state.h_g;
  Tensor c_prev = state.c_prev;
  const int c = cfg.chunk;
  const int V = cfg.vocab;

  Tensor boundary_logits;  // logits at position c-1 of the last full chunk

  auto run_chunk = [&](std::int64_t offset, bool transition) -> Tensor {
    Tape tape;
    ParamLeaves leaves = lift(tape, p);
    Value h = tape.constant(h_g);
    Value cp = tape.constant(c_prev);
    std::vector<int> tokens = padded_chunk_tokens(out.tokens, offset, c);
    if (transition) {
      ChunkForward fwd = forward_chunk(tape, leaves, cfg, tokens, state, h, cp);
      h_g = tape.val(fwd.h_g_new);
      c_prev = tape.val(fwd.c_fused);
      return tape.val(fwd.logits);
    }
    // Partial-chunk recompute: no state transition, no memory write.
    ChunkForward fwd = forward_chunk(tape, leaves, cfg, tokens, state, h, cp, nullptr,
                                     /*advance=*/false);
    return tape.val(fwd.logits);
  };

  // Process the prompt's full chunks, carrying state across boundaries.
  std::int64_t done = 0;
  while (done + c <= static_cast<std::int64_t>(out.tokens.size())) {
    boundary_logits = run_chunk(done, true);
    done += c;
  }

  for (int g = 0; g < max_new; ++g) {
    const std::int64_t len = static_cast<std::int64_t>(out.tokens.size());
    const int fill = static_cast<int>(len - done);  // tokens in the open chunk
    Tensor logits;
    int row;
    if (fill == 0) {
      logits = boundary_logits;
      row = c - 1;
    } else {
      logits = run_chunk(done, false);
      row = fill - 1;
    }
    const int tok = pick_token(logits.data() + static_cast<std::int64_t>(row) * V, V, temperature, rng);
    out.tokens.push_back(tok);
    if (static_cast<std::int64_t>(out.tokens.size()) - done == c) {
      boundary_logits = run_chunk(done, true);
      done += c;
    }
  }
  return out;
}

double model_grad_check(const ModelConfig& cfg, std::uint64_t seed, int n_chunks, int probes,
                        double h) {
  cfg.validate();
  ModelParams params = ModelParams::init(cfg, seed);
  Rng data_rng(seed + 1);
  const std::int64_t n = static_cast<std::int64_t>(n_chunks) * cfg.chunk;
  std::vector<int> toks(static_cast<std::size_t>(n));
  for (auto& t : toks) t = static_cast<int>(data_rng.uniform_int(0, cfg.vocab - 1));

  RetrievalTrace trace;

  auto run = [&](RetrievalTrace* tr, std::vector<Tensor>* grads_out) -> double {
    Tape tape;
    ParamLeaves leaves = lift(tape, params);
    ChunkState state = ChunkState::fresh(cfg, {0});
    Value hv = tape.constant(state.h_g);
    Value cpv = tape.constant(state.c_prev);
    Value total;
    std::int64_t count = 0;
    for (int m = 0; m < n_chunks; ++m) {
      std::vector<int> chunk_toks(toks.begin() + static_cast<std::ptrdiff_t>(m) * cfg.chunk,
                                  toks.begin() + static_cast<std::ptrdiff_t>(m + 1) * cfg.chunk);
      std::vector<int> targets(static_cast<std::size_t>(cfg.chunk), kIgnoreTarget);
      for (int t = 0; t < cfg.chunk; ++t) {
        const std::int64_t pos = static_cast<std::int64_t>(m) * cfg.chunk + t;
        if (pos + 1 < n) {
          targets[static_cast<std::size_t>(t)] = toks[static_cast<std::size_t>(pos + 1)];
          ++count;
        }
      }
      ChunkForward fwd = forward_chunk(tape, leaves, cfg, chunk_toks, state, hv, cpv, tr);
      Value sums = tape.masked_ce_row_sums(fwd.logits, targets);
      total = total.valid() ? tape.add(total, sums) : sums;
      hv = fwd.h_g_new;
      cpv = fwd.c_fused;
    }
    Value loss = tape.weighted_sum(total, {1.0 / static_cast<double>(count)});
    const double loss_value = tape.val(loss).item();
    if (grads_out) {
      tape.backward(loss);
      std::vector<Value> leaf_values = {leaves.embed,      leaves.cond_in,  leaves.cond_out,
                                        leaves.ssm.rho,    leaves.ssm.b,    leaves.ssm.cvec,
                                        leaves.ssm.gate_w, leaves.ssm.gate_b};
      leaf_values.insert(leaf_values.end(), leaves.mrc.kernels.begin(), leaves.mrc.kernels.end());
      leaf_values.insert(leaf_values.end(),
                         {leaves.mrc.mix_w, leaves.fuse_w, leaves.gru.w_z, leaves.gru.w_r,
                          leaves.gru.w_h, leaves.gru.u_z, leaves.gru.u_r, leaves.gru.u_h,
                          leaves.gru.b_z, leaves.gru.b_r, leaves.gru.b_h, leaves.w_lm});
      grads_out->clear();
      for (Value v : leaf_values) grads_out->push_back(tape.grad(v));
    }
    return loss_value;
  };

  // Reference pass records the retrieved means; everything after replays
  // them as constants.
  run(&trace, nullptr);

  std::vector<Tensor*> param_ptrs;
  for (auto& [name, t] : params.named()) param_ptrs.push_back(t);
  LossFn loss_fn = [&]() {
    trace.replay = true;
    trace.cursor = 0;
    return run(&trace, nullptr);
  };
  GradFn grads_fn = [&]() {
    trace.replay = true;
    trace.cursor = 0;
    std::vector<Tensor> grads;
    run(&trace, &grads);
    return grads;
  };
  return grad_check(param_ptrs, loss_fn, grads_fn, probes, h, seed + 2).max_rel_error;
}

// ---------------------------------------------------------------------------
// checkpoint bridging
// ---------------------------------------------------------------------------

namespace {

std::string dilations_str(const std::vector<int>& ds) {
  std::string out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(ds[i]);
  }
  return out;
}

std::vector<int> parse_dilations(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace

void params_to_checkpoint(const ModelParams& p, const ModelConfig& cfg, Checkpoint& ck) {
  ck.config["vocab"] = std::to_string(cfg.vocab);
  ck.config["d"] = std::to_string(cfg.d);
  ck.config["d_h"] = std::to_string(cfg.d_h);
  ck.config["d_mem"] = std::to_string(cfg.d_mem);
  ck.config["chunk"] = std::to_string(cfg.chunk);
  ck.config["ssm_taps"] = std::to_string(cfg.ssm_taps);
  ck.config["ssm_delta"] = std::to_string(cfg.ssm_delta);
  ck.config["conv_taps"] = std::to_string(cfg.mrc.taps);
  ck.config["dilations"] = dilations_str(cfg.mrc.dilations);
  ck.config["top_k"] = std::to_string(cfg.top_k);
  ck.config["mem_capacity"] = std::to_string(cfg.mem_capacity);
  ck.config["index_mode"] = cfg.approx_memory ? "approx" : "exact";
  ck.config["no_ssm"] = cfg.ablate.no_ssm ? "1" : "0";
  ck.config["no_retrieval"] = cfg.ablate.no_retrieval ? "1" : "0";
  ck.config["no_rnn"] = cfg.ablate.no_rnn ? "1" : "0";
  for (const auto& [name, t] : p.named()) ck.add("param." + name, *t);
}

ModelConfig config_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg;
  auto get = [&](const std::string& key, const std::string& fallback) {
    auto it = ck.config.find(key);
    return it == ck.config.end() ? fallback : it->second;
  };
  cfg.vocab = std::stoi(get("vocab", "256"));
  cfg.d = std::stoi(get("d", "128"));
  cfg.d_h = std::stoi(get("d_h", "128"));
  cfg.d_mem = std::stoi(get("d_mem", get("d", "128")));
  cfg.chunk = std::stoi(get("chunk", "128"));
  cfg.ssm_taps = std::stoi(get("ssm_taps", "16"));
  cfg.ssm_delta = std::stod(get("ssm_delta", "1"));
  cfg.mrc.taps = std::stoi(get("conv_taps", "3"));
  cfg.mrc.dilations = parse_dilations(get("dilations", "1,2,4"));
  cfg.top_k = std::stoi(get("top_k", "1"));
  cfg.mem_capacity = std::stoi(get("mem_capacity", "1024"));
  cfg.approx_memory = get("index_mode", "exact") == "approx";
  cfg.ablate.no_ssm = get("no_ssm", "0") == "1";
  cfg.ablate.no_retrieval = get("no_retrieval", "0") == "1";
  cfg.ablate.no_rnn = get("no_rnn", "0") == "1";
  cfg.validate();
  return cfg;
}

ModelParams params_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg) {
  ModelParams p = ModelParams::zeros(cfg);
  for (auto& [name, t] : p.named()) {
    const Tensor& src = ck.require("param." + name);
    if (src.shape() != t->shape()) {
      throw IoError("checkpoint array param." + name + " has shape " + shape_str(src.shape()) +
                    ", expected " + shape_str(t->shape()));
    }
    *t = src;
  }
  return p;
}

}  // namespace chunklm
