#include "chunklm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace chunklm {

void TrainConfig::validate() const {
  if (lr_peak <= 0.0) throw ConfigError("train: lr_peak must be positive");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (warmup_steps < 0 || warmup_steps > max_steps) {
    throw ConfigError("train: need 0 <= warmup_steps <= max_steps");
  }
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (w_bptt < 1) throw ConfigError("train: w_bptt must be >= 1");
  if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be positive");
}

double lr_at(const TrainConfig& cfg, int step) {
  if (step <= 0) return 0.0;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
  }
  if (step >= cfg.max_steps) return 0.0;
  const int span = cfg.max_steps - cfg.warmup_steps;
  if (span <= 0) return 0.0;
  return cfg.lr_peak * static_cast<double>(cfg.max_steps - step) / span;
}

// ---------------------------------------------------------------------------

namespace {

ChunkBatch make_chunk_batch(const std::vector<const TokenSeq*>& rows, std::int64_t chunk_index,
                            int c) {
  ChunkBatch out;
  out.batch = static_cast<int>(rows.size());
  out.chunk = c;
  out.first_chunk = (chunk_index == 0);
  out.inputs.assign(static_cast<std::size_t>(out.batch) * c, 0);
  out.targets.assign(static_cast<std::size_t>(out.batch) * c, kIgnoreTarget);
  const std::int64_t off = chunk_index * c;
  for (int b = 0; b < out.batch; ++b) {
    const auto& toks = rows[static_cast<std::size_t>(b)]->tokens;
    const std::int64_t n = static_cast<std::int64_t>(toks.size());
    for (int t = 0; t < c; ++t) {
      const std::int64_t pos = off + t;
      if (pos < n) out.inputs[static_cast<std::size_t>(b) * c + t] = toks[static_cast<std::size_t>(pos)];
      if (pos + 1 < n) out.targets[static_cast<std::size_t>(b) * c + t] = toks[static_cast<std::size_t>(pos + 1)];
    }
  }
  return out;
}

std::int64_t chunks_in_group(const std::vector<const TokenSeq*>& rows, int c) {
  std::int64_t longest = 0;
  for (const TokenSeq* s : rows) {
    longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(s->tokens.size()));
  }
  return split_chunks(longest, c).chunk_count;
}

}  // namespace

EvalResult batched_eval(const ModelParams& p, const ModelConfig& cfg,
                        const std::vector<TokenSeq>& seqs, int batch) {
  cfg.validate();
  if (seqs.empty()) throw ConfigError("batched_eval: empty corpus");
  Batcher batcher(seqs, batch, cfg.chunk);

  EvalResult result;
  double loss_sum_over_rows = 0.0;
  std::int64_t rows_counted = 0;
  ChunkBatch cb;
  ChunkState state;
  Tensor h_g, c_prev;
  std::vector<double> row_sums;
  std::vector<std::int64_t> row_counts;
  std::int64_t group_base = 0;

  auto finish_group = [&]() {
    for (std::size_t b = 0; b < row_sums.size(); ++b) {
      if (row_counts[b] > 0) {
        loss_sum_over_rows += row_sums[b] / static_cast<double>(row_counts[b]);
        ++rows_counted;
        result.token_count += row_counts[b];
      }
    }
  };

  while (batcher.next(cb)) {
    if (cb.first_chunk) {
      if (!row_sums.empty()) finish_group();
      std::vector<std::int64_t> ids;
      for (int b = 0; b < cb.batch; ++b) ids.push_back(group_base + b);
      group_base += cb.batch;
      state = ChunkState::fresh(cfg, ids);
      h_g = state.h_g;
      c_prev = state.c_prev;
      row_sums.assign(static_cast<std::size_t>(cb.batch), 0.0);
      row_counts.assign(static_cast<std::size_t>(cb.batch), 0);
    }
    Tape tape;
    ParamLeaves leaves = lift(tape, p);
    Value h = tape.constant(h_g);
    Value cp = tape.constant(c_prev);
    ChunkForward fwd = forward_chunk(tape, leaves, cfg, cb.inputs, state, h, cp);
    const Tensor sums = tape.val(tape.masked_ce_row_sums(fwd.logits, cb.targets));
    for (int b = 0; b < cb.batch; ++b) {
      row_sums[static_cast<std::size_t>(b)] += sums[b];
      for (int t = 0; t < cb.chunk; ++t) {
        if (cb.targets[static_cast<std::size_t>(b) * cb.chunk + t] != kIgnoreTarget) {
          ++row_counts[static_cast<std::size_t>(b)];
        }
      }
    }
    h_g = tape.val(fwd.h_g_new);
    c_prev = tape.val(fwd.c_fused);
  }
  if (!row_sums.empty()) finish_group();
  result.mean_loss = rows_counted > 0 ? loss_sum_over_rows / static_cast<double>(rows_counted) : 0.0;
  return result;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(ModelConfig mcfg, TrainConfig tcfg)
    : mcfg_(std::move(mcfg)), tcfg_(tcfg), rng_(tcfg.seed) {
  mcfg_.validate();
  tcfg_.validate();
}

void Trainer::init_params() {
  params_ = ModelParams::init(mcfg_, tcfg_.seed);
  moments_.clear();
  step_ = 0;
  group_ = 0;
  window_index_ = 0;
  group_state_.reset();
}

double Trainer::run_window(const std::vector<ChunkBatch>& window, ChunkState& state,
                           bool apply_update, std::vector<Tensor>* grads_out) {
  if (window.empty()) throw ConfigError("train_step: empty window");
  const int B = window.front().batch;
  const int c = window.front().chunk;

  Tape tape;
  ParamLeaves leaves = lift(tape, params_);
  // Window-entry recurrent state is a detached constant: gradients do not
  // cross the truncation boundary.
  Value h = tape.constant(state.h_g);
  Value cp = tape.constant(state.c_prev);

  Value total_sums;
  std::vector<std::int64_t> row_counts(static_cast<std::size_t>(B), 0);
  for (const ChunkBatch& cb : window) {
    if (cb.batch != B || cb.chunk != c) throw ShapeError("train_step: ragged window");
    ChunkForward fwd = forward_chunk(tape, leaves, mcfg_, cb.inputs, state, h, cp);
    Value sums = tape.masked_ce_row_sums(fwd.logits, cb.targets);
    total_sums = total_sums.valid() ? tape.add(total_sums, sums) : sums;
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < c; ++t) {
        if (cb.targets[static_cast<std::size_t>(b) * c + t] != kIgnoreTarget) {
          ++row_counts[static_cast<std::size_t>(b)];
        }
      }
    }
    h = fwd.h_g_new;
    cp = fwd.c_fused;
  }

  int live_rows = 0;
  for (std::int64_t n : row_counts) {
    if (n > 0) ++live_rows;
  }
  if (live_rows == 0) {
    state.h_g = tape.val(h);
    state.c_prev = tape.val(cp);
    return -1.0;  // nothing to learn from in this window
  }
  std::vector<double> weights(static_cast<std::size_t>(B), 0.0);
  for (int b = 0; b < B; ++b) {
    if (row_counts[static_cast<std::size_t>(b)] > 0) {
      weights[static_cast<std::size_t>(b)] =
          1.0 / (static_cast<double>(live_rows) * static_cast<double>(row_counts[static_cast<std::size_t>(b)]));
    }
  }
  Value loss = tape.weighted_sum(total_sums, weights);
  const double loss_value = tape.val(loss).item();

  tape.backward(loss);
  auto named = params_.named();
  std::vector<Tensor> grads;
  grads.reserve(named.size());
  // Collect gradients in the same order lift() created the leaves, which is
  // the named() order.
  {
    std::vector<Value> leaf_values = {
        leaves.embed,     leaves.cond_in,   leaves.cond_out, leaves.ssm.rho,
        leaves.ssm.b,     leaves.ssm.cvec,  leaves.ssm.gate_w, leaves.ssm.gate_b,
    };
    for (Value k : leaves.mrc.kernels) leaf_values.push_back(k);
    leaf_values.insert(leaf_values.end(),
                       {leaves.mrc.mix_w, leaves.fuse_w, leaves.gru.w_z, leaves.gru.w_r,
                        leaves.gru.w_h, leaves.gru.u_z, leaves.gru.u_r, leaves.gru.u_h,
                        leaves.gru.b_z, leaves.gru.b_r, leaves.gru.b_h, leaves.w_lm});
    if (leaf_values.size() != named.size()) throw ConfigError("train_step: leaf/param mismatch");
    for (Value v : leaf_values) grads.push_back(tape.grad(v));
  }

  if (apply_update) {
    clip_global_norm(grads, tcfg_.clip_norm);
    AdamWConfig acfg;
    acfg.lr = lr_at(tcfg_, step_ + 1);
    acfg.beta1 = tcfg_.beta1;
    acfg.beta2 = tcfg_.beta2;
    acfg.eps = tcfg_.eps;
    acfg.weight_decay = tcfg_.weight_decay;
    if (acfg.lr > 0.0) {
      std::vector<Tensor*> ptrs;
      ptrs.reserve(named.size());
      for (auto& [name, t] : named) ptrs.push_back(t);
      adamw_step(ptrs, grads, moments_, step_ + 1, acfg);
    }
    ++step_;
  }
  if (grads_out) *grads_out = std::move(grads);

  state.h_g = tape.val(h);
  state.c_prev = tape.val(cp);
  return loss_value;
}

double Trainer::train_step(const std::vector<ChunkBatch>& window, ChunkState& state) {
  try {
    return run_window(window, state, true, nullptr);
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << e.what() << " at training step " << (step_ + 1) << "; param norms:";
    for (const auto& [name, t] : params_.named()) os << " " << name << "=" << l2_norm(*t);
    throw NumericError(e.op_name, os.str());
  }
}

std::vector<Tensor> Trainer::window_gradients(const std::vector<ChunkBatch>& window,
                                              ChunkState& state) {
  std::vector<Tensor> grads;
  run_window(window, state, false, &grads);
  return grads;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

FitResult Trainer::fit(const std::vector<TokenSeq>& corpus,
                       const std::vector<TokenSeq>* eval_corpus, const std::string& out_dir) {
  if (corpus.empty()) throw ConfigError("fit: empty corpus");
  if (tcfg_.batch > static_cast<int>(corpus.size())) {
    throw ConfigError("fit: batch exceeds corpus size");
  }
  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics.csv";
  const bool fresh_log = !std::filesystem::exists(metrics_path);
  std::ofstream log(metrics_path, std::ios::app);
  if (!log) throw IoError("cannot open metrics log: " + metrics_path);
  if (fresh_log) log << "step,lr,train_loss,eval_loss,tokens_per_sec,peak_activation_floats\n";

  if (!params_.embed.defined()) init_params();

  FitResult result;
  const std::int64_t groups = static_cast<std::int64_t>(corpus.size()) / tcfg_.batch;
  auto t_last = std::chrono::steady_clock::now();
  std::int64_t tokens_since_log = 0;

  auto eval_now = [&]() -> double {
    if (!eval_corpus || eval_corpus->empty()) return std::nan("");
    double sum = 0.0;
    for (const TokenSeq& s : *eval_corpus) sum += forward_sequence(params_, mcfg_, s).mean_loss;
    return sum / static_cast<double>(eval_corpus->size());
  };

  if (tcfg_.max_steps == 0) {
    result.checkpoint_path = out_dir + "/final";
    save_checkpoint(result.checkpoint_path);
    result.final_eval_loss = eval_now();
    return result;
  }

  while (step_ < tcfg_.max_steps) {
    const std::int64_t g = group_ % groups;
    std::vector<const TokenSeq*> rows;
    std::vector<std::int64_t> ids;
    for (int b = 0; b < tcfg_.batch; ++b) {
      const std::int64_t idx = g * tcfg_.batch + b;
      rows.push_back(&corpus[static_cast<std::size_t>(idx)]);
      ids.push_back(idx);
    }
    const std::int64_t n_chunks = chunks_in_group(rows, mcfg_.chunk);
    if (window_index_ == 0 || !group_state_.has_value()) {
      group_state_ = ChunkState::fresh(mcfg_, ids);
    }
    std::vector<ChunkBatch> window;
    const std::int64_t first = window_index_ * tcfg_.w_bptt;
    const std::int64_t last = std::min<std::int64_t>(n_chunks, first + tcfg_.w_bptt);
    for (std::int64_t m = first; m < last; ++m) {
      window.push_back(make_chunk_batch(rows, m, mcfg_.chunk));
    }

    const double loss = train_step(window, *group_state_);
    if (loss >= 0.0) {
      result.step_losses.push_back(loss);
      for (const ChunkBatch& cb : window) {
        tokens_since_log += static_cast<std::int64_t>(cb.inputs.size());
      }
      if (tcfg_.log_every > 0 && step_ % tcfg_.log_every == 0) {
        const auto now = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(now - t_last).count();
        const double tps = secs > 0.0 ? static_cast<double>(tokens_since_log) / secs : 0.0;
        t_last = now;
        tokens_since_log = 0;
        log << step_ << "," << lr_at(tcfg_, step_) << "," << loss << ",";
        if (tcfg_.eval_every > 0 && step_ % tcfg_.eval_every == 0) {
          const double ev = eval_now();
          if (!std::isnan(ev)) log << ev;
        }
        log << "," << tps << "," << float_count::peak() << "\n";
        log.flush();
      }
      if (tcfg_.checkpoint_every > 0 && step_ % tcfg_.checkpoint_every == 0 &&
          step_ < tcfg_.max_steps) {
        save_checkpoint(out_dir + "/ckpt_step" + std::to_string(step_));
      }
    }

    ++window_index_;
    if (window_index_ * tcfg_.w_bptt >= n_chunks) {
      window_index_ = 0;
      ++group_;
      group_state_.reset();
    }
  }

  result.checkpoint_path = out_dir + "/final";
  save_checkpoint(result.checkpoint_path);
  result.final_eval_loss = eval_now();
  return result;
}

// ---------------------------------------------------------------------------
// full-state checkpointing
// ---------------------------------------------------------------------------

void Trainer::serialize_group_state(Checkpoint& ck) const {
  if (!group_state_.has_value()) return;
  const ChunkState& s = *group_state_;
  ck.config["state_present"] = "1";
  ck.config["state_chunk_index"] = std::to_string(s.chunk_index);
  {
    std::string ids;
    for (std::size_t i = 0; i < s.seq_ids.size(); ++i) {
      if (i) ids += ",";
      ids += std::to_string(s.seq_ids[i]);
    }
    ck.config["state_seq_ids"] = ids;
  }
  ck.add("state.h_g", s.h_g);
  ck.add("state.c_prev", s.c_prev);
  for (std::size_t b = 0; b < s.memory.size(); ++b) {
    const MemoryStore& mem = *s.memory[b];
    const int cnt = mem.count();
    const int d = mem.dim();
    // Entries oldest-first at f64 (the f32 snapshot format would break
    // bit-exact resume); provenance ints are exact as doubles.
    Tensor keys({std::max(cnt, 1), d});
    Tensor values({std::max(cnt, 1), d});
    Tensor prov({std::max(cnt, 1), 2});
    double* pk = keys.mutable_data();
    double* pv = values.mutable_data();
    double* pp = prov.mutable_data();
    for (int i = 0; i < cnt; ++i) {
      const MemoryEntry e = mem.entry(i);
      for (int j = 0; j < d; ++j) {
        pk[static_cast<std::int64_t>(i) * d + j] = e.key[static_cast<std::size_t>(j)];
        pv[static_cast<std::int64_t>(i) * d + j] = e.value[static_cast<std::size_t>(j)];
      }
      pp[i * 2] = static_cast<double>(e.seq_id);
      pp[i * 2 + 1] = static_cast<double>(e.chunk_index);
    }
    ck.config["mem" + std::to_string(b) + "_count"] = std::to_string(cnt);
    ck.add("mem" + std::to_string(b) + ".keys", keys);
    ck.add("mem" + std::to_string(b) + ".values", values);
    ck.add("mem" + std::to_string(b) + ".prov", prov);
  }
}

void Trainer::restore_group_state(const Checkpoint& ck) {
  group_state_.reset();
  auto it = ck.config.find("state_present");
  if (it == ck.config.end() || it->second != "1") return;
  ChunkState s;
  s.h_g = ck.require("state.h_g");
  s.c_prev = ck.require("state.c_prev");
  s.chunk_index = std::stoll(ck.config.at("state_chunk_index"));
  {
    std::stringstream ss(ck.config.at("state_seq_ids"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) s.seq_ids.push_back(std::stoll(item));
    }
  }
  for (int b = 0; b < s.batch(); ++b) {
    auto store = mcfg_.make_store();
    const int cnt = std::stoi(ck.config.at("mem" + std::to_string(b) + "_count"));
    const Tensor& keys = ck.require("mem" + std::to_string(b) + ".keys");
    const Tensor& values = ck.require("mem" + std::to_string(b) + ".values");
    const Tensor& prov = ck.require("mem" + std::to_string(b) + ".prov");
    for (int i = 0; i < cnt; ++i) {
      MemoryEntry e;
      e.key.assign(keys.data() + static_cast<std::int64_t>(i) * mcfg_.d_mem,
                   keys.data() + static_cast<std::int64_t>(i + 1) * mcfg_.d_mem);
      e.value.assign(values.data() + static_cast<std::int64_t>(i) * mcfg_.d_mem,
                     values.data() + static_cast<std::int64_t>(i + 1) * mcfg_.d_mem);
      e.seq_id = static_cast<std::int64_t>(prov[static_cast<std::int64_t>(i) * 2]);
      e.chunk_index = static_cast<std::int64_t>(prov[static_cast<std::int64_t>(i) * 2 + 1]);
      store->store(e);
    }
    s.memory.push_back(store);
  }
  group_state_ = std::move(s);
}

void Trainer::save_checkpoint(const std::string& path) const {
  Checkpoint ck;
  ck.precision = Checkpoint::Precision::kF64;
  params_to_checkpoint(params_, mcfg_, ck);
  ck.config["train_step"] = std::to_string(step_);
  ck.config["train_group"] = std::to_string(group_);
  ck.config["train_window"] = std::to_string(window_index_);
  ck.config["train_rng"] = rng_.save_state();
  ck.config["lr_peak"] = std::to_string(tcfg_.lr_peak);
  ck.config["warmup_steps"] = std::to_string(tcfg_.warmup_steps);
  ck.config["max_steps"] = std::to_string(tcfg_.max_steps);
  ck.config["beta1"] = std::to_string(tcfg_.beta1);
  ck.config["beta2"] = std::to_string(tcfg_.beta2);
  ck.config["eps"] = std::to_string(tcfg_.eps);
  ck.config["weight_decay"] = std::to_string(tcfg_.weight_decay);
  ck.config["clip_norm"] = std::to_string(tcfg_.clip_norm);
  ck.config["batch"] = std::to_string(tcfg_.batch);
  ck.config["w_bptt"] = std::to_string(tcfg_.w_bptt);
  ck.config["train_seed"] = std::to_string(tcfg_.seed);
  ck.config["eval_every"] = std::to_string(tcfg_.eval_every);
  ck.config["checkpoint_every"] = std::to_string(tcfg_.checkpoint_every);
  ck.config["log_every"] = std::to_string(tcfg_.log_every);

  auto named = params_.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (i < moments_.size() && moments_[i].m.defined()) {
      ck.add("adam_m." + named[i].first, moments_[i].m);
      ck.add("adam_v." + named[i].first, moments_[i].v);
    }
  }
  serialize_group_state(ck);
  ck.save(path);
}

Trainer Trainer::load_checkpoint(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  ModelConfig mcfg = config_from_checkpoint(ck);
  TrainConfig tcfg;
  auto get = [&](const std::string& key, const std::string& fallback) {
    auto it = ck.config.find(key);
    return it == ck.config.end() ? fallback : it->second;
  };
  tcfg.lr_peak = std::stod(get("lr_peak", "3e-4"));
  tcfg.warmup_steps = std::stoi(get("warmup_steps", "100"));
  tcfg.max_steps = std::stoi(get("max_steps", "1000"));
  tcfg.beta1 = std::stod(get("beta1", "0.9"));
  tcfg.beta2 = std::stod(get("beta2", "0.98"));
  tcfg.eps = std::stod(get("eps", "1e-9"));
  tcfg.weight_decay = std::stod(get("weight_decay", "0.01"));
  tcfg.clip_norm = std::stod(get("clip_norm", "1.0"));
  tcfg.batch = std::stoi(get("batch", "8"));
  tcfg.w_bptt = std::stoi(get("w_bptt", "4"));
  tcfg.seed = std::stoull(get("train_seed", "0"));
  tcfg.eval_every = std::stoi(get("eval_every", "200"));
  tcfg.checkpoint_every = std::stoi(get("checkpoint_every", "500"));
  tcfg.log_every = std::stoi(get("log_every", "10"));

  Trainer tr(mcfg, tcfg);
  tr.params_ = params_from_checkpoint(ck, mcfg);
  tr.step_ = std::stoi(get("train_step", "0"));
  tr.group_ = std::stoll(get("train_group", "0"));
  tr.window_index_ = std::stoll(get("train_window", "0"));
  tr.rng_.load_state(get("train_rng", Rng(tcfg.seed).save_state()));

  auto named = tr.params_.named();
  tr.moments_.resize(named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Tensor* m = ck.find("adam_m." + named[i].first);
    const Tensor* v = ck.find("adam_v." + named[i].first);
    if (m && v) {
      tr.moments_[i].m = *m;
      tr.moments_[i].v = *v;
    }
  }
  tr.restore_group_state(ck);
  return tr;
}

}  // namespace chunklm
