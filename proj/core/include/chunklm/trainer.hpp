#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chunklm/data.hpp"
#include "chunklm/model.hpp"
#include "chunklm/optim.hpp"
#include "chunklm/rng.hpp"

namespace chunklm {

struct TrainConfig {
  double lr_peak = 3e-4;
  int warmup_steps = 100;
  int max_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int batch = 8;
  int w_bptt = 4;  // truncation window, in chunks
  std::uint64_t seed = 0;
  int eval_every = 200;
  int checkpoint_every = 500;
  int log_every = 10;

  void validate() const;
};

// Linear warm-up to lr_peak over warmup_steps, then linear decay to zero at
// max_steps. step is 1-based.
double lr_at(const TrainConfig& cfg, int step);

// Batched eval over whole sequences: per-row token mean, then mean over
// rows, matching the training loss weighting.
EvalResult batched_eval(const ModelParams& p, const ModelConfig& cfg,
                        const std::vector<TokenSeq>& seqs, int batch);

struct FitResult {
  std::vector<double> step_losses;  // loss per optimizer step, in order
  double final_eval_loss = 0.0;
  std::string checkpoint_path;  // final checkpoint ("<path>.manifest/.bin")
};

// Chunked trainer with truncated BPTT. h_g and c'_prev enter each window as
// detached constants; memory writes store detached values. Data order is
// fixed (corpus order, cycling), so runs are bit-reproducible under
// (seed, config, corpus).
class Trainer {
 public:
  Trainer(ModelConfig mcfg, TrainConfig tcfg);

  // Fresh parameter init from tcfg.seed.
  void init_params();

  // One optimizer step over a window of chunk batches. Returns the window
  // loss in nats per predicted token; throws NumericError with step/param
  // diagnostics if anything goes non-finite.
  double train_step(const std::vector<ChunkBatch>& window, ChunkState& state);

  // Gradients for a window without updating parameters (named order).
  std::vector<Tensor> window_gradients(const std::vector<ChunkBatch>& window, ChunkState& state);

  // Run to max_steps over the corpus; writes "<out_dir>/metrics.csv" and
  // periodic checkpoints "<out_dir>/ckpt_stepN" plus a final "<out_dir>/final".
  FitResult fit(const std::vector<TokenSeq>& corpus, const std::vector<TokenSeq>* eval_corpus,
                const std::string& out_dir);

  // Full-state checkpointing: parameters, optimizer moments, RNG, data
  // cursor, and live window-entry state, all at f64.
  void save_checkpoint(const std::string& path) const;
  static Trainer load_checkpoint(const std::string& path);

  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const ModelConfig& model_config() const { return mcfg_; }
  const TrainConfig& train_config() const { return tcfg_; }
  TrainConfig& train_config() { return tcfg_; }
  int step() const { return step_; }

 private:
  double run_window(const std::vector<ChunkBatch>& window, ChunkState& state, bool apply_update,
                    std::vector<Tensor>* grads_out);
  void serialize_group_state(Checkpoint& ck) const;
  void restore_group_state(const Checkpoint& ck);

  ModelConfig mcfg_;
  TrainConfig tcfg_;
  ModelParams params_;
  std::vector<AdamMoments> moments_;
  Rng rng_;
  int step_ = 0;

  // Data cursor (corpus order, cycling).
  std::int64_t group_ = 0;
  std::int64_t window_index_ = 0;
  std::optional<ChunkState> group_state_;
};

}  // namespace chunklm
