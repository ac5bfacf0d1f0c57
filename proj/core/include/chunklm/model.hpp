#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "chunklm/checkpoint.hpp"
#include "chunklm/data.hpp"
#include "chunklm/gru.hpp"
#include "chunklm/memory.hpp"
#include "chunklm/multires.hpp"
#include "chunklm/ssm.hpp"
#include "chunklm/tape.hpp"

namespace chunklm {

struct AblationFlags {
  bool no_ssm = false;        // bypass the state-space block (identity)
  bool no_retrieval = false;  // force rbar = 0 and skip memory writes
  bool no_rnn = false;        // freeze h_g at zero
};

struct ModelConfig {
  int vocab = kVocab;
  int d = 128;      // embedding width
  int d_h = 128;    // supervisor hidden size
  int d_mem = 128;  // chunk-summary width; equals d (no projection)
  int chunk = 128;
  int ssm_taps = 16;
  double ssm_delta = 1.0;
  MultiResConfig mrc;
  int top_k = 1;
  int mem_capacity = 1024;
  bool approx_memory = false;
  ApproxIndexConfig approx;
  AblationFlags ablate;

  void validate() const;
  std::shared_ptr<MemoryStore> make_store() const;
};

// The complete learnable set. named() enumerates tensors in a fixed order
// shared by the optimizer, gradients, and checkpoints.
struct ModelParams {
  Tensor embed;                      // [V x d]
  Tensor cond_in;                    // [d_h x d], zero at init
  Tensor cond_out;                   // [d_mem x d], zero at init
  Tensor ssm_rho, ssm_b, ssm_c;      // [d]
  Tensor gate_w;                     // [d x d]
  Tensor gate_b;                     // [d]
  std::vector<Tensor> conv_kernels;  // per branch [taps x d]
  Tensor mix_w;                      // [d x d], identity at init
  Tensor fuse_w;                     // [2*d_mem x d_mem]
  Tensor gru_wz, gru_wr, gru_wh;     // [d_mem x d_h]
  Tensor gru_uz, gru_ur, gru_uh;     // [d_h x d_h]
  Tensor gru_bz, gru_br, gru_bh;     // [d_h]
  Tensor w_lm;                       // [d x V]

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  static ModelParams zeros(const ModelConfig& cfg);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::int64_t param_count() const;
};

// Per-sequence running state for a batch of B independent sequences; each
// row owns its memory store.
struct ChunkState {
  Tensor h_g;     // [B x d_h]
  Tensor c_prev;  // [B x d_mem], fused embedding of the previous chunk
  std::vector<std::int64_t> seq_ids;
  std::int64_t chunk_index = 0;  // index of the next chunk to process
  std::vector<std::shared_ptr<MemoryStore>> memory;  // one per row

  static ChunkState fresh(const ModelConfig& cfg, std::vector<std::int64_t> seq_ids);
  int batch() const { return static_cast<int>(seq_ids.size()); }
};

// Records mean-retrieved vectors on a reference pass and replays them as
// constants, so finite differencing probes exactly the function the tape
// differentiates (retrieved values are stop-gradient by design).
struct RetrievalTrace {
  bool replay = false;
  std::vector<Tensor> rbar;  // one [B x d_mem] per forward_chunk call
  std::size_t cursor = 0;
};

// Parameter handles on a tape.
struct ParamLeaves {
  Value embed, cond_in, cond_out;
  SsmValues ssm;
  MultiResValues mrc;
  Value fuse_w;
  GruValues gru;
  Value w_lm;
};

ParamLeaves lift(Tape& tape, const ModelParams& p);

struct ChunkForward {
  Value logits;   // [B x chunk x V]
  Value h_g_new;  // [B x d_h]
  Value c_fused;  // [B x d_mem]
};

// One chunk of the pipeline: conditioning, SSM block, multi-res conv, LM
// head, pooling, retrieval, fusion, GRU update, memory write. tokens must be
// exactly B x cfg.chunk ids (callers pad short chunks; causality keeps
// prefix logits stable). Mutates state's memory/chunk_index, not its
// tensors; threading h_g/c_prev values across chunks is the caller's job.
// advance=false runs a read-only pass (no retrieval, no memory write, no
// index bump) whose logits are identical; generation uses it for partially
// filled chunks.
ChunkForward forward_chunk(Tape& tape, const ParamLeaves& leaves, const ModelConfig& cfg,
                           const std::vector<int>& tokens, ChunkState& state, Value h_g,
                           Value c_prev, RetrievalTrace* trace = nullptr, bool advance = true);

struct EvalResult {
  double mean_loss = 0.0;              // nats per predicted token
  std::vector<double> per_chunk_loss;  // mean nats per chunk (0 if no targets)
  std::int64_t token_count = 0;
};

// Chunked forward over a whole sequence with masked cross-entropy; fresh
// state, one tape per chunk (live activations stay O(B c d) + O(E d_mem)).
EvalResult forward_sequence(const ModelParams& p, const ModelConfig& cfg, const TokenSeq& seq);

// Autoregressive continuation. temperature <= 0 selects argmax. Chunk
// boundaries carry state; within a partial chunk the forward is recomputed
// with the tokens so far.
TokenSeq generate(const ModelParams& p, const ModelConfig& cfg, const TokenSeq& prompt,
                  int max_new, double temperature, std::uint64_t seed);

// End-to-end gradient check of the chunked forward + cross-entropy loss on
// a random byte sequence of n_chunks full chunks. Retrieval values are
// recorded on a reference pass and replayed as constants for both the tape
// gradients and the finite-difference probes (stop-gradient semantics).
// Returns the max relative error over `probes` random coordinates.
double model_grad_check(const ModelConfig& cfg, std::uint64_t seed, int n_chunks, int probes,
                        double h);

// Checkpoint bridging. Model checkpoints store config plus param.* arrays;
// extra arrays (optimizer state etc.) pass through untouched.
void params_to_checkpoint(const ModelParams& p, const ModelConfig& cfg, Checkpoint& ck);
ModelConfig config_from_checkpoint(const Checkpoint& ck);
ModelParams params_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg);

}  // namespace chunklm
