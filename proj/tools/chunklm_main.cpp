// chunklm CLI: train / eval / generate / gradcheck / make-synth /
// bench-scaling front doors over the core library.
//
// Exit codes: 0 success, 1 usage/config error, 2 numeric failure
// (NaN or gradcheck over threshold), 3 guard refusal.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "chunklm/bench.hpp"
#include "chunklm/config.hpp"
#include "chunklm/data.hpp"
#include "chunklm/model.hpp"
#include "chunklm/trainer.hpp"

namespace {

using namespace chunklm;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> ablate;
  std::vector<std::pair<std::string, std::shared_ptr<std::string>>> overrides;
};

// Every config key doubles as a CLI flag (dashes accepted for underscores).
void add_config_flags(CLI::App* sub, CommonOpts& opts,
                      const std::set<std::string>& skip = {}) {
  sub->add_option("--config", opts.config_path, "flat key-value config file");
  static const std::vector<std::string> keys = {
      "vocab", "d", "d_h", "d_mem", "chunk", "ssm_taps", "ssm_delta", "conv_taps", "dilations",
      "top_k", "mem_capacity", "index_mode", "n_list", "n_probe", "rebuild_every",
      "lr_peak", "warmup_steps", "max_steps", "beta1", "beta2", "eps", "weight_decay",
      "clip_norm", "batch", "w_bptt", "seed", "eval_every", "checkpoint_every", "log_every",
      "data_format"};
  for (const std::string& key : keys) {
    if (skip.count(key)) continue;
    auto slot = std::make_shared<std::string>();
    std::string flag = "--" + key;
    for (auto& ch : flag) {
      if (ch == '_') ch = '-';
    }
    sub->add_option(flag, *slot, "config key " + key);
    if (key == "chunk") {
      auto chunk_alias = std::make_shared<std::string>();
      sub->add_option("--chunk-size", *chunk_alias, "alias for --chunk");
      opts.overrides.emplace_back("chunk", chunk_alias);
    }
    opts.overrides.emplace_back(key, slot);
  }
  sub->add_option("--ablate", opts.ablate, "no_ssm | no_retrieval | no_rnn")
      ->check(CLI::IsMember({"no_ssm", "no_retrieval", "no_rnn"}));
}

KeyValueConfig merge_config(const CommonOpts& opts) {
  KeyValueConfig cfg;
  if (!opts.config_path.empty()) cfg = KeyValueConfig::from_file(opts.config_path);
  for (const auto& [key, slot] : opts.overrides) {
    if (!slot->empty()) cfg.set(key, *slot);
  }
  for (const std::string& flag : opts.ablate) cfg.set(flag, "1");
  cfg.check_keys();
  return cfg;
}

std::vector<TokenSeq> load_corpus(const std::string& path, const std::string& format) {
  if (format == "hex") {
    std::vector<TokenSeq> out;
    for (RecallSample& s : load_recall_corpus(path)) out.push_back(std::move(s.seq));
    return out;
  }
  if (format != "raw") throw ConfigError("data_format must be raw or hex, got '" + format + "'");
  return {load_raw_corpus(path)};
}

int cmd_train(const CommonOpts& common, const std::string& data, const std::string& eval_data,
              const std::string& out_dir, const std::string& resume) {
  KeyValueConfig kv = merge_config(common);
  const std::string format = kv.get_str("data_format", "raw");
  std::vector<TokenSeq> corpus = load_corpus(data, format);
  std::vector<TokenSeq> eval_corpus;
  if (!eval_data.empty()) eval_corpus = load_corpus(eval_data, format);

  std::unique_ptr<Trainer> trainer;
  if (!resume.empty()) {
    trainer = std::make_unique<Trainer>(Trainer::load_checkpoint(resume));
  } else {
    trainer = std::make_unique<Trainer>(kv.to_model_config(), kv.to_train_config());
    trainer->init_params();
  }
  FitResult result =
      trainer->fit(corpus, eval_corpus.empty() ? nullptr : &eval_corpus, out_dir);
  std::cout << "steps " << trainer->step() << "\n";
  if (!result.step_losses.empty()) {
    std::cout << "final_train_loss " << result.step_losses.back() << "\n";
  }
  if (!std::isnan(result.final_eval_loss)) {
    std::cout << "final_eval_loss " << result.final_eval_loss << "\n";
  }
  std::cout << "checkpoint " << result.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& format) {
  Checkpoint ck = Checkpoint::load(ckpt);
  ModelConfig cfg = config_from_checkpoint(ck);
  ModelParams params = params_from_checkpoint(ck, cfg);
  std::vector<TokenSeq> corpus = load_corpus(data, format);
  double sum = 0.0;
  for (const TokenSeq& s : corpus) sum += forward_sequence(params, cfg, s).mean_loss;
  const double nats = sum / static_cast<double>(corpus.size());
  std::printf("nats_per_byte %.4f\n", nats);
  std::printf("bits_per_byte %.4f\n", nats / std::log(2.0));
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt_text,
                 const std::string& prompt_file, int max_new, double temperature,
                 std::uint64_t seed) {
  Checkpoint ck = Checkpoint::load(ckpt);
  ModelConfig cfg = config_from_checkpoint(ck);
  ModelParams params = params_from_checkpoint(ck, cfg);
  TokenSeq prompt = prompt_file.empty() ? tokenize_bytes(prompt_text, "prompt")
                                        : load_raw_corpus(prompt_file);
  TokenSeq out = generate(params, cfg, prompt, max_new, temperature, seed);
  const std::string continuation =
      detokenize(out).substr(prompt.tokens.size());
  std::fwrite(continuation.data(), 1, continuation.size(), stdout);
  return 0;
}

int cmd_gradcheck(const CommonOpts& common, int probes, double h, double threshold,
                  int n_chunks) {
  KeyValueConfig kv = merge_config(common);
  // Tiny defaults unless the config says otherwise.
  ModelConfig cfg;
  cfg.d = kv.get_int("d", 4);
  cfg.d_h = kv.get_int("d_h", 4);
  cfg.d_mem = kv.get_int("d_mem", cfg.d);
  cfg.chunk = kv.get_int("chunk", 8);
  cfg.ssm_taps = kv.get_int("ssm_taps", 4);
  cfg.mrc.taps = kv.get_int("conv_taps", 2);
  cfg.mrc.dilations = {1, 2};
  cfg.top_k = kv.get_int("top_k", 1);
  cfg.mem_capacity = kv.get_int("mem_capacity", 64);
  cfg.ablate.no_ssm = kv.get_bool("no_ssm", false);
  cfg.ablate.no_retrieval = kv.get_bool("no_retrieval", false);
  cfg.ablate.no_rnn = kv.get_bool("no_rnn", false);
  cfg.validate();
  const double err = model_grad_check(cfg, kv.get_u64("seed", 0), n_chunks, probes, h);
  std::printf("max_rel_error %.3e\n", err);
  if (!(err < threshold)) {
    std::fprintf(stderr, "gradcheck failed: %.3e >= threshold %.3e\n", err, threshold);
    return 2;
  }
  return 0;
}

int cmd_make_synth(std::uint64_t seed, int key_len, int gap, int samples,
                   const std::string& out) {
  auto corpus = make_recall_corpus(seed, key_len, gap, samples);
  save_recall_corpus(corpus, out, seed, key_len, gap);
  std::cout << "wrote " << corpus.size() << " samples to " << out << "\n";
  return 0;
}

std::vector<std::int64_t> parse_n_list(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  if (out.size() < 4) throw ConfigError("bench-scaling needs >= 4 sequence lengths");
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i] <= out[i - 1]) throw ConfigError("bench-scaling n list must be ascending");
  }
  if (out.back() < 8 * out.front()) {
    throw ConfigError("bench-scaling n list must span at least an 8x range");
  }
  return out;
}

int cmd_bench_scaling(const CommonOpts& common, const std::string& n_list,
                      const std::string& attn_n_list, int reps, const std::string& out,
                      const std::string& tag) {
  KeyValueConfig kv = merge_config(common);
  ModelConfig cfg = kv.to_model_config();
  BenchConfig bench;
  bench.chunked_n = parse_n_list(n_list);
  bench.attention_n = parse_n_list(attn_n_list);
  bench.reps = reps;
  bench.seed = kv.get_u64("seed", 42);
  bench.attn_d = cfg.d;

  std::vector<BenchRecord> records;
  if (tag == "both" || tag == "chunked") {
    auto rows = bench_chunked(cfg, bench.chunked_n, bench.reps, bench.seed);
    records.insert(records.end(), rows.begin(), rows.end());
    const ScalingFit fit = fit_scaling(rows);
    std::printf("fit tag=chunked alpha=%.4f r2=%.5f points=%d\n", fit.alpha, fit.r2, fit.points);
  }
  if (tag == "both" || tag == "attention") {
    auto rows = bench_attention(bench.attn_d, bench.attention_n, bench.reps, bench.seed);
    records.insert(records.end(), rows.begin(), rows.end());
    const ScalingFit fit = fit_scaling(rows);
    std::printf("fit tag=attention alpha=%.4f r2=%.5f points=%d\n", fit.alpha, fit.r2, fit.points);
  }
  if (!out.empty()) write_bench_csv(records, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunked attention-free byte-level language model"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model, writing checkpoints + metrics CSV");
  CommonOpts train_opts;
  std::string train_data, train_eval_data, train_out = "runs/train", train_resume;
  train->add_option("--data", train_data, "training corpus (raw bytes or hex per data_format)");
  train->add_option("--eval-data", train_eval_data, "eval corpus");
  train->add_option("--out", train_out, "output directory");
  train->add_option("--resume", train_resume, "checkpoint path to resume from");
  add_config_flags(train, train_opts);

  // eval
  auto* eval = app.add_subcommand("eval", "report nats/byte and bits/byte on a corpus");
  std::string eval_ckpt, eval_data, eval_format = "raw";
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--data-format", eval_format, "raw | hex");

  // generate
  auto* gen = app.add_subcommand("generate", "autoregressively continue a prompt");
  std::string gen_ckpt, gen_prompt, gen_prompt_file;
  int gen_max_new = 64;
  double gen_temp = 1.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--ckpt", gen_ckpt)->required();
  gen->add_option("--prompt", gen_prompt, "prompt text");
  gen->add_option("--prompt-file", gen_prompt_file, "file with prompt bytes");
  gen->add_option("--max-new", gen_max_new);
  gen->add_option("--temperature", gen_temp, "0 selects argmax");
  gen->add_option("--seed", gen_seed);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "end-to-end finite-difference gradient check");
  CommonOpts gc_opts;
  int gc_probes = 200, gc_chunks = 3;
  double gc_h = 1e-5, gc_threshold = 1e-5;
  gc->add_option("--probes", gc_probes);
  gc->add_option("--fd-step", gc_h, "central-difference step h");
  gc->add_option("--threshold", gc_threshold, "fail (exit 2) at or above this error");
  gc->add_option("--chunks", gc_chunks, "sequence length in chunks");
  add_config_flags(gc, gc_opts);

  // make-synth
  auto* synth = app.add_subcommand("make-synth", "write the long-range recall corpus");
  std::uint64_t synth_seed = 0;
  int synth_key_len = 8, synth_gap = 1024, synth_samples = 2000;
  std::string synth_out = "recall.hex";
  synth->add_option("--seed", synth_seed);
  synth->add_option("--key-len", synth_key_len);
  synth->add_option("--gap", synth_gap);
  synth->add_option("--samples", synth_samples);
  synth->add_option("--out", synth_out);

  // bench-scaling
  auto* bench = app.add_subcommand("bench-scaling", "runtime/memory scaling vs attention");
  CommonOpts bench_opts;
  std::string bench_n = "8192,16384,32768,65536";
  std::string bench_attn_n = "512,1024,2048,4096";
  std::string bench_out = "scaling.csv", bench_tag = "both";
  int bench_reps = 3;
  bench->add_option("--n-list", bench_n, "chunked-model sequence lengths (comma list)");
  bench->add_option("--attn-n-list", bench_attn_n, "attention-baseline lengths");
  bench->add_option("--reps", bench_reps);
  bench->add_option("--out", bench_out, "CSV output path");
  bench->add_option("--tag", bench_tag)->check(CLI::IsMember({"both", "chunked", "attention"}));
  add_config_flags(bench, bench_opts, {"n_list"});

  try {
    app.parse(argc, argv);
    if (*train) {
      if (train_data.empty()) throw ConfigError("train: --data is required");
      return cmd_train(train_opts, train_data, train_eval_data, train_out, train_resume);
    }
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_format);
    if (*gen) {
      if (gen_prompt.empty() && gen_prompt_file.empty()) {
        throw ConfigError("generate: --prompt or --prompt-file is required");
      }
      return cmd_generate(gen_ckpt, gen_prompt, gen_prompt_file, gen_max_new, gen_temp, gen_seed);
    }
    if (*gc) return cmd_gradcheck(gc_opts, gc_probes, gc_h, gc_threshold, gc_chunks);
    if (*synth) return cmd_make_synth(synth_seed, synth_key_len, synth_gap, synth_samples, synth_out);
    if (*bench) {
      return cmd_bench_scaling(bench_opts, bench_n, bench_attn_n, bench_reps, bench_out,
                               bench_tag);
    }
    return 1;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const GuardError& e) {
    std::fprintf(stderr, "refused: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
