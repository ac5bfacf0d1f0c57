#include "chunklm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace chunklm {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // model
      "vocab", "d", "d_h", "d_mem", "chunk", "ssm_taps", "ssm_delta", "conv_taps", "dilations",
      "top_k", "mem_capacity", "index_mode", "n_list", "n_probe", "rebuild_every",
      "no_ssm", "no_retrieval", "no_rnn",
      // trainer
      "lr_peak", "warmup_steps", "max_steps", "beta1", "beta2", "eps", "weight_decay",
      "clip_norm", "batch", "w_bptt", "seed", "eval_every", "checkpoint_every", "log_every",
      // data
      "data_format",
  };
  return keys;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  KeyValueConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream is(line);
    std::string key, value;
    if (!(is >> key)) continue;
    if (!(is >> value)) {
      throw ConfigError("config " + path + ":" + std::to_string(lineno) + ": key '" + key +
                        "' has no value");
    }
    cfg.values[key] = value;
  }
  cfg.check_keys();
  return cfg;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values[key] = value;
}

std::string KeyValueConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + it->second + "'");
  }
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  if (it->second == "1" || it->second == "true") return true;
  if (it->second == "0" || it->second == "false") return false;
  throw ConfigError("config key '" + key + "': expected 0/1/true/false, got '" + it->second + "'");
}

void KeyValueConfig::check_keys() const {
  for (const auto& [k, v] : values) {
    if (!known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
}

ModelConfig KeyValueConfig::to_model_config() const {
  ModelConfig cfg;
  cfg.vocab = get_int("vocab", cfg.vocab);
  cfg.d = get_int("d", cfg.d);
  cfg.d_h = get_int("d_h", cfg.d_h);
  cfg.d_mem = get_int("d_mem", get_int("d", cfg.d));
  cfg.chunk = get_int("chunk", cfg.chunk);
  cfg.ssm_taps = get_int("ssm_taps", cfg.ssm_taps);
  cfg.ssm_delta = get_double("ssm_delta", cfg.ssm_delta);
  cfg.mrc.taps = get_int("conv_taps", cfg.mrc.taps);
  if (has("dilations")) cfg.mrc.dilations = parse_int_list(values.at("dilations"));
  cfg.top_k = get_int("top_k", cfg.top_k);
  cfg.mem_capacity = get_int("mem_capacity", cfg.mem_capacity);
  cfg.approx_memory = get_str("index_mode", "exact") == "approx";
  cfg.approx.n_list = get_int("n_list", cfg.approx.n_list);
  cfg.approx.n_probe = get_int("n_probe", cfg.approx.n_probe);
  cfg.approx.rebuild_every = get_int("rebuild_every", cfg.approx.rebuild_every);
  cfg.ablate.no_ssm = get_bool("no_ssm", false);
  cfg.ablate.no_retrieval = get_bool("no_retrieval", false);
  cfg.ablate.no_rnn = get_bool("no_rnn", false);
  cfg.validate();
  return cfg;
}

TrainConfig KeyValueConfig::to_train_config() const {
  TrainConfig cfg;
  cfg.lr_peak = get_double("lr_peak", cfg.lr_peak);
  cfg.warmup_steps = get_int("warmup_steps", cfg.warmup_steps);
  cfg.max_steps = get_int("max_steps", cfg.max_steps);
  cfg.beta1 = get_double("beta1", cfg.beta1);
  cfg.beta2 = get_double("beta2", cfg.beta2);
  cfg.eps = get_double("eps", cfg.eps);
  cfg.weight_decay = get_double("weight_decay", cfg.weight_decay);
  cfg.clip_norm = get_double("clip_norm", cfg.clip_norm);
  cfg.batch = get_int("batch", cfg.batch);
  cfg.w_bptt = get_int("w_bptt", cfg.w_bptt);
  cfg.seed = get_u64("seed", cfg.seed);
  cfg.eval_every = get_int("eval_every", cfg.eval_every);
  cfg.checkpoint_every = get_int("checkpoint_every", cfg.checkpoint_every);
  cfg.log_every = get_int("log_every", cfg.log_every);
  cfg.validate();
  return cfg;
}

}  // namespace chunklm
