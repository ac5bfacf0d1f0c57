#pragma once

#include <map>
#include <string>

#include "chunklm/model.hpp"
#include "chunklm/trainer.hpp"

namespace chunklm {

// Flat key-value config file: one "key value" pair per line, '#' comments.
// Keys mirror ModelConfig/TrainConfig; unknown keys are a usage error naming
// the key.
struct KeyValueConfig {
  std::map<std::string, std::string> values;

  static KeyValueConfig from_file(const std::string& path);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Validates key names; throws ConfigError on an unknown key.
  void check_keys() const;

  ModelConfig to_model_config() const;
  TrainConfig to_train_config() const;
};

}  // namespace chunklm
