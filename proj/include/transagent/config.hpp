#pragma once

// Flat dotted-key run configuration (e.g. loss.lambda2=25). Every key has a
// type and a default; values are validated when set.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "transagent/agent_hub.hpp"
#include "transagent/benchmark.hpp"
#include "transagent/eval_harness.hpp"
#include "transagent/trainer.hpp"

namespace transagent {

enum class KeyType { integer, number, boolean, text, choice, seed_list };

struct ConfigKey {
  std::string name;
  KeyType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // KeyType::choice
};

const std::vector<ConfigKey>& config_schema();

class RunConfig {
 public:
  RunConfig();  // every key at its default

  /// Throws ConfigError for an unknown key or a value that does not parse.
  void set(const std::string& key, const std::string& value);
  /// "key=value"
  void apply_override(const std::string& assignment);
  /// Flat JSON object of dotted keys; values may be strings, numbers, booleans or arrays (seed lists).
  void merge_json(const std::string& json_text);
  void merge_file(const std::string& path);  // MissingInput when absent

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::uint64_t> get_seeds(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical JSON with every key, sorted.
  std::string to_json() const;
  /// Hex digest of every key except run.* and cache.* (they do not change results).
  std::string hash() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Usage text listing every key with its default.
std::string config_help();

BenchmarkConfig benchmark_config(const RunConfig& c);
EncoderConfig encoder_config(const RunConfig& c);
TrainConfig train_config(const RunConfig& c);
ExperimentConfig experiment_config(const RunConfig& c);
/// Built-in roster unless agents.registry names a file.
AgentRegistry registry_from(const RunConfig& c);

}  // namespace transagent
