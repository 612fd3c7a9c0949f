#include "transagent/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

namespace {

using KT = KeyType;

std::vector<ConfigKey> build_schema() {
  return {
      {"data.dataset", KT::text, "synthetic", "dataset id recorded in caches and students"},
      {"data.seed", KT::integer, "2024", "seed of the synthetic world"},
      {"data.classes", KT::integer, "20", "number of classes"},
      {"data.latent_dim", KT::integer, "12", "dimension of the class latent space"},
      {"data.patches", KT::integer, "8", "patch tokens per image"},
      {"data.train_per_class", KT::integer, "16", "training pool size per class"},
      {"data.test_per_class", KT::integer, "100", "test images per class"},
      {"data.intra_class_std", KT::number, "0.6", "spread of sample latents around the class latent"},
      {"data.patch_noise", KT::number, "0.5", "per-patch token noise"},
      {"data.name_noise", KT::number, "1", "noise of class-name token embeddings"},
      {"data.domain_shift", KT::number, "2", "scale of the downstream domain offset"},
      {"data.pretrain_classes", KT::integer, "160", "source classes used to fit the frozen projections"},
      {"data.split_seed", KT::integer, "0", "seed of the base/novel partition"},
      {"data.shots", KT::integer, "16", "training images per base class"},
      {"encoder.depth", KT::integer, "3", "transformer blocks per branch"},
      {"encoder.width", KT::integer, "32", "token width"},
      {"encoder.embed_width", KT::integer, "32", "shared embedding width"},
      {"encoder.mlp_hidden", KT::integer, "64", "block MLP width"},
      {"encoder.seed", KT::integer, "7", "seed of the frozen weights"},
      {"prompt.n_ctx", KT::integer, "4", "prompt tokens per layer"},
      {"prompt.depth", KT::integer, "2", "layers receiving prompts"},
      {"prompt.seed", KT::integer, "1", "prompt initialisation seed (mixed with each run seed)"},
      {"prompt.init_std", KT::number, "0.02", "std of randomly initialised prompts"},
      {"prompt.init_phrase", KT::text, "a photo of a", "phrase initialising the first textual prompts"},
      {"text.pool", KT::choice, "eos", "text token distilled by LAC", {"eos", "sos"}},
      {"loss.lambda1", KT::number, "1", "VAC weight"},
      {"loss.lambda2", KT::number, "25", "LAC weight"},
      {"loss.lambda3", KT::number, "1", "MAC weight"},
      {"loss.temperature", KT::number, "1", "MAC softmax temperature"},
      {"loss.ce_temperature", KT::number, "0.01", "temperature of classification logits"},
      {"loss.mac_logit_scale", KT::number, "10", "scale applied to student cosine scores in MAC"},
      {"loss.mac_type", KT::choice, "kl", "MAC loss", {"kl", "l1", "mse"}},
      {"loss.mac_source", KT::choice, "learned_scores", "student scores used by MAC",
       {"learned_scores", "prompted_logits"}},
      {"loss.vac_mode", KT::choice, "layer_wise", "VAC layers", {"layer_wise", "last_layer"}},
      {"loss.fusion", KT::choice, "gating", "how agents are combined", {"gating", "average", "add"}},
      {"agents.registry", KT::text, "", "agent registry JSON file; empty uses the built-in roster"},
      {"agents.pooling", KT::choice, "logsumexp", "pooling of attention maps", {"logsumexp", "average", "max"}},
      {"train.epochs", KT::integer, "20", "training epochs"},
      {"train.batch_size", KT::integer, "4", "minibatch size"},
      {"train.lr", KT::number, "0.0025", "SGD learning rate"},
      {"train.momentum", KT::number, "0", "SGD momentum"},
      {"train.cosine", KT::boolean, "false", "cosine learning-rate decay"},
      {"train.seeds", KT::seed_list, "1,2,3", "comma-separated run seeds"},
      {"train.projection_ridge", KT::number, "0.1", "ridge strength of the projection warm start"},
      {"cache.use", KT::boolean, "false", "train from knowledge caches written by extract"},
      {"run.root", KT::text, "runs", "directory holding run directories"},
  };
}

std::string canonical_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

const ConfigKey& find_key(const std::string& key) {
  for (const ConfigKey& k : config_schema()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::string normalize(const ConfigKey& k, const std::string& raw) {
  const std::string v = trim(raw);
  auto bad = [&](const std::string& what) -> ConfigError {
    return ConfigError("config key " + k.name + ": " + what + ", got '" + raw + "'");
  };
  switch (k.type) {
    case KT::integer: {
      long long x = 0;
      auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw bad("expected an integer");
      return std::to_string(x);
    }
    case KT::number: {
      double x = 0;
      auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x)) throw bad("expected a number");
      return canonical_number(x);
    }
    case KT::boolean:
      if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
      if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
      throw bad("expected true or false");
    case KT::text: return raw;
    case KT::choice: {
      if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
        std::string opts;
        for (const auto& c : k.choices) opts += (opts.empty() ? "" : "|") + c;
        throw bad("expected one of " + opts);
      }
      return v;
    }
    case KT::seed_list: {
      std::stringstream ss(v);
      std::string item, out;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        unsigned long long x = 0;
        auto r = std::from_chars(item.data(), item.data() + item.size(), x);
        if (item.empty() || r.ec != std::errc() || r.ptr != item.data() + item.size()) {
          throw bad("expected comma-separated non-negative integers");
        }
        out += (out.empty() ? "" : ",") + std::to_string(x);
      }
      if (out.empty()) throw bad("expected at least one seed");
      return out;
    }
  }
  throw bad("unsupported type");
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

RunConfig::RunConfig() {
  for (const ConfigKey& k : config_schema()) values_[k.name] = normalize(k, k.default_value);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey& k = find_key(key);
  values_[key] = normalize(k, value);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const nlohmann::json& v = it.value();
    std::string text;
    if (v.is_string()) {
      text = v.get<std::string>();
    } else if (v.is_boolean()) {
      text = v.get<bool>() ? "true" : "false";
    } else if (v.is_number_integer()) {
      text = std::to_string(v.get<long long>());
    } else if (v.is_number()) {
      text = canonical_number(v.get<double>());
    } else if (v.is_array()) {
      for (const auto& e : v) {
        if (!e.is_number_unsigned() && !e.is_number_integer()) throw ConfigError("config key " + it.key() + ": array entries must be integers");
        text += (text.empty() ? "" : ",") + std::to_string(e.get<long long>());
      }
    } else {
      throw ConfigError("config key " + it.key() + " has an unsupported value type");
    }
    set(it.key(), text);
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("config file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  merge_json(ss.str());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const { return std::stoll(get(key)); }
double RunConfig::get_double(const std::string& key) const {
  double x = 0;
  const std::string& v = get(key);
  std::from_chars(v.data(), v.data() + v.size(), x);
  return x;
}
bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

std::vector<std::uint64_t> RunConfig::get_seeds(const std::string& key) const {
  std::vector<std::uint64_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  return out;
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j.dump(2);
}

std::string RunConfig::hash() const {
  std::string canon;
  for (const auto& [k, v] : values_) {
    if (k.rfind("run.", 0) == 0 || k.rfind("cache.", 0) == 0) continue;
    canon += k + "=" + v + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
  return buf;
}

std::string config_help() {
  std::ostringstream os;
  os << "Configuration keys (set with --set key=value or a JSON config file):\n";
  for (const ConfigKey& k : config_schema()) {
    char buf[256];
    std::string def = k.default_value.empty() ? "\"\"" : k.default_value;
    std::snprintf(buf, sizeof(buf), "  %-24s default %-16s %s", k.name.c_str(), def.c_str(), k.help.c_str());
    os << buf;
    if (!k.choices.empty()) {
      os << " (";
      for (std::size_t i = 0; i < k.choices.size(); ++i) os << (i ? "|" : "") << k.choices[i];
      os << ")";
    }
    os << '\n';
  }
  return os.str();
}

BenchmarkConfig benchmark_config(const RunConfig& c) {
  BenchmarkConfig b;
  b.dataset_id = c.get("data.dataset");
  b.seed = static_cast<std::uint64_t>(c.get_int("data.seed"));
  b.num_classes = static_cast<int>(c.get_int("data.classes"));
  b.latent_dim = static_cast<int>(c.get_int("data.latent_dim"));
  b.patches = static_cast<int>(c.get_int("data.patches"));
  b.train_per_class = static_cast<int>(c.get_int("data.train_per_class"));
  b.test_per_class = static_cast<int>(c.get_int("data.test_per_class"));
  b.intra_class_std = c.get_double("data.intra_class_std");
  b.patch_noise = c.get_double("data.patch_noise");
  b.name_noise = c.get_double("data.name_noise");
  b.domain_shift = c.get_double("data.domain_shift");
  b.pretrain_classes = static_cast<int>(c.get_int("data.pretrain_classes"));
  if (b.dataset_id.empty() || b.dataset_id.find('/') != std::string::npos) {
    throw ConfigError("data.dataset must be a non-empty name without '/'");
  }
  return b;
}

EncoderConfig encoder_config(const RunConfig& c) {
  EncoderConfig e;
  e.depth = static_cast<int>(c.get_int("encoder.depth"));
  e.width = static_cast<int>(c.get_int("encoder.width"));
  e.embed_width = static_cast<int>(c.get_int("encoder.embed_width"));
  e.mlp_hidden = static_cast<int>(c.get_int("encoder.mlp_hidden"));
  e.seed = static_cast<std::uint64_t>(c.get_int("encoder.seed"));
  if (e.depth < 1 || e.width < 1 || e.embed_width < 1 || e.mlp_hidden < 1) {
    throw ConfigError("encoder sizes must be positive");
  }
  return e;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = static_cast<int>(c.get_int("train.epochs"));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size"));
  t.learning_rate = c.get_double("train.lr");
  t.momentum = c.get_double("train.momentum");
  t.cosine_schedule = c.get_bool("train.cosine");
  t.seed = c.get_seeds("train.seeds").front();
  t.shots = static_cast<int>(c.get_int("data.shots"));
  t.weights.lambda1 = c.get_double("loss.lambda1");
  t.weights.lambda2 = c.get_double("loss.lambda2");
  t.weights.lambda3 = c.get_double("loss.lambda3");
  t.weights.temperature_distill = c.get_double("loss.temperature");
  t.ce_temperature = c.get_double("loss.ce_temperature");
  t.mac_logit_scale = c.get_double("loss.mac_logit_scale");
  t.fusion = fusion_from_string(c.get("loss.fusion"));
  t.vac_mode = vac_mode_from_string(c.get("loss.vac_mode"));
  t.lac_token = text_pool_from_string(c.get("text.pool"));
  t.mac_source = mac_source_from_string(c.get("loss.mac_source"));
  t.mac_type = mac_loss_type_from_string(c.get("loss.mac_type"));
  t.pooling = pooling_from_string(c.get("agents.pooling"));
  t.prompt.n_ctx = static_cast<int>(c.get_int("prompt.n_ctx"));
  t.prompt.depth = static_cast<int>(c.get_int("prompt.depth"));
  t.prompt.seed = static_cast<std::uint64_t>(c.get_int("prompt.seed"));
  t.prompt.init_std = c.get_double("prompt.init_std");
  t.prompt.init_phrase = c.get("prompt.init_phrase");
  t.projection_ridge = c.get_double("train.projection_ridge");
  t.validate();
  return t;
}

ExperimentConfig experiment_config(const RunConfig& c) {
  ExperimentConfig e;
  e.train = train_config(c);
  e.seeds = c.get_seeds("train.seeds");
  e.split_seed = static_cast<std::uint64_t>(c.get_int("data.split_seed"));
  return e;
}

AgentRegistry registry_from(const RunConfig& c) {
  const std::string& path = c.get("agents.registry");
  return path.empty() ? default_registry() : AgentRegistry::load(path);
}

}  // namespace transagent
