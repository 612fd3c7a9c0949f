#include "transagent/agent_hub.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"
#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

using nlohmann::json;

std::string to_string(AgentModality m) {
  switch (m) {
    case AgentModality::vision: return "vision";
    case AgentModality::language: return "language";
    case AgentModality::t2i: return "t2i";
    case AgentModality::i2t: return "i2t";
  }
  return "vision";
}

AgentModality agent_modality_from_string(const std::string& s) {
  if (s == "vision") return AgentModality::vision;
  if (s == "language") return AgentModality::language;
  if (s == "t2i") return AgentModality::t2i;
  if (s == "i2t") return AgentModality::i2t;
  throw ConfigError("unknown agent modality '" + s + "'");
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::logsumexp: return "logsumexp";
    case Pooling::average: return "average";
    case Pooling::max: return "max";
  }
  return "logsumexp";
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "logsumexp" || s == "lse") return Pooling::logsumexp;
  if (s == "average") return Pooling::average;
  if (s == "max") return Pooling::max;
  throw ConfigError("pooling must be logsumexp, average or max, got '" + s + "'");
}

namespace {

json descriptor_to_json(const AgentDescriptor& a) {
  json j = {{"agent_id", a.agent_id},
            {"modality", to_string(a.modality)},
            {"kind", a.kind},
            {"width", a.feature_width},
            {"layers", a.layer_count},
            {"tokens", a.tokens},
            {"seed", a.seed},
            {"informativeness", a.informativeness},
            {"noise", a.noise},
            {"scale", a.scale},
            {"constant", a.constant_value},
            {"descriptions_per_class", a.descriptions_per_class}};
  if (!a.descriptions_path.empty()) j["descriptions"] = a.descriptions_path;
  return j;
}

AgentDescriptor descriptor_from_json(const json& j) {
  static const std::set<std::string> known = {"agent_id", "modality", "kind",     "width",
                                              "layers",   "tokens",   "seed",     "informativeness",
                                              "noise",    "scale",    "constant", "descriptions_per_class",
                                              "descriptions"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError("agent registry: unknown field '" + k + "'");
  }
  AgentDescriptor a;
  a.agent_id = j.at("agent_id").get<std::string>();
  a.modality = agent_modality_from_string(j.at("modality").get<std::string>());
  a.kind = j.value("kind", a.modality == AgentModality::language ? std::string("traits") : std::string("latent"));
  a.feature_width = j.value("width", a.feature_width);
  a.layer_count = j.value("layers", a.layer_count);
  a.tokens = j.value("tokens", a.tokens);
  a.seed = j.value("seed", a.seed);
  a.informativeness = j.value("informativeness", a.informativeness);
  a.noise = j.value("noise", a.noise);
  a.scale = j.value("scale", a.scale);
  a.constant_value = j.value("constant", a.constant_value);
  a.descriptions_per_class = j.value("descriptions_per_class", a.descriptions_per_class);
  a.descriptions_path = j.value("descriptions", std::string());
  if (a.agent_id.empty()) throw ConfigError("agent registry: empty agent_id");
  if (a.feature_width < 1 || a.layer_count < 1 || a.tokens < 0 || a.descriptions_per_class < 1) {
    throw ConfigError("agent '" + a.agent_id + "': width, layers and descriptions_per_class must be positive");
  }
  if (a.informativeness < 0.0 || a.informativeness > 1.0) {
    throw ConfigError("agent '" + a.agent_id + "': informativeness must lie in [0, 1]");
  }
  return a;
}

Rng sample_rng(const AgentDescriptor& a, const std::string& key, std::uint64_t tag) {
  return Rng(mix_seed(mix_seed(a.seed, key), tag));
}

const LatentOracle& need_oracle(const AgentDescriptor& a, const LatentOracle* oracle) {
  if (oracle == nullptr) throw ConfigError("agent '" + a.agent_id + "' needs a latent oracle");
  return *oracle;
}

/// Seeded k x width map used by latent agents; layer 0 is the base map.
Matrix latent_map(const AgentDescriptor& a, int k, int layer) {
  Rng base(mix_seed(a.seed, "latent_map"));
  Matrix m = normal_matrix(base, k, a.feature_width, 1.0 / std::sqrt(static_cast<double>(k)));
  if (layer > 0) {
    Rng per(mix_seed(mix_seed(a.seed, "latent_map_layer"), static_cast<std::uint64_t>(layer)));
    m += 0.3 * normal_matrix(per, k, a.feature_width, 1.0 / std::sqrt(static_cast<double>(k)));
  }
  return m;
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", v);
  return buf;
}

}  // namespace

std::uint64_t AgentDescriptor::fingerprint() const { return fnv1a64(descriptor_to_json(*this).dump()); }

AgentRegistry::AgentRegistry(std::vector<AgentDescriptor> agents) : agents_(std::move(agents)) {
  std::set<std::string> seen;
  for (const AgentDescriptor& a : agents_) {
    if (!seen.insert(a.agent_id).second) throw ConfigError("duplicate agent_id '" + a.agent_id + "'");
  }
}

const AgentDescriptor& AgentRegistry::find(const std::string& agent_id) const {
  for (const AgentDescriptor& a : agents_) {
    if (a.agent_id == agent_id) return a;
  }
  throw LookupError("unknown agent_id '" + agent_id + "'");
}

bool AgentRegistry::contains(const std::string& agent_id) const {
  return std::any_of(agents_.begin(), agents_.end(), [&](const AgentDescriptor& a) { return a.agent_id == agent_id; });
}

std::vector<AgentDescriptor> AgentRegistry::by_modality(AgentModality m) const {
  std::vector<AgentDescriptor> out;
  std::copy_if(agents_.begin(), agents_.end(), std::back_inserter(out),
               [m](const AgentDescriptor& a) { return a.modality == m; });
  return out;
}

AgentRegistry AgentRegistry::parse(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("agent registry: ") + e.what());
  }
  if (!j.contains("agents") || !j["agents"].is_array()) throw ConfigError("agent registry: missing 'agents' array");
  std::vector<AgentDescriptor> agents;
  try {
    for (const json& e : j["agents"]) agents.push_back(descriptor_from_json(e));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("agent registry: ") + e.what());
  }
  return AgentRegistry(std::move(agents));
}

AgentRegistry AgentRegistry::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("agent registry not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string AgentRegistry::to_json() const {
  json arr = json::array();
  for (const AgentDescriptor& a : agents_) arr.push_back(descriptor_to_json(a));
  return json{{"agents", arr}}.dump(2);
}

AgentRegistry default_registry() {
  auto make = [](std::string id, AgentModality m, int width, int layers, std::uint64_t seed, double info,
                 double noise) {
    AgentDescriptor a;
    a.agent_id = std::move(id);
    a.modality = m;
    a.kind = m == AgentModality::language ? "traits" : "latent";
    a.feature_width = width;
    a.layer_count = layers;
    a.seed = seed;
    a.informativeness = info;
    a.noise = noise;
    return a;
  };
  std::vector<AgentDescriptor> agents = {
      make("vision_masked", AgentModality::vision, 48, 6, 101, 0.9, 1.0),
      make("vision_dense", AgentModality::vision, 32, 4, 102, 0.7, 1.0),
      make("vision_selfsup", AgentModality::vision, 24, 4, 103, 0.0, 1.0),
      make("language_large", AgentModality::language, 32, 1, 201, 0.9, 0.3),
      make("language_chat", AgentModality::language, 32, 1, 202, 0.6, 0.6),
      make("t2i_unet", AgentModality::t2i, 1, 1, 301, 0.8, 1.0),
      make("t2i_dit", AgentModality::t2i, 1, 1, 302, 0.6, 1.0),
      make("i2t_caption", AgentModality::i2t, 24, 1, 401, 0.8, 1.0),
      make("i2t_grounded", AgentModality::i2t, 24, 1, 402, 0.6, 1.0),
  };
  for (AgentDescriptor& a : agents) {
    if (a.modality == AgentModality::t2i) a.scale = 2.0;
  }
  return AgentRegistry(std::move(agents));
}

std::vector<int> uniform_layer_mapping(int agent_layers, int student_layers) {
  if (agent_layers < 1 || student_layers < 0) throw InvalidInput("layer mapping needs agent_layers >= 1");
  std::vector<int> out;
  for (int j = 0; j < student_layers; ++j) {
    const int idx = static_cast<int>((static_cast<long long>(j + 1) * agent_layers) / student_layers) - 1;
    out.push_back(std::clamp(idx, 0, agent_layers - 1));
  }
  return out;
}

Matrix vision_feature_stack(const AgentDescriptor& agent, const VisualTokenSequence& seq,
                            const LatentOracle* oracle) {
  if (agent.modality != AgentModality::vision) {
    throw InvalidInput("agent '" + agent.agent_id + "' is not a vision agent");
  }
  const int layers = agent.layer_count;
  Matrix out(layers, agent.feature_width);
  if (agent.kind == "constant") {
    out.setConstant(agent.constant_value);
  } else if (agent.kind == "mean_patch") {
    if (seq.tokens.cols() != agent.feature_width) {
      throw ConfigError("mean_patch agent width must equal token width");
    }
    const Eigen::Index len = seq.tokens.rows();
    for (int l = 0; l < layers; ++l) {
      const Eigen::Index upto =
          std::max<Eigen::Index>(1, (static_cast<Eigen::Index>(l + 1) * len + layers - 1) / layers);
      out.row(l) = seq.tokens.topRows(upto).colwise().mean();
    }
  } else if (agent.kind == "latent") {
    const LatentOracle& o = need_oracle(agent, oracle);
    const Matrix z = o.sample_latent(seq.sample_id);
    Rng rng = sample_rng(agent, seq.sample_id, 1);
    for (int l = 0; l < layers; ++l) {
      const Matrix signal = z * latent_map(agent, o.latent_dim(), l);
      const Matrix noise = normal_matrix(rng, 1, agent.feature_width, agent.noise);
      out.row(l) = agent.informativeness * signal + (1.0 - agent.informativeness) * noise;
    }
  } else {
    throw ConfigError("unknown vision agent kind '" + agent.kind + "'");
  }
  return round_to_float(out);
}

AgentFeatureBundle extract_vision_features(const AgentDescriptor& agent, std::span<const VisualTokenSequence> batch,
                                           std::span<const int> layer_mapping, const LatentOracle* oracle) {
  AgentFeatureBundle bundle;
  bundle.agent_id = agent.agent_id;
  const Eigen::Index n = static_cast<Eigen::Index>(batch.size());
  for (int layer : layer_mapping) {
    if (layer < 0 || layer >= agent.layer_count) throw InvalidInput("layer mapping outside agent layers");
    bundle.per_layer_features.emplace_back(n, agent.feature_width);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const Matrix stack = vision_feature_stack(agent, batch[static_cast<std::size_t>(i)], oracle);
    for (std::size_t m = 0; m < layer_mapping.size(); ++m) {
      bundle.per_layer_features[m].row(i) = stack.row(layer_mapping[m]);
    }
  }
  return bundle;
}

AgentFeatureBundle extract_vision_features(const AgentRegistry& registry, const std::string& agent_id,
                                           std::span<const VisualTokenSequence> batch,
                                           std::span<const int> layer_mapping, const LatentOracle* oracle) {
  return extract_vision_features(registry.find(agent_id), batch, layer_mapping, oracle);
}

TraitTextEncoder::TraitTextEncoder(Matrix basis, std::uint64_t seed, double word_noise)
    : basis_(std::move(basis)), seed_(seed), word_noise_(word_noise) {}

Matrix TraitTextEncoder::encode(const std::string& text) const {
  Matrix out = Matrix::Zero(1, basis_.cols());
  std::istringstream in(text);
  for (std::string w; in >> w;) {
    if (w.rfind("trait", 0) == 0) {
      const auto colon = w.find(':');
      if (colon != std::string::npos) {
        try {
          const int d = std::stoi(w.substr(5, colon - 5));
          const double v = std::stod(w.substr(colon + 1));
          if (d >= 0 && d < basis_.rows()) {
            out += v * basis_.row(d);
            continue;
          }
        } catch (const std::exception&) {
          // Malformed trait words fall through to the hashed embedding.
        }
      }
    }
    if (word_noise_ > 0.0) {
      Rng rng(mix_seed(seed_, w));
      out += normal_matrix(rng, 1, basis_.cols(), word_noise_);
    }
  }
  return out;
}

AgentFeatureBundle extract_language_features(const ClassDescriptionSet& descs, std::span<const int> class_ids,
                                             const TextFeatureEncoder& encoder) {
  AgentFeatureBundle bundle;
  bundle.agent_id = descs.agent_id;
  bundle.class_features.resize(static_cast<Eigen::Index>(class_ids.size()), encoder.width());
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    auto it = descs.descriptions.find(class_ids[i]);
    if (it == descs.descriptions.end() || it->second.empty()) {
      throw InvalidInput("no descriptions for class " + std::to_string(class_ids[i]) + " from agent '" +
                         descs.agent_id + "'");
    }
    Matrix acc = Matrix::Zero(1, encoder.width());
    for (const std::string& d : it->second) acc += encoder.encode(d);
    bundle.class_features.row(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(it->second.size());
  }
  bundle.class_features = round_to_float(bundle.class_features);
  return bundle;
}

std::unique_ptr<TextFeatureEncoder> make_agent_text_encoder(const AgentDescriptor& agent,
                                                            const LatentOracle& oracle) {
  if (agent.modality != AgentModality::language) {
    throw InvalidInput("agent '" + agent.agent_id + "' is not a language agent");
  }
  if (agent.feature_width != oracle.ideal_map().cols()) {
    throw ConfigError("language agent '" + agent.agent_id + "' width must equal the embedding width");
  }
  // Scaled so a full description of unit-variance traits has roughly unit norm
  // contributions per trait, and filler words stay small.
  return std::make_unique<TraitTextEncoder>(oracle.ideal_map(), mix_seed(agent.seed, "words"), 0.05);
}

ClassDescriptionSet synthesize_descriptions(const AgentDescriptor& agent, const LatentOracle& oracle,
                                            std::span<const int> class_ids) {
  ClassDescriptionSet out;
  out.agent_id = agent.agent_id;
  const int k = oracle.latent_dim();
  for (int c : class_ids) {
    const Matrix z = oracle.class_latent(c);
    Rng rng = sample_rng(agent, "class" + std::to_string(c), 2);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, agent.noise);
    std::vector<std::string> texts;
    for (int r = 0; r < agent.descriptions_per_class; ++r) {
      std::string text = oracle.class_name(c) + " looks like";
      for (int d = 0; d < k; ++d) {
        if (coin(rng) > agent.informativeness) continue;
        text += " trait" + std::to_string(d) + ":" + format_value(z(0, d) + jitter(rng));
      }
      text += r % 2 == 0 ? " in most photos" : " when seen up close";
      texts.push_back(std::move(text));
    }
    out.descriptions[c] = std::move(texts);
  }
  return out;
}

ClassDescriptionSet load_descriptions(const std::string& path, const std::string& agent_id) {
  std::ifstream in(path);
  if (!in) throw MissingInput("description file not found: " + path);
  ClassDescriptionSet out;
  out.agent_id = agent_id;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      const int c = j.at("class").get<int>();
      auto texts = j.at("descriptions").get<std::vector<std::string>>();
      if (texts.empty()) throw InvalidInput("class " + std::to_string(c) + " has no descriptions");
      auto& slot = out.descriptions[c];
      slot.insert(slot.end(), texts.begin(), texts.end());
    } catch (const json::exception& e) {
      throw InvalidInput(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_descriptions(const ClassDescriptionSet& descs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const auto& [c, texts] : descs.descriptions) {
    out << json{{"class", c}, {"descriptions", texts}}.dump() << '\n';
  }
}

CrossAttentionMap t2i_attention_map(const AgentDescriptor& agent, const VisualTokenSequence& seq,
                                    std::span<const int> class_ids, const LatentOracle& oracle) {
  if (agent.modality != AgentModality::t2i) throw InvalidInput("agent '" + agent.agent_id + "' is not T2I");
  const int k_tokens = agent.tokens > 0 ? agent.tokens : static_cast<int>(seq.tokens.rows());
  const int k = oracle.latent_dim();
  const Matrix z = oracle.sample_latent(seq.sample_id);
  Rng rng = sample_rng(agent, seq.sample_id, 3);
  // Per-token latents: the sample latent plus spatial jitter.
  Matrix token_latents = z.replicate(k_tokens, 1) + normal_matrix(rng, k_tokens, k, 0.5);
  CrossAttentionMap map;
  map.sample_id = seq.sample_id;
  map.values.resize(static_cast<Eigen::Index>(class_ids.size()), k_tokens);
  const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    const Matrix zc = oracle.class_latent(class_ids[c]);
    const Matrix signal = (token_latents * zc.transpose()).transpose() * inv_sqrt_k;
    const Matrix noise = normal_matrix(rng, 1, k_tokens, agent.noise);
    map.values.row(static_cast<Eigen::Index>(c)) =
        agent.scale * (agent.informativeness * signal + (1.0 - agent.informativeness) * noise);
  }
  map.values = round_to_float(map.values);
  return map;
}

double pool_tokens(const Eigen::Ref<const Eigen::RowVectorXd>& values, Pooling pooling) {
  if (values.size() == 0) throw InvalidInput("attention map has an empty token axis");
  switch (pooling) {
    case Pooling::average: return values.mean();
    case Pooling::max: return values.maxCoeff();
    case Pooling::logsumexp: {
      const double m = values.maxCoeff();
      return m + std::log((values.array() - m).exp().sum());
    }
  }
  return 0.0;
}

ScoreMatrix t2i_scores(std::span<const CrossAttentionMap> maps, Pooling pooling) {
  if (maps.empty()) throw InvalidInput("t2i_scores: no maps");
  const Eigen::Index n_cls = maps.front().values.rows();
  ScoreMatrix out{Matrix(static_cast<Eigen::Index>(maps.size()), n_cls), ScoreKind::t2i};
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].values.rows() != n_cls) throw InvalidInput("t2i_scores: class count differs between samples");
    for (Eigen::Index c = 0; c < n_cls; ++c) {
      out.values(static_cast<Eigen::Index>(n), c) = pool_tokens(maps[n].values.row(c), pooling);
    }
  }
  return out;
}

EncodedFeature i2t_visual_features(const AgentDescriptor& agent, std::span<const VisualTokenSequence> batch,
                                   const LatentOracle& oracle) {
  if (agent.modality != AgentModality::i2t) throw InvalidInput("agent '" + agent.agent_id + "' is not I2T");
  const Matrix map = latent_map(agent, oracle.latent_dim(), 0);
  EncodedFeature out{Matrix(static_cast<Eigen::Index>(batch.size()), agent.feature_width), Modality::vision};
  for (std::size_t n = 0; n < batch.size(); ++n) {
    Rng rng = sample_rng(agent, batch[n].sample_id, 4);
    const Matrix z = oracle.sample_latent(batch[n].sample_id);
    out.values.row(static_cast<Eigen::Index>(n)) =
        agent.informativeness * (z * map) +
        (1.0 - agent.informativeness) * normal_matrix(rng, 1, agent.feature_width, agent.noise);
  }
  out.values = round_to_float(out.values);
  return out;
}

EncodedFeature i2t_class_features(const AgentDescriptor& agent, std::span<const int> class_ids,
                                  const LatentOracle& oracle) {
  if (agent.modality != AgentModality::i2t) throw InvalidInput("agent '" + agent.agent_id + "' is not I2T");
  const Matrix map = latent_map(agent, oracle.latent_dim(), 0);
  EncodedFeature out{Matrix(static_cast<Eigen::Index>(class_ids.size()), agent.feature_width), Modality::text};
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    Rng rng = sample_rng(agent, "class" + std::to_string(class_ids[c]), 5);
    out.values.row(static_cast<Eigen::Index>(c)) =
        oracle.class_latent(class_ids[c]) * map + normal_matrix(rng, 1, agent.feature_width, 0.1);
  }
  out.values = round_to_float(out.values);
  return out;
}

ScoreMatrix i2t_scores(const EncodedFeature& projected_visual, const EncodedFeature& class_text) {
  return {cosine_matrix(projected_visual.values, class_text.values), ScoreKind::i2t};
}

}  // namespace transagent
