#pragma once

// Teacher agents behind one interface. The shipped agents are deterministic
// synthetic stand-ins: seeded frozen maps whose "informative" variants read
// the ground-truth latent of a sample through a LatentOracle.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "transagent/core_model.hpp"

namespace transagent {

enum class AgentModality { vision, language, t2i, i2t };
enum class Pooling { logsumexp, average, max };

std::string to_string(AgentModality m);
AgentModality agent_modality_from_string(const std::string& s);
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

struct AgentDescriptor {
  std::string agent_id;
  AgentModality modality = AgentModality::vision;
  /// vision: constant | mean_patch | latent; language: traits; t2i / i2t: latent
  std::string kind = "latent";
  int feature_width = 32;
  int layer_count = 1;  // vision only
  int tokens = 0;       // t2i spatial tokens; 0 means one per image patch
  std::uint64_t seed = 0;
  double informativeness = 1.0;  // weight of the latent signal, in [0, 1]
  double noise = 1.0;            // std of the uninformative component
  double scale = 1.0;            // t2i attention logit scale
  double constant_value = 0.0;   // kind == constant
  int descriptions_per_class = 3;
  std::string descriptions_path;  // language: optional pre-collected description file

  /// Hash of every field that influences the agent's outputs.
  std::uint64_t fingerprint() const;
};

class AgentRegistry {
 public:
  AgentRegistry() = default;
  explicit AgentRegistry(std::vector<AgentDescriptor> agents);

  const AgentDescriptor& find(const std::string& agent_id) const;
  bool contains(const std::string& agent_id) const;
  const std::vector<AgentDescriptor>& agents() const { return agents_; }
  std::vector<AgentDescriptor> by_modality(AgentModality m) const;

  static AgentRegistry load(const std::string& path);
  static AgentRegistry parse(const std::string& json_text);
  std::string to_json() const;

 private:
  std::vector<AgentDescriptor> agents_;
};

/// Three vision, two language, two T2I and two I2T agents; one vision agent
/// is deliberately uninformative.
AgentRegistry default_registry();

/// Privileged view of the synthetic world used by informative agents.
class LatentOracle {
 public:
  virtual ~LatentOracle() = default;
  virtual int latent_dim() const = 0;
  virtual Matrix sample_latent(const std::string& sample_id) const = 0;  // 1 x k
  virtual Matrix class_latent(int class_id) const = 0;                   // 1 x k
  virtual std::string class_name(int class_id) const = 0;
  /// k x C map from latent space to the student's embedding space.
  virtual const Matrix& ideal_map() const = 0;
};

struct AgentFeatureBundle {
  std::string agent_id;
  std::vector<Matrix> per_layer_features;  // vision: one N x C_a matrix per mapped layer
  Matrix class_features;                   // language: N_cls x C_a
};

struct CrossAttentionMap {
  Matrix values;  // N_cls x K, row c holds M^c
  std::string sample_id;
};

struct ClassDescriptionSet {
  std::string agent_id;
  std::map<int, std::vector<std::string>> descriptions;  // class id -> texts
};

/// Student layer j receives agent layer floor((j + 1) * agent_layers / student_layers) - 1.
std::vector<int> uniform_layer_mapping(int agent_layers, int student_layers);

/// All layers of one sample: layer_count x C_a. Values are binary32-exact.
Matrix vision_feature_stack(const AgentDescriptor& agent, const VisualTokenSequence& seq,
                            const LatentOracle* oracle);

AgentFeatureBundle extract_vision_features(const AgentDescriptor& agent, std::span<const VisualTokenSequence> batch,
                                           std::span<const int> layer_mapping, const LatentOracle* oracle);
AgentFeatureBundle extract_vision_features(const AgentRegistry& registry, const std::string& agent_id,
                                           std::span<const VisualTokenSequence> batch,
                                           std::span<const int> layer_mapping, const LatentOracle* oracle);

class TextFeatureEncoder {
 public:
  virtual ~TextFeatureEncoder() = default;
  virtual int width() const = 0;
  virtual Matrix encode(const std::string& text) const = 0;  // 1 x width
};

/// Bag-of-words encoder: "trait<d>:<v>" contributes v * basis.row(d); any other
/// word contributes a hashed N(0, word_noise^2) vector. Sum over words.
class TraitTextEncoder : public TextFeatureEncoder {
 public:
  TraitTextEncoder(Matrix basis, std::uint64_t seed, double word_noise);
  int width() const override { return static_cast<int>(basis_.cols()); }
  Matrix encode(const std::string& text) const override;

 private:
  Matrix basis_;
  std::uint64_t seed_;
  double word_noise_;
};

/// Mean over each class's descriptions, one row per entry of `class_ids`.
AgentFeatureBundle extract_language_features(const ClassDescriptionSet& descs, std::span<const int> class_ids,
                                             const TextFeatureEncoder& encoder);

/// The text encoder a synthetic language agent uses.
std::unique_ptr<TextFeatureEncoder> make_agent_text_encoder(const AgentDescriptor& agent,
                                                            const LatentOracle& oracle);

/// Chatbot stand-in: answers built from noisy, partially omitted class traits.
ClassDescriptionSet synthesize_descriptions(const AgentDescriptor& agent, const LatentOracle& oracle,
                                            std::span<const int> class_ids);

/// One JSON object per line: {"class": c, "descriptions": [...]}.
ClassDescriptionSet load_descriptions(const std::string& path, const std::string& agent_id);
void save_descriptions(const ClassDescriptionSet& descs, const std::string& path);

CrossAttentionMap t2i_attention_map(const AgentDescriptor& agent, const VisualTokenSequence& seq,
                                    std::span<const int> class_ids, const LatentOracle& oracle);

/// Pools each map's token axis; row n of the result corresponds to maps[n].
ScoreMatrix t2i_scores(std::span<const CrossAttentionMap> maps, Pooling pooling = Pooling::logsumexp);
/// Pools one row vector of attention values.
double pool_tokens(const Eigen::Ref<const Eigen::RowVectorXd>& values, Pooling pooling);

/// Visual feature after the agent's projection module: N x C_a.
EncodedFeature i2t_visual_features(const AgentDescriptor& agent, std::span<const VisualTokenSequence> batch,
                                   const LatentOracle& oracle);
/// Class text features from the agent's language model: N_cls x C_a.
EncodedFeature i2t_class_features(const AgentDescriptor& agent, std::span<const int> class_ids,
                                  const LatentOracle& oracle);
ScoreMatrix i2t_scores(const EncodedFeature& projected_visual, const EncodedFeature& class_text);

}  // namespace transagent
