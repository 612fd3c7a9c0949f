#pragma once

// Multi-source distillation of agent knowledge into the student's prompts.
//
// Trainable state: prompts, one gate per distillation channel (one per mapped
// layer for vision), and a linear projection per (vision agent, mapped layer).
// The backbone is bound as graph constants and never receives gradients.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "transagent/agent_hub.hpp"
#include "transagent/core_model.hpp"
#include "transagent/distill_losses.hpp"
#include "transagent/knowledge_cache.hpp"
#include "transagent/moa_gating.hpp"

namespace transagent {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 4;
  double learning_rate = 0.0025;
  double momentum = 0.0;
  bool cosine_schedule = false;
  std::uint64_t seed = 1;
  int shots = 16;
  LossWeights weights;
  double ce_temperature = 0.01;
  double mac_logit_scale = 10.0;  // multiplies the student's cosine scores before the MAC softmax
  Fusion fusion = Fusion::gating;
  VacMode vac_mode = VacMode::layer_wise;
  TextPool lac_token = TextPool::eos;
  MacSource mac_source = MacSource::learned_scores;
  MacLossType mac_type = MacLossType::kl;
  Pooling pooling = Pooling::logsumexp;
  PromptConfig prompt;
  double projection_ridge = 0.1;

  /// Throws ConfigError for negative epochs, non-positive batch/lr and bad loss weights.
  void validate() const;
  /// Hex digest of every field above.
  std::string fingerprint() const;
  /// `prompt` with its seed mixed with the run seed.
  PromptConfig effective_prompt_config() const;
};

/// Labeled few-shot training samples plus the class texts they are scored against.
/// Labels index into `class_ids` / `class_texts`.
struct TrainingData {
  std::string dataset_id;
  std::string split = "train";
  std::vector<int> class_ids;
  std::vector<TextualTokenSequence> class_texts;
  LabeledBatch samples;
};

/// Teacher outputs for one TrainingData, aligned with its samples and classes.
struct TeacherKnowledge {
  struct Vision {
    std::string agent_id;
    std::vector<Matrix> stacks;  // per sample, layer_count x C_a
  };
  struct Language {
    std::string agent_id;
    Matrix class_features;  // N_cls x C
  };
  struct Attention {
    std::string agent_id;
    std::vector<Matrix> maps;  // per sample, N_cls x K
  };
  struct Caption {
    std::string agent_id;
    Matrix scores;  // N x N_cls
  };
  std::vector<Vision> vision;
  std::vector<Language> language;
  std::vector<Attention> t2i;
  std::vector<Caption> i2t;

  bool empty() const { return vision.empty() && language.empty() && t2i.empty() && i2t.empty(); }
};

/// Runs every registered agent over the training data.
TeacherKnowledge extract_knowledge(const AgentRegistry& registry, const LatentOracle& oracle,
                                   const TrainingData& data);

/// Cache records for `knowledge`, one per (agent, sample) or (agent, class).
std::vector<KnowledgeCacheRecord> knowledge_records(const TeacherKnowledge& knowledge, const AgentRegistry& registry,
                                                    const TrainingData& data);

/// Writes knowledge to a cache file with the class list in its metadata.
void write_knowledge_cache(const std::string& path, const TeacherKnowledge& knowledge,
                           const AgentRegistry& registry, const TrainingData& data);

/// Validates the cache against the registry and data, then loads it. Throws
/// ValidationError on any issue, a dataset mismatch or a different class list.
TeacherKnowledge load_knowledge(const std::string& path, const AgentRegistry& registry, const TrainingData& data);

struct EpochLog {
  int epoch = 0;
  double ce = 0.0, vac = 0.0, lac = 0.0, mac = 0.0, total = 0.0;  // means over steps
  double seconds = 0.0;
};

struct StepLosses {
  ad::Var ce, vac, lac, mac, total;
};

struct NamedParameter {
  std::string name;
  ad::Parameter* parameter;
};

struct TrainedStudent {
  PromptSet prompts;
  std::map<std::string, std::string> metadata;  // config_hash, seed, epoch_losses
};

/// Prompts only; every record has an empty agent id.
void save_student(const TrainedStudent& student, const std::string& path);
TrainedStudent load_student(const std::string& path);

class Trainer {
 public:
  /// Throws ValidationError when knowledge does not line up with the data.
  Trainer(TrainConfig config, const DualEncoder& encoder, TrainingData data, TeacherKnowledge knowledge,
          const AgentRegistry& registry);

  const TrainConfig& config() const { return config_; }
  const TrainingData& data() const { return data_; }

  /// One SGD update on the next minibatch of the current epoch.
  void step();
  void run_epoch();
  /// Runs the remaining epochs; `on_epoch` sees each finished epoch.
  void run(const std::function<void(const EpochLog&)>& on_epoch = {});

  int epochs_done() const { return epochs_done_; }
  bool mid_epoch() const { return step_in_epoch_ != 0; }
  bool complete() const { return epochs_done_ >= config_.epochs && !mid_epoch(); }
  const std::vector<EpochLog>& log() const { return log_; }

  PromptSet prompts() const;
  /// Throws StateError unless training is complete.
  TrainedStudent export_student() const;
  /// Config hash, seed, epochs and per-epoch losses.
  std::map<std::string, std::string> run_metadata() const;
  /// Drops gates, projections and teacher knowledge.
  void unload_agents();
  bool agents_loaded() const { return agents_loaded_; }

  /// Builds the full loss for the given sample indices on `graph`.
  StepLosses loss_graph(ad::Graph& graph, std::span<const int> indices);
  /// Every trainable parameter with a stable name.
  std::vector<NamedParameter> parameters();

  struct GateWeights {
    std::vector<std::string> agents;
    Matrix weights;  // rows: samples (vision, multimodal) or classes (language)
  };
  /// Gate weights over the given training samples; vision weights are averaged
  /// over mapped layers. Throws StateError after unload_agents().
  std::vector<std::pair<std::string, GateWeights>> gate_weights(std::span<const int> indices) const;

 private:
  struct VisionAgent {
    std::string agent_id;
    std::vector<int> mapping;
    std::vector<ad::Parameter> projections;  // per mapped layer, C_a x C
  };

  void warm_start_projections();

  TrainConfig config_;
  const DualEncoder* encoder_;
  TrainingData data_;
  TeacherKnowledge knowledge_;
  std::vector<ad::Parameter> visual_prompts_, textual_prompts_;
  std::vector<VisionAgent> vision_agents_;
  std::vector<GateNetwork> vac_gates_;
  std::optional<GateNetwork> lac_gate_, mac_gate_;
  std::vector<Matrix> velocity_;
  std::vector<int> order_;
  int epochs_done_ = 0;
  int step_in_epoch_ = 0;
  int total_steps_ = 0;
  EpochLog running_;
  int running_steps_ = 0;
  std::vector<EpochLog> log_;
  bool agents_loaded_ = true;
  double epoch_start_ = 0.0;
};

/// Everything a finished (or interrupted) run leaves behind before export:
/// named parameters including gates and projections, gate weights recorded
/// over the training samples, and run metadata.
struct TrainingStateFile {
  std::map<std::string, Matrix> parameters;
  std::vector<std::pair<std::string, Trainer::GateWeights>> gates;
  std::map<std::string, std::string> metadata;

  bool complete() const;
  /// Prompts and student metadata only. Throws StateError when incomplete.
  TrainedStudent student() const;
};

/// `metadata` is merged over the trainer's own run metadata.
void save_training_state(Trainer& trainer, const std::string& path,
                         const std::map<std::string, std::string>& metadata = {});
TrainingStateFile load_training_state(const std::string& path);

}  // namespace transagent
