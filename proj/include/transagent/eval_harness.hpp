#pragma once

// Base-to-novel protocol, few-shot sampling, multi-seed reports, gating
// weight summaries and the ablation runner.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "transagent/benchmark.hpp"
#include "transagent/trainer.hpp"

namespace transagent {

struct SplitSpec {
  std::string dataset_id;
  std::vector<int> base;
  std::vector<int> novel;
  int shots = 16;
};

/// Seeded equal partition; base gets the extra class when the count is odd.
SplitSpec base_novel_split(std::span<const int> class_ids, std::uint64_t seed, const std::string& dataset_id = "",
                           int shots = 16);

/// Exactly `shots` distinct samples of every class in `class_ids`, in class
/// order. Labels keep their original values.
LabeledBatch few_shot_sample(const LabeledBatch& pool, std::span<const int> class_ids, int shots,
                             std::uint64_t seed);

double harmonic_mean(double base, double novel);

/// Top-1 accuracy (percent) of argmax over score rows.
double accuracy(const ScoreMatrix& scores, std::span<const int> labels);

/// Accuracy of `prompts` on the test images of `class_ids`, classifying among
/// those classes only.
double class_subset_accuracy(const DualEncoder& encoder, const PromptSet& prompts, const SyntheticBenchmark& bench,
                             std::span<const int> class_ids);

struct EvalReport {
  double base = 0.0, novel = 0.0, hm = 0.0;  // means over seeds
  double base_std = 0.0, novel_std = 0.0, hm_std = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> base_per_seed, novel_per_seed, hm_per_seed;
  int seed_count() const { return static_cast<int>(seeds.size()); }
};

/// Adds one seed's result and refreshes the aggregates.
void add_seed_result(EvalReport& report, std::uint64_t seed, double base, double novel);

/// Evaluates exported students (one per seed). Throws ValidationError when a
/// student was trained on a different dataset or base class set.
EvalReport evaluate(const std::vector<std::pair<std::uint64_t, TrainedStudent>>& students, const SplitSpec& split,
                    const SyntheticBenchmark& bench);

/// Few-shot base-class training data for one seed.
TrainingData make_training_data(const SyntheticBenchmark& bench, const SplitSpec& split, std::uint64_t seed);

struct ExperimentConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t split_seed = 0;
  /// When set, knowledge goes through a cache file in this directory.
  std::optional<std::string> cache_dir;
};

struct SeedRun {
  std::uint64_t seed = 0;
  double base = 0.0, novel = 0.0;
  std::vector<EpochLog> log;
  TrainedStudent student;
};

struct ExperimentResult {
  SplitSpec split;
  EvalReport report;
  std::vector<SeedRun> runs;
};

ExperimentResult run_experiment(const ExperimentConfig& config, const SyntheticBenchmark& bench,
                                const AgentRegistry& registry);

struct GateGroupReport {
  std::string group;  // vision, language, multimodal
  std::vector<std::string> agents;
  std::vector<double> mean_weights;
};

/// Averaged gate weights per agent over the given training samples. Throws
/// StateError once the trainer's agents are unloaded.
std::vector<GateGroupReport> gating_report(const Trainer& trainer, std::span<const int> indices);

/// Rows: group, agent, weight.
std::string gating_grid(const std::vector<GateGroupReport>& report);

inline constexpr const char* kAblationAxes[] = {"vac_mode", "lac_token", "mac_source",
                                                "fusion",   "mac_loss_type", "pooling"};

/// Row labels of an ablation axis, in table order. Throws ConfigError for an unknown axis.
std::vector<std::string> ablation_settings(const std::string& axis);
/// Applies one setting of `axis` to `config`.
void apply_ablation_setting(TrainConfig& config, const std::string& axis, const std::string& setting);

struct AblationTable {
  std::string axis;
  std::vector<std::pair<std::string, EvalReport>> rows;
};

AblationTable run_ablation(const std::string& axis, const ExperimentConfig& config, const SyntheticBenchmark& bench,
                           const AgentRegistry& registry);

/// One JSON object per line: {"label", "base", "novel", "hm", per-seed arrays}.
std::string report_jsonl(const std::vector<std::pair<std::string, EvalReport>>& rows);
/// Fixed-width table with Base / Novel / HM columns.
std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows, const std::string& title = "");

}  // namespace transagent
