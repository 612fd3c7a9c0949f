#include "transagent/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

namespace {

std::string join_ids(std::span<const int> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

SplitSpec base_novel_split(std::span<const int> class_ids, std::uint64_t seed, const std::string& dataset_id,
                           int shots) {
  if (class_ids.size() < 2) throw InvalidInput("base/novel split needs at least 2 classes");
  std::vector<int> ids(class_ids.begin(), class_ids.end());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InvalidInput("duplicate class id in split");
  Rng rng(mix_seed(seed, "split"));
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n_base = (ids.size() + 1) / 2;
  SplitSpec s;
  s.dataset_id = dataset_id;
  s.shots = shots;
  s.base.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_base));
  s.novel.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_base), ids.end());
  std::sort(s.base.begin(), s.base.end());
  std::sort(s.novel.begin(), s.novel.end());
  return s;
}

LabeledBatch few_shot_sample(const LabeledBatch& pool, std::span<const int> class_ids, int shots,
                             std::uint64_t seed) {
  if (shots < 1) throw InvalidInput("shots must be positive");
  if (pool.images.size() != pool.labels.size()) throw InvalidInput("pool images and labels differ in count");
  LabeledBatch out;
  for (int c : class_ids) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < pool.labels.size(); ++i) {
      if (pool.labels[i] == c) members.push_back(i);
    }
    if (members.size() < static_cast<std::size_t>(shots)) {
      throw InvalidInput("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                         " samples, fewer than " + std::to_string(shots) + " shots");
    }
    Rng rng(mix_seed(seed, "shots/" + std::to_string(c)));
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(static_cast<std::size_t>(shots));
    std::sort(members.begin(), members.end());
    for (std::size_t i : members) {
      out.images.push_back(pool.images[i]);
      out.labels.push_back(c);
    }
  }
  return out;
}

double harmonic_mean(double base, double novel) {
  if (!(base > 0.0) || !(novel > 0.0)) throw InvalidInput("harmonic mean needs positive inputs");
  return 2.0 * base * novel / (base + novel);
}

double accuracy(const ScoreMatrix& scores, std::span<const int> labels) {
  if (static_cast<std::size_t>(scores.values.rows()) != labels.size()) {
    throw InvalidInput("accuracy: score rows and labels differ in count");
  }
  if (labels.empty()) throw InvalidInput("accuracy: empty test set");
  int correct = 0;
  for (Eigen::Index n = 0; n < scores.values.rows(); ++n) {
    Eigen::Index best = 0;
    scores.values.row(n).maxCoeff(&best);
    correct += best == labels[static_cast<std::size_t>(n)] ? 1 : 0;
  }
  return 100.0 * correct / static_cast<double>(labels.size());
}

double class_subset_accuracy(const DualEncoder& encoder, const PromptSet& prompts, const SyntheticBenchmark& bench,
                             std::span<const int> class_ids) {
  std::map<int, int> index;
  for (std::size_t j = 0; j < class_ids.size(); ++j) index[class_ids[j]] = static_cast<int>(j);
  std::vector<VisualTokenSequence> images;
  std::vector<int> labels;
  const LabeledBatch& test = bench.test_set();
  for (std::size_t i = 0; i < test.images.size(); ++i) {
    auto it = index.find(test.labels[i]);
    if (it == index.end()) continue;
    images.push_back(test.images[i]);
    labels.push_back(it->second);
  }
  const std::vector<int> ids(class_ids.begin(), class_ids.end());
  const auto texts = bench.class_texts(ids);
  const EncodedFeature t = encode_text(encoder, texts, prompts).features;
  const EncodedFeature v = encode_image(encoder, images, prompts).features;
  return accuracy(clip_scores(v, t, 1.0), labels);
}

void add_seed_result(EvalReport& report, std::uint64_t seed, double base, double novel) {
  report.seeds.push_back(seed);
  report.base_per_seed.push_back(base);
  report.novel_per_seed.push_back(novel);
  report.hm_per_seed.push_back(base > 0.0 && novel > 0.0 ? harmonic_mean(base, novel) : 0.0);
  report.base = mean_of(report.base_per_seed);
  report.novel = mean_of(report.novel_per_seed);
  // HM of the averaged accuracies, as in the usual base-to-novel tables.
  report.hm = report.base > 0.0 && report.novel > 0.0 ? harmonic_mean(report.base, report.novel) : 0.0;
  report.base_std = std_of(report.base_per_seed);
  report.novel_std = std_of(report.novel_per_seed);
  report.hm_std = std_of(report.hm_per_seed);
}

EvalReport evaluate(const std::vector<std::pair<std::uint64_t, TrainedStudent>>& students, const SplitSpec& split,
                    const SyntheticBenchmark& bench) {
  EvalReport report;
  for (const auto& [seed, student] : students) {
    auto meta = [&](const std::string& k) {
      auto it = student.metadata.find(k);
      return it == student.metadata.end() ? std::string() : it->second;
    };
    if (meta("dataset_id") != split.dataset_id) {
      throw ValidationError("student was trained on dataset '" + meta("dataset_id") + "', split is for '" +
                            split.dataset_id + "'");
    }
    if (meta("base_classes") != join_ids(split.base)) {
      throw ValidationError("student base classes [" + meta("base_classes") + "] differ from the split's [" +
                            join_ids(split.base) + "]");
    }
    const double base = class_subset_accuracy(bench.encoder(), student.prompts, bench, split.base);
    const double novel = class_subset_accuracy(bench.encoder(), student.prompts, bench, split.novel);
    add_seed_result(report, seed, base, novel);
  }
  return report;
}

TrainingData make_training_data(const SyntheticBenchmark& bench, const SplitSpec& split, std::uint64_t seed) {
  TrainingData d;
  d.dataset_id = split.dataset_id;
  d.split = "train";
  d.class_ids = split.base;
  d.class_texts = bench.class_texts(split.base);
  d.samples = few_shot_sample(bench.train_pool(), split.base, split.shots, seed);
  std::map<int, int> index;
  for (std::size_t j = 0; j < split.base.size(); ++j) index[split.base[j]] = static_cast<int>(j);
  for (int& l : d.samples.labels) l = index.at(l);
  return d;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const SyntheticBenchmark& bench,
                                const AgentRegistry& registry) {
  ExperimentResult result;
  result.split = base_novel_split(bench.class_ids(), config.split_seed, bench.config().dataset_id, config.train.shots);
  for (std::uint64_t seed : config.seeds) {
    TrainConfig tc = config.train;
    tc.seed = seed;
    TrainingData data = make_training_data(bench, result.split, seed);
    TeacherKnowledge knowledge;
    const bool distill = tc.weights.lambda1 > 0.0 || tc.weights.lambda2 > 0.0 || tc.weights.lambda3 > 0.0;
    if (distill) {
      if (config.cache_dir) {
        std::filesystem::create_directories(*config.cache_dir);
        const std::string path =
            *config.cache_dir + "/" + data.dataset_id + "-seed" + std::to_string(seed) + "-shots" +
            std::to_string(tc.shots) + ".takc";
        if (!std::filesystem::exists(path)) {
          write_knowledge_cache(path, extract_knowledge(registry, bench, data), registry, data);
        }
        knowledge = load_knowledge(path, registry, data);
      } else {
        knowledge = extract_knowledge(registry, bench, data);
      }
    }
    Trainer trainer(tc, bench.encoder(), std::move(data), std::move(knowledge), registry);
    trainer.run();
    SeedRun run;
    run.seed = seed;
    run.log = trainer.log();
    run.student = trainer.export_student();
    run.student.metadata["dataset_id"] = result.split.dataset_id;
    run.student.metadata["base_classes"] = join_ids(result.split.base);
    run.base = class_subset_accuracy(bench.encoder(), run.student.prompts, bench, result.split.base);
    run.novel = class_subset_accuracy(bench.encoder(), run.student.prompts, bench, result.split.novel);
    add_seed_result(result.report, seed, run.base, run.novel);
    result.runs.push_back(std::move(run));
  }
  return result;
}

std::vector<GateGroupReport> gating_report(const Trainer& trainer, std::span<const int> indices) {
  std::vector<GateGroupReport> out;
  for (const auto& [group, gw] : trainer.gate_weights(indices)) {
    GateGroupReport r;
    r.group = group;
    r.agents = gw.agents;
    const Eigen::RowVectorXd mean = gw.weights.colwise().mean();
    r.mean_weights.assign(mean.data(), mean.data() + mean.size());
    out.push_back(std::move(r));
  }
  return out;
}

std::string gating_grid(const std::vector<GateGroupReport>& report) {
  std::ostringstream os;
  os << "group,agent,weight\n";
  for (const GateGroupReport& g : report) {
    for (std::size_t a = 0; a < g.agents.size(); ++a) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", g.mean_weights[a]);
      os << g.group << ',' << g.agents[a] << ',' << buf << '\n';
    }
  }
  return os.str();
}

std::vector<std::string> ablation_settings(const std::string& axis) {
  if (axis == "vac_mode") return {"last-layer", "layer-wise"};
  if (axis == "lac_token") return {"sos", "eos"};
  if (axis == "mac_source") return {"prompted_logits", "learned_scores"};
  if (axis == "fusion") return {"average", "add", "gating"};
  if (axis == "mac_loss_type") return {"kl", "l1", "mse"};
  if (axis == "pooling") return {"average", "max", "logsumexp"};
  throw ConfigError("unknown ablation axis '" + axis +
                    "' (expected vac_mode, lac_token, mac_source, fusion, mac_loss_type or pooling)");
}

void apply_ablation_setting(TrainConfig& config, const std::string& axis, const std::string& setting) {
  const auto settings = ablation_settings(axis);
  if (std::find(settings.begin(), settings.end(), setting) == settings.end()) {
    throw ConfigError("'" + setting + "' is not a setting of ablation axis " + axis);
  }
  if (axis == "vac_mode") config.vac_mode = vac_mode_from_string(setting);
  if (axis == "lac_token") config.lac_token = text_pool_from_string(setting);
  if (axis == "mac_source") config.mac_source = mac_source_from_string(setting);
  if (axis == "fusion") config.fusion = fusion_from_string(setting);
  if (axis == "mac_loss_type") config.mac_type = mac_loss_type_from_string(setting);
  if (axis == "pooling") config.pooling = pooling_from_string(setting);
}

AblationTable run_ablation(const std::string& axis, const ExperimentConfig& config, const SyntheticBenchmark& bench,
                           const AgentRegistry& registry) {
  AblationTable table;
  table.axis = axis;
  for (const std::string& setting : ablation_settings(axis)) {
    ExperimentConfig c = config;
    apply_ablation_setting(c.train, axis, setting);
    table.rows.emplace_back(setting, run_experiment(c, bench, registry).report);
  }
  return table;
}

std::string report_jsonl(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::string out;
  for (const auto& [label, r] : rows) {
    nlohmann::json j = {{"label", label},
                        {"base", r.base},
                        {"novel", r.novel},
                        {"hm", r.hm},
                        {"base_std", r.base_std},
                        {"novel_std", r.novel_std},
                        {"hm_std", r.hm_std},
                        {"seeds", r.seeds},
                        {"base_per_seed", r.base_per_seed},
                        {"novel_per_seed", r.novel_per_seed},
                        {"hm_per_seed", r.hm_per_seed}};
    out += j.dump() + "\n";
  }
  return out;
}

std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows, const std::string& title) {
  std::size_t width = 8;
  for (const auto& row : rows) width = std::max(width, row.first.size());
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-*s %8s %8s %8s\n", static_cast<int>(width), "Setting", "Base", "Novel", "HM");
  os << buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s %8.2f %8.2f %8.2f\n", static_cast<int>(width), label.c_str(), r.base,
                  r.novel, r.hm);
    os << buf;
  }
  return os.str();
}

}  // namespace transagent
