#include "transagent/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (!(n > 1e-12)) throw NumericalError("cannot normalize a zero feature row");
    out.row(r) /= n;
  }
  return out;
}

std::string join_ids(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

Matrix pooled_scores(const std::vector<Matrix>& maps, Pooling pooling) {
  if (maps.empty()) return {};
  Matrix out(static_cast<Eigen::Index>(maps.size()), maps.front().rows());
  for (std::size_t n = 0; n < maps.size(); ++n) {
    for (Eigen::Index c = 0; c < maps[n].rows(); ++c) {
      out(static_cast<Eigen::Index>(n), c) = pool_tokens(maps[n].row(c), pooling);
    }
  }
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const int> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(indices[i]);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
  if (shots < 1) throw ConfigError("data.shots must be positive");
  if (!(ce_temperature > 0.0)) throw ConfigError("loss.ce_temperature must be positive");
  if (!(mac_logit_scale > 0.0)) throw ConfigError("loss.mac_logit_scale must be positive");
  if (projection_ridge < 0.0) throw ConfigError("train.projection_ridge must be non-negative");
  weights.validate();
}

std::string TrainConfig::fingerprint() const {
  nlohmann::json j = {
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"lr", learning_rate},
      {"momentum", momentum},
      {"cosine", cosine_schedule},
      {"seed", seed},
      {"shots", shots},
      {"lambda", {weights.lambda1, weights.lambda2, weights.lambda3}},
      {"temperature", weights.temperature_distill},
      {"ce_temperature", ce_temperature},
      {"mac_logit_scale", mac_logit_scale},
      {"fusion", to_string(fusion)},
      {"vac_mode", to_string(vac_mode)},
      {"lac_token", to_string(lac_token)},
      {"mac_source", to_string(mac_source)},
      {"mac_type", to_string(mac_type)},
      {"pooling", to_string(pooling)},
      {"prompt", {prompt.n_ctx, prompt.depth, prompt.seed, prompt.init_std, prompt.init_phrase}},
      {"projection_ridge", projection_ridge},
  };
  return hex64(fnv1a64(j.dump()));
}

PromptConfig TrainConfig::effective_prompt_config() const {
  PromptConfig pc = prompt;
  pc.seed = mix_seed(prompt.seed, seed);
  return pc;
}

// ---------------------------------------------------------------------------
// Knowledge

TeacherKnowledge extract_knowledge(const AgentRegistry& registry, const LatentOracle& oracle,
                                   const TrainingData& data) {
  TeacherKnowledge k;
  const auto& images = data.samples.images;
  for (const AgentDescriptor& a : registry.agents()) {
    switch (a.modality) {
      case AgentModality::vision: {
        TeacherKnowledge::Vision v{a.agent_id, {}};
        for (const VisualTokenSequence& seq : images) v.stacks.push_back(vision_feature_stack(a, seq, &oracle));
        k.vision.push_back(std::move(v));
        break;
      }
      case AgentModality::language: {
        const ClassDescriptionSet descs = a.descriptions_path.empty()
                                              ? synthesize_descriptions(a, oracle, data.class_ids)
                                              : load_descriptions(a.descriptions_path, a.agent_id);
        const auto encoder = make_agent_text_encoder(a, oracle);
        AgentFeatureBundle b = extract_language_features(descs, data.class_ids, *encoder);
        k.language.push_back({a.agent_id, round_to_float(b.class_features)});
        break;
      }
      case AgentModality::t2i: {
        TeacherKnowledge::Attention t{a.agent_id, {}};
        for (const VisualTokenSequence& seq : images) {
          t.maps.push_back(round_to_float(t2i_attention_map(a, seq, data.class_ids, oracle).values));
        }
        k.t2i.push_back(std::move(t));
        break;
      }
      case AgentModality::i2t: {
        const EncodedFeature visual = i2t_visual_features(a, images, oracle);
        const EncodedFeature text = i2t_class_features(a, data.class_ids, oracle);
        k.i2t.push_back({a.agent_id, round_to_float(i2t_scores(visual, text).values)});
        break;
      }
    }
  }
  return k;
}

std::vector<KnowledgeCacheRecord> knowledge_records(const TeacherKnowledge& knowledge, const AgentRegistry& registry,
                                                    const TrainingData& data) {
  std::vector<KnowledgeCacheRecord> out;
  const auto& images = data.samples.images;
  auto key = [&](const std::string& agent, const std::string& k) {
    return RecordKey{agent, data.dataset_id, data.split, k};
  };
  for (const auto& v : knowledge.vision) {
    const std::uint64_t fp = registry.find(v.agent_id).fingerprint();
    for (std::size_t n = 0; n < images.size(); ++n) {
      out.push_back(make_record(key(v.agent_id, images[n].sample_id), PayloadKind::feature_stack, v.stacks[n],
                                DType::f32, fp));
    }
  }
  for (const auto& l : knowledge.language) {
    const std::uint64_t fp = registry.find(l.agent_id).fingerprint();
    for (std::size_t c = 0; c < data.class_ids.size(); ++c) {
      out.push_back(make_record(key(l.agent_id, std::to_string(data.class_ids[c])), PayloadKind::class_features,
                                l.class_features.row(static_cast<Eigen::Index>(c)), DType::f32, fp));
    }
  }
  for (const auto& t : knowledge.t2i) {
    const std::uint64_t fp = registry.find(t.agent_id).fingerprint();
    for (std::size_t n = 0; n < images.size(); ++n) {
      out.push_back(make_record(key(t.agent_id, images[n].sample_id), PayloadKind::attention_map, t.maps[n],
                                DType::f32, fp));
    }
  }
  for (const auto& i : knowledge.i2t) {
    const std::uint64_t fp = registry.find(i.agent_id).fingerprint();
    for (std::size_t n = 0; n < images.size(); ++n) {
      out.push_back(make_record(key(i.agent_id, images[n].sample_id), PayloadKind::score_vector,
                                i.scores.row(static_cast<Eigen::Index>(n)), DType::f32, fp));
    }
  }
  return out;
}

void write_knowledge_cache(const std::string& path, const TeacherKnowledge& knowledge,
                           const AgentRegistry& registry, const TrainingData& data) {
  const auto records = knowledge_records(knowledge, registry, data);
  const std::map<std::string, std::string> meta = {
      {"dataset_id", data.dataset_id}, {"split", data.split}, {"classes", join_ids(data.class_ids)}};
  write_cache(path, records, fnv1a64(registry.to_json()), meta);
}

TeacherKnowledge load_knowledge(const std::string& path, const AgentRegistry& registry, const TrainingData& data) {
  CacheCoverage coverage{data.dataset_id, data.split, {}, data.class_ids};
  for (const auto& img : data.samples.images) coverage.sample_ids.push_back(img.sample_id);
  const ValidationReport report = validate_cache(path, registry, coverage);
  if (!report.ok()) {
    const CacheIssue& first = report.issues.front();
    throw ValidationError("knowledge cache " + path + ": " + std::to_string(report.issues.size()) +
                          " issue(s), first " + to_string(first.kind) + " at " + first.key + ": " + first.message);
  }
  const CacheReader reader(path);
  const auto& meta = reader.manifest().metadata;
  auto meta_value = [&](const std::string& k) {
    auto it = meta.find(k);
    return it == meta.end() ? std::string() : it->second;
  };
  if (meta_value("dataset_id") != data.dataset_id || meta_value("split") != data.split) {
    throw ValidationError("knowledge cache " + path + " was extracted for dataset '" + meta_value("dataset_id") +
                          "' split '" + meta_value("split") + "'");
  }
  if (meta_value("classes") != join_ids(data.class_ids)) {
    throw ValidationError("knowledge cache " + path + " covers classes [" + meta_value("classes") +
                          "], training uses [" + join_ids(data.class_ids) + "]");
  }

  TeacherKnowledge k;
  const auto& images = data.samples.images;
  auto read = [&](const std::string& agent, const std::string& key) {
    return reader.read(RecordKey{agent, data.dataset_id, data.split, key}).as_matrix();
  };
  for (const AgentDescriptor& a : registry.agents()) {
    switch (a.modality) {
      case AgentModality::vision: {
        TeacherKnowledge::Vision v{a.agent_id, {}};
        for (const auto& img : images) v.stacks.push_back(read(a.agent_id, img.sample_id));
        k.vision.push_back(std::move(v));
        break;
      }
      case AgentModality::language: {
        Matrix f(static_cast<Eigen::Index>(data.class_ids.size()), a.feature_width);
        for (std::size_t c = 0; c < data.class_ids.size(); ++c) {
          f.row(static_cast<Eigen::Index>(c)) = read(a.agent_id, std::to_string(data.class_ids[c]));
        }
        k.language.push_back({a.agent_id, std::move(f)});
        break;
      }
      case AgentModality::t2i: {
        TeacherKnowledge::Attention t{a.agent_id, {}};
        for (const auto& img : images) t.maps.push_back(read(a.agent_id, img.sample_id));
        k.t2i.push_back(std::move(t));
        break;
      }
      case AgentModality::i2t: {
        Matrix s(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(data.class_ids.size()));
        for (std::size_t n = 0; n < images.size(); ++n) {
          s.row(static_cast<Eigen::Index>(n)) = read(a.agent_id, images[n].sample_id);
        }
        k.i2t.push_back({a.agent_id, std::move(s)});
        break;
      }
    }
  }
  return k;
}

// ---------------------------------------------------------------------------
// Student files

void save_student(const TrainedStudent& student, const std::string& path) {
  std::vector<KnowledgeCacheRecord> records;
  const PromptSet& p = student.prompts;
  for (std::size_t j = 0; j < p.visual.size(); ++j) {
    records.push_back(make_record({"", "student", "prompts", "visual/" + std::to_string(j)}, PayloadKind::parameter,
                                  p.visual[j], DType::f64));
  }
  for (std::size_t j = 0; j < p.textual.size(); ++j) {
    records.push_back(make_record({"", "student", "prompts", "textual/" + std::to_string(j)},
                                  PayloadKind::parameter, p.textual[j], DType::f64));
  }
  write_cache(path, records, 0, student.metadata);
}

TrainedStudent load_student(const std::string& path) {
  const CacheReader reader(path);
  TrainedStudent s;
  s.metadata = reader.manifest().metadata;
  std::map<int, Matrix> visual, textual;
  for (const ManifestEntry& e : reader.manifest().entries) {
    if (!e.id.agent_id.empty() || e.kind != PayloadKind::parameter) {
      throw ValidationError(path + " is not a student file (record " + e.id.str() + ")");
    }
    const auto slash = e.id.key.find('/');
    if (slash == std::string::npos) throw ValidationError("unexpected student record " + e.id.key);
    const std::string branch = e.id.key.substr(0, slash);
    const int layer = std::stoi(e.id.key.substr(slash + 1));
    Matrix m = reader.read(e.id).as_matrix();
    if (branch == "visual") {
      visual[layer] = std::move(m);
    } else if (branch == "textual") {
      textual[layer] = std::move(m);
    } else {
      throw ValidationError("unexpected student record " + e.id.key);
    }
  }
  if (visual.size() != textual.size()) throw ValidationError(path + ": visual and textual prompt depths differ");
  for (int j = 0; j < static_cast<int>(visual.size()); ++j) {
    if (!visual.count(j) || !textual.count(j)) throw ValidationError(path + ": prompt layers are not contiguous");
    s.prompts.visual.push_back(visual[j]);
    s.prompts.textual.push_back(textual[j]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, const DualEncoder& encoder, TrainingData data, TeacherKnowledge knowledge,
                 const AgentRegistry& registry)
    : config_(std::move(config)), encoder_(&encoder), data_(std::move(data)), knowledge_(std::move(knowledge)) {
  config_.validate();
  const std::size_t n = data_.samples.images.size();
  const std::size_t n_cls = data_.class_ids.size();
  if (n == 0) throw InvalidInput("training data has no samples");
  if (data_.samples.labels.size() != n) throw InvalidInput("training labels and images differ in count");
  if (data_.class_texts.size() != n_cls || n_cls < 2) {
    throw InvalidInput("training needs one class text per class and at least two classes");
  }
  for (int l : data_.samples.labels) {
    if (l < 0 || l >= static_cast<int>(n_cls)) throw InvalidInput("training label out of range");
  }

  auto fail = [](const std::string& what) { throw ValidationError("knowledge does not match the data: " + what); };
  for (const auto& v : knowledge_.vision) {
    if (v.stacks.size() != n) fail(v.agent_id + " has " + std::to_string(v.stacks.size()) + " samples");
  }
  for (const auto& l : knowledge_.language) {
    if (static_cast<std::size_t>(l.class_features.rows()) != n_cls) fail(l.agent_id + " class count");
    if (l.class_features.cols() != encoder.text.embed_width()) fail(l.agent_id + " feature width");
  }
  for (const auto& t : knowledge_.t2i) {
    if (t.maps.size() != n) fail(t.agent_id + " sample count");
    for (const Matrix& m : t.maps) {
      if (static_cast<std::size_t>(m.rows()) != n_cls) fail(t.agent_id + " class count");
    }
  }
  for (const auto& i : knowledge_.i2t) {
    if (static_cast<std::size_t>(i.scores.rows()) != n || static_cast<std::size_t>(i.scores.cols()) != n_cls) {
      fail(i.agent_id + " score shape");
    }
  }

  const PromptSet init = init_prompts(config_.effective_prompt_config(), encoder);
  for (const Matrix& m : init.visual) visual_prompts_.emplace_back(m);
  for (const Matrix& m : init.textual) textual_prompts_.emplace_back(m);
  const int depth = init.depth();
  const int c_width = encoder.vision.embed_width();

  for (const auto& v : knowledge_.vision) {
    const AgentDescriptor& a = registry.find(v.agent_id);
    for (const Matrix& s : v.stacks) {
      if (s.rows() != a.layer_count || s.cols() != a.feature_width) fail(v.agent_id + " feature stack shape");
    }
    VisionAgent va{v.agent_id, uniform_layer_mapping(a.layer_count, depth), {}};
    for (int j = 0; j < depth; ++j) va.projections.emplace_back(Matrix::Zero(a.feature_width, c_width));
    vision_agents_.push_back(std::move(va));
  }
  const std::uint64_t seed = config_.seed;
  if (!vision_agents_.empty()) {
    const int a = static_cast<int>(vision_agents_.size());
    for (int j = 0; j < depth; ++j) {
      vac_gates_.push_back(make_gate(a * c_width, c_width, a, mix_seed(seed, "gate.vac." + std::to_string(j))));
    }
    warm_start_projections();
  }
  if (!knowledge_.language.empty()) {
    const int a = static_cast<int>(knowledge_.language.size());
    lac_gate_ = make_gate(a * c_width, c_width, a, mix_seed(seed, "gate.lac"));
    for (auto& l : knowledge_.language) l.class_features = normalize_rows(l.class_features);
  }
  const int a_mac = static_cast<int>(knowledge_.t2i.size() + knowledge_.i2t.size());
  if (a_mac > 0) mac_gate_ = make_gate(a_mac * static_cast<int>(n_cls), c_width, a_mac, mix_seed(seed, "gate.mac"));

  order_.resize(n);
  std::iota(order_.begin(), order_.end(), 0);
  for (const NamedParameter& p : parameters()) velocity_.push_back(Matrix::Zero(p.parameter->value.rows(), p.parameter->value.cols()));
}

void Trainer::warm_start_projections() {
  // Least-squares fit of each projection onto the initial student features.
  const std::size_t n = data_.samples.images.size();
  ad::Graph g;
  const BranchVars vars = bind_branch(g, encoder_->vision);
  std::vector<ad::Var> prompts;
  for (const ad::Parameter& p : visual_prompts_) prompts.push_back(g.constant_ref(p.value));
  const int depth = static_cast<int>(visual_prompts_.size());
  std::vector<Matrix> student(static_cast<std::size_t>(depth),
                              Matrix(static_cast<Eigen::Index>(n), encoder_->vision.embed_width()));
  for (std::size_t i = 0; i < n; ++i) {
    const ImageEncoding e = encode_image_graph(g, encoder_->vision, vars, data_.samples.images[i], prompts, true);
    for (int j = 0; j < depth; ++j) {
      student[static_cast<std::size_t>(j)].row(static_cast<Eigen::Index>(i)) =
          e.layer_features[static_cast<std::size_t>(j)].value();
    }
  }
  for (std::size_t a = 0; a < vision_agents_.size(); ++a) {
    VisionAgent& va = vision_agents_[a];
    for (int j = 0; j < depth; ++j) {
      const Matrix y = normalize_rows(student[static_cast<std::size_t>(j)]);
      Matrix x(static_cast<Eigen::Index>(n), knowledge_.vision[a].stacks.front().cols());
      for (std::size_t i = 0; i < n; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = knowledge_.vision[a].stacks[i].row(va.mapping[static_cast<std::size_t>(j)]);
      }
      Matrix gram = x.transpose() * x;
      gram.diagonal().array() += config_.projection_ridge * static_cast<double>(n) + 1e-9;
      va.projections[static_cast<std::size_t>(j)].value = gram.ldlt().solve(x.transpose() * y);
    }
  }
}

std::vector<NamedParameter> Trainer::parameters() {
  std::vector<NamedParameter> out;
  for (std::size_t j = 0; j < visual_prompts_.size(); ++j) {
    out.push_back({"prompt.visual." + std::to_string(j), &visual_prompts_[j]});
  }
  for (std::size_t j = 0; j < textual_prompts_.size(); ++j) {
    out.push_back({"prompt.textual." + std::to_string(j), &textual_prompts_[j]});
  }
  static const char* kGateParts[] = {"w_hidden", "b_hidden", "w_out", "b_out"};
  auto add_gate = [&](const std::string& prefix, GateNetwork& gate) {
    const auto ps = gate.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({prefix + "." + kGateParts[i], ps[i]});
  };
  for (std::size_t j = 0; j < vac_gates_.size(); ++j) add_gate("gate.vac." + std::to_string(j), vac_gates_[j]);
  if (lac_gate_) add_gate("gate.lac", *lac_gate_);
  if (mac_gate_) add_gate("gate.mac", *mac_gate_);
  for (VisionAgent& va : vision_agents_) {
    for (std::size_t j = 0; j < va.projections.size(); ++j) {
      out.push_back({"projection." + va.agent_id + "." + std::to_string(j), &va.projections[j]});
    }
  }
  return out;
}

PromptSet Trainer::prompts() const {
  PromptSet p;
  for (const auto& v : visual_prompts_) p.visual.push_back(v.value);
  for (const auto& t : textual_prompts_) p.textual.push_back(t.value);
  return p;
}

namespace {

// Applies the configured fusion and loss to per-agent teacher inputs.
ad::Var fused_loss(ad::Graph& graph, Fusion fusion, std::span<const ad::Var> teachers, GateNetwork* gate,
                   const std::function<ad::Var(ad::Var)>& loss_against) {
  switch (fusion) {
    case Fusion::gating: return loss_against(moa_gate(graph, teachers, *gate).fused);
    case Fusion::average: return loss_against(fuse_average(teachers));
    case Fusion::add: {
      std::vector<ad::Var> losses;
      for (const ad::Var& t : teachers) losses.push_back(loss_against(t));
      return fuse_add_losses(losses);
    }
  }
  throw ConfigError("unknown fusion");
}

}  // namespace

StepLosses Trainer::loss_graph(ad::Graph& graph, std::span<const int> indices) {
  if (!agents_loaded_ && !knowledge_.empty()) throw StateError("agents are unloaded");
  if (indices.empty()) throw InvalidInput("empty minibatch");
  const LossWeights& w = config_.weights;
  const bool use_vac = w.lambda1 > 0.0 && !vision_agents_.empty();
  const bool use_lac = w.lambda2 > 0.0 && !knowledge_.language.empty();
  const bool use_mac = w.lambda3 > 0.0 && mac_gate_.has_value();
  const std::size_t depth = visual_prompts_.size();

  const BranchVars vvars = bind_branch(graph, encoder_->vision);
  const BranchVars tvars = bind_branch(graph, encoder_->text);
  std::vector<ad::Var> vprompts, tprompts;
  for (ad::Parameter& p : visual_prompts_) vprompts.push_back(graph.param(p));
  for (ad::Parameter& p : textual_prompts_) tprompts.push_back(graph.param(p));

  std::vector<ad::Var> t_eos, t_lac, q_t;
  for (const TextualTokenSequence& seq : data_.class_texts) {
    const TextEncoding e = encode_text_graph(graph, encoder_->text, tvars, seq, tprompts);
    t_eos.push_back(e.eos_feature);
    t_lac.push_back(config_.lac_token == TextPool::eos ? e.eos_feature : e.sos_feature);
    if (e.prompt_output) q_t.push_back(*e.prompt_output);
  }
  std::vector<ad::Var> v_rows, q_v;
  std::vector<std::vector<ad::Var>> layer_rows(depth);
  std::vector<int> labels;
  for (int idx : indices) {
    const ImageEncoding e =
        encode_image_graph(graph, encoder_->vision, vvars, data_.samples.images[static_cast<std::size_t>(idx)],
                           vprompts, use_vac);
    v_rows.push_back(e.feature);
    if (e.prompt_output) q_v.push_back(*e.prompt_output);
    for (std::size_t j = 0; j < e.layer_features.size(); ++j) layer_rows[j].push_back(e.layer_features[j]);
    labels.push_back(data_.samples.labels[static_cast<std::size_t>(idx)]);
  }
  const ad::Var v = ad::concat_rows(v_rows);
  const ad::Var t = ad::concat_rows(t_eos);

  StepLosses out;
  const ad::Var zero = graph.constant(Matrix::Zero(1, 1));
  out.ce = ce_loss(ad::scale(cosine_matrix(v, t), 1.0 / config_.ce_temperature), labels);
  out.vac = out.lac = out.mac = zero;

  if (use_vac) {
    const std::size_t first = config_.vac_mode == VacMode::last_layer ? depth - 1 : 0;
    std::vector<ad::Var> layer_losses;
    for (std::size_t j = first; j < depth; ++j) {
      const ad::Var student = ad::l2_normalize_rows(ad::concat_rows(layer_rows[j]));
      std::vector<ad::Var> teachers;
      for (std::size_t a = 0; a < vision_agents_.size(); ++a) {
        VisionAgent& va = vision_agents_[a];
        const auto& stacks = knowledge_.vision[a].stacks;
        Matrix x(static_cast<Eigen::Index>(indices.size()), stacks.front().cols());
        for (std::size_t i = 0; i < indices.size(); ++i) {
          x.row(static_cast<Eigen::Index>(i)) = stacks[static_cast<std::size_t>(indices[i])].row(va.mapping[j]);
        }
        teachers.push_back(ad::l2_normalize_rows(ad::matmul(graph.constant(std::move(x)), graph.param(va.projections[j]))));
      }
      layer_losses.push_back(fused_loss(graph, config_.fusion, teachers, &vac_gates_[j], [&](ad::Var fused) {
        return l1_feature_loss(student, ad::l2_normalize_rows(fused));
      }));
    }
    ad::Var sum = layer_losses.front();
    for (std::size_t i = 1; i < layer_losses.size(); ++i) sum = ad::add(sum, layer_losses[i]);
    out.vac = ad::scale(sum, 1.0 / static_cast<double>(layer_losses.size()));
  }

  if (use_lac) {
    const ad::Var student = ad::l2_normalize_rows(ad::concat_rows(t_lac));
    std::vector<ad::Var> teachers;
    for (const auto& l : knowledge_.language) teachers.push_back(graph.constant_ref(l.class_features));
    out.lac = fused_loss(graph, config_.fusion, teachers, lac_gate_ ? &*lac_gate_ : nullptr, [&](ad::Var fused) {
      return lac_loss(student, ad::l2_normalize_rows(fused));
    });
  }

  if (use_mac) {
    const ad::Var learned = config_.mac_source == MacSource::learned_scores
                                ? cosine_matrix(ad::concat_rows(q_v), ad::concat_rows(q_t))
                                : cosine_matrix(v, t);
    const ad::Var student = ad::scale(learned, config_.mac_logit_scale);
    std::vector<ad::Var> teachers;
    for (const auto& t2 : knowledge_.t2i) {
      Matrix s(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(data_.class_ids.size()));
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const Matrix& m = t2.maps[static_cast<std::size_t>(indices[i])];
        for (Eigen::Index c = 0; c < m.rows(); ++c) s(static_cast<Eigen::Index>(i), c) = pool_tokens(m.row(c), config_.pooling);
      }
      teachers.push_back(graph.constant(std::move(s)));
    }
    for (const auto& i2 : knowledge_.i2t) teachers.push_back(graph.constant(gather_rows(i2.scores, indices)));
    out.mac = fused_loss(graph, config_.fusion, teachers, &*mac_gate_, [&](ad::Var fused) {
      return mac_loss(student, fused, config_.mac_type, w.temperature_distill);
    });
  }

  out.total = total_loss(out.ce, out.vac, out.lac, out.mac, w);
  return out;
}

void Trainer::step() {
  if (epochs_done_ >= config_.epochs) throw StateError("training is already complete");
  if (!agents_loaded_ && !knowledge_.empty()) throw StateError("agents are unloaded");
  const int n = static_cast<int>(order_.size());
  const int b = config_.batch_size;
  const int steps_per_epoch = (n + b - 1) / b;
  if (step_in_epoch_ == 0) {
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(mix_seed(config_.seed, static_cast<std::uint64_t>(epochs_done_)));
    std::shuffle(order_.begin(), order_.end(), rng);
    running_ = EpochLog{};
    running_steps_ = 0;
    epoch_start_ = now_seconds();
  }
  const int begin = step_in_epoch_ * b;
  const int end = std::min(n, begin + b);
  const std::span<const int> idx(order_.data() + begin, static_cast<std::size_t>(end - begin));

  std::vector<NamedParameter> params = parameters();
  for (NamedParameter& p : params) p.parameter->zero_grad();
  ad::Graph graph;
  const StepLosses losses = loss_graph(graph, idx);
  const double total = losses.total.scalar();
  if (!std::isfinite(total)) throw NumericalError("non-finite training loss at epoch " + std::to_string(epochs_done_));
  graph.backward(losses.total);

  double lr = config_.learning_rate;
  if (config_.cosine_schedule) {
    const double horizon = static_cast<double>(config_.epochs) * steps_per_epoch;
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(total_steps_) / horizon));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Parameter& p = *params[i].parameter;
    if (config_.momentum > 0.0) {
      velocity_[i] = config_.momentum * velocity_[i] + p.grad;
      p.value -= lr * velocity_[i];
    } else {
      p.value -= lr * p.grad;
    }
  }

  running_.ce += losses.ce.scalar();
  running_.vac += losses.vac.scalar();
  running_.lac += losses.lac.scalar();
  running_.mac += losses.mac.scalar();
  running_.total += total;
  ++running_steps_;
  ++total_steps_;
  ++step_in_epoch_;
  if (step_in_epoch_ == steps_per_epoch) {
    const double k = 1.0 / running_steps_;
    EpochLog e{epochs_done_ + 1, running_.ce * k, running_.vac * k, running_.lac * k, running_.mac * k,
               running_.total * k, now_seconds() - epoch_start_};
    log_.push_back(e);
    ++epochs_done_;
    step_in_epoch_ = 0;
  }
}

void Trainer::run_epoch() {
  do {
    step();
  } while (step_in_epoch_ != 0);
}

void Trainer::run(const std::function<void(const EpochLog&)>& on_epoch) {
  while (epochs_done_ < config_.epochs) {
    run_epoch();
    if (on_epoch) on_epoch(log_.back());
  }
}

TrainedStudent Trainer::export_student() const {
  if (mid_epoch()) throw StateError("cannot export in the middle of an epoch");
  if (!complete()) {
    throw StateError("cannot export before training completes (" + std::to_string(epochs_done_) + " of " +
                     std::to_string(config_.epochs) + " epochs)");
  }
  TrainedStudent s;
  s.prompts = prompts();
  s.metadata = run_metadata();
  return s;
}

std::map<std::string, std::string> Trainer::run_metadata() const {
  nlohmann::json losses = nlohmann::json::array();
  for (const EpochLog& e : log_) {
    losses.push_back({{"epoch", e.epoch}, {"ce", e.ce}, {"vac", e.vac}, {"lac", e.lac}, {"mac", e.mac},
                      {"total", e.total}});
  }
  return {{"config_hash", config_.fingerprint()},
          {"seed", std::to_string(config_.seed)},
          {"epochs", std::to_string(config_.epochs)},
          {"epoch_losses", losses.dump()}};
}

void Trainer::unload_agents() {
  knowledge_ = TeacherKnowledge{};
  vision_agents_.clear();
  vac_gates_.clear();
  lac_gate_.reset();
  mac_gate_.reset();
  velocity_.clear();
  for (const NamedParameter& p : parameters()) velocity_.push_back(Matrix::Zero(p.parameter->value.rows(), p.parameter->value.cols()));
  agents_loaded_ = false;
}

std::vector<std::pair<std::string, Trainer::GateWeights>> Trainer::gate_weights(std::span<const int> indices) const {
  if (!agents_loaded_) throw StateError("gates were discarded when the agents were unloaded");
  std::vector<std::pair<std::string, GateWeights>> out;
  for (int i : indices) {
    if (i < 0 || i >= static_cast<int>(data_.samples.images.size())) throw InvalidInput("sample index out of range");
  }
  if (!vision_agents_.empty()) {
    GateWeights gw;
    for (const auto& va : vision_agents_) gw.agents.push_back(va.agent_id);
    gw.weights = Matrix::Zero(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(vision_agents_.size()));
    for (std::size_t j = 0; j < vac_gates_.size(); ++j) {
      std::vector<Matrix> inputs;
      for (std::size_t a = 0; a < vision_agents_.size(); ++a) {
        const auto& va = vision_agents_[a];
        Matrix x(static_cast<Eigen::Index>(indices.size()), va.projections[j].value.rows());
        for (std::size_t i = 0; i < indices.size(); ++i) {
          x.row(static_cast<Eigen::Index>(i)) =
              knowledge_.vision[a].stacks[static_cast<std::size_t>(indices[i])].row(va.mapping[j]);
        }
        inputs.push_back(normalize_rows(x * va.projections[j].value));
      }
      gw.weights += moa_gate(inputs, vac_gates_[j]).weights;
    }
    gw.weights /= static_cast<double>(vac_gates_.size());
    out.emplace_back("vision", std::move(gw));
  }
  if (lac_gate_) {
    GateWeights gw;
    std::vector<Matrix> inputs;
    for (const auto& l : knowledge_.language) {
      gw.agents.push_back(l.agent_id);
      inputs.push_back(l.class_features);
    }
    gw.weights = moa_gate(inputs, *lac_gate_).weights;
    out.emplace_back("language", std::move(gw));
  }
  if (mac_gate_) {
    GateWeights gw;
    std::vector<Matrix> inputs;
    for (const auto& t : knowledge_.t2i) {
      gw.agents.push_back(t.agent_id);
      std::vector<Matrix> maps;
      for (int i : indices) maps.push_back(t.maps[static_cast<std::size_t>(i)]);
      inputs.push_back(pooled_scores(maps, config_.pooling));
    }
    for (const auto& c : knowledge_.i2t) {
      gw.agents.push_back(c.agent_id);
      inputs.push_back(gather_rows(c.scores, indices));
    }
    gw.weights = moa_gate(inputs, *mac_gate_).weights;
    out.emplace_back("multimodal", std::move(gw));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training state files

namespace {

const char* kStudentKeys[] = {"config_hash", "seed", "epochs", "epoch_losses", "dataset_id", "base_classes"};

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

void save_training_state(Trainer& trainer, const std::string& path,
                         const std::map<std::string, std::string>& metadata) {
  std::vector<KnowledgeCacheRecord> records;
  for (const NamedParameter& p : trainer.parameters()) {
    records.push_back(
        make_record({"", "state", "parameters", p.name}, PayloadKind::parameter, p.parameter->value, DType::f64));
  }
  std::map<std::string, std::string> meta = trainer.run_metadata();
  meta["epochs_done"] = std::to_string(trainer.epochs_done());
  meta["complete"] = trainer.complete() ? "1" : "0";
  if (trainer.agents_loaded()) {
    std::vector<int> all(trainer.data().samples.images.size());
    std::iota(all.begin(), all.end(), 0);
    for (const auto& [group, gw] : trainer.gate_weights(all)) {
      records.push_back(make_record({"", "state", "gating", group}, PayloadKind::score_vector, gw.weights, DType::f64));
      std::string agents;
      for (std::size_t i = 0; i < gw.agents.size(); ++i) agents += (i ? "," : "") + gw.agents[i];
      meta["gating." + group + ".agents"] = agents;
    }
  }
  for (const auto& [k, v] : metadata) meta[k] = v;
  write_cache(path, records, 0, meta);
}

TrainingStateFile load_training_state(const std::string& path) {
  const CacheReader reader(path);
  TrainingStateFile f;
  f.metadata = reader.manifest().metadata;
  if (!f.metadata.count("complete")) throw ValidationError(path + " is not a training state file");
  for (const ManifestEntry& e : reader.manifest().entries) {
    if (e.id.dataset_id != "state") throw ValidationError(path + ": unexpected record " + e.id.str());
    if (e.id.split == "parameters") {
      f.parameters[e.id.key] = reader.read(e.id).as_matrix();
    } else if (e.id.split == "gating") {
      Trainer::GateWeights gw;
      gw.weights = reader.read(e.id).as_matrix();
      auto it = f.metadata.find("gating." + e.id.key + ".agents");
      if (it == f.metadata.end()) throw ValidationError(path + ": gate weights without agent names");
      gw.agents = split_commas(it->second);
      if (static_cast<std::size_t>(gw.weights.cols()) != gw.agents.size()) {
        throw ValidationError(path + ": gate weight columns do not match the agent list");
      }
      f.gates.emplace_back(e.id.key, std::move(gw));
    } else {
      throw ValidationError(path + ": unexpected record " + e.id.str());
    }
  }
  return f;
}

bool TrainingStateFile::complete() const {
  auto it = metadata.find("complete");
  return it != metadata.end() && it->second == "1";
}

TrainedStudent TrainingStateFile::student() const {
  if (!complete()) throw StateError("training state is not complete; finish training before export");
  TrainedStudent s;
  for (int j = 0;; ++j) {
    auto v = parameters.find("prompt.visual." + std::to_string(j));
    auto t = parameters.find("prompt.textual." + std::to_string(j));
    if (v == parameters.end() || t == parameters.end()) break;
    s.prompts.visual.push_back(v->second);
    s.prompts.textual.push_back(t->second);
  }
  if (s.prompts.visual.empty()) throw ValidationError("training state holds no prompts");
  for (const char* k : kStudentKeys) {
    auto it = metadata.find(k);
    if (it != metadata.end()) s.metadata[k] = it->second;
  }
  return s;
}

}  // namespace transagent
