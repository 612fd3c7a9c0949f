// Python bindings: configs, the synthetic world, experiments, ablations,
// scoring and loss functions, gating and knowledge-cache validation.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "transagent/config.hpp"
#include "transagent/errors.hpp"
#include "transagent/eval_harness.hpp"
#include "transagent/knowledge_cache.hpp"

namespace py = pybind11;
using namespace transagent;

namespace {

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["base"] = r.base;
  d["novel"] = r.novel;
  d["hm"] = r.hm;
  d["base_std"] = r.base_std;
  d["novel_std"] = r.novel_std;
  d["hm_std"] = r.hm_std;
  d["seeds"] = r.seeds;
  d["base_per_seed"] = r.base_per_seed;
  d["novel_per_seed"] = r.novel_per_seed;
  d["hm_per_seed"] = r.hm_per_seed;
  return d;
}

py::dict epoch_dict(const EpochLog& e) {
  py::dict d;
  d["epoch"] = e.epoch;
  d["ce"] = e.ce;
  d["vac"] = e.vac;
  d["lac"] = e.lac;
  d["mac"] = e.mac;
  d["total"] = e.total;
  return d;
}

py::dict prompts_dict(const PromptSet& p) {
  py::dict d;
  d["visual"] = p.visual;
  d["textual"] = p.textual;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-source prompt distillation core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InvalidInput>(m, "InvalidInput", base.ptr());
  py::register_exception<LookupError>(m, "LookupError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<CorruptionError>(m, "CorruptionError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<MissingInput>(m, "MissingInput", base.ptr());

  py::class_<EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def_readwrite("depth", &EncoderConfig::depth)
      .def_readwrite("width", &EncoderConfig::width)
      .def_readwrite("embed_width", &EncoderConfig::embed_width)
      .def_readwrite("mlp_hidden", &EncoderConfig::mlp_hidden)
      .def_readwrite("max_tokens", &EncoderConfig::max_tokens)
      .def_readwrite("seed", &EncoderConfig::seed);

  py::class_<BenchmarkConfig>(m, "BenchmarkConfig")
      .def(py::init<>())
      .def_readwrite("dataset_id", &BenchmarkConfig::dataset_id)
      .def_readwrite("seed", &BenchmarkConfig::seed)
      .def_readwrite("num_classes", &BenchmarkConfig::num_classes)
      .def_readwrite("latent_dim", &BenchmarkConfig::latent_dim)
      .def_readwrite("patches", &BenchmarkConfig::patches)
      .def_readwrite("train_per_class", &BenchmarkConfig::train_per_class)
      .def_readwrite("test_per_class", &BenchmarkConfig::test_per_class)
      .def_readwrite("intra_class_std", &BenchmarkConfig::intra_class_std)
      .def_readwrite("patch_noise", &BenchmarkConfig::patch_noise)
      .def_readwrite("name_noise", &BenchmarkConfig::name_noise)
      .def_readwrite("domain_shift", &BenchmarkConfig::domain_shift)
      .def_readwrite("pretrain_classes", &BenchmarkConfig::pretrain_classes)
      .def_readwrite("pretrain_images_per_class", &BenchmarkConfig::pretrain_images_per_class);

  py::class_<SyntheticBenchmark>(m, "SyntheticBenchmark")
      .def(py::init<const BenchmarkConfig&, const EncoderConfig&>(), py::arg("config") = BenchmarkConfig{},
           py::arg("encoder") = EncoderConfig{})
      .def("class_ids", &SyntheticBenchmark::class_ids)
      .def("class_name", &SyntheticBenchmark::class_name)
      .def("zero_shot_accuracy", &SyntheticBenchmark::zero_shot_accuracy)
      .def("backbone_fingerprint", [](const SyntheticBenchmark& b) { return b.encoder().fingerprint(); })
      .def("test_size", [](const SyntheticBenchmark& b) { return b.test_set().images.size(); });

  py::class_<AgentRegistry>(m, "AgentRegistry")
      .def_static("default", &default_registry)
      .def_static("parse", &AgentRegistry::parse)
      .def_static("load", &AgentRegistry::load)
      .def("to_json", &AgentRegistry::to_json)
      .def("agent_ids", [](const AgentRegistry& r) {
        std::vector<std::string> ids;
        for (const auto& a : r.agents()) ids.push_back(a.agent_id);
        return ids;
      });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("cosine_schedule", &TrainConfig::cosine_schedule)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("shots", &TrainConfig::shots)
      .def_property(
          "lambdas", [](const TrainConfig& t) { return std::vector<double>{t.weights.lambda1, t.weights.lambda2, t.weights.lambda3}; },
          [](TrainConfig& t, const std::vector<double>& l) {
            if (l.size() != 3) throw ConfigError("lambdas needs three values");
            t.weights.lambda1 = l[0];
            t.weights.lambda2 = l[1];
            t.weights.lambda3 = l[2];
          })
      .def_property(
          "fusion", [](const TrainConfig& t) { return to_string(t.fusion); },
          [](TrainConfig& t, const std::string& s) { t.fusion = fusion_from_string(s); })
      .def_property(
          "mac_type", [](const TrainConfig& t) { return to_string(t.mac_type); },
          [](TrainConfig& t, const std::string& s) { t.mac_type = mac_loss_type_from_string(s); })
      .def_property(
          "pooling", [](const TrainConfig& t) { return to_string(t.pooling); },
          [](TrainConfig& t, const std::string& s) { t.pooling = pooling_from_string(s); })
      .def("validate", &TrainConfig::validate)
      .def("fingerprint", &TrainConfig::fingerprint);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_readwrite("train", &ExperimentConfig::train)
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("split_seed", &ExperimentConfig::split_seed)
      .def_readwrite("cache_dir", &ExperimentConfig::cache_dir);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("set", &RunConfig::set)
      .def("apply_override", &RunConfig::apply_override)
      .def("merge_json", &RunConfig::merge_json)
      .def("get", &RunConfig::get)
      .def("values", &RunConfig::values)
      .def("to_json", &RunConfig::to_json)
      .def("hash", &RunConfig::hash)
      .def("experiment_config", [](const RunConfig& c) { return experiment_config(c); })
      .def("benchmark_config", [](const RunConfig& c) { return benchmark_config(c); })
      .def("encoder_config", [](const RunConfig& c) { return encoder_config(c); })
      .def("registry", [](const RunConfig& c) { return registry_from(c); });
  m.def("config_help", &config_help);

  m.def(
      "run_experiment",
      [](const ExperimentConfig& config, const SyntheticBenchmark& bench, const AgentRegistry& registry) {
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(config, bench, registry);
        }
        py::dict out = report_dict(r.report);
        out["base_classes"] = r.split.base;
        out["novel_classes"] = r.split.novel;
        py::list runs;
        for (const SeedRun& s : r.runs) {
          py::dict d;
          d["seed"] = s.seed;
          d["base"] = s.base;
          d["novel"] = s.novel;
          py::list log;
          for (const EpochLog& e : s.log) log.append(epoch_dict(e));
          d["log"] = log;
          d["prompts"] = prompts_dict(s.student.prompts);
          runs.append(d);
        }
        out["runs"] = runs;
        return out;
      },
      py::arg("config"), py::arg("benchmark"), py::arg("registry") = default_registry());

  m.def("ablation_settings", &ablation_settings);
  m.def(
      "run_ablation",
      [](const std::string& axis, const ExperimentConfig& config, const SyntheticBenchmark& bench,
         const AgentRegistry& registry) {
        AblationTable t;
        {
          py::gil_scoped_release release;
          t = run_ablation(axis, config, bench, registry);
        }
        py::list rows;
        for (const auto& [label, report] : t.rows) {
          py::dict d = report_dict(report);
          d["label"] = label;
          rows.append(d);
        }
        return rows;
      },
      py::arg("axis"), py::arg("config"), py::arg("benchmark"), py::arg("registry") = default_registry());

  m.def(
      "base_novel_split",
      [](const std::vector<int>& ids, std::uint64_t seed) {
        const SplitSpec s = base_novel_split(ids, seed);
        return std::make_pair(s.base, s.novel);
      },
      py::arg("class_ids"), py::arg("seed"));
  m.def("harmonic_mean", &harmonic_mean, py::arg("base"), py::arg("novel"));

  m.def(
      "clip_scores",
      [](const Matrix& v, const Matrix& t, double temperature) {
        return clip_scores({v, Modality::vision}, {t, Modality::text}, temperature).values;
      },
      py::arg("image"), py::arg("text"), py::arg("temperature") = 1.0);
  m.def(
      "learned_prompt_scores", [](const Matrix& qv, const Matrix& qt) { return learned_prompt_scores({qv}, {qt}).values; },
      py::arg("q_image"), py::arg("q_text"));
  m.def(
      "t2i_scores",
      [](const std::vector<Matrix>& maps, const std::string& pooling) {
        std::vector<CrossAttentionMap> m;
        for (const Matrix& x : maps) m.push_back({x, ""});
        return t2i_scores(m, pooling_from_string(pooling)).values;
      },
      py::arg("maps"), py::arg("pooling") = "logsumexp");

  m.def(
      "ce_loss", [](const Matrix& s, const std::vector<int>& labels) { return ce_loss({s, ScoreKind::clip}, labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "vac_loss",
      [](const std::vector<Matrix>& s, const std::vector<Matrix>& t, const std::string& mode) {
        return vac_loss(s, t, vac_mode_from_string(mode));
      },
      py::arg("student"), py::arg("teacher"), py::arg("mode") = "layer_wise");
  m.def(
      "lac_loss", [](const Matrix& t, const Matrix& g) { return lac_loss({t, Modality::text}, {g, Modality::text}); },
      py::arg("text"), py::arg("gated"));
  m.def(
      "mac_loss",
      [](const Matrix& p, const Matrix& a, const std::string& type, double temperature) {
        return mac_loss({p, ScoreKind::learned_prompt}, {a, ScoreKind::gated}, mac_loss_type_from_string(type),
                        temperature);
      },
      py::arg("learned"), py::arg("agent"), py::arg("loss_type") = "kl", py::arg("temperature") = 1.0);
  m.def(
      "total_loss",
      [](double ce, double vac, double lac, double mac, double l1, double l2, double l3) {
        return total_loss(ce, vac, lac, mac, LossWeights{l1, l2, l3, 1.0});
      },
      py::arg("ce"), py::arg("vac"), py::arg("lac"), py::arg("mac"), py::arg("lambda1") = 1.0,
      py::arg("lambda2") = 25.0, py::arg("lambda3") = 1.0);

  m.def(
      "moa_gate",
      [](const std::vector<Matrix>& inputs, int hidden, std::uint64_t seed, bool random_init) {
        if (inputs.empty()) throw InvalidInput("moa_gate: no agent inputs");
        const int width = static_cast<int>(inputs.size() * inputs.front().cols());
        const GateNetwork g = make_gate(width, hidden, static_cast<int>(inputs.size()), seed,
                                        random_init ? GateInit::random : GateInit::zero_output);
        const GateOutput out = moa_gate(inputs, g);
        return std::make_pair(out.weights, out.fused);
      },
      py::arg("inputs"), py::arg("hidden") = 16, py::arg("seed") = 0, py::arg("random_init") = true);
  m.def("fuse_average", [](const std::vector<Matrix>& x) { return fuse_average(x); });

  m.def(
      "validate_cache",
      [](const std::string& path, const AgentRegistry& registry) {
        py::list issues;
        for (const CacheIssue& i : validate_cache(path, registry, std::nullopt).issues) {
          py::dict d;
          d["kind"] = to_string(i.kind);
          d["key"] = i.key;
          d["message"] = i.message;
          issues.append(d);
        }
        return issues;
      },
      py::arg("path"), py::arg("registry"));
  m.def("load_student", [](const std::string& path) {
    const TrainedStudent s = load_student(path);
    py::dict d = prompts_dict(s.prompts);
    d["metadata"] = s.metadata;
    return d;
  });
}
