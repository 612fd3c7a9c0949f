// Command-line entry point: extract | train | export | eval | ablate | gating-report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "transagent/config.hpp"
#include "transagent/errors.hpp"
#include "transagent/eval_harness.hpp"
#include "transagent/random.hpp"

namespace fs = std::filesystem;
using namespace transagent;

namespace {

struct Context {
  RunConfig config;
  fs::path run_dir;
  std::unique_ptr<SyntheticBenchmark> bench;
  AgentRegistry registry;
  ExperimentConfig experiment;
  SplitSpec split;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

Context make_context(const std::string& config_path, const std::vector<std::string>& overrides) {
  Context ctx;
  if (!config_path.empty()) ctx.config.merge_file(config_path);
  for (const std::string& o : overrides) ctx.config.apply_override(o);
  ctx.experiment = experiment_config(ctx.config);
  ctx.registry = registry_from(ctx.config);
  ctx.bench = std::make_unique<SyntheticBenchmark>(benchmark_config(ctx.config), encoder_config(ctx.config));
  ctx.split = base_novel_split(ctx.bench->class_ids(), ctx.experiment.split_seed, ctx.bench->config().dataset_id,
                               ctx.experiment.train.shots);
  ctx.run_dir = fs::path(ctx.config.get("run.root")) / ctx.config.hash();
  fs::create_directories(ctx.run_dir);
  write_file(ctx.run_dir / "config.json", ctx.config.to_json() + "\n");
  return ctx;
}

fs::path cache_dir(const Context& ctx) {
  const char* env = std::getenv("TRANSAGENT_CACHE_DIR");
  return env && *env ? fs::path(env) : ctx.run_dir / "cache";
}

// Knowledge depends on the world, the roster, the split and the shots.
fs::path cache_path(const Context& ctx, std::uint64_t seed) {
  std::string canon = ctx.registry.to_json();
  for (const auto& [k, v] : ctx.config.values()) {
    if (k.rfind("data.", 0) == 0 || k.rfind("encoder.", 0) == 0) canon += k + "=" + v + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
  return cache_dir(ctx) / (ctx.split.dataset_id + "-" + buf + "-seed" + std::to_string(seed) + ".takc");
}

std::string join_ids(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
  return s;
}

fs::path state_path(const Context& ctx, std::uint64_t seed) {
  return ctx.run_dir / ("state-seed" + std::to_string(seed) + ".takc");
}
fs::path student_path(const Context& ctx, std::uint64_t seed) {
  return ctx.run_dir / ("student-seed" + std::to_string(seed) + ".takc");
}

void require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw MissingInput(p.string() + " not found; " + hint);
}

bool distills(const TrainConfig& t) {
  return t.weights.lambda1 > 0.0 || t.weights.lambda2 > 0.0 || t.weights.lambda3 > 0.0;
}

void emit(const nlohmann::json& j) { std::cout << j.dump() << std::endl; }

int cmd_extract(Context& ctx) {
  fs::create_directories(cache_dir(ctx));
  for (std::uint64_t seed : ctx.experiment.seeds) {
    const TrainingData data = make_training_data(*ctx.bench, ctx.split, seed);
    const fs::path path = cache_path(ctx, seed);
    write_knowledge_cache(path.string(), extract_knowledge(ctx.registry, *ctx.bench, data), ctx.registry, data);
    emit({{"event", "extract"}, {"seed", seed}, {"cache", path.string()}, {"bytes", fs::file_size(path)}});
  }
  return 0;
}

int cmd_train(Context& ctx) {
  const bool from_cache = ctx.config.get_bool("cache.use");
  std::ofstream log(ctx.run_dir / "train_log.jsonl", std::ios::trunc);
  for (std::uint64_t seed : ctx.experiment.seeds) {
    TrainConfig tc = ctx.experiment.train;
    tc.seed = seed;
    TrainingData data = make_training_data(*ctx.bench, ctx.split, seed);
    TeacherKnowledge knowledge;
    if (distills(tc)) {
      if (from_cache) {
        const fs::path path = cache_path(ctx, seed);
        require(path, "run `extract` with the same config first");
        knowledge = load_knowledge(path.string(), ctx.registry, data);
      } else {
        knowledge = extract_knowledge(ctx.registry, *ctx.bench, data);
      }
    }
    Trainer trainer(tc, ctx.bench->encoder(), std::move(data), std::move(knowledge), ctx.registry);
    trainer.run([&](const EpochLog& e) {
      const nlohmann::json j = {{"seed", seed},   {"epoch", e.epoch}, {"ce", e.ce},       {"vac", e.vac},
                                {"lac", e.lac},   {"mac", e.mac},     {"total", e.total}, {"seconds", e.seconds}};
      log << j.dump() << '\n';
      log.flush();
    });
    save_training_state(trainer, state_path(ctx, seed).string(),
                        {{"dataset_id", ctx.split.dataset_id}, {"base_classes", join_ids(ctx.split.base)}});
    const double final_total = trainer.log().empty() ? 0.0 : trainer.log().back().total;
    emit({{"event", "train"}, {"seed", seed}, {"state", state_path(ctx, seed).string()}, {"final_total", final_total}});
  }
  return 0;
}

int cmd_export(Context& ctx) {
  for (std::uint64_t seed : ctx.experiment.seeds) {
    const fs::path in = state_path(ctx, seed);
    require(in, "run `train` with the same config first");
    const TrainedStudent student = load_training_state(in.string()).student();
    save_student(student, student_path(ctx, seed).string());
    emit({{"event", "export"}, {"seed", seed}, {"student", student_path(ctx, seed).string()}});
  }
  return 0;
}

int cmd_eval(Context& ctx) {
  std::vector<std::pair<std::uint64_t, TrainedStudent>> students;
  for (std::uint64_t seed : ctx.experiment.seeds) {
    const fs::path p = student_path(ctx, seed);
    require(p, "run `export` with the same config first");
    students.emplace_back(seed, load_student(p.string()));
  }
  const EvalReport report = evaluate(students, ctx.split, *ctx.bench);
  const std::vector<std::pair<std::string, EvalReport>> rows = {{"transagent", report}};
  write_file(ctx.run_dir / "report.jsonl", report_jsonl(rows));
  const std::string table = render_table(rows, "base-to-novel (" + std::to_string(report.seed_count()) + " seeds)");
  write_file(ctx.run_dir / "report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_ablate(Context& ctx, const std::string& axis) {
  const AblationTable table = run_ablation(axis, ctx.experiment, *ctx.bench, ctx.registry);
  write_file(ctx.run_dir / ("ablation-" + axis + ".jsonl"), report_jsonl(table.rows));
  const std::string text = render_table(table.rows, "ablation: " + axis);
  write_file(ctx.run_dir / ("ablation-" + axis + ".txt"), text);
  std::cout << text;
  return 0;
}

int cmd_gating_report(Context& ctx) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> per_agent;
  std::vector<std::pair<std::string, std::string>> order;
  for (std::uint64_t seed : ctx.experiment.seeds) {
    const fs::path p = state_path(ctx, seed);
    require(p, "run `train` with the same config first");
    const TrainingStateFile state = load_training_state(p.string());
    if (state.gates.empty()) throw StateError(p.string() + " holds no gate weights (agents were unloaded)");
    std::ostringstream grid;
    for (const auto& [group, gw] : state.gates) {
      for (std::size_t a = 0; a < gw.agents.size(); ++a) {
        const auto key = std::make_pair(group, gw.agents[a]);
        if (!per_agent.count(key)) order.push_back(key);
        per_agent[key].push_back(gw.weights.col(static_cast<Eigen::Index>(a)).mean());
      }
      // Per-sample heat-map rows: one line per sample, one column per agent.
      grid << "# " << group;
      for (const auto& a : gw.agents) grid << ',' << a;
      grid << '\n';
      for (Eigen::Index r = 0; r < gw.weights.rows(); ++r) {
        grid << r;
        for (Eigen::Index c = 0; c < gw.weights.cols(); ++c) grid << ',' << gw.weights(r, c);
        grid << '\n';
      }
    }
    write_file(ctx.run_dir / ("gating-grid-seed" + std::to_string(seed) + ".csv"), grid.str());
  }
  std::ostringstream csv;
  csv << "group,agent,mean_weight\n";
  for (const auto& key : order) {
    const auto& v = per_agent[key];
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", m);
    csv << key.first << ',' << key.second << ',' << buf << '\n';
  }
  write_file(ctx.run_dir / "gating.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source prompt distillation toolkit"};
  app.require_subcommand(1);
  app.footer(config_help());
  std::string config_path;
  std::vector<std::string> overrides;
  std::string axis;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of dotted config keys");
    sub->add_option("--set", overrides, "override a key, e.g. --set loss.lambda2=25")->take_all();
    sub->footer(config_help());
  };
  CLI::App* extract = app.add_subcommand("extract", "run every agent offline and write knowledge caches");
  CLI::App* train = app.add_subcommand("train", "distil agent knowledge into prompts");
  CLI::App* exp = app.add_subcommand("export", "strip gates and projections, write inference-only students");
  CLI::App* eval = app.add_subcommand("eval", "base-to-novel evaluation of exported students");
  CLI::App* ablate = app.add_subcommand("ablate", "run one ablation axis");
  CLI::App* gating = app.add_subcommand("gating-report", "averaged gate weights per agent");
  for (CLI::App* s : {extract, train, exp, eval, ablate, gating}) add_common(s);
  ablate->add_option("--axis", axis, "vac_mode | lac_token | mac_source | fusion | mac_loss_type | pooling")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("config", e.what());
    return 2;
  }

  try {
    Context ctx = make_context(config_path, overrides);
    if (extract->parsed()) return cmd_extract(ctx);
    if (train->parsed()) return cmd_train(ctx);
    if (exp->parsed()) return cmd_export(ctx);
    if (eval->parsed()) return cmd_eval(ctx);
    if (ablate->parsed()) {
      ablation_settings(axis);
      return cmd_ablate(ctx, axis);
    }
    if (gating->parsed()) return cmd_gating_report(ctx);
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return 2;
  } catch (const MissingInput& e) {
    print_error("missing_input", e.what());
    return 3;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 1;
}
