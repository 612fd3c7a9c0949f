// Exit-gate checks. Prints one PASS/FAIL line per criterion and exits non-zero
// when any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "test_util.hpp"
#include "transagent/distill_losses.hpp"
#include "transagent/eval_harness.hpp"
#include "transagent/moa_gating.hpp"

using namespace transagent;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Outcome metric_reproduction() {
  const double a = harmonic_mean(85.29, 77.62), b = harmonic_mean(92.19, 54.74);
  return {std::abs(a - 81.27) <= 0.01 && std::abs(b - 68.69) <= 0.01,
          fmt("HM(85.29,77.62)=%.4f HM(92.19,54.74)=%.4f", a, b)};
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  const auto& world = testutil::toy_world();
  const AgentRegistry reg = testutil::toy_registry();
  const TrainingData data = make_training_data(world, testutil::toy_split(), 1);
  Trainer trainer(testutil::toy_train_config(), world.encoder(), data, extract_knowledge(reg, world, data), reg);
  // Gates start with a zero output layer; move them off it so every path carries gradient.
  std::mt19937_64 rng(17);
  for (const NamedParameter& p : trainer.parameters()) {
    if (p.name.find(".w_out") != std::string::npos || p.name.find(".b_out") != std::string::npos) {
      p.parameter->value = testutil::random_matrix(rng, p.parameter->value.rows(), p.parameter->value.cols(), -0.5, 0.5);
    }
  }
  const int idx[] = {0, 3};
  auto loss = [&] {
    ad::Graph g;
    return trainer.loss_graph(g, idx).total.scalar();
  };
  for (const NamedParameter& p : trainer.parameters()) p.parameter->zero_grad();
  {
    ad::Graph g;
    const StepLosses l = trainer.loss_graph(g, idx);
    g.backward(l.total);
  }
  testutil::FdResult r;
  std::set<std::string> groups;
  for (const NamedParameter& p : trainer.parameters()) {
    const Matrix analytic = p.parameter->grad;
    testutil::fd_check(p.parameter->value, analytic, loss, p.name, r);
    groups.insert(p.name.substr(0, p.name.find('.')));
  }
  const bool all_groups = groups.count("prompt") && groups.count("gate") && groups.count("projection");
  return {r.worst <= 1e-4 && all_groups && seconds_since(t0) < 60.0,
          fmt("%d parameters, worst rel. err %.2e (%s), %.1fs", r.checked, r.worst, r.where.c_str(),
              seconds_since(t0))};
}

Outcome gating_simplex() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> agents(1, 5), width(1, 6), rows(1, 8);
  double worst_sum = 0.0;
  bool ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int a = agents(rng), c = width(rng), n = rows(rng);
    std::vector<Matrix> in;
    for (int i = 0; i < a; ++i) in.push_back(testutil::random_matrix(rng, n, c, -3.0, 3.0));
    const GateNetwork g = make_gate(a * c, 8, a, static_cast<std::uint64_t>(trial), GateInit::random);
    const GateOutput out = moa_gate(in, g);
    if ((out.weights.array() < 0.0).any()) ok = false;
    for (Eigen::Index r = 0; r < n; ++r) worst_sum = std::max(worst_sum, std::abs(out.weights.row(r).sum() - 1.0));
    for (Eigen::Index i = 0; i < out.fused.size(); ++i) {
      double lo = in[0].data()[i], hi = lo;
      for (const Matrix& m : in) {
        lo = std::min(lo, m.data()[i]);
        hi = std::max(hi, m.data()[i]);
      }
      const double tol = 1e-12 * std::max(1.0, std::abs(hi));
      if (out.fused.data()[i] < lo - tol || out.fused.data()[i] > hi + tol) ok = false;
    }
    if (a == 1 && out.fused != in[0]) ok = false;
  }
  return {ok && worst_sum <= 1e-6, fmt("1000 gates, worst |row sum - 1| = %.1e", worst_sum)};
}

Outcome lse_bounds() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> tokens(1, 64);
  std::uniform_real_distribution<double> spread(0.1, 30.0);
  bool ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = tokens(rng);
    const double s = spread(rng);
    const Eigen::RowVectorXd m = testutil::random_matrix(rng, 1, k, -s, s);
    const double lse = pool_tokens(m, Pooling::logsumexp), mx = m.maxCoeff();
    if (!(mx <= lse && lse <= mx + std::log(static_cast<double>(k)))) ok = false;
  }
  double closed = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double v = testutil::random_matrix(rng, 1, 1, -20, 20)(0, 0);
    Eigen::RowVectorXd one(1);
    one << v;
    closed = std::max(closed, std::abs(pool_tokens(one, Pooling::logsumexp) - v));
    const int k = tokens(rng);
    closed = std::max(closed, std::abs(pool_tokens(Eigen::RowVectorXd::Constant(k, v), Pooling::logsumexp) -
                                       (v + std::log(static_cast<double>(k)))));
  }
  return {ok && closed <= 1e-9, fmt("1000 maps within [max, max+log K]; closed forms off by %.1e", closed)};
}

Outcome loss_fixed_points() {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> dim(1, 6), layers(1, 4);
  std::uniform_real_distribution<double> eps(1e-3, 1.0);
  bool ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = dim(rng), c = dim(rng) + 1, l = layers(rng);
    std::vector<Matrix> s, t;
    for (int i = 0; i < l; ++i) {
      s.push_back(testutil::random_matrix(rng, n, c));
      t.push_back(s.back() + eps(rng) * testutil::random_matrix(rng, n, c));
    }
    for (VacMode mode : {VacMode::layer_wise, VacMode::last_layer}) {
      ok = ok && vac_loss(s, s, mode) == 0.0 && vac_loss(s, t, mode) > 0.0;
    }
    ok = ok && lac_loss({s[0], Modality::text}, {s[0], Modality::text}) == 0.0 &&
         lac_loss({s[0], Modality::text}, {t[0], Modality::text}) > 0.0;
    const ScoreMatrix p{s[0], ScoreKind::learned_prompt}, q{t[0], ScoreKind::gated};
    for (MacLossType type : {MacLossType::kl, MacLossType::l1, MacLossType::mse}) {
      ok = ok && std::abs(mac_loss(p, p, type, 1.0)) < 1e-15 && mac_loss(p, q, type, 1.0) > 0.0;
    }
  }
  Matrix a(1, 2), b(1, 2);
  a << 0.0, 0.0;
  b << std::log(0.9), std::log(0.1);
  const double kl = mac_loss({a, ScoreKind::learned_prompt}, {b, ScoreKind::gated}, MacLossType::kl, 1.0);
  return {ok && std::abs(kl - 0.5108) <= 1e-4, fmt("1000 pairs; KL((.5,.5)||(.9,.1)) = %.6f", kl)};
}

Outcome agent_unload(const SyntheticBenchmark& world, const AgentRegistry& registry) {
  const SplitSpec split = base_novel_split(world.class_ids(), 0, world.config().dataset_id, 16);
  const TrainingData data = make_training_data(world, split, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  Trainer trainer(cfg, world.encoder(), data, extract_knowledge(registry, world, data), registry);
  trainer.run();
  std::vector<VisualTokenSequence> batch(world.test_set().images.begin(), world.test_set().images.begin() + 256);
  const std::vector<TextualTokenSequence> texts = world.class_texts(world.class_ids());
  auto scores = [&](const PromptSet& p) {
    return clip_scores(encode_image(world.encoder(), batch, p).features, encode_text(world.encoder(), texts, p).features,
                       cfg.ce_temperature)
        .values;
  };
  const Matrix before = scores(trainer.prompts());
  testutil::TempDir dir("unload");
  trainer.unload_agents();
  save_student(trainer.export_student(), dir.file("student.takc"));
  const Matrix after = scores(load_student(dir.file("student.takc")).prompts);
  const double diff = (before - after).cwiseAbs().maxCoeff();

  std::vector<std::uintmax_t> sizes;
  for (int agents : {1, 2, 4}) {
    const auto& toy = testutil::toy_world();
    const AgentRegistry reg = testutil::toy_registry(agents);
    const TrainingData d = make_training_data(toy, testutil::toy_split(), 1);
    TrainConfig tc = testutil::toy_train_config();
    tc.epochs = 1;
    Trainer t(tc, toy.encoder(), d, extract_knowledge(reg, toy, d), reg);
    t.run();
    const std::string path = dir.file("s" + std::to_string(agents) + ".takc");
    save_student(t.export_student(), path);
    std::uintmax_t payload = 0;
    for (const auto& e : CacheReader(path).manifest().entries) payload += e.length;
    sizes.push_back(payload);
  }
  const bool same_size = sizes[0] == sizes[1] && sizes[1] == sizes[2];
  return {diff <= 1e-9 && batch.size() == 256 && same_size,
          fmt("256 samples, max |score diff| = %.1e; payload bytes for A=1,2,4: %ju %ju %ju", diff, sizes[0],
              sizes[1], sizes[2])};
}

Outcome freezing() {
  const auto& toy = testutil::toy_world();
  const AgentRegistry reg = testutil::toy_registry();
  const TrainingData d = make_training_data(toy, testutil::toy_split(), 1);
  const std::vector<double> snap = toy.encoder().snapshot();
  const std::uint64_t before = toy.encoder().fingerprint();
  TrainConfig cfg = testutil::toy_train_config();
  cfg.epochs = 20;
  Trainer t(cfg, toy.encoder(), d, extract_knowledge(reg, toy, d), reg);
  t.run();
  const std::uint64_t after = toy.encoder().fingerprint();
  return {before == after && snap == toy.encoder().snapshot() && t.epochs_done() == 20,
          fmt("20 epochs; backbone hash %016llx -> %016llx", static_cast<unsigned long long>(before),
              static_cast<unsigned long long>(after))};
}

Outcome distillation_benefit(const SyntheticBenchmark& world, const AgentRegistry& registry) {
  const auto t0 = Clock::now();
  ExperimentConfig full;  // 3 seeds, 16 shots, default recipe
  ExperimentConfig ce_only = full;
  ce_only.train.weights = LossWeights{0.0, 0.0, 0.0, 1.0};
  ExperimentConfig average = full;
  average.train.fusion = Fusion::average;
  const EvalReport f = run_experiment(full, world, registry).report;
  const EvalReport c = run_experiment(ce_only, world, registry).report;
  const EvalReport a = run_experiment(average, world, registry).report;
  const double secs = seconds_since(t0);
  const bool ok = f.novel >= c.novel + 5.0 && f.hm >= a.hm && secs < 300.0 && f.seed_count() == 3;
  return {ok, fmt("novel %.2f vs CE-only %.2f (+%.2f); HM gating %.2f vs average %.2f; %.0fs", f.novel, c.novel,
                  f.novel - c.novel, f.hm, a.hm, secs)};
}

Outcome cache_fidelity() {
  const auto& toy = testutil::toy_world();
  const AgentRegistry reg = testutil::toy_registry();
  const TrainingData d = make_training_data(toy, testutil::toy_split(), 2);
  const TeacherKnowledge live = extract_knowledge(reg, toy, d);
  testutil::TempDir dir("cache");
  write_knowledge_cache(dir.file("k.takc"), live, reg, d);
  const bool clean = validate_cache(dir.file("k.takc"), reg).ok();
  TrainConfig cfg = testutil::toy_train_config();
  cfg.epochs = 5;
  Trainer a(cfg, toy.encoder(), d, live, reg);
  Trainer b(cfg, toy.encoder(), d, load_knowledge(dir.file("k.takc"), reg, d), reg);
  a.run();
  b.run();
  double worst = 0.0;
  for (std::size_t e = 0; e < a.log().size(); ++e) {
    const EpochLog &x = a.log()[e], &y = b.log()[e];
    for (double diff : {x.ce - y.ce, x.vac - y.vac, x.lac - y.lac, x.mac - y.mac, x.total - y.total}) {
      worst = std::max(worst, std::abs(diff));
    }
  }
  return {clean && worst <= 1e-9 && a.log().size() == 5, fmt("5 epochs, max trajectory diff %.1e", worst)};
}

Outcome ablation_rows() {
  const std::vector<std::pair<std::string, std::set<std::string>>> want = {
      {"vac_mode", {"last-layer", "layer-wise"}},           {"lac_token", {"sos", "eos"}},
      {"mac_source", {"prompted_logits", "learned_scores"}}, {"fusion", {"average", "add", "gating"}},
      {"mac_loss_type", {"kl", "l1", "mse"}},               {"pooling", {"average", "max", "logsumexp"}},
  };
  ExperimentConfig cfg;
  cfg.train = testutil::toy_train_config();
  cfg.train.epochs = 1;
  cfg.seeds = {1};
  const AgentRegistry reg = testutil::toy_registry();
  bool ok = true;
  std::string seen;
  for (const auto& [axis, rows] : want) {
    const AblationTable t = run_ablation(axis, cfg, testutil::toy_world(), reg);
    std::set<std::string> got;
    for (const auto& r : t.rows) got.insert(r.first);
    ok = ok && got == rows && t.rows.size() == rows.size();
    seen += axis + "=" + std::to_string(t.rows.size()) + " ";
  }
  return {ok, "rows per axis: " + seen};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s  [%2d] %-28s %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "metric reproduction", metric_reproduction);
  report(2, "gradient oracle", gradient_oracle);
  report(3, "gating simplex", gating_simplex);
  report(4, "LSE pooling bounds", lse_bounds);
  report(5, "loss fixed points", loss_fixed_points);
  const SyntheticBenchmark world{BenchmarkConfig{}, EncoderConfig{}};
  const AgentRegistry registry = default_registry();
  report(6, "agent-unload equivalence", [&] { return agent_unload(world, registry); });
  report(7, "freezing contract", freezing);
  report(8, "distillation benefit", [&] { return distillation_benefit(world, registry); });
  report(9, "cache fidelity", cache_fidelity);
  report(10, "ablation row sets", ablation_rows);
  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
