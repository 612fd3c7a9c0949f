#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "transagent/errors.hpp"
#include "transagent/eval_harness.hpp"

using namespace transagent;

namespace {

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

LabeledBatch pool_of(int classes, int per_class) {
  LabeledBatch b;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      b.images.push_back({Matrix::Constant(1, 1, c * 100 + i), "c" + std::to_string(c) + "/" + std::to_string(i)});
      b.labels.push_back(c);
    }
  }
  return b;
}

}  // namespace

TEST_SUITE("eval_harness") {
  TEST_CASE("equal base/novel split sizes, completeness and determinism") {
    const auto four = iota(4);
    const SplitSpec s4 = base_novel_split(four, 7);
    CHECK(s4.base.size() == 2);
    CHECK(s4.novel.size() == 2);
    const auto five = iota(5);
    const SplitSpec s5 = base_novel_split(five, 7);
    CHECK(s5.base.size() == 3);
    CHECK(s5.novel.size() == 2);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto ids = iota(11);
      const SplitSpec a = base_novel_split(ids, seed), b = base_novel_split(ids, seed);
      CHECK(a.base == b.base);
      CHECK(a.novel == b.novel);
      std::set<int> all(a.base.begin(), a.base.end());
      for (int c : a.novel) CHECK(all.insert(c).second);
      CHECK(all.size() == 11);
    }
    const int one[] = {3};
    CHECK_THROWS_AS(base_novel_split(one, 0), InvalidInput);
  }

  TEST_CASE("few-shot sampling counts, distinctness and errors") {
    const LabeledBatch pool = pool_of(3, 5);
    const auto classes = iota(3);
    const LabeledBatch all = few_shot_sample(pool, classes, 5, 1);
    CHECK(all.images.size() == 15);
    const LabeledBatch one = few_shot_sample(pool, classes, 1, 1);
    CHECK(one.labels == std::vector<int>{0, 1, 2});

    const auto& world = testutil::toy_world();
    const auto wc = world.class_ids();
    const LabeledBatch four = few_shot_sample(world.train_pool(), wc, 4, 9);
    std::map<int, int> count;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < four.labels.size(); ++i) {
      ++count[four.labels[i]];
      ids.insert(four.images[i].sample_id);
    }
    CHECK(ids.size() == four.images.size());
    for (int c : wc) CHECK(count[c] == 4);
    CHECK(few_shot_sample(world.train_pool(), wc, 4, 9).images[5].sample_id == four.images[5].sample_id);

    try {
      few_shot_sample(pool, classes, 6, 1);
      FAIL("expected InvalidInput");
    } catch (const InvalidInput& e) {
      CHECK(std::string(e.what()).find("class 0") != std::string::npos);
    }
  }

  TEST_CASE("harmonic mean values and bounds") {
    CHECK(std::abs(harmonic_mean(85.29, 77.62) - 81.27) <= 0.01);
    CHECK(std::abs(harmonic_mean(92.19, 54.74) - 68.69) <= 0.01);
    CHECK(harmonic_mean(42.0, 42.0) == doctest::Approx(42.0));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.1, 100.0);
    for (int i = 0; i < 200; ++i) {
      const double a = u(rng), b = u(rng), h = harmonic_mean(a, b);
      CHECK(std::min(a, b) >= h / 2.0);
      CHECK(h <= (a + b) / 2.0 + 1e-12);
    }
    CHECK_THROWS_AS(harmonic_mean(0.0, 10.0), InvalidInput);
    CHECK_THROWS_AS(harmonic_mean(10.0, -1.0), InvalidInput);
  }

  TEST_CASE("accuracy trivial cases and random-score binomial bound") {
    Matrix s = Matrix::Zero(3, 4);
    s.col(0).setOnes();
    const int zeros[] = {0, 0, 0};
    CHECK(accuracy({s, ScoreKind::clip}, zeros) == 100.0);
    const int one[] = {2};
    const double single = accuracy({s.topRows(1), ScoreKind::clip}, one);
    CHECK((single == 0.0 || single == 100.0));

    std::mt19937_64 rng(2);
    const int n = 4000;
    const Matrix r = testutil::random_matrix(rng, n, 4);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
    const double acc = accuracy({r, ScoreKind::clip}, labels);
    const double sigma = 100.0 * std::sqrt(0.25 * 0.75 / n);
    CHECK(std::abs(acc - 25.0) < 4.0 * sigma);
  }

  TEST_CASE("subset accuracy equals a brute-force argmax loop") {
    const auto& world = testutil::toy_world();
    const PromptSet p = init_prompts(PromptConfig{}, world.encoder());
    const std::vector<int> classes = {1, 3, 4};
    const auto texts = world.class_texts(classes);
    const auto tf = encode_text(world.encoder(), texts, p).features;
    int hits = 0, total = 0;
    for (std::size_t i = 0; i < world.test_set().images.size(); ++i) {
      const int label = world.test_set().labels[i];
      const auto it = std::find(classes.begin(), classes.end(), label);
      if (it == classes.end()) continue;
      const Matrix v = encode_image(world.encoder(), world.test_set().images[i], p).features.values;
      int best = 0;
      double best_score = -2.0;
      for (std::size_t c = 0; c < classes.size(); ++c) {
        const double cs = v.row(0).dot(tf.values.row(static_cast<Eigen::Index>(c))) /
                          (v.row(0).norm() * tf.values.row(static_cast<Eigen::Index>(c)).norm());
        if (cs > best_score) {
          best_score = cs;
          best = static_cast<int>(c);
        }
      }
      hits += best == static_cast<int>(it - classes.begin());
      ++total;
    }
    CHECK(class_subset_accuracy(world.encoder(), p, world, classes) == doctest::Approx(100.0 * hits / total));
  }

  TEST_CASE("evaluate aggregates seeds and rejects mismatched students") {
    const auto& world = testutil::toy_world();
    const SplitSpec split = testutil::toy_split();
    TrainedStudent st{init_prompts(PromptConfig{}, world.encoder()), {}};
    st.metadata["dataset_id"] = split.dataset_id;
    std::string base;
    for (std::size_t i = 0; i < split.base.size(); ++i) base += (i ? "," : "") + std::to_string(split.base[i]);
    st.metadata["base_classes"] = base;
    const EvalReport r = evaluate({{1, st}, {2, st}}, split, world);
    CHECK(r.seed_count() == 2);
    CHECK(r.base_per_seed[0] == r.base_per_seed[1]);
    CHECK(r.base_std == 0.0);
    CHECK(r.hm == doctest::Approx(harmonic_mean(r.base, r.novel)));
    TrainedStudent wrong = st;
    wrong.metadata["base_classes"] = "0";
    CHECK_THROWS_AS(evaluate({{1, wrong}}, split, world), ValidationError);
    wrong = st;
    wrong.metadata["dataset_id"] = "other";
    CHECK_THROWS_AS(evaluate({{1, wrong}}, split, world), ValidationError);
  }

  TEST_CASE("gating report: single agent, symmetric agents, incremental mean") {
    const auto& world = testutil::toy_world();
    const SplitSpec split = testutil::toy_split();
    const TrainingData data = make_training_data(world, split, 1);

    {
      const AgentRegistry reg = testutil::toy_registry(1);
      Trainer t(testutil::toy_train_config(), world.encoder(), data, extract_knowledge(reg, world, data), reg);
      const auto idx = iota(static_cast<int>(data.samples.images.size()));
      for (const auto& g : gating_report(t, idx)) {
        if (g.group == "vision") CHECK(g.mean_weights == std::vector<double>{1.0});
      }
    }
    {
      // Two copies of the same caption agent under different ids.
      std::vector<AgentDescriptor> agents = testutil::toy_registry().agents();
      std::erase_if(agents, [](const AgentDescriptor& a) { return a.modality == AgentModality::i2t; });
      AgentDescriptor cap = testutil::toy_registry().find("c0");
      agents.push_back(cap);
      cap.agent_id = "c0_copy";
      agents.push_back(cap);
      const AgentRegistry reg(agents);
      TrainingData d = data;
      TeacherKnowledge k = extract_knowledge(reg, world, d);
      REQUIRE(k.i2t.size() == 2);
      k.i2t[1].scores = k.i2t[0].scores;
      Trainer t(testutil::toy_train_config(), world.encoder(), d, k, reg);
      t.run();
      const auto idx = iota(static_cast<int>(d.samples.images.size()));
      for (const auto& g : gating_report(t, idx)) {
        if (g.group != "multimodal") continue;
        // MAC gate fuses T2I and I2T scores: the two identical caption agents are the last two.
        const std::size_t n = g.mean_weights.size();
        CHECK(std::abs(g.mean_weights[n - 1] - g.mean_weights[n - 2]) < 1e-9);
      }
    }
    {
      const AgentRegistry reg = testutil::toy_registry();
      Trainer t(testutil::toy_train_config(), world.encoder(), data, extract_knowledge(reg, world, data), reg);
      t.run();
      const int n = static_cast<int>(data.samples.images.size());
      const auto all = iota(n);
      const std::vector<int> first(all.begin(), all.begin() + n / 2), second(all.begin() + n / 2, all.end());
      const auto whole = gating_report(t, all), a = gating_report(t, first), b = gating_report(t, second);
      for (std::size_t g = 0; g < whole.size(); ++g) {
        double sum = 0.0;
        const bool per_class = whole[g].group == "language";
        for (std::size_t i = 0; i < whole[g].mean_weights.size(); ++i) {
          const double streamed = per_class ? a[g].mean_weights[i]
                                            : (a[g].mean_weights[i] * static_cast<double>(first.size()) +
                                               b[g].mean_weights[i] * static_cast<double>(second.size())) /
                                                  static_cast<double>(n);
          CHECK(std::abs(whole[g].mean_weights[i] - streamed) < 1e-12);
          CHECK(whole[g].mean_weights[i] >= 0.0);
          CHECK(whole[g].mean_weights[i] <= 1.0);
          sum += whole[g].mean_weights[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
      }
      CHECK(gating_grid(whole).rfind("group,agent,weight\n", 0) == 0);
      t.unload_agents();
      CHECK_THROWS_AS(gating_report(t, all), StateError);
    }
  }

  TEST_CASE("ablation axes, rows and determinism") {
    CHECK(ablation_settings("vac_mode") == std::vector<std::string>{"last-layer", "layer-wise"});
    CHECK(ablation_settings("lac_token") == std::vector<std::string>{"sos", "eos"});
    CHECK(ablation_settings("mac_source") == std::vector<std::string>{"prompted_logits", "learned_scores"});
    CHECK(ablation_settings("fusion") == std::vector<std::string>{"average", "add", "gating"});
    CHECK(ablation_settings("mac_loss_type") == std::vector<std::string>{"kl", "l1", "mse"});
    CHECK(ablation_settings("pooling") == std::vector<std::string>{"average", "max", "logsumexp"});
    CHECK_THROWS_AS(ablation_settings("dropout"), ConfigError);

    ExperimentConfig cfg;
    cfg.train = testutil::toy_train_config();
    cfg.train.epochs = 1;
    cfg.seeds = {1};
    const AgentRegistry reg = testutil::toy_registry();
    const AblationTable a = run_ablation("fusion", cfg, testutil::toy_world(), reg);
    const AblationTable b = run_ablation("fusion", cfg, testutil::toy_world(), reg);
    REQUIRE(a.rows.size() == 3);
    CHECK(a.rows[2].first == "gating");
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.rows[i].second.base == b.rows[i].second.base);
      CHECK(a.rows[i].second.novel == b.rows[i].second.novel);
    }
    CHECK(report_jsonl(a.rows) == report_jsonl(b.rows));
    const std::string table = render_table(a.rows, "fusion");
    CHECK(table.find("Base") != std::string::npos);
    CHECK(table.find("HM") != std::string::npos);
  }

  TEST_CASE("experiment through a cache directory matches the live run") {
    ExperimentConfig cfg;
    cfg.train = testutil::toy_train_config();
    cfg.seeds = {1, 2};
    const AgentRegistry reg = testutil::toy_registry();
    const ExperimentResult live = run_experiment(cfg, testutil::toy_world(), reg);
    testutil::TempDir dir("ex");
    cfg.cache_dir = dir.path().string();
    const ExperimentResult cached = run_experiment(cfg, testutil::toy_world(), reg);
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(live.runs[s].log.back().total == cached.runs[s].log.back().total);
      CHECK(live.runs[s].novel == cached.runs[s].novel);
    }
  }
}
