#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "transagent/config.hpp"
#include "transagent/errors.hpp"

using namespace transagent;

TEST_SUITE("config") {
  TEST_CASE("defaults follow the training recipe") {
    const RunConfig c;
    const TrainConfig t = train_config(c);
    CHECK(t.epochs == 20);
    CHECK(t.batch_size == 4);
    CHECK(t.learning_rate == 0.0025);
    CHECK(t.momentum == 0.0);
    CHECK_FALSE(t.cosine_schedule);
    CHECK(t.weights.lambda1 == 1.0);
    CHECK(t.weights.lambda2 == 25.0);
    CHECK(t.weights.lambda3 == 1.0);
    CHECK(t.prompt.n_ctx == 4);
    CHECK(t.lac_token == TextPool::eos);
    CHECK(t.fusion == Fusion::gating);
    CHECK(t.pooling == Pooling::logsumexp);
    CHECK(experiment_config(c).seeds == std::vector<std::uint64_t>{1, 2, 3});
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    RunConfig c;
    CHECK_THROWS_AS(c.set("loss.lambda9", "1"), ConfigError);
    CHECK_THROWS_AS(c.set("train.epochs", "many"), ConfigError);
    CHECK_THROWS_AS(c.set("loss.mac_type", "huber"), ConfigError);
    CHECK_THROWS_AS(c.apply_override("loss.lambda2"), ConfigError);
    CHECK_THROWS_AS(c.merge_json(R"({"nope": 1})"), ConfigError);
    CHECK_THROWS_AS(c.merge_file("/nonexistent/config.json"), MissingInput);
  }

  TEST_CASE("file values are overridden by flags and change the hash") {
    testutil::TempDir dir("cfg");
    std::ofstream(dir.file("c.json")) << R"({"loss.lambda2": 10, "train.seeds": [4, 5], "loss.fusion": "average"})";
    RunConfig c;
    const std::string h0 = c.hash();
    c.merge_file(dir.file("c.json"));
    CHECK(c.get_double("loss.lambda2") == 10.0);
    CHECK(c.get_seeds("train.seeds") == std::vector<std::uint64_t>{4, 5});
    c.apply_override("loss.lambda2=3");
    CHECK(train_config(c).weights.lambda2 == 3.0);
    CHECK(train_config(c).fusion == Fusion::average);
    CHECK(c.hash() != h0);
    RunConfig d = c;
    d.set("run.root", "/elsewhere");
    d.set("cache.use", "true");
    CHECK(d.hash() == c.hash());
  }

  TEST_CASE("help lists every key with its default") {
    const std::string help = config_help();
    for (const ConfigKey& k : config_schema()) {
      CHECK_MESSAGE(help.find(k.name) != std::string::npos, k.name);
      CHECK_MESSAGE(help.find(k.default_value) != std::string::npos, k.name);
    }
  }

  TEST_CASE("canonical json round-trips") {
    RunConfig c;
    c.set("data.classes", "8");
    RunConfig d;
    d.merge_json(c.to_json());
    CHECK(d.to_json() == c.to_json());
    CHECK(d.hash() == c.hash());
  }
}
