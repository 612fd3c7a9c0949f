#pragma once

// Shared fixtures for the unit and acceptance suites: a small synthetic world,
// a three-agents-per-modality roster, finite-difference checks and temp dirs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "transagent/agent_hub.hpp"
#include "transagent/benchmark.hpp"
#include "transagent/eval_harness.hpp"
#include "transagent/trainer.hpp"

namespace testutil {

using namespace transagent;

inline EncoderConfig toy_encoder_config() {
  EncoderConfig e;
  e.depth = 2;
  e.width = 16;
  e.embed_width = 16;
  e.mlp_hidden = 24;
  e.max_tokens = 16;
  e.seed = 11;
  return e;
}

inline BenchmarkConfig toy_world_config() {
  BenchmarkConfig b;
  b.dataset_id = "toy";
  b.seed = 5;
  b.num_classes = 6;
  b.latent_dim = 4;
  b.patches = 4;
  b.train_per_class = 6;
  b.test_per_class = 8;
  b.pretrain_classes = 24;
  b.pretrain_images_per_class = 4;
  return b;
}

/// Three agents per modality, every width and depth distinct from the student's.
inline AgentRegistry toy_registry(int vision_agents = 3) {
  std::vector<AgentDescriptor> agents;
  auto add = [&](std::string id, AgentModality m, int width, int layers, std::uint64_t seed, double info) {
    AgentDescriptor a;
    a.agent_id = std::move(id);
    a.modality = m;
    a.kind = m == AgentModality::language ? "traits" : "latent";
    a.feature_width = width;
    a.layer_count = layers;
    a.seed = seed;
    a.informativeness = info;
    a.noise = m == AgentModality::language ? 0.3 : 1.0;
    a.scale = m == AgentModality::t2i ? 2.0 : 1.0;
    agents.push_back(a);
  };
  const int vwidth[] = {12, 8, 20, 10};
  const int vlayers[] = {3, 2, 4, 3};
  for (int i = 0; i < vision_agents; ++i) {
    add("v" + std::to_string(i), AgentModality::vision, vwidth[i % 4], vlayers[i % 4], 10 + i, 0.9 - 0.2 * i);
  }
  for (int i = 0; i < 3; ++i) add("l" + std::to_string(i), AgentModality::language, 16, 1, 20 + i, 0.9 - 0.2 * i);
  for (int i = 0; i < 3; ++i) add("t" + std::to_string(i), AgentModality::t2i, 1, 1, 30 + i, 0.8 - 0.2 * i);
  for (int i = 0; i < 3; ++i) add("c" + std::to_string(i), AgentModality::i2t, 6 + i, 1, 40 + i, 0.8 - 0.2 * i);
  return AgentRegistry(std::move(agents));
}

inline const SyntheticBenchmark& toy_world() {
  static const SyntheticBenchmark world(toy_world_config(), toy_encoder_config());
  return world;
}

inline SplitSpec toy_split(int shots = 2) {
  return base_novel_split(toy_world().class_ids(), 0, toy_world().config().dataset_id, shots);
}

inline TrainConfig toy_train_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 2;
  c.shots = 2;
  c.prompt.n_ctx = 4;
  c.prompt.depth = 2;
  return c;
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to round-off compare as equal.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct FdResult {
  double worst = 0.0;
  std::string where;
  int checked = 0;
};

/// Central differences of `loss` against every entry of `value` listed in
/// `entries` (all entries when empty).
inline void fd_check(Matrix& value, const Matrix& analytic, const std::function<double()>& loss,
                     const std::string& name, FdResult& out, double h = 1e-5, double floor = 1e-6,
                     std::vector<Eigen::Index> entries = {}) {
  if (entries.empty()) {
    for (Eigen::Index i = 0; i < value.size(); ++i) entries.push_back(i);
  }
  for (Eigen::Index i : entries) {
    const double keep = value.data()[i];
    value.data()[i] = keep + h;
    const double up = loss();
    value.data()[i] = keep - h;
    const double down = loss();
    value.data()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double e = rel_err(analytic.data()[i], numeric, floor);
    ++out.checked;
    if (e > out.worst) {
      out.worst = e;
      out.where = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic.data()[i]) +
                  " numeric=" + std::to_string(numeric);
    }
  }
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("transagent-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace testutil
