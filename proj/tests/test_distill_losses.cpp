#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "transagent/distill_losses.hpp"
#include "transagent/errors.hpp"

using namespace transagent;

namespace {

ScoreMatrix scores(Matrix m) { return {std::move(m), ScoreKind::clip}; }

std::vector<double> softmax(const Matrix& m, Eigen::Index row) {
  double mx = m.row(row).maxCoeff(), z = 0.0;
  std::vector<double> p;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    p.push_back(std::exp(m(row, c) - mx));
    z += p.back();
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

TEST_SUITE("distill_losses") {
  TEST_CASE("cross entropy: saturation, uniform closed form, brute-force oracle") {
    Matrix sat = Matrix::Zero(2, 3);
    sat(0, 1) = 1000.0;
    sat(1, 2) = 1000.0;
    const int sat_labels[] = {1, 2};
    CHECK(ce_loss(scores(sat), sat_labels) < 1e-12);

    const int uni_labels[] = {3};
    CHECK(ce_loss(scores(Matrix::Zero(1, 4)), uni_labels) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    std::mt19937_64 rng(1);
    const Matrix s = testutil::random_matrix(rng, 3, 5, -3.0, 3.0);
    const int labels[] = {4, 0, 2};
    double want = 0.0;
    for (Eigen::Index n = 0; n < 3; ++n) want -= std::log(softmax(s, n)[static_cast<std::size_t>(labels[n])]);
    CHECK(std::abs(ce_loss(scores(s), labels) - want / 3.0) < 1e-9);

    const int bad[] = {0, 5, 1};
    CHECK_THROWS_AS(ce_loss(scores(s), bad), InvalidInput);
  }

  TEST_CASE("vac loss: zero, constant offset, element-loop oracle, modes") {
    std::mt19937_64 rng(2);
    const std::vector<Matrix> s = {testutil::random_matrix(rng, 3, 4), testutil::random_matrix(rng, 3, 4)};
    CHECK(vac_loss(s, s, VacMode::layer_wise) == 0.0);
    std::vector<Matrix> shifted = s;
    for (Matrix& m : shifted) m.array() += 0.5;
    CHECK(vac_loss(s, shifted, VacMode::layer_wise) == doctest::Approx(0.5).epsilon(1e-12));

    const std::vector<Matrix> t = {testutil::random_matrix(rng, 3, 4), testutil::random_matrix(rng, 3, 4)};
    double per_layer[2] = {0.0, 0.0};
    for (int l = 0; l < 2; ++l) {
      for (Eigen::Index i = 0; i < 12; ++i) per_layer[l] += std::abs(s[l].data()[i] - t[l].data()[i]);
      per_layer[l] /= 12.0;
    }
    CHECK(std::abs(vac_loss(s, t, VacMode::layer_wise) - (per_layer[0] + per_layer[1]) / 2.0) < 1e-12);
    CHECK(std::abs(vac_loss(s, t, VacMode::last_layer) - per_layer[1]) < 1e-12);

    const std::vector<Matrix> short_list = {t[0]};
    CHECK_THROWS_AS(vac_loss(s, short_list, VacMode::layer_wise), InvalidInput);
  }

  TEST_CASE("lac loss: zero, constant offset, element-loop oracle") {
    std::mt19937_64 rng(3);
    const Matrix a = testutil::random_matrix(rng, 5, 4), b = testutil::random_matrix(rng, 5, 4);
    CHECK(lac_loss({a, Modality::text}, {a, Modality::text}) == 0.0);
    CHECK(lac_loss({a, Modality::text}, {Matrix(a.array() + 0.5), Modality::text}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    double want = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) want += std::abs(a.data()[i] - b.data()[i]);
    CHECK(std::abs(lac_loss({a, Modality::text}, {b, Modality::text}) - want / 20.0) < 1e-12);
  }

  TEST_CASE("mac loss: KL worked example, direction, modes") {
    Matrix p(1, 2), q(1, 2);
    p << 0.0, 0.0;  // (0.5, 0.5)
    q << std::log(0.9), std::log(0.1);
    const double kl = mac_loss(scores(p), scores(q), MacLossType::kl, 1.0);
    const double want = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(std::abs(kl - want) < 1e-12);
    CHECK(std::abs(kl - 0.5108) < 1e-4);
    CHECK(mac_loss(scores(p), scores(p), MacLossType::kl, 1.0) == 0.0);
    CHECK(mac_loss(scores(q), scores(q), MacLossType::l1, 1.0) == 0.0);
    CHECK(mac_loss(scores(q), scores(q), MacLossType::mse, 1.0) == 0.0);

    std::mt19937_64 rng(4);
    const Matrix a = testutil::random_matrix(rng, 3, 4, -2, 2), b = testutil::random_matrix(rng, 3, 4, -2, 2);
    CHECK(mac_loss(scores(a), scores(b), MacLossType::kl, 1.0) != mac_loss(scores(b), scores(a), MacLossType::kl, 1.0));

    double l1 = 0.0, mse = 0.0;
    for (Eigen::Index n = 0; n < 3; ++n) {
      const auto pa = softmax(a / 2.0, n), pb = softmax(b / 2.0, n);
      for (std::size_t c = 0; c < 4; ++c) {
        l1 += std::abs(pa[c] - pb[c]);
        mse += (pa[c] - pb[c]) * (pa[c] - pb[c]);
      }
    }
    CHECK(std::abs(mac_loss(scores(a), scores(b), MacLossType::l1, 2.0) - l1 / 12.0) < 1e-12);
    CHECK(std::abs(mac_loss(scores(a), scores(b), MacLossType::mse, 2.0) - mse / 12.0) < 1e-12);

    CHECK_THROWS_AS(mac_loss(scores(a), scores(Matrix::Zero(3, 5)), MacLossType::kl, 1.0), InvalidInput);
  }

  TEST_CASE("total loss: weights, worked default, affine oracle") {
    LossWeights zero{0.0, 0.0, 0.0, 1.0};
    CHECK(total_loss(1.3, 2.0, 3.0, 4.0, zero) == 1.3);
    LossWeights defaults;
    CHECK(defaults.lambda1 == 1.0);
    CHECK(defaults.lambda2 == 25.0);
    CHECK(defaults.lambda3 == 1.0);
    CHECK(total_loss(1, 1, 1, 1, defaults) == 28.0);
    LossWeights w{0.3, 1.7, 2.2, 1.0};
    CHECK(total_loss(0.5, 0.25, 0.125, 2.0, w) == doctest::Approx(0.5 + 0.3 * 0.25 + 1.7 * 0.125 + 2.2 * 2.0));
    LossWeights neg{-1.0, 1.0, 1.0, 1.0};
    CHECK_THROWS_AS(total_loss(1, 1, 1, 1, neg), ConfigError);
  }

  TEST_CASE("graph losses differentiate correctly") {
    std::mt19937_64 rng(5);
    ad::Parameter s(testutil::random_matrix(rng, 3, 4)), t(testutil::random_matrix(rng, 3, 4));
    const int labels[] = {1, 3, 0};
    auto loss = [&](bool backward) {
      ad::Graph g;
      const ad::Var vs = g.param(s), vt = g.param(t);
      const ad::Var ce = ce_loss(vs, labels);
      const ad::Var mac = mac_loss(vs, vt, MacLossType::kl, 0.7);
      const ad::Var l1 = lac_loss(vs, vt);
      const ad::Var total = total_loss(ce, l1, l1, mac, LossWeights{0.5, 2.0, 1.5, 1.0});
      if (backward) g.backward(total);
      return total.scalar();
    };
    s.zero_grad();
    t.zero_grad();
    loss(true);
    testutil::FdResult r;
    const Matrix gs = s.grad, gt = t.grad;
    testutil::fd_check(s.value, gs, [&] { return loss(false); }, "s", r);
    testutil::fd_check(t.value, gt, [&] { return loss(false); }, "t", r);
    INFO(r.where);
    CHECK(r.worst < 1e-4);
  }

  TEST_CASE("string forms round-trip") {
    for (const char* m : {"kl", "l1", "mse"}) CHECK(to_string(mac_loss_type_from_string(m)) == m);
    for (const char* m : {"layer_wise", "last_layer"}) CHECK(to_string(vac_mode_from_string(m)) == m);
    for (const char* m : {"learned_scores", "prompted_logits"}) CHECK(to_string(mac_source_from_string(m)) == m);
  }
}
