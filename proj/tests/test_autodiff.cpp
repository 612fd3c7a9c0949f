#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "transagent/autodiff.hpp"
#include "transagent/errors.hpp"

using namespace transagent;
using testutil::FdResult;

namespace {

// Projects an op's output onto a fixed random matrix so every output entry
// contributes to the scalar being differentiated.
double check_op(std::vector<ad::Parameter>& params, const std::function<ad::Var(ad::Graph&, std::vector<ad::Var>&)>& op) {
  std::mt19937_64 rng(3);
  Matrix probe;
  auto scalar = [&](bool backward) {
    ad::Graph g;
    std::vector<ad::Var> in;
    for (auto& p : params) in.push_back(g.param(p));
    ad::Var out = op(g, in);
    if (probe.size() == 0) probe = testutil::random_matrix(rng, out.rows(), out.cols());
    ad::Var s = ad::sum_all(ad::hadamard(out, g.constant(probe)));
    if (backward) g.backward(s);
    return s.scalar();
  };
  for (auto& p : params) p.zero_grad();
  scalar(true);
  FdResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix analytic = params[i].grad;
    testutil::fd_check(params[i].value, analytic, [&] { return scalar(false); }, "p" + std::to_string(i), r);
  }
  INFO(r.where);
  return r.worst;
}

std::vector<ad::Parameter> random_params(std::initializer_list<std::pair<int, int>> shapes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ad::Parameter> out;
  for (auto [r, c] : shapes) out.emplace_back(testutil::random_matrix(rng, r, c));
  return out;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("binary arithmetic gradients match finite differences") {
    auto p = random_params({{3, 4}, {4, 2}}, 1);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::matmul(v[0], v[1]); }) < 1e-6);
    auto q = random_params({{3, 4}, {3, 4}}, 2);
    CHECK(check_op(q, [](ad::Graph&, auto& v) { return ad::hadamard(v[0], v[1]); }) < 1e-6);
    CHECK(check_op(q, [](ad::Graph&, auto& v) { return v[0] - ad::scale(v[1], 0.3); }) < 1e-6);
    auto r = random_params({{3, 4}, {1, 4}}, 3);
    CHECK(check_op(r, [](ad::Graph&, auto& v) { return ad::add_row(v[0], v[1]); }) < 1e-6);
    auto s = random_params({{3, 4}, {3, 1}}, 4);
    CHECK(check_op(s, [](ad::Graph&, auto& v) { return ad::scale_rows(v[0], v[1]); }) < 1e-6);
  }

  TEST_CASE("element-wise and row-wise gradients match finite differences") {
    auto p = random_params({{4, 5}}, 5);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::gelu(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::exp(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::square(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::abs(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::softmax_rows(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::log_softmax_rows(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::l2_normalize_rows(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::transpose(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::mean_rows(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::sum_cols(v[0]); }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::mean_all(v[0]); }) < 1e-6);
    const Matrix gamma = Matrix::Constant(1, 5, 1.3), beta = Matrix::Constant(1, 5, -0.2);
    CHECK(check_op(p, [&](ad::Graph&, auto& v) { return ad::layer_norm_rows(v[0], gamma, beta); }) < 1e-6);
    auto sq = random_params({{4, 4}}, 6);
    CHECK(check_op(sq, [](ad::Graph&, auto& v) { return ad::softmax_rows(v[0], true); }) < 1e-6);
  }

  TEST_CASE("structural ops route gradients to the right slices") {
    auto p = random_params({{2, 3}, {4, 3}}, 7);
    CHECK(check_op(p, [](ad::Graph&, auto& v) {
            const ad::Var parts[] = {v[0], v[1], v[0]};
            return ad::concat_rows(parts);
          }) < 1e-6);
    CHECK(check_op(p, [](ad::Graph&, auto& v) { return ad::slice_rows(v[1], 1, 2); }) < 1e-6);
    auto q = random_params({{3, 2}, {3, 5}}, 8);
    CHECK(check_op(q, [](ad::Graph&, auto& v) {
            const ad::Var parts[] = {v[0], v[1]};
            return ad::slice_cols(ad::concat_cols(parts), 1, 4);
          }) < 1e-6);
    auto r = random_params({{3, 4}}, 9);
    const int labels[] = {0, 3, 1};
    CHECK(check_op(r, [&](ad::Graph&, auto& v) { return ad::nll_mean(ad::log_softmax_rows(v[0]), labels); }) < 1e-6);
  }

  TEST_CASE("a parameter used twice accumulates both paths") {
    ad::Parameter p(Matrix::Constant(1, 1, 3.0));
    ad::Graph g;
    ad::Var x = g.param(p);
    g.backward(ad::sum_all(ad::hadamard(x, x) + ad::scale(x, 2.0)));
    CHECK(p.grad(0, 0) == doctest::Approx(8.0));
  }

  TEST_CASE("constants receive no gradient and do not need it") {
    ad::Graph g;
    ad::Var c = g.constant(Matrix::Ones(2, 2));
    CHECK_FALSE(g.needs_grad(c.id()));
    ad::Parameter p(Matrix::Ones(2, 2));
    ad::Var x = g.param(p);
    g.backward(ad::sum_all(ad::hadamard(c, x)));
    CHECK(p.grad.isApprox(Matrix::Ones(2, 2)));
  }

  TEST_CASE("zero-norm rows are reported") {
    ad::Graph g;
    CHECK_THROWS_AS(ad::l2_normalize_rows(g.constant(Matrix::Zero(2, 3))), NumericalError);
  }
}
