#include "transagent/autodiff.hpp"

#include <cmath>

#include "transagent/errors.hpp"

namespace transagent::ad {

namespace {

void require_same_graph(Var a, Var b) {
  if (a.graph() != b.graph() || a.graph() == nullptr) {
    throw InvalidInput("autodiff: operands belong to different graphs");
  }
}

void require_shape(bool ok, const char* what) {
  if (!ok) throw InvalidInput(std::string("autodiff: shape mismatch in ") + what);
}

constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;

}  // namespace

Var Graph::constant(Matrix m) {
  Node n;
  n.owned = std::move(m);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant_ref(const Matrix& m) {
  Node n;
  n.ref = &m;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::record(Matrix value, std::span<const Var> parents, Backprop backprop) {
  Node n;
  n.owned = std::move(value);
  for (const Var& p : parents) {
    if (p.graph() != this) throw InvalidInput("autodiff: parent from another graph");
    n.needs_grad = n.needs_grad || needs_grad(p.id());
  }
  if (n.needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Graph::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Graph::accumulate(Var v, const Matrix& g) {
  if (!needs_grad(v.id())) return;
  grad(v.id()) += g;
}

void Graph::backward(Var out) {
  if (out.graph() != this) throw InvalidInput("autodiff: backward on foreign node");
  if (out.rows() != 1 || out.cols() != 1) throw InvalidInput("autodiff: backward needs a scalar output");
  if (!needs_grad(out.id())) return;
  grad(out.id()) = Matrix::Ones(1, 1);
  for (int id = out.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.backprop) {
      // Copy: backprop may grow other nodes' grads, never this one's.
      const Matrix upstream = n.grad;
      n.backprop(*this, upstream);
    }
  }
}

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  require_shape(a.cols() == b.rows(), "matmul");
  Graph& g = *a.graph();
  const Var parents[] = {a, b};
  return g.record(a.value() * b.value(), parents, [a, b](Graph& gr, const Matrix& up) {
    if (gr.needs_grad(a.id())) gr.accumulate(a, up * b.value().transpose());
    if (gr.needs_grad(b.id())) gr.accumulate(b, a.value().transpose() * up);
  });
}

Var add(Var a, Var b) {
  require_same_graph(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const Var parents[] = {a, b};
  return a.graph()->record(a.value() + b.value(), parents, [a, b](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    gr.accumulate(b, up);
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  const Var parents[] = {a, b};
  return a.graph()->record(a.value() - b.value(), parents, [a, b](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    gr.accumulate(b, -up);
  });
}

Var scale(Var a, double s) {
  const Var parents[] = {a};
  return a.graph()->record(a.value() * s, parents,
                           [a, s](Graph& gr, const Matrix& up) { gr.accumulate(a, up * s); });
}

Var hadamard(Var a, Var b) {
  require_same_graph(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  const Var parents[] = {a, b};
  return a.graph()->record(a.value().cwiseProduct(b.value()), parents,
                           [a, b](Graph& gr, const Matrix& up) {
                             if (gr.needs_grad(a.id())) gr.accumulate(a, up.cwiseProduct(b.value()));
                             if (gr.needs_grad(b.id())) gr.accumulate(b, up.cwiseProduct(a.value()));
                           });
}

Var add_row(Var a, Var row) {
  require_same_graph(a, row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const Var parents[] = {a, row};
  return a.graph()->record(std::move(out), parents, [a, row](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up);
    if (gr.needs_grad(row.id())) gr.accumulate(row, up.colwise().sum());
  });
}

Var scale_rows(Var x, Var w) {
  require_same_graph(x, w);
  require_shape(w.cols() == 1 && w.rows() == x.rows(), "scale_rows");
  Matrix out = x.value().array().colwise() * w.value().col(0).array();
  const Var parents[] = {x, w};
  return x.graph()->record(std::move(out), parents, [x, w](Graph& gr, const Matrix& up) {
    if (gr.needs_grad(x.id())) {
      Matrix gx = up.array().colwise() * w.value().col(0).array();
      gr.accumulate(x, gx);
    }
    if (gr.needs_grad(w.id())) {
      Matrix gw = up.cwiseProduct(x.value()).rowwise().sum();
      gr.accumulate(w, gw);
    }
  });
}

Var transpose(Var a) {
  const Var parents[] = {a};
  return a.graph()->record(a.value().transpose(), parents,
                           [a](Graph& gr, const Matrix& up) { gr.accumulate(a, up.transpose()); });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluA * (v + kGeluB * v * v * v)));
  });
  const Var parents[] = {a};
  return a.graph()->record(std::move(out), parents, [a](Graph& gr, const Matrix& up) {
    Matrix d = a.value().unaryExpr([](double v) {
      const double t = std::tanh(kGeluA * (v + kGeluB * v * v * v));
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluA * (1.0 + 3.0 * kGeluB * v * v);
    });
    gr.accumulate(a, up.cwiseProduct(d));
  });
}

Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  const Var parents[] = {a};
  Var r = a.graph()->record(out, parents, [a, out](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up.cwiseProduct(out));
  });
  return r;
}

Var abs(Var a) {
  const Var parents[] = {a};
  return a.graph()->record(a.value().cwiseAbs(), parents, [a](Graph& gr, const Matrix& up) {
    Matrix s = a.value().unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    gr.accumulate(a, up.cwiseProduct(s));
  });
}

Var square(Var a) {
  const Var parents[] = {a};
  return a.graph()->record(a.value().cwiseAbs2(), parents, [a](Graph& gr, const Matrix& up) {
    gr.accumulate(a, 2.0 * up.cwiseProduct(a.value()));
  });
}

Var softmax_rows(Var a, bool causal) {
  const Matrix& x = a.value();
  if (causal) require_shape(x.rows() == x.cols(), "causal softmax");
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index n = causal ? i + 1 : x.cols();
    const double m = x.row(i).head(n).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      out(i, j) = std::exp(x(i, j) - m);
      total += out(i, j);
    }
    out.row(i).head(n) /= total;
  }
  const Var parents[] = {a};
  return a.graph()->record(out, parents, [a, out](Graph& gr, const Matrix& up) {
    Eigen::VectorXd dots = up.cwiseProduct(out).rowwise().sum();
    Matrix g = out.cwiseProduct(up - dots.replicate(1, up.cols()));
    gr.accumulate(a, g);
  });
}

Var log_softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  const Var parents[] = {a};
  return a.graph()->record(out, parents, [a, out](Graph& gr, const Matrix& up) {
    Matrix p = out.array().exp().matrix();
    Eigen::VectorXd s = up.rowwise().sum();
    Matrix g = up - p.cwiseProduct(s.replicate(1, up.cols()));
    gr.accumulate(a, g);
  });
}

Var layer_norm_rows(Var x, const Matrix& gamma, const Matrix& beta, double eps) {
  const Matrix& v = x.value();
  require_shape(gamma.rows() == 1 && gamma.cols() == v.cols() && beta.rows() == 1 && beta.cols() == v.cols(),
                "layer_norm");
  const Eigen::Index c = v.cols();
  Matrix xhat(v.rows(), c);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gamma.row(0).array();
  out.rowwise() += beta.row(0);
  const Var parents[] = {x};
  // gamma is captured by value: callers may pass temporaries.
  return x.graph()->record(std::move(out), parents,
                           [x, xhat, inv_std, g = Matrix(gamma)](Graph& gr, const Matrix& up) {
                             const Eigen::Index cols = up.cols();
                             Matrix dxhat = up.array().rowwise() * g.row(0).array();
                             Matrix dx(up.rows(), cols);
                             for (Eigen::Index i = 0; i < up.rows(); ++i) {
                               const double m1 = dxhat.row(i).mean();
                               const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                               dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                             }
                             gr.accumulate(x, dx);
                           });
}

Var l2_normalize_rows(Var x, double min_norm) {
  const Matrix& v = x.value();
  Eigen::VectorXd norms = v.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) >= min_norm)) {
      throw NumericalError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    }
  }
  Matrix out = v.array().colwise() / norms.array();
  const Var parents[] = {x};
  return x.graph()->record(out, parents, [x, out, norms](Graph& gr, const Matrix& up) {
    Eigen::VectorXd dots = up.cwiseProduct(out).rowwise().sum();
    Matrix g = (up - out.cwiseProduct(dots.replicate(1, up.cols()))).array().colwise() / norms.array();
    gr.accumulate(x, g);
  });
}

Var mean_rows(Var a) {
  const Eigen::Index r = a.rows();
  if (r == 0) throw InvalidInput("mean_rows: empty input");
  const Var parents[] = {a};
  return a.graph()->record(a.value().colwise().mean(), parents, [a, r](Graph& gr, const Matrix& up) {
    gr.accumulate(a, up.replicate(r, 1) / static_cast<double>(r));
  });
}

Var sum_cols(Var a) {
  const Eigen::Index c = a.cols();
  const Var parents[] = {a};
  return a.graph()->record(a.value().rowwise().sum(), parents,
                           [a, c](Graph& gr, const Matrix& up) { gr.accumulate(a, up.replicate(1, c)); });
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw InvalidInput("mean_all: empty input");
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  const Var parents[] = {a};
  return a.graph()->record(std::move(out), parents, [a, n](Graph& gr, const Matrix& up) {
    gr.accumulate(a, Matrix::Constant(a.rows(), a.cols(), up(0, 0) / n));
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const Var parents[] = {a};
  return a.graph()->record(std::move(out), parents, [a](Graph& gr, const Matrix& up) {
    gr.accumulate(a, Matrix::Constant(a.rows(), a.cols(), up(0, 0)));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no parts");
  Graph& g = *parts.front().graph();
  const Eigen::Index c = parts.front().cols();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require_same_graph(parts.front(), p);
    require_shape(p.cols() == c, "concat_rows");
    total += p.rows();
  }
  Matrix out(total, c);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ps](Graph& gr, const Matrix& up) {
    Eigen::Index off = 0;
    for (const Var& p : ps) {
      if (gr.needs_grad(p.id())) gr.accumulate(p, up.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: no parts");
  Graph& g = *parts.front().graph();
  const Eigen::Index r = parts.front().rows();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require_same_graph(parts.front(), p);
    require_shape(p.rows() == r, "concat_cols");
    total += p.cols();
  }
  Matrix out(r, total);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ps](Graph& gr, const Matrix& up) {
    Eigen::Index off = 0;
    for (const Var& p : ps) {
      if (gr.needs_grad(p.id())) gr.accumulate(p, up.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows");
  const Var parents[] = {a};
  return a.graph()->record(a.value().middleRows(start, count), parents,
                           [a, start, count](Graph& gr, const Matrix& up) {
                             Matrix g = Matrix::Zero(a.rows(), a.cols());
                             g.middleRows(start, count) = up;
                             gr.accumulate(a, g);
                           });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols");
  const Var parents[] = {a};
  return a.graph()->record(a.value().middleCols(start, count), parents,
                           [a, start, count](Graph& gr, const Matrix& up) {
                             Matrix g = Matrix::Zero(a.rows(), a.cols());
                             g.middleCols(start, count) = up;
                             gr.accumulate(a, g);
                           });
}

Var nll_mean(Var logp, std::span<const int> labels) {
  const Matrix& lp = logp.value();
  if (static_cast<Eigen::Index>(labels.size()) != lp.rows()) {
    throw InvalidInput("nll_mean: label count does not match rows");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= lp.cols()) {
      throw InvalidInput("nll_mean: label " + std::to_string(labels[n]) + " out of range");
    }
    total -= lp(static_cast<Eigen::Index>(n), labels[n]);
  }
  const double count = static_cast<double>(labels.size());
  Matrix out(1, 1);
  out(0, 0) = total / count;
  std::vector<int> ls(labels.begin(), labels.end());
  const Var parents[] = {logp};
  return logp.graph()->record(std::move(out), parents, [logp, ls, count](Graph& gr, const Matrix& up) {
    Matrix g = Matrix::Zero(logp.rows(), logp.cols());
    for (std::size_t n = 0; n < ls.size(); ++n) g(static_cast<Eigen::Index>(n), ls[n]) = -up(0, 0) / count;
    gr.accumulate(logp, g);
  });
}

}  // namespace transagent::ad
