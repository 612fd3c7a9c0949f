#include "transagent/moa_gating.hpp"

#include <cmath>

#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::gating: return "gating";
    case Fusion::average: return "average";
    case Fusion::add: return "add";
  }
  return "gating";
}

Fusion fusion_from_string(const std::string& s) {
  if (s == "gating") return Fusion::gating;
  if (s == "average") return Fusion::average;
  if (s == "add") return Fusion::add;
  throw ConfigError("fusion must be gating, average or add, got '" + s + "'");
}

GateNetwork make_gate(int input_width, int hidden_width, int agent_count, std::uint64_t seed, GateInit init) {
  if (input_width < 1 || hidden_width < 1 || agent_count < 1) {
    throw ConfigError("gate network needs positive input, hidden and agent counts");
  }
  Rng rng(mix_seed(seed, "gate"));
  GateNetwork g;
  g.w_hidden = ad::Parameter(normal_matrix(rng, input_width, hidden_width, 1.0 / std::sqrt(input_width)));
  g.b_hidden = ad::Parameter(Matrix::Zero(1, hidden_width));
  if (init == GateInit::random) {
    g.w_out = ad::Parameter(normal_matrix(rng, hidden_width, agent_count, 1.0 / std::sqrt(hidden_width)));
    g.b_out = ad::Parameter(normal_matrix(rng, 1, agent_count, 0.1));
  } else {
    g.w_out = ad::Parameter(Matrix::Zero(hidden_width, agent_count));
    g.b_out = ad::Parameter(Matrix::Zero(1, agent_count));
  }
  return g;
}

namespace {

void check_inputs(std::span<const ad::Var> inputs, const GateNetwork& gate) {
  if (inputs.empty()) throw InvalidInput("moa_gate: no agent inputs");
  for (const ad::Var& v : inputs) {
    if (v.rows() != inputs.front().rows() || v.cols() != inputs.front().cols()) {
      throw InvalidInput("moa_gate: agent inputs differ in shape");
    }
  }
  if (static_cast<int>(inputs.size()) != gate.agent_count()) {
    throw InvalidInput("moa_gate: gate expects " + std::to_string(gate.agent_count()) + " agents, got " +
                       std::to_string(inputs.size()));
  }
  if (static_cast<int>(inputs.size() * inputs.front().cols()) != gate.input_width()) {
    throw InvalidInput("moa_gate: concatenated width does not match the gate input width");
  }
}

}  // namespace

GateVars moa_gate(ad::Graph& graph, std::span<const ad::Var> inputs, GateNetwork& gate) {
  check_inputs(inputs, gate);
  auto bind = [&](ad::Parameter& p) { return gate.trainable ? graph.param(p) : graph.constant_ref(p.value); };
  const ad::Var concat = ad::concat_cols(inputs);
  const ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(concat, bind(gate.w_hidden)), bind(gate.b_hidden)));
  const ad::Var logits = ad::add_row(ad::matmul(hidden, bind(gate.w_out)), bind(gate.b_out));
  const ad::Var weights = ad::softmax_rows(logits);
  ad::Var fused;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ad::Var term = ad::scale_rows(inputs[i], ad::slice_cols(weights, static_cast<Eigen::Index>(i), 1));
    fused = i == 0 ? term : ad::add(fused, term);
  }
  return {weights, fused};
}

GateOutput moa_gate(std::span<const Matrix> inputs, const GateNetwork& gate) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const Matrix& m : inputs) vars.push_back(g.constant_ref(m));
  GateNetwork frozen = gate;
  frozen.trainable = false;
  const GateVars out = moa_gate(g, vars, frozen);
  return {out.weights.value(), out.fused.value()};
}

ad::Var fuse_average(std::span<const ad::Var> inputs) {
  if (inputs.empty()) throw InvalidInput("fuse_average: empty input list");
  ad::Var total = inputs.front();
  for (std::size_t i = 1; i < inputs.size(); ++i) total = ad::add(total, inputs[i]);
  return ad::scale(total, 1.0 / static_cast<double>(inputs.size()));
}

Matrix fuse_average(std::span<const Matrix> inputs) {
  if (inputs.empty()) throw InvalidInput("fuse_average: empty input list");
  Matrix total = inputs.front();
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i].rows() != total.rows() || inputs[i].cols() != total.cols()) {
      throw InvalidInput("fuse_average: shape mismatch");
    }
    total += inputs[i];
  }
  return total / static_cast<double>(inputs.size());
}

ad::Var fuse_add_losses(std::span<const ad::Var> per_agent_losses) {
  if (per_agent_losses.empty()) throw InvalidInput("fuse_add_losses: no losses");
  ad::Var total = per_agent_losses.front();
  for (std::size_t i = 1; i < per_agent_losses.size(); ++i) total = ad::add(total, per_agent_losses[i]);
  return total;
}

double fuse_add_losses(std::span<const double> per_agent_losses) {
  double total = 0.0;
  for (double l : per_agent_losses) total += l;
  return total;
}

}  // namespace transagent
