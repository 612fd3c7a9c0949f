#pragma once

// Mixture-of-Agents gating: a one-hidden-layer MLP over channel-concatenated
// agent inputs, softmax-normalized per row, used to fuse agent features or
// score vectors into one convex combination.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "transagent/autodiff.hpp"

namespace transagent {

enum class Fusion { gating, average, add };

std::string to_string(Fusion f);
Fusion fusion_from_string(const std::string& s);

struct GateNetwork {
  ad::Parameter w_hidden;  // in x H
  ad::Parameter b_hidden;  // 1 x H
  ad::Parameter w_out;     // H x A
  ad::Parameter b_out;     // 1 x A
  bool trainable = true;

  int input_width() const { return static_cast<int>(w_hidden.value.rows()); }
  int agent_count() const { return static_cast<int>(w_out.value.cols()); }
  std::vector<ad::Parameter*> parameters() { return {&w_hidden, &b_hidden, &w_out, &b_out}; }
};

enum class GateInit {
  zero_output,  // output layer zero: uniform weights until trained
  random,       // every layer random
};

GateNetwork make_gate(int input_width, int hidden_width, int agent_count, std::uint64_t seed,
                      GateInit init = GateInit::zero_output);

struct GateOutput {
  Matrix weights;  // N x A, rows on the simplex
  Matrix fused;    // shaped like one input
};

struct GateVars {
  ad::Var weights;
  ad::Var fused;
};

/// Graph form. Gate parameters enter as graph parameters when `trainable`.
GateVars moa_gate(ad::Graph& graph, std::span<const ad::Var> inputs, GateNetwork& gate);
GateOutput moa_gate(std::span<const Matrix> inputs, const GateNetwork& gate);

ad::Var fuse_average(std::span<const ad::Var> inputs);
Matrix fuse_average(std::span<const Matrix> inputs);

ad::Var fuse_add_losses(std::span<const ad::Var> per_agent_losses);
double fuse_add_losses(std::span<const double> per_agent_losses);

}  // namespace transagent
