#pragma once

#include <span>
#include <string>
#include <vector>

#include "transagent/autodiff.hpp"
#include "transagent/core_model.hpp"

namespace transagent {

enum class VacMode { layer_wise, last_layer };
enum class MacLossType { kl, l1, mse };
enum class MacSource { learned_scores, prompted_logits };

std::string to_string(VacMode m);
std::string to_string(MacLossType t);
std::string to_string(MacSource s);
VacMode vac_mode_from_string(const std::string& s);
MacLossType mac_loss_type_from_string(const std::string& s);
MacSource mac_source_from_string(const std::string& s);

struct LossWeights {
  double lambda1 = 1.0;   // VAC
  double lambda2 = 25.0;  // LAC
  double lambda3 = 1.0;   // MAC
  double temperature_distill = 1.0;

  /// Throws ConfigError on negative or non-finite weights or a non-positive temperature.
  void validate() const;
};

struct LabeledBatch {
  std::vector<VisualTokenSequence> images;
  std::vector<int> labels;
};

/// Mean over rows of -log softmax(scores)[n][label_n].
ad::Var ce_loss(ad::Var scores, std::span<const int> labels);
double ce_loss(const ScoreMatrix& scores, std::span<const int> labels);

/// Mean absolute difference over every element.
ad::Var l1_feature_loss(ad::Var student, ad::Var teacher);

/// Layer-averaged L1; in last_layer mode only the final entry of each list is used.
ad::Var vac_loss(std::span<const ad::Var> student, std::span<const ad::Var> teacher, VacMode mode);
double vac_loss(std::span<const Matrix> student, std::span<const Matrix> teacher, VacMode mode);

ad::Var lac_loss(ad::Var text, ad::Var gated_text);
double lac_loss(const EncodedFeature& text, const EncodedFeature& gated_text);

/// kl: mean_n KL(softmax(S_P/t) || softmax(S_A/t)); l1 / mse: element mean of
/// |p - q| or (p - q)^2 between the same two distributions.
ad::Var mac_loss(ad::Var learned, ad::Var agent, MacLossType type, double temperature);
double mac_loss(const ScoreMatrix& learned, const ScoreMatrix& agent, MacLossType type, double temperature);

/// ce + lambda1 * vac + lambda2 * lac + lambda3 * mac.
ad::Var total_loss(ad::Var ce, ad::Var vac, ad::Var lac, ad::Var mac, const LossWeights& w);
double total_loss(double ce, double vac, double lac, double mac, const LossWeights& w);

}  // namespace transagent
