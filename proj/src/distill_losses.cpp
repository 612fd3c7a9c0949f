#include "transagent/distill_losses.hpp"

#include <cmath>

#include "transagent/errors.hpp"

namespace transagent {

std::string to_string(VacMode m) { return m == VacMode::layer_wise ? "layer_wise" : "last_layer"; }

std::string to_string(MacLossType t) {
  switch (t) {
    case MacLossType::kl: return "kl";
    case MacLossType::l1: return "l1";
    case MacLossType::mse: return "mse";
  }
  return "kl";
}

std::string to_string(MacSource s) {
  return s == MacSource::learned_scores ? "learned_scores" : "prompted_logits";
}

VacMode vac_mode_from_string(const std::string& s) {
  if (s == "layer_wise" || s == "layer-wise") return VacMode::layer_wise;
  if (s == "last_layer" || s == "last-layer") return VacMode::last_layer;
  throw ConfigError("loss.vac_mode must be layer_wise or last_layer, got '" + s + "'");
}

MacLossType mac_loss_type_from_string(const std::string& s) {
  if (s == "kl") return MacLossType::kl;
  if (s == "l1") return MacLossType::l1;
  if (s == "mse") return MacLossType::mse;
  throw ConfigError("loss.mac_type must be kl, l1 or mse, got '" + s + "'");
}

MacSource mac_source_from_string(const std::string& s) {
  if (s == "learned_scores") return MacSource::learned_scores;
  if (s == "prompted_logits") return MacSource::prompted_logits;
  throw ConfigError("loss.mac_source must be learned_scores or prompted_logits, got '" + s + "'");
}

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (!(temperature_distill > 0.0) || !std::isfinite(temperature_distill)) {
    throw ConfigError("loss.temperature must be positive");
  }
}

namespace {

template <typename Fn>
double eval_scalar(Fn&& fn) {
  ad::Graph g;
  return fn(g).scalar();
}

}  // namespace

ad::Var ce_loss(ad::Var scores, std::span<const int> labels) {
  return ad::nll_mean(ad::log_softmax_rows(scores), labels);
}

double ce_loss(const ScoreMatrix& scores, std::span<const int> labels) {
  return eval_scalar([&](ad::Graph& g) { return ce_loss(g.constant_ref(scores.values), labels); });
}

ad::Var l1_feature_loss(ad::Var student, ad::Var teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw InvalidInput("feature distillation: student and teacher shapes differ");
  }
  return ad::mean_all(ad::abs(ad::sub(student, teacher)));
}

ad::Var vac_loss(std::span<const ad::Var> student, std::span<const ad::Var> teacher, VacMode mode) {
  if (student.size() != teacher.size()) {
    throw InvalidInput("vac_loss: " + std::to_string(student.size()) + " student layers vs " +
                       std::to_string(teacher.size()) + " teacher layers");
  }
  if (student.empty()) throw InvalidInput("vac_loss: no layers");
  if (mode == VacMode::last_layer) return l1_feature_loss(student.back(), teacher.back());
  ad::Var total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const ad::Var l = l1_feature_loss(student[i], teacher[i]);
    total = i == 0 ? l : ad::add(total, l);
  }
  return ad::scale(total, 1.0 / static_cast<double>(student.size()));
}

double vac_loss(std::span<const Matrix> student, std::span<const Matrix> teacher, VacMode mode) {
  return eval_scalar([&](ad::Graph& g) {
    const std::vector<ad::Var> s = bind_constants(g, student);
    const std::vector<ad::Var> t = bind_constants(g, teacher);
    return vac_loss(s, t, mode);
  });
}

ad::Var lac_loss(ad::Var text, ad::Var gated_text) { return l1_feature_loss(text, gated_text); }

double lac_loss(const EncodedFeature& text, const EncodedFeature& gated_text) {
  return eval_scalar(
      [&](ad::Graph& g) { return lac_loss(g.constant_ref(text.values), g.constant_ref(gated_text.values)); });
}

ad::Var mac_loss(ad::Var learned, ad::Var agent, MacLossType type, double temperature) {
  if (learned.rows() != agent.rows() || learned.cols() != agent.cols()) {
    throw InvalidInput("mac_loss: score matrices differ in shape");
  }
  if (!(temperature > 0.0)) throw ConfigError("mac_loss: temperature must be positive");
  const double inv_t = 1.0 / temperature;
  const ad::Var log_p = ad::log_softmax_rows(ad::scale(learned, inv_t));
  const ad::Var log_q = ad::log_softmax_rows(ad::scale(agent, inv_t));
  const ad::Var p = ad::exp(log_p);
  switch (type) {
    case MacLossType::kl: {
      const ad::Var per_row = ad::sum_cols(ad::hadamard(p, ad::sub(log_p, log_q)));
      return ad::mean_all(per_row);
    }
    case MacLossType::l1: return ad::mean_all(ad::abs(ad::sub(p, ad::exp(log_q))));
    case MacLossType::mse: return ad::mean_all(ad::square(ad::sub(p, ad::exp(log_q))));
  }
  throw ConfigError("mac_loss: unknown loss type");
}

double mac_loss(const ScoreMatrix& learned, const ScoreMatrix& agent, MacLossType type, double temperature) {
  return eval_scalar([&](ad::Graph& g) {
    return mac_loss(g.constant_ref(learned.values), g.constant_ref(agent.values), type, temperature);
  });
}

ad::Var total_loss(ad::Var ce, ad::Var vac, ad::Var lac, ad::Var mac, const LossWeights& w) {
  w.validate();
  ad::Var t = ad::add(ce, ad::scale(vac, w.lambda1));
  t = ad::add(t, ad::scale(lac, w.lambda2));
  return ad::add(t, ad::scale(mac, w.lambda3));
}

double total_loss(double ce, double vac, double lac, double mac, const LossWeights& w) {
  w.validate();
  for (double v : {ce, vac, lac, mac}) {
    if (!std::isfinite(v)) throw NumericalError("total_loss: non-finite component");
  }
  return ce + w.lambda1 * vac + w.lambda2 * lac + w.lambda3 * mac;
}

}  // namespace transagent
