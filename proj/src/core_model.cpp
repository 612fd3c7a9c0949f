#include "transagent/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

std::string to_string(TextPool p) { return p == TextPool::eos ? "eos" : "sos"; }

TextPool text_pool_from_string(const std::string& s) {
  if (s == "eos") return TextPool::eos;
  if (s == "sos") return TextPool::sos;
  throw ConfigError("text.pool must be eos or sos, got '" + s + "'");
}

void Vocabulary::set(const std::string& word, Matrix row) {
  if (row.rows() != 1) throw InvalidInput("vocabulary rows must be 1 x D");
  table_[word] = std::move(row);
}

const Matrix& Vocabulary::row(const std::string& word) const {
  auto it = table_.find(word);
  if (it == table_.end()) throw LookupError("unknown vocabulary word '" + word + "'");
  return it->second;
}

Matrix Vocabulary::embed(const std::string& phrase) const {
  std::istringstream in(phrase);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  if (words.empty()) return Matrix(0, table_.empty() ? 0 : table_.begin()->second.cols());
  const Eigen::Index d = row(words.front()).cols();
  Matrix out(static_cast<Eigen::Index>(words.size()), d);
  for (std::size_t i = 0; i < words.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = row(words[i]);
  return out;
}

std::vector<std::string> Vocabulary::words() const {
  std::vector<std::string> out;
  out.reserve(table_.size());
  for (const auto& [w, _] : table_) out.push_back(w);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

void append(std::vector<double>& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  }
}

void append_branch(std::vector<double>& out, const EncoderBranch& b) {
  for (const TransformerBlock& blk : b.blocks) {
    for (const Matrix* m : {&blk.ln1_gamma, &blk.ln1_beta, &blk.ln2_gamma, &blk.ln2_beta, &blk.w_query, &blk.w_key,
                            &blk.w_value, &blk.w_out, &blk.w_hidden, &blk.b_hidden, &blk.w_proj, &blk.b_proj}) {
      append(out, *m);
    }
  }
  append(out, b.positional);
  append(out, b.final_gamma);
  append(out, b.final_beta);
  append(out, b.projection);
  out.push_back(b.causal ? 1.0 : 0.0);
  out.push_back(b.final_norm ? 1.0 : 0.0);
}

EncoderBranch make_branch(const EncoderConfig& cfg, Rng& rng, bool causal) {
  const int d = cfg.width;
  const int h = cfg.mlp_hidden;
  const double s = cfg.residual_scale;
  EncoderBranch b;
  b.causal = causal;
  b.final_norm = cfg.final_norm;
  for (int i = 0; i < cfg.depth; ++i) {
    TransformerBlock blk;
    blk.ln1_gamma = Matrix::Ones(1, d);
    blk.ln1_beta = Matrix::Zero(1, d);
    blk.ln2_gamma = Matrix::Ones(1, d);
    blk.ln2_beta = Matrix::Zero(1, d);
    blk.w_query = normal_matrix(rng, d, d, 1.0 / std::sqrt(d));
    blk.w_key = normal_matrix(rng, d, d, 1.0 / std::sqrt(d));
    blk.w_value = normal_matrix(rng, d, d, 1.0 / std::sqrt(d));
    blk.w_out = normal_matrix(rng, d, d, s / std::sqrt(d));
    blk.w_hidden = normal_matrix(rng, d, h, 1.0 / std::sqrt(d));
    blk.b_hidden = Matrix::Zero(1, h);
    blk.w_proj = normal_matrix(rng, h, d, s / std::sqrt(h));
    blk.b_proj = Matrix::Zero(1, d);
    b.blocks.push_back(std::move(blk));
  }
  b.positional = normal_matrix(rng, cfg.max_tokens, d, 0.1);
  b.final_gamma = Matrix::Ones(1, d);
  b.final_beta = Matrix::Zero(1, d);
  b.projection = normal_matrix(rng, d, cfg.embed_width, 1.0 / std::sqrt(d));
  return b;
}

}  // namespace

std::vector<double> DualEncoder::snapshot() const {
  std::vector<double> out;
  append_branch(out, vision);
  append_branch(out, text);
  for (const std::string& w : vocab.words()) {
    for (char c : w) out.push_back(static_cast<double>(c));
    append(out, vocab.row(w));
  }
  return out;
}

std::uint64_t DualEncoder::fingerprint() const {
  const std::vector<double> snap = snapshot();
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(snap.data()),
                                                snap.size() * sizeof(double)));
}

DualEncoder make_random_dual_encoder(const EncoderConfig& config) {
  if (config.depth < 0 || config.width < 1 || config.embed_width < 1 || config.mlp_hidden < 1 ||
      config.max_tokens < 1) {
    throw ConfigError("encoder: depth >= 0 and positive widths required");
  }
  Rng rng(mix_seed(config.seed, "dual_encoder"));
  DualEncoder enc;
  enc.vision = make_branch(config, rng, false);
  enc.text = make_branch(config, rng, true);
  for (const char* w : {kSosToken, kEosToken, "a", "photo", "of"}) {
    enc.vocab.set(w, normal_matrix(rng, 1, config.width, 1.0));
  }
  return enc;
}

TextualTokenSequence make_text_sequence(const Vocabulary& vocab, const std::string& words, int class_id) {
  const Matrix body = vocab.embed(words);
  const Matrix& sos = vocab.row(kSosToken);
  TextualTokenSequence seq;
  seq.class_id = class_id;
  seq.tokens.resize(body.rows() + 2, sos.cols());
  seq.tokens.row(0) = sos;
  if (body.rows() > 0) seq.tokens.middleRows(1, body.rows()) = body;
  seq.tokens.row(body.rows() + 1) = vocab.row(kEosToken);
  return seq;
}

PromptSet init_prompts(const PromptConfig& config, const DualEncoder& encoder) {
  if (config.n_ctx < 1 || config.depth < 0) throw ConfigError("prompt.n_ctx must be >= 1 and prompt.depth >= 0");
  if (config.depth > encoder.vision.depth() || config.depth > encoder.text.depth()) {
    throw ConfigError("prompt.depth exceeds encoder depth");
  }
  const Matrix phrase = encoder.vocab.embed(config.init_phrase);
  if (config.n_ctx < phrase.rows()) {
    throw ConfigError("prompt.n_ctx (" + std::to_string(config.n_ctx) + ") is smaller than the " +
                      std::to_string(phrase.rows()) + "-token init phrase");
  }
  Rng rng(mix_seed(config.seed, "prompts"));
  PromptSet p;
  const int dv = encoder.vision.width();
  const int dt = encoder.text.width();
  for (int j = 0; j < config.depth; ++j) {
    p.visual.push_back(normal_matrix(rng, config.n_ctx, dv, config.init_std));
    Matrix t = normal_matrix(rng, config.n_ctx, dt, config.init_std);
    if (j == 0 && phrase.rows() > 0) t.topRows(phrase.rows()) = phrase;
    p.textual.push_back(std::move(t));
  }
  return p;
}

BranchVars bind_branch(ad::Graph& graph, const EncoderBranch& branch) {
  BranchVars v;
  for (const TransformerBlock& b : branch.blocks) {
    v.blocks.push_back({graph.constant_ref(b.w_query), graph.constant_ref(b.w_key), graph.constant_ref(b.w_value),
                        graph.constant_ref(b.w_out), graph.constant_ref(b.w_hidden), graph.constant_ref(b.b_hidden),
                        graph.constant_ref(b.w_proj), graph.constant_ref(b.b_proj)});
  }
  v.positional = graph.constant_ref(branch.positional);
  v.projection = graph.constant_ref(branch.projection);
  return v;
}

std::vector<ad::Var> bind_constants(ad::Graph& graph, std::span<const Matrix> values) {
  std::vector<ad::Var> out;
  out.reserve(values.size());
  for (const Matrix& m : values) out.push_back(graph.constant_ref(m));
  return out;
}

namespace {

ad::Var run_block(const TransformerBlock& blk, const BranchVars::Block& w, ad::Var h, bool causal) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.cols()));
  ad::Var a = ad::layer_norm_rows(h, blk.ln1_gamma, blk.ln1_beta);
  ad::Var q = ad::matmul(a, w.w_query);
  ad::Var k = ad::matmul(a, w.w_key);
  ad::Var v = ad::matmul(a, w.w_value);
  ad::Var att = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d), causal);
  h = h + ad::matmul(ad::matmul(att, v), w.w_out);
  ad::Var b = ad::layer_norm_rows(h, blk.ln2_gamma, blk.ln2_beta);
  ad::Var m = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(b, w.w_hidden), w.b_hidden)), w.w_proj), w.b_proj);
  return h + m;
}

void check_prompts(const EncoderBranch& branch, std::span<const ad::Var> prompts) {
  if (static_cast<int>(prompts.size()) > branch.depth()) {
    throw ConfigError("prompt depth " + std::to_string(prompts.size()) + " exceeds encoder depth " +
                      std::to_string(branch.depth()));
  }
  for (const ad::Var& p : prompts) {
    if (p.cols() != branch.width() || p.rows() != prompts.front().rows()) {
      throw ConfigError("prompt shape does not match encoder width / n_ctx");
    }
  }
}

}  // namespace

ad::Var project_pooled(const EncoderBranch& branch, const BranchVars& vars, ad::Var pooled) {
  if (branch.final_norm) pooled = ad::layer_norm_rows(pooled, branch.final_gamma, branch.final_beta);
  return ad::matmul(pooled, vars.projection);
}

ImageEncoding encode_image_graph(ad::Graph& graph, const EncoderBranch& branch, const BranchVars& vars,
                                 const VisualTokenSequence& seq, std::span<const ad::Var> prompts,
                                 bool want_layer_features) {
  const Eigen::Index len = seq.tokens.rows();
  if (len < 1) throw InvalidInput("visual sequence needs at least one token");
  if (seq.tokens.cols() != branch.width()) {
    throw ConfigError("visual token width " + std::to_string(seq.tokens.cols()) + " != encoder width " +
                      std::to_string(branch.width()));
  }
  if (len > branch.positional.rows()) throw ConfigError("visual sequence longer than positional table");
  check_prompts(branch, prompts);
  const Eigen::Index n_ctx = prompts.empty() ? 0 : prompts.front().rows();

  ad::Var h = ad::add(graph.constant_ref(seq.tokens), ad::slice_rows(vars.positional, 0, len));
  if (n_ctx > 0) {
    const ad::Var parts[] = {h, prompts[0]};
    h = ad::concat_rows(parts);
  }
  ImageEncoding out;
  for (int j = 0; j < branch.depth(); ++j) {
    if (j > 0 && j < static_cast<int>(prompts.size())) {
      const ad::Var parts[] = {ad::slice_rows(h, 0, len), prompts[static_cast<std::size_t>(j)]};
      h = ad::concat_rows(parts);
    }
    h = run_block(branch.blocks[static_cast<std::size_t>(j)], vars.blocks[static_cast<std::size_t>(j)], h,
                  branch.causal);
    if (want_layer_features && j < static_cast<int>(prompts.size())) {
      out.layer_features.push_back(project_pooled(branch, vars, ad::mean_rows(ad::slice_rows(h, 0, len))));
    }
  }
  out.feature = project_pooled(branch, vars, ad::mean_rows(ad::slice_rows(h, 0, len)));
  if (n_ctx > 0) out.prompt_output = project_pooled(branch, vars, ad::mean_rows(ad::slice_rows(h, len, n_ctx)));
  return out;
}

TextEncoding encode_text_graph(ad::Graph& graph, const EncoderBranch& branch, const BranchVars& vars,
                               const TextualTokenSequence& seq, std::span<const ad::Var> prompts) {
  const Eigen::Index len = seq.tokens.rows();
  if (len < 1) throw InvalidInput("text sequence needs at least one token");
  if (seq.tokens.cols() != branch.width()) throw ConfigError("text token width does not match encoder width");
  check_prompts(branch, prompts);
  const Eigen::Index n_ctx = prompts.empty() ? 0 : prompts.front().rows();
  const Eigen::Index total = len + n_ctx;
  if (total > branch.positional.rows()) throw ConfigError("text sequence longer than positional table");
  // Prompt slots sit right before the final (<eos>) token.
  const Eigen::Index slot = std::max<Eigen::Index>(len - 1, 0);

  ad::Var h = graph.constant_ref(seq.tokens);
  if (n_ctx > 0) {
    const ad::Var parts[] = {ad::slice_rows(h, 0, slot), prompts[0], ad::slice_rows(h, slot, len - slot)};
    h = ad::concat_rows(parts);
  }
  h = ad::add(h, ad::slice_rows(vars.positional, 0, total));
  for (int j = 0; j < branch.depth(); ++j) {
    if (j > 0 && j < static_cast<int>(prompts.size())) {
      const ad::Var parts[] = {ad::slice_rows(h, 0, slot), prompts[static_cast<std::size_t>(j)],
                               ad::slice_rows(h, slot + n_ctx, len - slot)};
      h = ad::concat_rows(parts);
    }
    h = run_block(branch.blocks[static_cast<std::size_t>(j)], vars.blocks[static_cast<std::size_t>(j)], h,
                  branch.causal);
  }
  TextEncoding out;
  out.eos_feature = project_pooled(branch, vars, ad::slice_rows(h, total - 1, 1));
  out.sos_feature = project_pooled(branch, vars, ad::slice_rows(h, 0, 1));
  if (n_ctx > 0) out.prompt_output = project_pooled(branch, vars, ad::mean_rows(ad::slice_rows(h, slot, n_ctx)));
  return out;
}

ImageBatchEncoding encode_image(const DualEncoder& encoder, std::span<const VisualTokenSequence> batch,
                                const PromptSet& prompts) {
  if (batch.empty()) throw InvalidInput("encode_image: empty batch");
  ImageBatchEncoding out;
  out.features.modality = Modality::vision;
  out.features.values.resize(static_cast<Eigen::Index>(batch.size()), encoder.vision.embed_width());
  const bool has_prompts = !prompts.visual.empty();
  if (has_prompts) out.prompts = PromptOutput{Matrix(out.features.values.rows(), encoder.vision.embed_width())};
  for (std::size_t n = 0; n < batch.size(); ++n) {
    ad::Graph g;
    const BranchVars vars = bind_branch(g, encoder.vision);
    const std::vector<ad::Var> pv = bind_constants(g, prompts.visual);
    const ImageEncoding e = encode_image_graph(g, encoder.vision, vars, batch[n], pv, false);
    out.features.values.row(static_cast<Eigen::Index>(n)) = e.feature.value();
    if (has_prompts) out.prompts->values.row(static_cast<Eigen::Index>(n)) = e.prompt_output->value();
  }
  return out;
}

ImageBatchEncoding encode_image(const DualEncoder& encoder, const VisualTokenSequence& seq,
                                const PromptSet& prompts) {
  return encode_image(encoder, std::span<const VisualTokenSequence>(&seq, 1), prompts);
}

TextBatchEncoding encode_text(const DualEncoder& encoder, std::span<const TextualTokenSequence> classes,
                              const PromptSet& prompts, TextPool pool) {
  if (classes.empty()) throw InvalidInput("encode_text: empty class list");
  TextBatchEncoding out;
  out.features.modality = Modality::text;
  const Eigen::Index n_cls = static_cast<Eigen::Index>(classes.size());
  out.features.values.resize(n_cls, encoder.text.embed_width());
  const bool has_prompts = !prompts.textual.empty();
  if (has_prompts) out.prompts = PromptOutput{Matrix(n_cls, encoder.text.embed_width())};
  for (Eigen::Index c = 0; c < n_cls; ++c) {
    ad::Graph g;
    const BranchVars vars = bind_branch(g, encoder.text);
    const std::vector<ad::Var> pt = bind_constants(g, prompts.textual);
    const TextEncoding e = encode_text_graph(g, encoder.text, vars, classes[static_cast<std::size_t>(c)], pt);
    out.features.values.row(c) = (pool == TextPool::eos ? e.eos_feature : e.sos_feature).value();
    if (has_prompts) out.prompts->values.row(c) = e.prompt_output->value();
  }
  return out;
}

Matrix cosine_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw InvalidInput("cosine: width mismatch");
  Eigen::VectorXd na = a.rowwise().norm();
  Eigen::VectorXd nb = b.rowwise().norm();
  for (Eigen::Index i = 0; i < na.size(); ++i) {
    if (!(na(i) > 0.0)) throw NumericalError("cosine: zero-norm row " + std::to_string(i) + " in left operand");
  }
  for (Eigen::Index i = 0; i < nb.size(); ++i) {
    if (!(nb(i) > 0.0)) throw NumericalError("cosine: zero-norm row " + std::to_string(i) + " in right operand");
  }
  Matrix an = a.array().colwise() / na.array();
  Matrix bn = b.array().colwise() / nb.array();
  return (an * bn.transpose()).cwiseMax(-1.0).cwiseMin(1.0);
}

ad::Var cosine_matrix(ad::Var a, ad::Var b) {
  return ad::matmul(ad::l2_normalize_rows(a), ad::transpose(ad::l2_normalize_rows(b)));
}

ScoreMatrix clip_scores(const EncodedFeature& image, const EncodedFeature& text, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  return {cosine_matrix(image.values, text.values) / temperature, ScoreKind::clip};
}

ScoreMatrix learned_prompt_scores(const PromptOutput& q_image, const PromptOutput& q_text) {
  return {cosine_matrix(q_image.values, q_text.values), ScoreKind::learned_prompt};
}

}  // namespace transagent
