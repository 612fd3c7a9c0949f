#pragma once

// Frozen miniature dual encoder with deep learnable prompts.
//
// Vision sequence layout:  [patch_0 .. patch_{L-1}] [prompt slots]
// Text sequence layout:    [<sos>] [name tokens] [prompt slots] [<eos>]
//
// At every prompted layer j < depth the prompt-slot rows are overwritten with
// that layer's learnable prompts. Positional embeddings are added once at the
// input, to patches only (vision) and to every position (text).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "transagent/autodiff.hpp"

namespace transagent {

enum class Modality { vision, text };
enum class TextPool { eos, sos };
enum class ScoreKind { clip, learned_prompt, t2i, i2t, gated };

std::string to_string(TextPool p);
TextPool text_pool_from_string(const std::string& s);

struct VisualTokenSequence {
  Matrix tokens;  // L x D_v
  std::string sample_id;
};

struct TextualTokenSequence {
  Matrix tokens;  // L_t x D_t, first row <sos>, last row <eos>
  int class_id = 0;
};

struct PromptSet {
  std::vector<Matrix> visual;   // depth entries, each n_ctx x D_v
  std::vector<Matrix> textual;  // depth entries, each n_ctx x D_t

  int depth() const { return static_cast<int>(visual.size()); }
  int n_ctx() const { return visual.empty() ? 0 : static_cast<int>(visual.front().rows()); }
  bool empty() const { return visual.empty() && textual.empty(); }
};

struct EncodedFeature {
  Matrix values;  // N x C (vision) or N_cls x C (text)
  Modality modality = Modality::vision;
};

struct PromptOutput {
  Matrix values;
};

struct ScoreMatrix {
  Matrix values;  // N x N_cls
  ScoreKind kind = ScoreKind::clip;
};

struct EncoderConfig {
  int depth = 3;         // transformer blocks per branch
  int width = 32;        // token width D (both branches)
  int embed_width = 32;  // shared embedding width C
  int mlp_hidden = 64;
  int max_tokens = 32;
  double residual_scale = 0.5;  // std multiplier of block weights
  bool final_norm = true;
  std::uint64_t seed = 7;
};

struct TransformerBlock {
  Matrix ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // 1 x D
  Matrix w_query, w_key, w_value, w_out;             // D x D
  Matrix w_hidden, b_hidden;                         // D x H, 1 x H
  Matrix w_proj, b_proj;                             // H x D, 1 x D
};

struct EncoderBranch {
  std::vector<TransformerBlock> blocks;
  Matrix positional;                    // max_tokens x D
  Matrix final_gamma, final_beta;       // 1 x D
  Matrix projection;                    // D x C
  bool causal = false;
  bool final_norm = true;

  int width() const { return static_cast<int>(projection.rows()); }
  int embed_width() const { return static_cast<int>(projection.cols()); }
  int depth() const { return static_cast<int>(blocks.size()); }
};

/// Frozen word-embedding table of the text branch.
class Vocabulary {
 public:
  void set(const std::string& word, Matrix row);
  bool contains(const std::string& word) const { return table_.count(word) != 0; }
  const Matrix& row(const std::string& word) const;
  /// One row per whitespace-separated word.
  Matrix embed(const std::string& phrase) const;
  std::vector<std::string> words() const;

 private:
  std::unordered_map<std::string, Matrix> table_;
};

inline constexpr const char* kSosToken = "<sos>";
inline constexpr const char* kEosToken = "<eos>";

struct DualEncoder {
  EncoderBranch vision;
  EncoderBranch text;
  Vocabulary vocab;

  /// Flattened copy of every frozen value, in a fixed order.
  std::vector<double> snapshot() const;
  std::uint64_t fingerprint() const;
};

/// Random frozen weights from `config.seed`; both projections random.
DualEncoder make_random_dual_encoder(const EncoderConfig& config);

/// Builds the text token matrix <sos> + words + <eos> from the vocabulary.
TextualTokenSequence make_text_sequence(const Vocabulary& vocab, const std::string& words, int class_id);

struct PromptConfig {
  int n_ctx = 4;
  int depth = 2;
  std::uint64_t seed = 1;
  double init_std = 0.02;
  std::string init_phrase = "a photo of a";
};

/// First-layer textual prompts come from the embedding of `init_phrase`; every
/// other prompt is N(0, init_std^2) from `config.seed`.
PromptSet init_prompts(const PromptConfig& config, const DualEncoder& encoder);

// ---------------------------------------------------------------------------
// Graph-level encoders (used by training and by the value API below).

struct BranchVars {
  struct Block {
    ad::Var w_query, w_key, w_value, w_out, w_hidden, b_hidden, w_proj, b_proj;
  };
  std::vector<Block> blocks;
  ad::Var positional, projection;
};

/// Binds a branch's frozen weights as graph constants (no copies).
BranchVars bind_branch(ad::Graph& graph, const EncoderBranch& branch);
std::vector<ad::Var> bind_constants(ad::Graph& graph, std::span<const Matrix> values);

struct ImageEncoding {
  ad::Var feature;                      // 1 x C
  std::optional<ad::Var> prompt_output; // 1 x C, Q_V
  std::vector<ad::Var> layer_features;  // 1 x C per prompted layer (when requested)
};

struct TextEncoding {
  ad::Var eos_feature;                  // 1 x C
  ad::Var sos_feature;                  // 1 x C
  std::optional<ad::Var> prompt_output; // 1 x C, Q_T
};

ImageEncoding encode_image_graph(ad::Graph& graph, const EncoderBranch& branch, const BranchVars& vars,
                                 const VisualTokenSequence& seq, std::span<const ad::Var> prompts,
                                 bool want_layer_features);

TextEncoding encode_text_graph(ad::Graph& graph, const EncoderBranch& branch, const BranchVars& vars,
                               const TextualTokenSequence& seq, std::span<const ad::Var> prompts);

/// Pooled hidden state -> optional final norm -> projection.
ad::Var project_pooled(const EncoderBranch& branch, const BranchVars& vars, ad::Var pooled);

// ---------------------------------------------------------------------------
// Value API.

struct ImageBatchEncoding {
  EncodedFeature features;             // N x C
  std::optional<PromptOutput> prompts; // N x C when prompts are present
};

struct TextBatchEncoding {
  EncodedFeature features;             // N_cls x C
  std::optional<PromptOutput> prompts;
};

ImageBatchEncoding encode_image(const DualEncoder& encoder, std::span<const VisualTokenSequence> batch,
                                const PromptSet& prompts);
ImageBatchEncoding encode_image(const DualEncoder& encoder, const VisualTokenSequence& seq,
                                const PromptSet& prompts);
TextBatchEncoding encode_text(const DualEncoder& encoder, std::span<const TextualTokenSequence> classes,
                              const PromptSet& prompts, TextPool pool = TextPool::eos);

/// Row-normalized cosine matrix divided by temperature. Throws NumericalError
/// on zero-norm rows.
ScoreMatrix clip_scores(const EncodedFeature& image, const EncodedFeature& text, double temperature);
ScoreMatrix learned_prompt_scores(const PromptOutput& q_image, const PromptOutput& q_text);

/// cos(a_i, b_j) as a graph op, i.e. normalize rows then a * b^T.
ad::Var cosine_matrix(ad::Var a, ad::Var b);

/// Raw cosine matrix on plain values.
Matrix cosine_matrix(const Matrix& a, const Matrix& b);

}  // namespace transagent
