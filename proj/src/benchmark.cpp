#include "transagent/benchmark.hpp"

#include <cmath>
#include <cstdio>

#include "transagent/errors.hpp"
#include "transagent/random.hpp"

namespace transagent {

namespace {

std::string class_word(int c) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "cls%02d", c);
  return buf;
}

std::string sample_name(const std::string& dataset, const char* split, int c, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "/%s/c%02d/%04d", split, c, i);
  return dataset + buf;
}

Matrix ridge_fit(const Matrix& x, const Matrix& y, double alpha) {
  Matrix gram = x.transpose() * x;
  gram.diagonal().array() += alpha * static_cast<double>(x.rows());
  return gram.ldlt().solve(x.transpose() * y);
}

}  // namespace

SyntheticBenchmark::SyntheticBenchmark(const BenchmarkConfig& config, const EncoderConfig& encoder_config)
    : config_(config), encoder_(make_random_dual_encoder(encoder_config)) {
  if (config.num_classes < 2) throw ConfigError("data.classes must be at least 2");
  if (config.latent_dim < 1 || config.patches < 1 || config.train_per_class < 1 || config.test_per_class < 1) {
    throw ConfigError("benchmark sizes must be positive");
  }
  if (config.latent_dim > encoder_config.embed_width) {
    throw ConfigError("latent dimension cannot exceed the embedding width");
  }
  if (config.patches > encoder_config.max_tokens) throw ConfigError("more patches than positional slots");
  const int d = encoder_config.width;
  const int k = config.latent_dim;
  Rng rng(mix_seed(config.seed, "world"));

  // Orthonormal rows: z * G preserves cosine geometry of the latents.
  Matrix q = normal_matrix(rng, encoder_config.embed_width, encoder_config.embed_width);
  Eigen::HouseholderQR<Matrix> qr(q);
  Matrix orth = qr.householderQ();
  ideal_map_ = orth.topRows(k);

  const Matrix shared = normal_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(k)));
  for (int l = 0; l < config.patches; ++l) {
    patch_maps_.push_back(shared + 0.5 * normal_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(k))));
  }
  for (int t = 0; t < 2; ++t) {
    name_maps_.push_back(normal_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(k))));
  }
  domain_offset_ = normal_matrix(rng, 1, d, 1.0);

  for (int c = 0; c < config.num_classes; ++c) {
    class_latents_.push_back(normal_matrix(rng, 1, k, 1.0));
    const Matrix name = render_name(class_latents_.back(), mix_seed(config.seed, "name" + std::to_string(c)));
    const std::string w = class_word(c);
    encoder_.vocab.set(w + "_0", name.row(0));
    encoder_.vocab.set(w + "_1", name.row(1));
  }

  fit_projections();

  for (int c = 0; c < config.num_classes; ++c) {
    for (int split = 0; split < 2; ++split) {
      const bool train = split == 0;
      const int count = train ? config.train_per_class : config.test_per_class;
      LabeledBatch& out = train ? train_ : test_;
      for (int i = 0; i < count; ++i) {
        const std::string id = sample_name(config.dataset_id, train ? "train" : "test", c, i);
        Rng srng(mix_seed(config.seed, id));
        const Matrix z = class_latents_[static_cast<std::size_t>(c)] +
                         normal_matrix(srng, 1, k, config.intra_class_std);
        sample_latents_[id] = z;
        out.images.push_back(render_image(z, true, mix_seed(config.seed, id + "#render"), id));
        out.labels.push_back(c);
      }
    }
  }
}

VisualTokenSequence SyntheticBenchmark::render_image(const Matrix& latent, bool target_domain, std::uint64_t seed,
                                                     const std::string& sample_id) const {
  Rng rng(seed);
  const Eigen::Index d = patch_maps_.front().cols();
  VisualTokenSequence seq;
  seq.sample_id = sample_id;
  seq.tokens.resize(config_.patches, d);
  for (int l = 0; l < config_.patches; ++l) {
    seq.tokens.row(l) = latent * patch_maps_[static_cast<std::size_t>(l)] + normal_matrix(rng, 1, d, config_.patch_noise);
    if (target_domain) seq.tokens.row(l) += config_.domain_shift * domain_offset_;
  }
  return seq;
}

Matrix SyntheticBenchmark::render_name(const Matrix& class_latent, std::uint64_t seed) const {
  Rng rng(seed);
  const Eigen::Index d = name_maps_.front().cols();
  Matrix out(2, d);
  for (int t = 0; t < 2; ++t) {
    out.row(t) = class_latent * name_maps_[static_cast<std::size_t>(t)] + normal_matrix(rng, 1, d, config_.name_noise);
  }
  return out;
}

void SyntheticBenchmark::fit_projections() {
  const int k = config_.latent_dim;
  const int d = encoder_.vision.width();
  Rng rng(mix_seed(config_.seed, "pretrain"));
  // Pre-projection features: temporarily swap in identity projections.
  DualEncoder probe = encoder_;
  probe.vision.projection = Matrix::Identity(d, d);
  probe.text.projection = Matrix::Identity(encoder_.text.width(), encoder_.text.width());
  const Matrix& sos = encoder_.vocab.row(kSosToken);
  const Matrix& eos = encoder_.vocab.row(kEosToken);
  const Matrix tmpl = encoder_.vocab.embed("a photo of a");

  const int n_cls = config_.pretrain_classes;
  const int per = config_.pretrain_images_per_class;
  std::vector<VisualTokenSequence> images;
  std::vector<TextualTokenSequence> texts;
  Matrix image_targets(n_cls * per, k);
  Matrix text_targets(n_cls, k);
  for (int p = 0; p < n_cls; ++p) {
    const Matrix zc = normal_matrix(rng, 1, k, 1.0);
    const Matrix name = render_name(zc, rng());
    TextualTokenSequence t;
    t.class_id = p;
    t.tokens.resize(2 + name.rows() + tmpl.rows(), sos.cols());
    t.tokens << sos, name, tmpl, eos;
    texts.push_back(std::move(t));
    text_targets.row(p) = zc;
    for (int i = 0; i < per; ++i) {
      const Matrix z = zc + normal_matrix(rng, 1, k, config_.intra_class_std);
      images.push_back(render_image(z, false, rng(), "pretrain"));
      image_targets.row(p * per + i) = z;
    }
  }
  const PromptSet none;
  const Matrix hv = encode_image(probe, images, none).features.values;
  const Matrix ht = encode_text(probe, texts, none).features.values;
  encoder_.vision.projection = ridge_fit(hv, image_targets * ideal_map_, config_.ridge);
  encoder_.text.projection = ridge_fit(ht, text_targets * ideal_map_, config_.ridge);
}

std::vector<int> SyntheticBenchmark::class_ids() const {
  std::vector<int> ids(static_cast<std::size_t>(config_.num_classes));
  for (int c = 0; c < config_.num_classes; ++c) ids[static_cast<std::size_t>(c)] = c;
  return ids;
}

TextualTokenSequence SyntheticBenchmark::class_text(int class_id) const {
  if (class_id < 0 || class_id >= config_.num_classes) throw LookupError("unknown class " + std::to_string(class_id));
  const std::string w = class_word(class_id);
  return make_text_sequence(encoder_.vocab, w + "_0 " + w + "_1", class_id);
}

std::vector<TextualTokenSequence> SyntheticBenchmark::class_texts(const std::vector<int>& class_ids) const {
  std::vector<TextualTokenSequence> out;
  out.reserve(class_ids.size());
  for (int c : class_ids) out.push_back(class_text(c));
  return out;
}

Matrix SyntheticBenchmark::sample_latent(const std::string& sample_id) const {
  auto it = sample_latents_.find(sample_id);
  if (it == sample_latents_.end()) throw LookupError("unknown sample '" + sample_id + "'");
  return it->second;
}

Matrix SyntheticBenchmark::class_latent(int class_id) const {
  if (class_id < 0 || class_id >= config_.num_classes) throw LookupError("unknown class " + std::to_string(class_id));
  return class_latents_[static_cast<std::size_t>(class_id)];
}

std::string SyntheticBenchmark::class_name(int class_id) const {
  const std::string w = class_word(class_id);
  return w + "_0 " + w + "_1";
}

double SyntheticBenchmark::zero_shot_accuracy(const std::vector<int>& class_ids) const {
  std::vector<TextualTokenSequence> texts;
  for (int c : class_ids) {
    const std::string w = class_word(c);
    texts.push_back(make_text_sequence(encoder_.vocab, w + "_0 " + w + "_1 a photo of a", c));
  }
  const PromptSet none;
  const Matrix t = encode_text(encoder_, texts, none).features.values;
  std::vector<VisualTokenSequence> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test_.images.size(); ++i) {
    for (std::size_t j = 0; j < class_ids.size(); ++j) {
      if (test_.labels[i] == class_ids[j]) {
        images.push_back(test_.images[i]);
        labels.push_back(static_cast<int>(j));
      }
    }
  }
  if (images.empty()) return 0.0;
  const Matrix v = encode_image(encoder_, images, none).features.values;
  const Matrix s = cosine_matrix(v, t);
  int correct = 0;
  for (Eigen::Index n = 0; n < s.rows(); ++n) {
    Eigen::Index best;
    s.row(n).maxCoeff(&best);
    correct += best == labels[static_cast<std::size_t>(n)] ? 1 : 0;
  }
  return 100.0 * correct / static_cast<double>(images.size());
}

}  // namespace transagent
