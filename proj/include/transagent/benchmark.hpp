#pragma once

// Synthetic few-shot benchmark with known ground truth.
//
// Every class c owns a latent z_c ~ N(0, I_k). An image of class c draws
// z = z_c + intra_class_std * eps and renders each patch as z * U_l plus
// noise; downstream images additionally carry a fixed domain offset. Class
// names are two vocabulary tokens rendered from z_c with per-class noise.
//
// The frozen dual encoder is "pretrained" on a disjoint set of source-domain
// classes: its two output projections are ridge fits mapping pooled features
// onto z * G, where G (k x C) has orthonormal rows.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "transagent/agent_hub.hpp"
#include "transagent/core_model.hpp"
#include "transagent/distill_losses.hpp"

namespace transagent {

struct BenchmarkConfig {
  std::string dataset_id = "synthetic";
  std::uint64_t seed = 2024;
  int num_classes = 20;
  int latent_dim = 12;
  int patches = 8;
  int train_per_class = 16;  // pool that few-shot sampling draws from
  int test_per_class = 100;
  double intra_class_std = 0.6;
  double patch_noise = 0.5;
  double name_noise = 1.0;
  double domain_shift = 2.0;
  int pretrain_classes = 160;
  int pretrain_images_per_class = 6;
  double ridge = 1e-2;
};

class SyntheticBenchmark : public LatentOracle {
 public:
  SyntheticBenchmark(const BenchmarkConfig& config, const EncoderConfig& encoder_config);

  const BenchmarkConfig& config() const { return config_; }
  const DualEncoder& encoder() const { return encoder_; }
  std::vector<int> class_ids() const;

  const LabeledBatch& train_pool() const { return train_; }
  const LabeledBatch& test_set() const { return test_; }
  /// <sos> name tokens <eos>; prompts are inserted by the encoder.
  TextualTokenSequence class_text(int class_id) const;
  std::vector<TextualTokenSequence> class_texts(const std::vector<int>& class_ids) const;

  int latent_dim() const override { return config_.latent_dim; }
  Matrix sample_latent(const std::string& sample_id) const override;
  Matrix class_latent(int class_id) const override;
  std::string class_name(int class_id) const override;
  const Matrix& ideal_map() const override { return ideal_map_; }

  /// Fraction of zero-shot (prompt-free template) predictions that are correct
  /// over the test images of `class_ids`, classifying among those classes.
  double zero_shot_accuracy(const std::vector<int>& class_ids) const;

 private:
  VisualTokenSequence render_image(const Matrix& latent, bool target_domain, std::uint64_t seed,
                                   const std::string& sample_id) const;
  Matrix render_name(const Matrix& class_latent, std::uint64_t seed) const;
  void fit_projections();

  BenchmarkConfig config_;
  DualEncoder encoder_;
  Matrix ideal_map_;                 // k x C
  std::vector<Matrix> patch_maps_;   // patches entries of k x D
  std::vector<Matrix> name_maps_;    // one k x D map per name token
  Matrix domain_offset_;             // 1 x D
  std::vector<Matrix> class_latents_;
  std::unordered_map<std::string, Matrix> sample_latents_;
  LabeledBatch train_;
  LabeledBatch test_;
};

}  // namespace transagent
