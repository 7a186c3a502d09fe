#pragma once

#include <string>
#include <vector>

#include "stx/corpus.hpp"
#include "stx/encoders.hpp"

namespace stx::adversaries {

using ad::Tape;
using ad::Var;
using encoders::FrameInput;

struct DiscConfig {
  int frame_dim = 32;
  int conv_layers = 4;
  int base_channels = 8;  // 8 -> 16 -> 32 -> 32
  void validate() const;
  int min_frames() const { return 1 << conv_layers; }
};

// Probability clamp applied before any logarithm of a discriminator output.
constexpr double kProbEps = 1e-7;

// The adversarial discriminator D: strided 2-D conv stack over frames,
// global average pooling (so any length is scorable), sigmoid head. The
// output layer is zero-initialized, so an untrained D says exactly 0.5.
class FrameDiscriminator {
 public:
  FrameDiscriminator() = default;
  FrameDiscriminator(nn::ParamStore& ps, Rng& rng, const DiscConfig& cfg, const std::string& prefix);

  // Logit for one utterance; gradients flow into the input frames and (when
  // frozen is false) into D's parameters.
  Var logit(Tape& t, const nn::ParamStore& ps, const FrameInput& input, bool frozen = false) const;

  // Value-level probability, clamped away from {0, 1}.
  double probability(const nn::ParamStore& ps, const Mat& frames) const;

  const DiscConfig& config() const { return cfg_; }

 private:
  DiscConfig cfg_;
  std::vector<nn::Conv2dLayer> convs_;
  nn::Linear head_;
};

struct PretrainReport {
  double held_out_accuracy = 0;
  double train_accuracy = 0;
  int epochs_run = 0;
  long steps = 0;
  double split_fraction = 0;
  int n_train_utterances = 0;
  int n_held_out = 0;
  std::string to_json() const;
};

// The pre-trained style discriminator D_s: same trunk structure as the style
// encoder's reference encoder, followed by a sigmoid output layer. Trained
// once on a portion of the training data, then frozen; style_probability
// refuses to run before pretraining.
class StyleDiscriminator {
 public:
  StyleDiscriminator() = default;
  StyleDiscriminator(const encoders::EncoderConfig& enc_cfg, uint64_t init_seed);

  // Trains to convergence on `split_fraction` of the train split (target
  // style = 1, early stopping on dev accuracy). Throws a GATE error when the
  // final held-out accuracy is below `accuracy_gate`.
  PretrainReport pretrain(const corpus::CorpusManifest& manifest, const corpus::FrameCache& frames,
                          double split_fraction, uint64_t seed, double accuracy_gate = 0.9);

  double style_probability(const Mat& frames) const;

  bool pretrained() const { return pretrained_; }
  void mark_pretrained() { pretrained_ = true; }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  uint64_t params_hash() const { return params_.content_hash(); }

  void save(const std::filesystem::path& path, uint64_t enc_config_hash) const;
  void load(const std::filesystem::path& path, uint64_t enc_config_hash);

 private:
  double logit_value(const Mat& frames) const;
  encoders::EncoderConfig enc_cfg_;
  nn::ParamStore params_;
  encoders::ReferenceEncoder trunk_;
  nn::Linear head_;
  bool pretrained_ = false;
};

}  // namespace stx::adversaries
