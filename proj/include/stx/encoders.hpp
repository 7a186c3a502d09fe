#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stx/ad.hpp"
#include "stx/common.hpp"
#include "stx/nn.hpp"
#include "stx/rng.hpp"

namespace stx::encoders {

using ad::Tape;
using ad::Var;

struct EncoderConfig {
  int d_z = 4;
  int d_r = 16;
  int d_h = 32;
  int conv_layers = 6;
  int gru_units = 128;
  int flow_steps = 4;  // K
  int speaker_layers = 3;

  int frame_dim = 32;
  int conv_base_channels = 16;  // doubles twice along the stack, capped at 4x
  int made_hidden = 32;
  int speaker_hidden = 32;
  int speaker_proj = 16;
  int speaker_stride = 2;  // frame subsampling before the LSTM stack
  double delta_floor = 1e-4;
  // initial bias of the delta head: the posterior starts wide
  // (softplus(1) ~ 1.31) and narrows only as far as training pushes it
  double delta_bias_init = 1.0;

  void validate() const;
  int min_frames() const;  // shortest utterance the conv stack accepts
  // Canonical hash of the trunk architecture (used to bind the pretrained
  // style discriminator to a compatible configuration).
  uint64_t trunk_hash() const;
};

// One utterance's frames, either a constant matrix (T x F) or frames already
// living on a tape (a generated batch column).
struct FrameInput {
  const Mat* constant = nullptr;
  const std::vector<Var>* frame_vars = nullptr;  // each F x B
  int col = 0;
  int len = 0;

  static FrameInput from_mat(const Mat& m) {
    FrameInput in;
    in.constant = &m;
    in.len = int(m.rows());
    return in;
  }
  static FrameInput from_vars(const std::vector<Var>& vars, int col, int len) {
    FrameInput in;
    in.frame_vars = &vars;
    in.col = col;
    in.len = len;
    return in;
  }
};

// Value-level style posterior for one utterance.
struct StylePosterior {
  Col mu, delta, h, z0, zK;
  std::vector<double> log_dets;  // per flow step
  double log_q = 0;
};

// Tape-level posterior for a batch (columns).
struct StylePosteriorVars {
  Var mu, delta, h, z0, zK;
  std::vector<Var> log_dets;  // each 1 x B
  Var log_q;                  // 1 x B
};

// Six 2-D conv layers (stride 2 on alternating layers) followed by a
// unidirectional GRU; the final state feeds the mu / delta / h heads.
class ReferenceEncoder {
 public:
  ReferenceEncoder() = default;
  ReferenceEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg, const std::string& prefix);

  struct Heads {
    Var mu, delta, h;
  };
  // Batched over utterances; each input becomes one output column.
  Heads encode(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs,
               bool frozen = false) const;
  // Trunk only: final GRU state per utterance (gru_units x B). Shared with
  // the style discriminator, which has the same structure.
  Var trunk(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs,
            bool frozen = false) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<nn::Conv2dLayer> convs_;
  nn::GRULayer gru_;
  nn::Linear mu_head_, delta_head_, h_head_;
};

// MADE-style autoregressive conditioner for one IAF step: strict masking in
// the given input ordering, context h enters unmasked at both layers.
class MadeConditioner {
 public:
  MadeConditioner() = default;
  MadeConditioner(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg, const std::string& prefix,
                  const std::vector<int>& ordering);

  struct Out {
    Var a, m;  // gate pre-activation and candidate, each d_z x B
  };
  Out apply(Tape& t, const nn::ParamStore& ps, Var z, Var h) const;
  // Value-level evaluation used by the inverse solve.
  void eval(const nn::ParamStore& ps, const Col& z, const Col& h, Col& a, Col& m) const;

  const std::vector<int>& ordering() const { return ordering_; }

 private:
  std::vector<int> ordering_;
  Mat mask_in_, mask_out_;
  int w_z_ = -1, w_h_ = -1, b_ = -1;
  int va_ = -1, ua_ = -1, ca_ = -1;
  int vm_ = -1, um_ = -1, cm_ = -1;
};

// K gated IAF steps: s = sigmoid(a), z' = s ⊙ z + (1-s) ⊙ m,
// log-det per step = sum_d log s_d. Orderings alternate between identity
// and reversed so later steps condition on different prefixes.
class IafFlow {
 public:
  IafFlow() = default;
  IafFlow(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg, const std::string& prefix);

  struct Out {
    Var zK;
    std::vector<Var> log_dets;  // each 1 x B
  };
  Out forward(Tape& t, const nn::ParamStore& ps, Var z0, Var h) const;

  // Sequential inverse: recovers z0 from zK given h (value-level).
  Col invert(const nn::ParamStore& ps, const Col& zK, const Col& h) const;

  int steps() const { return int(conditioners_.size()); }
  const MadeConditioner& conditioner(int k) const { return conditioners_[k]; }

 private:
  std::vector<MadeConditioner> conditioners_;
  int d_z_ = 0;
};

// 3-layer projected LSTM over (subsampled) frames; the last projected state
// maps to d_r and is L2-normalized.
class SpeakerEncoder {
 public:
  SpeakerEncoder() = default;
  SpeakerEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg, const std::string& prefix);

  // Constant frames (one utterance per input).
  Var encode(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs) const;
  // Tape-resident batched frames (the cycle path); lengths per column.
  Var encode_seq(Tape& t, const nn::ParamStore& ps, const std::vector<Var>& frames,
                 const std::vector<int>& lengths) const;

 private:
  Var run(Tape& t, const nn::ParamStore& ps, const std::vector<Var>& steps,
          const std::vector<Row>& masks) const;
  EncoderConfig cfg_;
  std::vector<nn::LSTMPLayer> layers_;
  nn::Linear out_;
};

// The style encoder E_z = reference encoder + IAF; the speaker encoder E_r.
// Owned together because they share the parameter store and config.
struct StyleEncoder {
  StyleEncoder() = default;
  StyleEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg);

  // Reparameterized posterior sample for a batch; epsilon is d_z x B
  // (zero for the deterministic pass). When `flow` is false the posterior
  // stays Gaussian (zK = z0, no log-dets) - the K=0 ablation.
  StylePosteriorVars sample(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs,
                            const Mat& epsilon, bool use_flow = true) const;

  ReferenceEncoder reference;
  IafFlow flow;
};

// ---- value-level single-utterance operations --------------------------------

// (mu, delta, h) for one utterance.
StylePosterior encode_reference(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames);

// Full posterior sample; epsilon drawn from rng.
StylePosterior sample_style(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames, Rng& rng);

// Deterministic posterior (epsilon = 0).
StylePosterior style_deterministic(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames);

// Speaker vector r for one utterance (unit norm).
Col encode_speaker(const SpeakerEncoder& enc, const nn::ParamStore& ps, const Mat& frames);

// z*: mean deterministic zK over target-style training utterances.
Col compute_target_style(const StyleEncoder& enc, const nn::ParamStore& ps,
                         const std::vector<const Mat*>& target_train_frames);

// Gaussian log-density of z0 under (mu, diag(delta^2)) minus the flow
// log-determinants; the log_q invariant.
double posterior_log_q(const Col& z0, const Col& mu, const Col& delta, const std::vector<double>& log_dets);

}  // namespace stx::encoders
