#pragma once

#include <string>
#include <vector>

#include "stx/ad.hpp"
#include "stx/common.hpp"
#include "stx/nn.hpp"
#include "stx/rng.hpp"

namespace stx::decoder {

using ad::Tape;
using ad::Var;

struct DecoderConfig {
  int frame_dim = 32;
  int vocab_size = 24;
  int d_cond = 24;   // D_r + D_z, checked at call time
  int d_style = 0;   // trailing style block of the conditioning vector
  int emb_dim = 12;
  int enc_units = 16;  // per direction; memory is 2x this
  int att_dim = 16;
  int dec_units = 64;
  bool per_step_conditioning = false;  // re-inject c at every step (default off)
  double stop_pos_weight = 5.0;
  double feedback_clamp = 50.0;
  double init_z_damping = 0.2;  // initialization-only scale on the z block
  int max_frames_default = 240;

  void validate() const;
};

// Value-level output for one utterance.
struct DecoderOutput {
  Mat frames_hat;       // T' x F
  Col stop_logits;      // T'
  Mat attention;        // T' x L, rows sum to 1
};

// Tape-level output for a batch.
struct BatchedDecode {
  std::vector<Var> frames;       // per step, F x B
  std::vector<Var> stop_logits;  // per step, 1 x B
  std::vector<Mat> attention;    // per step, L x B (values)
  std::vector<int> lengths;      // emitted length per column
};

enum class DecodeMode {
  teacher_forced,  // inputs are ground-truth frames; lengths = target lengths
  teacher_length,  // feed back predictions for exactly the given lengths
  free_running,    // feed back predictions; stop when sigmoid(stop) > 0.5
};

// Token-sequence encoder: embedding + one bidirectional GRU layer. The
// per-position outputs form the attention memory.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg, const std::string& prefix);

  struct Memory {
    Var memory;   // d_mem x (L*B), column j*B + b
    Var keys;     // att_dim x (L*B)
    Mat mask;     // L x B, 1 for valid positions
    int l_max = 0;
    int b_cols = 0;
  };
  Memory encode(Tape& t, const nn::ParamStore& ps, const std::vector<std::vector<int>>& tokens) const;

  int d_mem() const { return 2 * cfg_.enc_units; }

 private:
  DecoderConfig cfg_;
  int emb_ = -1;
  nn::GRULayer fwd_, bwd_;
  nn::Linear key_proj_;
};

// Single-layer recurrent attention decoder. The conditioning vector
// initializes the recurrent state through a learned projection.
class AttnDecoder {
 public:
  AttnDecoder() = default;
  AttnDecoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg, const std::string& prefix);

  // cond: (d_cond x B). For teacher_forced, `teacher` holds ground-truth
  // frames per step (F x B padded) and `lengths` their true lengths; for
  // teacher_length only `lengths` is used; for free_running, `lengths` is
  // ignored and max_frames caps generation.
  BatchedDecode decode(Tape& t, const nn::ParamStore& ps, const TextEncoder::Memory& mem, Var cond,
                       DecodeMode mode, const std::vector<Mat>* teacher, std::vector<int> lengths,
                       int max_frames) const;

  const DecoderConfig& config() const { return cfg_; }

 private:
  DecoderConfig cfg_;
  nn::Linear init_proj_;
  nn::GRULayer cell_;
  nn::Linear query_proj_;
  int v_att_ = -1;
  nn::Linear out_proj_;  // frame_dim + 1 rows: frame prediction plus stop logit
};

// The complete spectrogram decoder (text encoder + attention decoder).
struct SpectrogramDecoder {
  SpectrogramDecoder() = default;
  SpectrogramDecoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg);

  TextEncoder text;
  AttnDecoder attn;
  DecoderConfig cfg;
};

// ---- value-level single-utterance operations ----------------------------

DecoderOutput decode_teacher_forced(const SpectrogramDecoder& dec, const nn::ParamStore& ps,
                                    const std::vector<int>& tokens, const Col& cond, const Mat& frames);

DecoderOutput decode_free_running(const SpectrogramDecoder& dec, const nn::ParamStore& ps,
                                  const std::vector<int>& tokens, const Col& cond, int max_frames);

// Negative log-likelihood: 1/2 sum of squared residuals (unit-variance
// Gaussian, constants dropped) plus weighted stop-token BCE. stop_targets
// holds 0/1 per frame (1 exactly at the final frame).
double nll(const Mat& frames_hat, const Col& stop_logits, const Mat& frames, const Col& stop_targets,
           double stop_pos_weight = 5.0);

// The Gaussian part alone: 1/2 * |residual|^2.
double nll_gauss(const Mat& frames_hat, const Mat& frames);

}  // namespace stx::decoder
