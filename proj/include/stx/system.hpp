#pragma once

#include <string>

#include "stx/adversaries.hpp"
#include "stx/corpus.hpp"
#include "stx/decoder.hpp"
#include "stx/encoders.hpp"

namespace stx::system {

struct ModelConfig {
  encoders::EncoderConfig enc;
  decoder::DecoderConfig dec;
  adversaries::DiscConfig disc;

  // Keeps the cross-module contracts consistent: the conditioning vector is
  // exactly [r | z], and every component sees the same frame dimension.
  void finalize(int frame_dim, int vocab_size) {
    enc.frame_dim = frame_dim;
    dec.frame_dim = frame_dim;
    disc.frame_dim = frame_dim;
    dec.vocab_size = vocab_size;
    dec.d_cond = enc.d_r + enc.d_z;
    dec.d_style = enc.d_z;
  }
  void validate() const {
    enc.validate();
    dec.validate();
    disc.validate();
    check(dec.d_cond == enc.d_r + enc.d_z, ErrorCategory::Config,
          "conditioning dimension must equal d_r + d_z");
    check(enc.frame_dim == dec.frame_dim && enc.frame_dim == disc.frame_dim, ErrorCategory::Config,
          "frame dimension mismatch across modules");
  }
};

// All trainable components plus the frozen style discriminator. Parameters
// split into two optimizer groups: the generator (both encoders + decoder)
// and the adversarial discriminator.
struct System {
  System(const ModelConfig& cfg_in, uint64_t seed)
      : cfg(cfg_in), ds(cfg_in.enc, seed) {
    cfg.validate();
    Rng rng(seed);
    Rng gen_rng = rng.stream(0x67656e70);   // "genp"
    Rng disc_rng = rng.stream(0x64697370);  // "disp"
    style_enc = encoders::StyleEncoder(gen, gen_rng, cfg.enc);
    speaker_enc = encoders::SpeakerEncoder(gen, gen_rng, cfg.enc, "spk");
    dec = decoder::SpectrogramDecoder(gen, gen_rng, cfg.dec);
    disc_net = adversaries::FrameDiscriminator(disc, disc_rng, cfg.disc, "d");
  }

  ModelConfig cfg;
  nn::ParamStore gen;
  nn::ParamStore disc;
  encoders::StyleEncoder style_enc;
  encoders::SpeakerEncoder speaker_enc;
  decoder::SpectrogramDecoder dec;
  adversaries::FrameDiscriminator disc_net;
  adversaries::StyleDiscriminator ds;
};

}  // namespace stx::system
