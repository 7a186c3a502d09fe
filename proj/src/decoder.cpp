#include "stx/decoder.hpp"

#include <cmath>

namespace stx::decoder {

using namespace stx::ad;

void DecoderConfig::validate() const {
  check(frame_dim >= 1 && vocab_size >= 2 && d_cond >= 1, ErrorCategory::Config,
        "decoder dims must be positive");
  check(emb_dim >= 1 && enc_units >= 1 && att_dim >= 1 && dec_units >= 1, ErrorCategory::Config,
        "decoder layer sizes must be positive");
  check(stop_pos_weight > 0 && feedback_clamp > 0 && max_frames_default >= 1, ErrorCategory::Config,
        "decoder limits must be positive");
}

// ---- text encoder -----------------------------------------------------------

TextEncoder::TextEncoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg, const std::string& prefix)
    : cfg_(cfg) {
  cfg.validate();
  emb_ = ps.add(prefix + ".emb", nn::glorot(rng, cfg.emb_dim, cfg.vocab_size));
  fwd_ = nn::GRULayer(ps, rng, prefix + ".fwd", cfg.emb_dim, cfg.enc_units);
  bwd_ = nn::GRULayer(ps, rng, prefix + ".bwd", cfg.emb_dim, cfg.enc_units);
  key_proj_ = nn::Linear(ps, rng, prefix + ".key", 2 * cfg.enc_units, cfg.att_dim);
}

TextEncoder::Memory TextEncoder::encode(Tape& t, const nn::ParamStore& ps,
                                        const std::vector<std::vector<int>>& tokens) const {
  int b_cols = int(tokens.size());
  require(b_cols >= 1, "text encoder needs at least one sequence");
  int l_max = 0;
  for (const auto& seq : tokens) {
    check(!seq.empty(), ErrorCategory::Data, "zero-length token sequence");
    for (int tok : seq)
      check(tok >= 0 && tok < cfg_.vocab_size, ErrorCategory::Data, "token id out of range");
    l_max = std::max(l_max, int(seq.size()));
  }

  Memory mem;
  mem.l_max = l_max;
  mem.b_cols = b_cols;
  mem.mask = Mat::Zero(l_max, b_cols);
  for (int b = 0; b < b_cols; ++b)
    for (int j = 0; j < int(tokens[b].size()); ++j) mem.mask(j, b) = 1;

  Var emb = t.param(ps, emb_);
  std::vector<Var> embedded(l_max);
  for (int j = 0; j < l_max; ++j) {
    std::vector<int> ids(b_cols);
    for (int b = 0; b < b_cols; ++b) ids[b] = j < int(tokens[b].size()) ? tokens[b][j] : 0;
    embedded[j] = gather_cols(emb, ids);
  }

  std::vector<Var> fwd_states(l_max), bwd_states(l_max);
  Var hf = t.constant(Mat::Zero(cfg_.enc_units, b_cols));
  for (int j = 0; j < l_max; ++j) {
    Row m = mem.mask.row(j);
    hf = fwd_.step(t, ps, embedded[j], hf, false, &m);
    fwd_states[j] = hf;
  }
  Var hb = t.constant(Mat::Zero(cfg_.enc_units, b_cols));
  for (int j = l_max - 1; j >= 0; --j) {
    Row m = mem.mask.row(j);
    hb = bwd_.step(t, ps, embedded[j], hb, false, &m);
    bwd_states[j] = hb;
  }

  std::vector<Var> blocks(l_max);
  for (int j = 0; j < l_max; ++j) blocks[j] = concat_rows({fwd_states[j], bwd_states[j]});
  mem.memory = hstack(blocks);
  mem.keys = key_proj_.apply(t, ps, mem.memory);
  return mem;
}

// ---- attention decoder --------------------------------------------------------

AttnDecoder::AttnDecoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg, const std::string& prefix)
    : cfg_(cfg) {
  int d_mem = 2 * cfg.enc_units;
  int in_dim = cfg.frame_dim + d_mem + (cfg.per_step_conditioning ? cfg.d_cond : 0);
  init_proj_ = nn::Linear(ps, rng, prefix + ".init", cfg.d_cond, cfg.dec_units);
  // conditioning arrives as [r | z]; damping the z block at initialization
  // biases the early optimization toward reading the speaker vector (the
  // stochastic z side catches up through training)
  if (cfg.init_z_damping != 1.0 && cfg.d_style > 0 && cfg.d_style < cfg.d_cond) {
    Mat& w = ps.value(init_proj_.w);
    w.rightCols(cfg.d_style) *= cfg.init_z_damping;
  }
  cell_ = nn::GRULayer(ps, rng, prefix + ".gru", in_dim, cfg.dec_units);
  query_proj_ = nn::Linear(ps, rng, prefix + ".query", cfg.dec_units, cfg.att_dim);
  v_att_ = ps.add(prefix + ".v", nn::glorot(rng, cfg.att_dim, 1));
  out_proj_ = nn::Linear(ps, rng, prefix + ".out", cfg.dec_units + d_mem, cfg.frame_dim + 1);
}

BatchedDecode AttnDecoder::decode(Tape& t, const nn::ParamStore& ps, const TextEncoder::Memory& mem,
                                  Var cond, DecodeMode mode, const std::vector<Mat>* teacher,
                                  std::vector<int> lengths, int max_frames) const {
  int b_cols = mem.b_cols;
  check(cond.rows() == cfg_.d_cond, ErrorCategory::Config,
        "conditioning vector dimension " + std::to_string(cond.rows()) + " does not match configured " +
            std::to_string(cfg_.d_cond));
  require(cond.cols() == b_cols, "conditioning batch width");

  int total_steps = 0;
  if (mode == DecodeMode::free_running) {
    check(max_frames >= 1, ErrorCategory::Config, "max_frames must be >= 1");
    total_steps = max_frames;
  } else {
    require(lengths.size() == size_t(b_cols), "lengths per column required");
    for (int len : lengths) {
      require(len >= 1, "decode length must be >= 1");
      total_steps = std::max(total_steps, len);
    }
    if (mode == DecodeMode::teacher_forced)
      require(teacher != nullptr && teacher->size() >= size_t(total_steps), "teacher frames required");
  }

  BatchedDecode out;
  out.lengths = (mode == DecodeMode::free_running) ? std::vector<int>(b_cols, 0) : lengths;

  Var h = tanh_(init_proj_.apply(t, ps, cond));
  Var ctx = t.constant(Mat::Zero(2 * cfg_.enc_units, b_cols));
  Var prev = t.constant(Mat::Zero(cfg_.frame_dim, b_cols));  // go frame
  std::vector<bool> stopped(b_cols, false);

  for (int step = 0; step < total_steps; ++step) {
    Row mask(b_cols);
    if (mode == DecodeMode::free_running) {
      for (int b = 0; b < b_cols; ++b) mask(b) = stopped[b] ? 0.0 : 1.0;
      if (mask.sum() == 0) break;
    } else {
      for (int b = 0; b < b_cols; ++b) mask(b) = step < lengths[b] ? 1.0 : 0.0;
    }

    std::vector<Var> in_parts{prev, ctx};
    if (cfg_.per_step_conditioning) in_parts.push_back(cond);
    Var x = concat_rows(in_parts);
    h = cell_.step(t, ps, x, h, false, &mask);

    Mat attn_vals;
    Var q = query_proj_.apply(t, ps, h);
    ctx = attend(q, mem.keys, mem.memory, t.param(ps, v_att_), mem.mask, &attn_vals);
    out.attention.push_back(std::move(attn_vals));

    Var hc = concat_rows({h, ctx});
    Var joint = out_proj_.apply(t, ps, hc);
    Var frame = slice_rows(joint, 0, cfg_.frame_dim);
    Var stop = slice_rows(joint, cfg_.frame_dim, 1);
    out.frames.push_back(frame);
    out.stop_logits.push_back(stop);

    if (mode == DecodeMode::teacher_forced) {
      Mat next = (*teacher)[step];
      prev = t.constant(next);
    } else {
      prev = clamp_sym(frame, cfg_.feedback_clamp);
    }

    if (mode == DecodeMode::free_running) {
      const Mat& sv = stop.val();
      for (int b = 0; b < b_cols; ++b) {
        if (stopped[b]) continue;
        out.lengths[b] = step + 1;
        if (1.0 / (1.0 + std::exp(-sv(0, b))) > 0.5) stopped[b] = true;
      }
    }
  }
  return out;
}

// ---- module assembly ----------------------------------------------------------

SpectrogramDecoder::SpectrogramDecoder(nn::ParamStore& ps, Rng& rng, const DecoderConfig& cfg_in)
    : cfg(cfg_in) {
  cfg.validate();
  text = TextEncoder(ps, rng, cfg, "dec.text");
  attn = AttnDecoder(ps, rng, cfg, "dec.attn");
}

// ---- value-level ops ------------------------------------------------------------

namespace {

DecoderOutput extract(const BatchedDecode& d, int col, int len, int f_dim, int l_max) {
  DecoderOutput out;
  out.frames_hat.resize(len, f_dim);
  out.stop_logits.resize(len);
  out.attention.resize(len, l_max);
  for (int i = 0; i < len; ++i) {
    out.frames_hat.row(i) = d.frames[i].val().col(col).transpose();
    out.stop_logits(i) = d.stop_logits[i].val()(0, col);
    out.attention.row(i) = d.attention[i].col(col).transpose();
  }
  return out;
}

}  // namespace

DecoderOutput decode_teacher_forced(const SpectrogramDecoder& dec, const nn::ParamStore& ps,
                                    const std::vector<int>& tokens, const Col& cond, const Mat& frames) {
  check(!tokens.empty(), ErrorCategory::Data, "zero-length token sequence");
  check(frames.rows() >= 1, ErrorCategory::Data, "empty target frames");
  check(int(frames.cols()) == dec.cfg.frame_dim, ErrorCategory::Data, "frame dim mismatch");
  check(all_finite(frames), ErrorCategory::Data, "non-finite frames");
  Tape t;
  auto mem = dec.text.encode(t, ps, {tokens});
  int t_len = int(frames.rows());
  // teacher input at step i is ground-truth frame i-1 (go frame at i = 0)
  std::vector<Mat> teacher(t_len);
  teacher[0] = Mat::Zero(dec.cfg.frame_dim, 1);
  for (int i = 1; i < t_len; ++i) teacher[i] = frames.row(i - 1).transpose();
  Var c = t.constant(cond);
  auto out = dec.attn.decode(t, ps, mem, c, DecodeMode::teacher_forced, &teacher, {t_len}, t_len);
  return extract(out, 0, t_len, dec.cfg.frame_dim, mem.l_max);
}

DecoderOutput decode_free_running(const SpectrogramDecoder& dec, const nn::ParamStore& ps,
                                  const std::vector<int>& tokens, const Col& cond, int max_frames) {
  check(!tokens.empty(), ErrorCategory::Data, "zero-length token sequence");
  check(max_frames >= 1, ErrorCategory::Config, "max_frames must be >= 1");
  Tape t;
  auto mem = dec.text.encode(t, ps, {tokens});
  Var c = t.constant(cond);
  auto out = dec.attn.decode(t, ps, mem, c, DecodeMode::free_running, nullptr, {}, max_frames);
  return extract(out, 0, out.lengths[0], dec.cfg.frame_dim, mem.l_max);
}

double nll_gauss(const Mat& frames_hat, const Mat& frames) {
  check(frames_hat.rows() == frames.rows() && frames_hat.cols() == frames.cols(), ErrorCategory::Data,
        "nll: shape mismatch");
  return 0.5 * (frames_hat - frames).squaredNorm();
}

double nll(const Mat& frames_hat, const Col& stop_logits, const Mat& frames, const Col& stop_targets,
           double stop_pos_weight) {
  check(stop_logits.size() == frames_hat.rows() && stop_targets.size() == frames_hat.rows(),
        ErrorCategory::Data, "nll: stop shape mismatch");
  double loss = nll_gauss(frames_hat, frames);
  for (int i = 0; i < stop_logits.size(); ++i) {
    double x = stop_logits(i);
    double t = stop_targets(i);
    double w = t > 0.5 ? stop_pos_weight : 1.0;
    loss += w * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - t * x);
  }
  check(std::isfinite(loss), ErrorCategory::Numeric, "nll is not finite");
  return loss;
}

}  // namespace stx::decoder
