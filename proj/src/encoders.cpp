#include "stx/encoders.hpp"

#include <cmath>

namespace stx::encoders {

using namespace stx::ad;

void EncoderConfig::validate() const {
  check(d_z >= 1 && d_r >= 1 && d_h >= 1, ErrorCategory::Config, "encoder dims must be positive");
  check(conv_layers >= 1 && gru_units >= 1 && flow_steps >= 0 && speaker_layers >= 1, ErrorCategory::Config,
        "encoder layer counts must be positive");
  check(made_hidden >= 1 && speaker_hidden >= 1 && speaker_proj >= 1, ErrorCategory::Config,
        "encoder hidden sizes must be positive");
  check(delta_floor > 0, ErrorCategory::Config, "delta floor must be positive");
  int halvings = (conv_layers + 1) / 2;
  check(frame_dim >= (1 << halvings), ErrorCategory::Config,
        "conv stack would halve the frequency axis below one bin");
}

int EncoderConfig::min_frames() const { return 1 << ((conv_layers + 1) / 2); }

uint64_t EncoderConfig::trunk_hash() const {
  std::string key = std::to_string(frame_dim) + "/" + std::to_string(conv_layers) + "/" +
                    std::to_string(conv_base_channels) + "/" + std::to_string(gru_units);
  return fnv1a(key);
}

// ---- reference encoder -------------------------------------------------------

ReferenceEncoder::ReferenceEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg,
                                   const std::string& prefix)
    : cfg_(cfg) {
  cfg.validate();
  int c_in = 1;
  for (int l = 0; l < cfg.conv_layers; ++l) {
    int c_out = cfg.conv_base_channels << std::min(2, l / 2);
    int stride = (l % 2 == 0) ? 2 : 1;  // stride 2 on alternating layers
    convs_.emplace_back(ps, rng, prefix + ".conv" + std::to_string(l), c_in, c_out, stride);
    c_in = c_out;
  }
  // after the stack the frequency axis has frame_dim / 2^halvings bins
  int halvings = (cfg.conv_layers + 1) / 2;
  int freq_bins = cfg.frame_dim >> halvings;
  gru_ = nn::GRULayer(ps, rng, prefix + ".gru", c_in * freq_bins, cfg.gru_units);
  mu_head_ = nn::Linear(ps, rng, prefix + ".mu", cfg.gru_units, cfg.d_z, /*zero_init=*/true);
  delta_head_ = nn::Linear(ps, rng, prefix + ".delta", cfg.gru_units, cfg.d_z, /*zero_init=*/true);
  ps.value(delta_head_.b).setConstant(cfg.delta_bias_init);
  h_head_ = nn::Linear(ps, rng, prefix + ".h", cfg.gru_units, cfg.d_h);
}

Var ReferenceEncoder::trunk(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs,
                            bool frozen) const {
  require(!inputs.empty(), "reference encoder needs at least one input");
  std::vector<Var> finals;
  finals.reserve(inputs.size());
  for (const FrameInput& in : inputs) {
    int t_len = in.len;
    check(t_len >= cfg_.min_frames(), ErrorCategory::Data,
          "utterance too short for the conv stack: " + std::to_string(t_len) + " < " +
              std::to_string(cfg_.min_frames()) + " frames");
    Var x;
    if (in.constant) {
      check(all_finite(*in.constant), ErrorCategory::Data, "non-finite values in encoder input");
      check(int(in.constant->cols()) == cfg_.frame_dim, ErrorCategory::Data,
            "encoder input frame dim mismatch");
      // conv layout (1, T*F), time on the H axis
      Mat flat(1, t_len * cfg_.frame_dim);
      for (int i = 0; i < t_len; ++i)
        flat.block(0, i * cfg_.frame_dim, 1, cfg_.frame_dim) = in.constant->row(i);
      x = t.constant(std::move(flat));
    } else {
      x = gather_frames(*in.frame_vars, in.col, t_len);
    }
    int h = t_len, w = cfg_.frame_dim;
    for (const auto& conv : convs_) {
      int oh = 0, ow = 0;
      x = conv.apply(t, ps, x, h, w, &oh, &ow, frozen);
      x = leaky_relu(x);
      h = oh;
      w = ow;
    }
    // fold (C, h*w) into a GRU input sequence over the reduced time axis:
    // step y sees the w frequency bins of all channels, flattened to (C*w, 1).
    // The summary is the mean over GRU states, which keeps short utterances
    // and early frames visible.
    Var state = t.constant(Mat::Zero(cfg_.gru_units, 1));
    Var pooled;
    for (int y = 0; y < h; ++y) {
      Var step_block = slice_cols(x, y * w, w);  // (C, w)
      std::vector<Var> cols;
      cols.reserve(w);
      for (int j = 0; j < w; ++j) cols.push_back(slice_cols(step_block, j, 1));
      state = gru_.step(t, ps, concat_rows(cols), state, frozen);
      pooled = y == 0 ? state : add(pooled, state);
    }
    finals.push_back(scale(pooled, 1.0 / double(h)));
  }
  return finals.size() == 1 ? finals[0] : hstack(finals);
}

ReferenceEncoder::Heads ReferenceEncoder::encode(Tape& t, const nn::ParamStore& ps,
                                                 const std::vector<FrameInput>& inputs, bool frozen) const {
  Var final_state = trunk(t, ps, inputs, frozen);
  Heads heads;
  auto head = [&](const nn::Linear& lin) {
    return frozen ? lin.apply_frozen(t, ps, final_state) : lin.apply(t, ps, final_state);
  };
  heads.mu = head(mu_head_);
  heads.delta = add_scalar(ad::softplus(head(delta_head_)), cfg_.delta_floor);
  heads.h = head(h_head_);
  return heads;
}

// ---- MADE conditioner ----------------------------------------------------------

MadeConditioner::MadeConditioner(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg,
                                 const std::string& prefix, const std::vector<int>& ordering)
    : ordering_(ordering) {
  int d = cfg.d_z, hid = cfg.made_hidden;
  // degree of input dim = 1 + its position in the ordering
  std::vector<int> deg_in(d);
  for (int pos = 0; pos < d; ++pos) deg_in[ordering[pos]] = pos + 1;
  std::vector<int> deg_hid(hid);
  for (int k = 0; k < hid; ++k) deg_hid[k] = d > 1 ? 1 + (k % (d - 1)) : 0;

  mask_in_ = Mat::Zero(hid, d);
  for (int k = 0; k < hid; ++k)
    for (int i = 0; i < d; ++i)
      if (deg_hid[k] >= deg_in[i] && d > 1) mask_in_(k, i) = 1;
  mask_out_ = Mat::Zero(d, hid);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < hid; ++k)
      if (deg_in[i] > deg_hid[k] && d > 1) mask_out_(i, k) = 1;  // strict

  w_z_ = ps.add(prefix + ".wz", nn::glorot(rng, hid, d));
  w_h_ = ps.add(prefix + ".wh", nn::glorot(rng, hid, cfg.d_h));
  b_ = ps.add(prefix + ".b", Mat::Zero(hid, 1));
  va_ = ps.add(prefix + ".va", nn::glorot(rng, d, hid));
  ua_ = ps.add(prefix + ".ua", Mat::Zero(d, cfg.d_h));
  ca_ = ps.add(prefix + ".ca", Mat::Zero(d, 1));
  vm_ = ps.add(prefix + ".vm", nn::glorot(rng, d, hid));
  um_ = ps.add(prefix + ".um", Mat::Zero(d, cfg.d_h));
  cm_ = ps.add(prefix + ".cm", Mat::Zero(d, 1));
}

MadeConditioner::Out MadeConditioner::apply(Tape& t, const nn::ParamStore& ps, Var z, Var h) const {
  Var pre = add(matmul_masked(t.param(ps, w_z_), mask_in_, z), matmul(t.param(ps, w_h_), h));
  Var hid = tanh_(add_colvec(pre, t.param(ps, b_)));
  Out out;
  out.a = add_colvec(add(matmul_masked(t.param(ps, va_), mask_out_, hid), matmul(t.param(ps, ua_), h)),
                     t.param(ps, ca_));
  out.m = add_colvec(add(matmul_masked(t.param(ps, vm_), mask_out_, hid), matmul(t.param(ps, um_), h)),
                     t.param(ps, cm_));
  return out;
}

void MadeConditioner::eval(const nn::ParamStore& ps, const Col& z, const Col& h, Col& a, Col& m) const {
  Col hid = (ps.value(w_z_).cwiseProduct(mask_in_) * z + ps.value(w_h_) * h + ps.value(b_).col(0))
                .array()
                .tanh();
  a = ps.value(va_).cwiseProduct(mask_out_) * hid + ps.value(ua_) * h + ps.value(ca_).col(0);
  m = ps.value(vm_).cwiseProduct(mask_out_) * hid + ps.value(um_) * h + ps.value(cm_).col(0);
}

// ---- IAF flow -------------------------------------------------------------------

IafFlow::IafFlow(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg, const std::string& prefix)
    : d_z_(cfg.d_z) {
  for (int k = 0; k < cfg.flow_steps; ++k) {
    std::vector<int> ordering(cfg.d_z);
    for (int i = 0; i < cfg.d_z; ++i) ordering[i] = (k % 2 == 0) ? i : cfg.d_z - 1 - i;
    conditioners_.emplace_back(ps, rng, cfg, prefix + ".step" + std::to_string(k), ordering);
  }
}

IafFlow::Out IafFlow::forward(Tape& t, const nn::ParamStore& ps, Var z0, Var h) const {
  Out out;
  Var z = z0;
  for (const auto& cond : conditioners_) {
    auto cm = cond.apply(t, ps, z, h);
    Var s = ad::sigmoid(cm.a);
    Var one_minus_s = add_scalar(neg(s), 1.0);
    z = add(mul(s, z), mul(one_minus_s, cm.m));
    // log det = sum_d log s_d; log sigmoid for stability
    out.log_dets.push_back(col_sums(log_sigmoid(cm.a)));
  }
  out.zK = z;
  return out;
}

Col IafFlow::invert(const nn::ParamStore& ps, const Col& zK, const Col& h) const {
  Col z = zK;
  for (int k = int(conditioners_.size()) - 1; k >= 0; --k) {
    const auto& cond = conditioners_[k];
    const auto& ordering = cond.ordering();
    Col prev = Col::Zero(d_z_);
    // solve in the autoregressive order: position d depends only on earlier
    // positions of prev, which are already known
    for (int pos = 0; pos < d_z_; ++pos) {
      int dim = ordering[pos];
      Col a, m;
      cond.eval(ps, prev, h, a, m);
      double s = 1.0 / (1.0 + std::exp(-a(dim)));
      prev(dim) = (z(dim) - (1.0 - s) * m(dim)) / s;
    }
    z = prev;
  }
  return z;
}

// ---- speaker encoder ---------------------------------------------------------------

SpeakerEncoder::SpeakerEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg,
                               const std::string& prefix)
    : cfg_(cfg) {
  int in = cfg.frame_dim;
  for (int l = 0; l < cfg.speaker_layers; ++l) {
    layers_.emplace_back(ps, rng, prefix + ".lstm" + std::to_string(l), in, cfg.speaker_hidden,
                         cfg.speaker_proj);
    in = cfg.speaker_proj;
  }
  out_ = nn::Linear(ps, rng, prefix + ".out", cfg.speaker_proj, cfg.d_r);
}

Var SpeakerEncoder::run(Tape& t, const nn::ParamStore& ps, const std::vector<Var>& steps,
                        const std::vector<Row>& masks) const {
  int b_cols = steps[0].cols();
  std::vector<Var> p(layers_.size()), c(layers_.size());
  for (size_t l = 0; l < layers_.size(); ++l) {
    p[l] = t.constant(Mat::Zero(cfg_.speaker_proj, b_cols));
    c[l] = t.constant(Mat::Zero(cfg_.speaker_hidden, b_cols));
  }
  for (size_t i = 0; i < steps.size(); ++i) {
    Var x = steps[i];
    for (size_t l = 0; l < layers_.size(); ++l) {
      // padded columns keep their previous state (mask inside the cell)
      Var stacked = layers_[l].step(t, ps, x, p[l], c[l], &masks[i]);
      p[l] = slice_rows(stacked, 0, cfg_.speaker_proj);
      c[l] = slice_rows(stacked, cfg_.speaker_proj, cfg_.speaker_hidden);
      x = p[l];
    }
  }
  return l2_normalize_cols(out_.apply(t, ps, p.back()));
}

Var SpeakerEncoder::encode(Tape& t, const nn::ParamStore& ps, const std::vector<FrameInput>& inputs) const {
  require(!inputs.empty(), "speaker encoder needs inputs");
  int b_cols = int(inputs.size());
  int stride = std::max(1, cfg_.speaker_stride);
  int max_len = 0;
  std::vector<int> lens(b_cols);
  for (int b = 0; b < b_cols; ++b) {
    check(inputs[b].constant != nullptr, ErrorCategory::Data, "speaker encode expects constant frames");
    check(all_finite(*inputs[b].constant), ErrorCategory::Data, "non-finite values in speaker encoder input");
    lens[b] = (inputs[b].len + stride - 1) / stride;
    max_len = std::max(max_len, lens[b]);
  }
  std::vector<Var> steps;
  std::vector<Row> masks;
  for (int i = 0; i < max_len; ++i) {
    Mat x = Mat::Zero(cfg_.frame_dim, b_cols);
    Row m = Row::Zero(b_cols);
    for (int b = 0; b < b_cols; ++b) {
      if (i < lens[b]) {
        x.col(b) = inputs[b].constant->row(i * stride).transpose();
        m(b) = 1;
      }
    }
    steps.push_back(t.constant(std::move(x)));
    masks.push_back(std::move(m));
  }
  return run(t, ps, steps, masks);
}

Var SpeakerEncoder::encode_seq(Tape& t, const nn::ParamStore& ps, const std::vector<Var>& frames,
                               const std::vector<int>& lengths) const {
  require(!frames.empty(), "speaker encode_seq: empty sequence");
  int b_cols = frames[0].cols();
  int stride = std::max(1, cfg_.speaker_stride);
  std::vector<Var> steps;
  std::vector<Row> masks;
  for (size_t i = 0; i < frames.size(); i += size_t(stride)) {
    Row m = Row::Zero(b_cols);
    for (int b = 0; b < b_cols; ++b)
      if (int(i) < lengths[b]) m(b) = 1;
    if (m.sum() == 0) break;
    steps.push_back(frames[i]);
    masks.push_back(std::move(m));
  }
  return run(t, ps, steps, masks);
}

// ---- style encoder + value-level ops -------------------------------------------------

StyleEncoder::StyleEncoder(nn::ParamStore& ps, Rng& rng, const EncoderConfig& cfg)
    : reference(ps, rng, cfg, "style.ref"), flow(ps, rng, cfg, "style.iaf") {}

StylePosteriorVars StyleEncoder::sample(Tape& t, const nn::ParamStore& ps,
                                        const std::vector<FrameInput>& inputs, const Mat& epsilon,
                                        bool use_flow) const {
  auto heads = reference.encode(t, ps, inputs);
  require(epsilon.rows() == heads.mu.rows() && epsilon.cols() == heads.mu.cols(), "epsilon shape");
  StylePosteriorVars out;
  out.mu = heads.mu;
  out.delta = heads.delta;
  out.h = heads.h;
  out.z0 = add(heads.mu, mul_const(heads.delta, epsilon));

  // Gaussian log-density of z0 under (mu, delta^2): with the reparameterized
  // sample the quotient (z0-mu)/delta reduces to epsilon, but compute it
  // generally so the invariant holds for any z0.
  Var quot = div(sub(out.z0, out.mu), out.delta);
  Var log_norm = col_sums(log_(out.delta));
  int d = int(epsilon.rows());
  Var gauss = add_scalar(neg(add(scale(col_sums(square(quot)), 0.5), log_norm)),
                         -0.5 * d * std::log(2.0 * 3.14159265358979323846));

  if (use_flow && flow.steps() > 0) {
    auto fl = flow.forward(t, ps, out.z0, out.h);
    out.zK = fl.zK;
    out.log_dets = fl.log_dets;
    Var det_sum = fl.log_dets[0];
    for (size_t k = 1; k < fl.log_dets.size(); ++k) det_sum = add(det_sum, fl.log_dets[k]);
    out.log_q = sub(gauss, det_sum);
  } else {
    out.zK = out.z0;
    out.log_q = gauss;
  }
  return out;
}

namespace {

StylePosterior extract_posterior(Tape& t, const StylePosteriorVars& vars, int col) {
  StylePosterior p;
  p.mu = vars.mu.val().col(col);
  p.delta = vars.delta.val().col(col);
  p.h = vars.h.val().col(col);
  p.z0 = vars.z0.val().col(col);
  p.zK = vars.zK.val().col(col);
  for (const auto& ld : vars.log_dets) p.log_dets.push_back(ld.val()(0, col));
  p.log_q = vars.log_q.val()(0, col);
  (void)t;
  return p;
}

}  // namespace

StylePosterior encode_reference(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames) {
  Tape t;
  auto heads = enc.reference.encode(t, ps, {FrameInput::from_mat(frames)});
  StylePosterior p;
  p.mu = heads.mu.val().col(0);
  p.delta = heads.delta.val().col(0);
  p.h = heads.h.val().col(0);
  return p;
}

StylePosterior sample_style(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames, Rng& rng) {
  Tape t;
  int d_z = enc.reference.config().d_z;
  Mat eps(d_z, 1);
  for (int i = 0; i < d_z; ++i) eps(i, 0) = rng.gaussian();
  auto vars = enc.sample(t, ps, {FrameInput::from_mat(frames)}, eps);
  return extract_posterior(t, vars, 0);
}

StylePosterior style_deterministic(const StyleEncoder& enc, const nn::ParamStore& ps, const Mat& frames) {
  Tape t;
  int d_z = enc.reference.config().d_z;
  auto vars = enc.sample(t, ps, {FrameInput::from_mat(frames)}, Mat::Zero(d_z, 1));
  return extract_posterior(t, vars, 0);
}

Col encode_speaker(const SpeakerEncoder& enc, const nn::ParamStore& ps, const Mat& frames) {
  Tape t;
  Var r = enc.encode(t, ps, {FrameInput::from_mat(frames)});
  return r.val().col(0);
}

Col compute_target_style(const StyleEncoder& enc, const nn::ParamStore& ps,
                         const std::vector<const Mat*>& target_train_frames) {
  check(!target_train_frames.empty(), ErrorCategory::Data,
        "cannot compute the target style from an empty target set");
  int d_z = enc.reference.config().d_z;
  Col z_star = Col::Zero(d_z);
  // batched in groups to bound tape size
  const int group = 8;
  for (size_t i = 0; i < target_train_frames.size(); i += group) {
    Tape t;
    std::vector<FrameInput> inputs;
    for (size_t j = i; j < std::min(target_train_frames.size(), i + group); ++j)
      inputs.push_back(FrameInput::from_mat(*target_train_frames[j]));
    auto vars = enc.sample(t, ps, inputs, Mat::Zero(d_z, int(inputs.size())));
    for (int b = 0; b < int(inputs.size()); ++b) z_star += vars.zK.val().col(b);
  }
  return z_star / double(target_train_frames.size());
}

double posterior_log_q(const Col& z0, const Col& mu, const Col& delta, const std::vector<double>& log_dets) {
  double d = double(z0.size());
  Col quot = (z0 - mu).cwiseQuotient(delta);
  double gauss = -0.5 * quot.squaredNorm() - delta.array().log().sum() -
                 0.5 * d * std::log(2.0 * 3.14159265358979323846);
  double det_sum = 0;
  for (double ld : log_dets) det_sum += ld;
  return gauss - det_sum;
}

}  // namespace stx::encoders
