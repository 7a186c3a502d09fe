#include "stx/objectives.hpp"

#include <cmath>

namespace stx::objectives {

using namespace stx::ad;
using adversaries::kProbEps;
using decoder::BatchedDecode;
using decoder::DecodeMode;
using encoders::FrameInput;

double total_of(const LossWeights& w, double l_rec, double l_adv_g, double l_dis, double l_cyc) {
  w.validate();
  return w.alpha * l_rec + w.beta * l_adv_g + w.gamma * l_dis + w.lambda * l_cyc;
}

LossBreakdown make_breakdown(const LossWeights& w, double l_rec, double l_adv_d, double l_adv_g,
                             double l_dis, double l_cyc) {
  LossBreakdown b;
  b.weights = w;
  b.l_rec = l_rec;
  b.l_adv_d = l_adv_d;
  b.l_adv_g = l_adv_g;
  b.l_dis = l_dis;
  b.l_cyc = l_cyc;
  b.total = total_of(w, l_rec, l_adv_g, l_dis, l_cyc);
  return b;
}

double adv_d_from_probs(const std::vector<double>& p_fake, const std::vector<double>& p_real, double eps) {
  require(!p_fake.empty() && !p_real.empty(), "adv_d needs both populations");
  double fake = 0, real = 0;
  for (double p : p_fake) fake += -std::log(std::clamp(1.0 - p, eps, 1.0 - eps));
  for (double p : p_real) real += -std::log(std::clamp(p, eps, 1.0 - eps));
  return fake / double(p_fake.size()) + real / double(p_real.size());
}

double adv_g_from_probs(const std::vector<double>& p_fake, double eps) {
  require(!p_fake.empty(), "adv_g needs a population");
  double sum = 0;
  for (double p : p_fake) sum += -std::log(std::clamp(p, eps, 1.0 - eps));
  return sum / double(p_fake.size());
}

double style_distortion_from(const std::vector<double>& p, const std::vector<double>& d_sq) {
  require(p.size() == d_sq.size() && !p.empty(), "style distortion inputs");
  double sum = 0;
  for (size_t i = 0; i < p.size(); ++i) sum += p[i] * d_sq[i];
  return sum / double(p.size());
}

// ---- shard forward ------------------------------------------------------------

namespace {

// Teacher inputs for a teacher-forced pass: step i feeds ground-truth frame
// i-1 (zeros at i = 0), padded to the batch max length.
std::vector<Mat> teacher_inputs(const std::vector<BatchItem>& items, int frame_dim) {
  int t_max = 0;
  for (const auto& it : items) t_max = std::max(t_max, int(it.frames->rows()));
  std::vector<Mat> teacher(t_max, Mat::Zero(frame_dim, int(items.size())));
  for (int b = 0; b < int(items.size()); ++b) {
    const Mat& f = *items[b].frames;
    for (int i = 1; i < int(f.rows()); ++i) teacher[i].col(b) = f.row(i - 1).transpose();
  }
  return teacher;
}

struct NllTargets {
  std::vector<Mat> frames;       // per step, F x B
  std::vector<Row> masks;        // per step
  std::vector<Row> stop_targets; // per step
  std::vector<Row> stop_weights; // per step (0 masks out)
};

NllTargets nll_targets(const std::vector<BatchItem>& items, int frame_dim, double stop_pos_weight) {
  int b_cols = int(items.size());
  int t_max = 0;
  for (const auto& it : items) t_max = std::max(t_max, int(it.frames->rows()));
  NllTargets out;
  for (int i = 0; i < t_max; ++i) {
    Mat f = Mat::Zero(frame_dim, b_cols);
    Row m = Row::Zero(b_cols), st = Row::Zero(b_cols), sw = Row::Zero(b_cols);
    for (int b = 0; b < b_cols; ++b) {
      int len = int(items[b].frames->rows());
      if (i < len) {
        f.col(b) = items[b].frames->row(i).transpose();
        m(b) = 1;
        st(b) = (i == len - 1) ? 1.0 : 0.0;
        sw(b) = (i == len - 1) ? stop_pos_weight : 1.0;
      }
    }
    out.frames.push_back(std::move(f));
    out.masks.push_back(std::move(m));
    out.stop_targets.push_back(std::move(st));
    out.stop_weights.push_back(std::move(sw));
  }
  return out;
}

Var nll_sum(Tape& t, const BatchedDecode& decode, const NllTargets& targets) {
  size_t steps = std::min(decode.frames.size(), targets.frames.size());
  std::vector<Var> frames(decode.frames.begin(), decode.frames.begin() + steps);
  std::vector<Mat> tg(targets.frames.begin(), targets.frames.begin() + steps);
  std::vector<Row> mk(targets.masks.begin(), targets.masks.begin() + steps);
  Var gauss = gauss_nll_cols(t, frames, tg, mk);
  std::vector<Var> logits(decode.stop_logits.begin(), decode.stop_logits.begin() + steps);
  std::vector<Row> st(targets.stop_targets.begin(), targets.stop_targets.begin() + steps);
  std::vector<Row> sw(targets.stop_weights.begin(), targets.stop_weights.begin() + steps);
  Var stop = stop_bce_cols(t, logits, st, sw);
  return sum(add(gauss, stop));
}

std::vector<std::vector<int>> token_lists(const std::vector<BatchItem>& items) {
  std::vector<std::vector<int>> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.utt->tokens);
  return out;
}

std::vector<int> length_list(const std::vector<BatchItem>& items) {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(int(it.frames->rows()));
  return out;
}

}  // namespace

Pieces build_pieces(Tape& t, const system::System& sys, const Batch& batch, const Col& z_star,
                    const Mat& eps_src, const TrainOptions& opts) {
  require(!batch.source.empty() && !batch.target.empty(), "batch must pair both domains");
  const int d_z = sys.cfg.enc.d_z;
  const int b_src = int(batch.source.size());
  const int b_tgt = int(batch.target.size());
  require(eps_src.rows() == d_z && eps_src.cols() == b_src, "eps shape");

  Pieces p;
  p.src_lengths = length_list(batch.source);
  p.tgt_lengths = length_list(batch.target);

  std::vector<FrameInput> src_inputs, tgt_inputs;
  for (const auto& it : batch.source) src_inputs.push_back(FrameInput::from_mat(*it.frames));
  for (const auto& it : batch.target) tgt_inputs.push_back(FrameInput::from_mat(*it.frames));

  p.post_src = sys.style_enc.sample(t, sys.gen, src_inputs, eps_src, opts.use_flow);
  p.r_src = sys.speaker_enc.encode(t, sys.gen, src_inputs);
  p.r_tgt = sys.speaker_enc.encode(t, sys.gen, tgt_inputs);

  p.mem_src = sys.dec.text.encode(t, sys.gen, token_lists(batch.source));
  p.mem_tgt = sys.dec.text.encode(t, sys.gen, token_lists(batch.target));

  Mat zs_src(d_z, b_src), zs_tgt(d_z, b_tgt);
  for (int b = 0; b < b_src; ++b) zs_src.col(b) = z_star;
  for (int b = 0; b < b_tgt; ++b) zs_tgt.col(b) = z_star;
  p.z_star_block_src = t.constant(zs_src);
  p.z_star_block_tgt = t.constant(zs_tgt);

  Var cond_rec_src = concat_rows({p.r_src, p.post_src.zK});
  Var cond_rec_tgt = concat_rows({p.r_tgt, p.z_star_block_tgt});
  Var cond_trans_src = concat_rows({p.r_src, p.z_star_block_src});

  auto src_teacher = teacher_inputs(batch.source, sys.cfg.dec.frame_dim);
  auto tgt_teacher = teacher_inputs(batch.target, sys.cfg.dec.frame_dim);
  p.recon_src = sys.dec.attn.decode(t, sys.gen, p.mem_src, cond_rec_src, DecodeMode::teacher_forced,
                                    &src_teacher, p.src_lengths, 0);
  p.recon_tgt = sys.dec.attn.decode(t, sys.gen, p.mem_tgt, cond_rec_tgt, DecodeMode::teacher_forced,
                                    &tgt_teacher, p.tgt_lengths, 0);

  DecodeMode trans_mode = opts.cycle_mode == TrainOptions::CycleMode::teacher_length
                              ? DecodeMode::teacher_length
                              : DecodeMode::free_running;
  p.trans_src = sys.dec.attn.decode(t, sys.gen, p.mem_src, cond_trans_src, trans_mode, nullptr,
                                    p.src_lengths, opts.max_frames);
  p.trans_tgt = sys.dec.attn.decode(t, sys.gen, p.mem_tgt, cond_rec_tgt, trans_mode, nullptr,
                                    p.tgt_lengths, opts.max_frames);
  return p;
}

GeneratorTerms build_generator_terms(Tape& t, const system::System& sys, const Batch& batch,
                                     const Col& z_star, const Mat& eps_src,
                                     const std::vector<double>& p_ds_src, const TrainOptions& opts) {
  require(p_ds_src.size() == batch.source.size(), "style probabilities per source item");
  GeneratorTerms g;
  g.pieces = build_pieces(t, sys, batch, z_star, eps_src, opts);
  Pieces& p = g.pieces;
  const int frame_dim = sys.cfg.dec.frame_dim;
  const double spw = sys.cfg.dec.stop_pos_weight;

  // Eq. 1: teacher-forced reconstruction, target conditioned on z*
  auto src_targets = nll_targets(batch.source, frame_dim, spw);
  auto tgt_targets = nll_targets(batch.target, frame_dim, spw);
  g.rec_src = nll_sum(t, p.recon_src, src_targets);
  g.rec_tgt = nll_sum(t, p.recon_tgt, tgt_targets);

  // Eq. 3: p_Ds(x_s) * |z_s - z*|^2 with z* detached (constant block)
  Var diff = sub(p.post_src.zK, p.z_star_block_src);
  Var d_sq = col_sums(square(diff));  // 1 x B
  Mat pds(1, int(p_ds_src.size()));
  for (size_t i = 0; i < p_ds_src.size(); ++i) pds(0, int(i)) = p_ds_src[i];
  g.dis = weighted_sum(d_sq, pds);

  // Eq. 2 generator view: -log D(x~_s), non-saturating; D parameters enter
  // as constants so no gradient reaches them here
  std::vector<Var> advg_parts;
  for (int b = 0; b < int(batch.source.size()); ++b) {
    FrameInput in = FrameInput::from_vars(p.trans_src.frames, b, p.trans_src.lengths[b]);
    Var logit = sys.disc_net.logit(t, sys.disc, in, /*frozen=*/true);
    Var prob = clamp_prob(ad::sigmoid(logit), kProbEps);
    advg_parts.push_back(neg(log_(prob)));
  }
  g.adv_g = sum(advg_parts.size() == 1 ? advg_parts[0] : hstack(advg_parts));

  // Eq. 4: re-encode the transfers for speaker identity, decode teacher-forced
  std::vector<Var> cyc_src_frames = p.trans_src.frames;
  std::vector<Var> cyc_tgt_frames = p.trans_tgt.frames;
  if (opts.cycle_stop_gradient) {
    for (auto& v : cyc_src_frames) v = detach(v);
    for (auto& v : cyc_tgt_frames) v = detach(v);
  }
  Var r_cyc_src = sys.speaker_enc.encode_seq(t, sys.gen, cyc_src_frames, p.trans_src.lengths);
  Var r_cyc_tgt = sys.speaker_enc.encode_seq(t, sys.gen, cyc_tgt_frames, p.trans_tgt.lengths);
  Var cond_cyc_src = concat_rows({r_cyc_src, p.post_src.zK});
  Var cond_cyc_tgt = concat_rows({r_cyc_tgt, p.z_star_block_tgt});
  auto src_teacher = teacher_inputs(batch.source, frame_dim);
  auto tgt_teacher = teacher_inputs(batch.target, frame_dim);
  auto cyc_dec_src = sys.dec.attn.decode(t, sys.gen, p.mem_src, cond_cyc_src, DecodeMode::teacher_forced,
                                         &src_teacher, p.src_lengths, 0);
  auto cyc_dec_tgt = sys.dec.attn.decode(t, sys.gen, p.mem_tgt, cond_cyc_tgt, DecodeMode::teacher_forced,
                                         &tgt_teacher, p.tgt_lengths, 0);
  g.cyc_src = nll_sum(t, cyc_dec_src, src_targets);
  g.cyc_tgt = nll_sum(t, cyc_dec_tgt, tgt_targets);

  // optional KL-to-standard-normal pieces
  g.log_q_sum = sum(p.post_src.log_q);
  g.zk_sq_sum = sum(col_sums(square(p.post_src.zK)));
  return g;
}

std::pair<Var, Var> build_adv_d_sums(Tape& t, const system::System& sys, const std::vector<Mat>& fake,
                                     const std::vector<Mat>& real) {
  require(!fake.empty() && !real.empty(), "adv_d needs both populations");
  std::vector<Var> fake_parts, real_parts;
  for (const Mat& f : fake) {
    Var logit = sys.disc_net.logit(t, sys.disc, FrameInput::from_mat(f), /*frozen=*/false);
    // -log(1 - D) = -log(sigmoid(-logit))
    Var prob_not = clamp_prob(ad::sigmoid(neg(logit)), kProbEps);
    fake_parts.push_back(neg(log_(prob_not)));
  }
  for (const Mat& r : real) {
    Var logit = sys.disc_net.logit(t, sys.disc, FrameInput::from_mat(r), /*frozen=*/false);
    Var prob = clamp_prob(ad::sigmoid(logit), kProbEps);
    real_parts.push_back(neg(log_(prob)));
  }
  Var fake_sum = fake_parts.size() == 1 ? sum(fake_parts[0]) : sum(hstack(fake_parts));
  Var real_sum = real_parts.size() == 1 ? sum(real_parts[0]) : sum(hstack(real_parts));
  return {fake_sum, real_sum};
}

std::vector<Mat> extract_frames(const decoder::BatchedDecode& d, int frame_dim) {
  std::vector<Mat> out;
  int b_cols = d.frames.empty() ? 0 : d.frames[0].cols();
  for (int b = 0; b < b_cols; ++b) {
    int len = d.lengths[b];
    Mat f(len, frame_dim);
    for (int i = 0; i < len; ++i) f.row(i) = d.frames[i].val().col(b).transpose();
    out.push_back(std::move(f));
  }
  return out;
}

// ---- value-level wrappers ---------------------------------------------------------

namespace {

std::vector<double> ds_probs(const system::System& sys, const Batch& batch) {
  std::vector<double> p;
  for (const auto& it : batch.source) p.push_back(sys.ds.style_probability(*it.frames));
  return p;
}

}  // namespace

double reconstruction_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                           const Mat& eps_src, const TrainOptions& opts) {
  Tape t;
  auto g = build_generator_terms(t, sys, batch, z_star, eps_src,
                                 std::vector<double>(batch.source.size(), 0.0), opts);
  return g.rec_src.val()(0, 0) / double(batch.source.size()) +
         g.rec_tgt.val()(0, 0) / double(batch.target.size());
}

std::pair<double, double> adversarial_losses(const system::System& sys, const Batch& batch,
                                             const Col& z_star, const Mat& eps_src,
                                             const TrainOptions& opts) {
  Tape t;
  auto p = build_pieces(t, sys, batch, z_star, eps_src, opts);
  std::vector<double> p_fake, p_real;
  for (int b = 0; b < int(batch.source.size()); ++b) {
    FrameInput in = FrameInput::from_vars(p.trans_src.frames, b, p.trans_src.lengths[b]);
    Var logit = sys.disc_net.logit(t, sys.disc, in, true);
    p_fake.push_back(1.0 / (1.0 + std::exp(-logit.val()(0, 0))));
  }
  if (opts.adv_real_ground_truth) {
    for (const auto& it : batch.target)
      p_real.push_back(sys.disc_net.probability(sys.disc, *it.frames));
  } else {
    for (int b = 0; b < int(batch.target.size()); ++b) {
      FrameInput in = FrameInput::from_vars(p.trans_tgt.frames, b, p.trans_tgt.lengths[b]);
      Var logit = sys.disc_net.logit(t, sys.disc, in, true);
      p_real.push_back(1.0 / (1.0 + std::exp(-logit.val()(0, 0))));
    }
  }
  return {adv_d_from_probs(p_fake, p_real), adv_g_from_probs(p_fake)};
}

double style_distortion_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                             const Mat& eps_src, const TrainOptions& opts) {
  Tape t;
  auto p = build_pieces(t, sys, batch, z_star, eps_src, opts);
  std::vector<double> probs = ds_probs(sys, batch);
  std::vector<double> d_sq;
  for (int b = 0; b < int(batch.source.size()); ++b)
    d_sq.push_back((p.post_src.zK.val().col(b) - z_star).squaredNorm());
  return style_distortion_from(probs, d_sq);
}

double cycle_consistency_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                              const Mat& eps_src, const TrainOptions& opts) {
  Tape t;
  auto g = build_generator_terms(t, sys, batch, z_star, eps_src,
                                 std::vector<double>(batch.source.size(), 0.0), opts);
  return g.cyc_src.val()(0, 0) / double(batch.source.size()) +
         g.cyc_tgt.val()(0, 0) / double(batch.target.size());
}

Mat source_epsilon(int d_z, int batch, uint64_t seed, long step) {
  Mat eps(d_z, batch);
  for (int b = 0; b < batch; ++b) {
    Rng r = Rng(seed).stream(0x65707320, uint64_t(step), uint64_t(b));  // "eps "
    for (int i = 0; i < d_z; ++i) eps(i, b) = r.gaussian();
  }
  return eps;
}

}  // namespace stx::objectives
