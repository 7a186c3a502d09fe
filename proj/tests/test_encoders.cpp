#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stx/encoders.hpp"
#include "testing.hpp"

using namespace stx;
using namespace stx::encoders;
using ad::Tape;
using ad::Var;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.d_z = 3;
  cfg.d_r = 6;
  cfg.d_h = 5;
  cfg.conv_layers = 4;
  cfg.gru_units = 10;
  cfg.flow_steps = 2;
  cfg.frame_dim = 8;
  cfg.conv_base_channels = 4;
  cfg.made_hidden = 8;
  cfg.speaker_hidden = 8;
  cfg.speaker_proj = 5;
  return cfg;
}

Mat random_frames(Rng& rng, int t, int f) {
  Mat m(t, f);
  for (int j = 0; j < f; ++j)
    for (int i = 0; i < t; ++i) m(i, j) = rng.uniform(0.0, 1.5);
  return m;
}

// Zero every parameter of the flow conditioners, then set the a/m biases so
// the conditioner outputs constants.
void stub_flow(nn::ParamStore& ps, double a_bias, const Col& m_bias) {
  for (int i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry(i);
    if (e.name.find("style.iaf") == std::string::npos) continue;
    e.value.setZero();
    if (e.name.find(".ca") != std::string::npos) e.value.setConstant(a_bias);
    if (e.name.find(".cm") != std::string::npos) e.value = m_bias;
  }
}

// Numeric log|det J| of the flow map z0 -> zK at z0, via central differences.
double numeric_log_det(const StyleEncoder& enc, const nn::ParamStore& ps, const Col& z0, const Col& h) {
  int d = int(z0.size());
  Mat jac(d, d);
  double step = 1e-5;
  for (int j = 0; j < d; ++j) {
    Col zp = z0, zm = z0;
    zp(j) += step;
    zm(j) -= step;
    Tape tp;
    auto fp = enc.flow.forward(tp, ps, tp.constant(zp), tp.constant(h));
    auto fm = enc.flow.forward(tp, ps, tp.constant(zm), tp.constant(h));
    jac.col(j) = (fp.zK.val().col(0) - fm.zK.val().col(0)) / (2 * step);
  }
  return std::log(std::abs(jac.determinant()));
}

}  // namespace

TEST_CASE("all-zero frames with zero-initialized heads give mu = 0, delta = softplus(0) + floor") {
  Rng rng(5);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.delta_bias_init = 0.0;  // the example's premise: zero-initialized projection bias
  StyleEncoder enc(ps, rng, cfg);
  Mat zeros = Mat::Zero(20, cfg.frame_dim);
  auto post = encode_reference(enc, ps, zeros);
  CHECK(post.mu.norm() == 0.0);  // mu head is zero-initialized
  for (int i = 0; i < cfg.d_z; ++i)
    CHECK(post.delta(i) == doctest::Approx(std::log(2.0) + cfg.delta_floor).epsilon(1e-12));
}

TEST_CASE("non-finite frames are rejected") {
  Rng rng(5);
  nn::ParamStore ps;
  StyleEncoder enc(ps, rng, tiny_config());
  Mat bad = Mat::Zero(20, 8);
  bad(3, 3) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(encode_reference(enc, ps, bad), Error);
}

TEST_CASE("too-short utterances are rejected with an explicit error") {
  Rng rng(5);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();  // 4 conv layers -> 2 halvings -> min 4
  StyleEncoder enc(ps, rng, cfg);
  CHECK(cfg.min_frames() == 4);
  Mat two = Mat::Ones(2, cfg.frame_dim);
  CHECK_THROWS_AS(encode_reference(enc, ps, two), Error);
}

TEST_CASE("stub conditioner with s=1 makes the flow an identity") {
  Rng rng(6);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  StyleEncoder enc(ps, rng, cfg);
  stub_flow(ps, 40.0, Col::Constant(cfg.d_z, 7.0));  // s = sigmoid(40) ~ 1
  Tape t;
  Col z0(3), h(5);
  z0 << 1.5, -2.0, 0.25;
  h.setZero();
  auto out = enc.flow.forward(t, ps, t.constant(z0), t.constant(h));
  CHECK((out.zK.val().col(0) - z0).norm() < 1e-10);
  for (const auto& ld : out.log_dets) CHECK(std::abs(ld.val()(0, 0)) < 1e-10);
}

TEST_CASE("one-step stub flow: s = 0.5, m = 0, z0 = (2, -2) -> z1 = (1, -1), log det = 2 ln 0.5") {
  Rng rng(7);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.d_z = 2;
  cfg.flow_steps = 1;
  StyleEncoder enc(ps, rng, cfg);
  stub_flow(ps, 0.0, Col::Zero(2));  // a = 0 -> s = 0.5, m = 0
  Tape t;
  Col z0(2), h(5);
  z0 << 2.0, -2.0;
  h.setZero();
  auto out = enc.flow.forward(t, ps, t.constant(z0), t.constant(h));
  CHECK(out.zK.val()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out.zK.val()(1, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(out.log_dets[0].val()(0, 0) == doctest::Approx(-1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("flow log-determinant matches the numeric Jacobian oracle") {
  Rng rng(8);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.d_z = 3;
  cfg.flow_steps = 2;
  StyleEncoder enc(ps, rng, cfg);
  for (int trial = 0; trial < 10; ++trial) {
    Rng r = rng.stream(trial);
    Col z0(3), h(5);
    for (int i = 0; i < 3; ++i) z0(i) = r.gaussian();
    for (int i = 0; i < 5; ++i) h(i) = r.gaussian();
    Tape t;
    auto out = enc.flow.forward(t, ps, t.constant(z0), t.constant(h));
    double analytic = 0;
    for (const auto& ld : out.log_dets) analytic += ld.val()(0, 0);
    double numeric = numeric_log_det(enc, ps, z0, h);
    CHECK(std::abs(analytic - numeric) <= 1e-4);
  }
}

TEST_CASE("inverse autoregressive solve recovers z0") {
  Rng rng(9);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.d_z = 5;
  cfg.flow_steps = 3;
  StyleEncoder enc(ps, rng, cfg);
  for (int trial = 0; trial < 20; ++trial) {
    Rng r = rng.stream(trial + 100);
    Col z0(5), h(5);
    for (int i = 0; i < 5; ++i) z0(i) = 2.0 * r.gaussian();
    for (int i = 0; i < 5; ++i) h(i) = r.gaussian();
    Tape t;
    auto out = enc.flow.forward(t, ps, t.constant(z0), t.constant(h));
    Col rec = enc.flow.invert(ps, out.zK.val().col(0), h);
    CHECK((rec - z0).norm() < 1e-6);
  }
}

TEST_CASE("epsilon = 0 gives z0 = mu exactly") {
  Rng rng(10);
  nn::ParamStore ps;
  StyleEncoder enc(ps, rng, tiny_config());
  Mat frames = random_frames(rng, 24, 8);
  auto det = style_deterministic(enc, ps, frames);
  CHECK((det.z0 - det.mu).norm() == 0.0);
}

TEST_CASE("log_q equals the Gaussian log-density minus the log-determinants") {
  Rng rng(11);
  nn::ParamStore ps;
  StyleEncoder enc(ps, rng, tiny_config());
  Mat frames = random_frames(rng, 30, 8);
  Rng sample_rng(77);
  auto post = sample_style(enc, ps, frames, sample_rng);
  double expected = posterior_log_q(post.z0, post.mu, post.delta, post.log_dets);
  CHECK(std::abs(post.log_q - expected) < 1e-10);
  CHECK(post.log_dets.size() == 2);
  CHECK((post.delta.array() > 0).all());
}

TEST_CASE("sampling is deterministic given the rng stream") {
  Rng rng(12);
  nn::ParamStore ps;
  StyleEncoder enc(ps, rng, tiny_config());
  Mat frames = random_frames(rng, 25, 8);
  Rng r1(55), r2(55);
  auto p1 = sample_style(enc, ps, frames, r1);
  auto p2 = sample_style(enc, ps, frames, r2);
  CHECK((p1.zK - p2.zK).norm() == 0.0);
  CHECK(p1.log_q == p2.log_q);
}

TEST_CASE("pushforward of a constant-conditioner flow matches the analytic density (chi-square)") {
  // With constant (a, m) per step the flow composes to an affine map, so the
  // pushforward of N(mu, delta^2) stays Gaussian with known moments.
  Rng rng(13);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.d_z = 2;
  cfg.flow_steps = 2;
  StyleEncoder enc(ps, rng, cfg);
  double a_bias = 0.8;
  Col m_bias = Col::Constant(2, 1.5);
  stub_flow(ps, a_bias, m_bias);

  Mat frames = random_frames(rng, 20, 8);
  auto base = style_deterministic(enc, ps, frames);
  double s = 1.0 / (1.0 + std::exp(-a_bias));
  // z' = s z + (1-s) m applied twice
  double mean = base.mu(0), sd = base.delta(0);
  for (int k = 0; k < 2; ++k) {
    mean = s * mean + (1 - s) * m_bias(0);
    sd = s * sd;
  }

  const int n = 100000;
  const int bins = 40;
  std::vector<double> edges(bins + 1);
  for (int i = 0; i <= bins; ++i) edges[i] = mean + sd * (-4.0 + 8.0 * i / bins);
  std::vector<double> counts(bins + 2, 0.0);
  Rng sample_rng(991);
  for (int i = 0; i < n; ++i) {
    double z0 = base.mu(0) + base.delta(0) * sample_rng.gaussian();
    double z = z0;
    for (int k = 0; k < 2; ++k) z = s * z + (1 - s) * m_bias(0);
    int bin = 0;
    while (bin <= bins && z > edges[bin]) ++bin;
    counts[bin] += 1;  // bin 0 = below the range, bins+1 = above
  }
  auto phi = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  double chi2 = 0;
  int cells = 0;
  double prev_cdf = 0;
  for (int b = 0; b <= bins + 1; ++b) {
    double hi_cdf = (b <= bins) ? phi((edges[b] - mean) / sd) : 1.0;
    double expect = n * (hi_cdf - prev_cdf);
    prev_cdf = hi_cdf;
    if (expect < 5) continue;  // skip cells below the chi-square validity floor
    chi2 += (counts[b] - expect) * (counts[b] - expect) / expect;
    ++cells;
  }
  double p = stx::testing::chi2_sf(chi2, cells - 1);
  INFO("chi2 = ", chi2, " cells = ", cells, " p = ", p);
  CHECK(p > 0.01);
}

TEST_CASE("speaker vector has unit norm") {
  Rng rng(14);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  SpeakerEncoder enc(ps, rng, cfg, "spk");
  for (int trial = 0; trial < 5; ++trial) {
    Mat frames = random_frames(rng, 15 + 7 * trial, cfg.frame_dim);
    Col r = encode_speaker(enc, ps, frames);
    CHECK(std::abs(r.norm() - 1.0) < 1e-6);
  }
}

TEST_CASE("time-reversed frames give a different speaker vector") {
  Rng rng(15);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  SpeakerEncoder enc(ps, rng, cfg, "spk");
  Mat frames = random_frames(rng, 40, cfg.frame_dim);
  Mat reversed = frames.colwise().reverse();
  Col r1 = encode_speaker(enc, ps, frames);
  Col r2 = encode_speaker(enc, ps, reversed);
  CHECK(r1.dot(r2) < 1.0 - 1e-3);
}

TEST_CASE("batched speaker encoding equals per-utterance encoding") {
  Rng rng(16);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  SpeakerEncoder enc(ps, rng, cfg, "spk");
  Mat f1 = random_frames(rng, 18, cfg.frame_dim);
  Mat f2 = random_frames(rng, 31, cfg.frame_dim);
  Tape t;
  Var both = enc.encode(t, ps, {FrameInput::from_mat(f1), FrameInput::from_mat(f2)});
  Col r1 = encode_speaker(enc, ps, f1);
  Col r2 = encode_speaker(enc, ps, f2);
  CHECK((both.val().col(0) - r1).norm() < 1e-12);
  CHECK((both.val().col(1) - r2).norm() < 1e-12);
}

TEST_CASE("batched style posterior equals per-utterance posterior") {
  Rng rng(17);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  StyleEncoder enc(ps, rng, cfg);
  Mat f1 = random_frames(rng, 22, cfg.frame_dim);
  Mat f2 = random_frames(rng, 13, cfg.frame_dim);
  Tape t;
  auto vars = enc.sample(t, ps, {FrameInput::from_mat(f1), FrameInput::from_mat(f2)},
                         Mat::Zero(cfg.d_z, 2));
  auto s1 = style_deterministic(enc, ps, f1);
  auto s2 = style_deterministic(enc, ps, f2);
  CHECK((vars.zK.val().col(0) - s1.zK).norm() < 1e-12);
  CHECK((vars.zK.val().col(1) - s2.zK).norm() < 1e-12);
  CHECK(std::abs(vars.log_q.val()(0, 1) - s2.log_q) < 1e-12);
}

TEST_CASE("compute_target_style: single utterance and identical-pair cases") {
  Rng rng(18);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  StyleEncoder enc(ps, rng, cfg);
  Mat frames = random_frames(rng, 26, cfg.frame_dim);
  auto det = style_deterministic(enc, ps, frames);

  Col z1 = compute_target_style(enc, ps, {&frames});
  CHECK((z1 - det.zK).norm() < 1e-12);

  Col z2 = compute_target_style(enc, ps, {&frames, &frames});
  CHECK((z2 - det.zK).norm() < 1e-12);

  CHECK_THROWS_AS(compute_target_style(enc, ps, {}), Error);
}

TEST_CASE("gradient of log_q w.r.t. encoder parameters matches finite differences") {
  Rng rng(19);
  nn::ParamStore ps;
  EncoderConfig cfg = tiny_config();
  cfg.conv_layers = 2;
  cfg.gru_units = 6;
  cfg.conv_base_channels = 2;
  StyleEncoder enc(ps, rng, cfg);
  Mat frames = random_frames(rng, 9, cfg.frame_dim);
  Mat eps(cfg.d_z, 1);
  Rng er(3);
  for (int i = 0; i < cfg.d_z; ++i) eps(i, 0) = er.gaussian();

  auto build = [&](Tape& t) {
    auto vars = enc.sample(t, ps, {FrameInput::from_mat(frames)}, eps);
    return ad::sum(vars.log_q);
  };
  std::vector<Mat> analytic = ps.zero_grads();
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
    t.add_param_grads_to(ps, analytic);
  }
  auto value = [&]() {
    Tape t;
    return build(t).val()(0, 0);
  };
  auto res = stx::testing::grad_check(ps, analytic, value, 1e-3);
  INFO("worst ", res.worst_name, " rel ", res.worst_rel);
  CHECK(res.pass_fraction() >= 0.99);
}
