#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stx/ad.hpp"
#include "stx/nn.hpp"
#include "stx/rng.hpp"
#include "testing.hpp"

using namespace stx;
using namespace stx::ad;

namespace {

Mat random_mat(Rng& rng, int r, int c, double s = 1.0) {
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = rng.uniform(-s, s);
  return m;
}

}  // namespace

TEST_CASE("basic op values") {
  Tape t;
  Var a = t.constant((Mat(2, 2) << 1, 2, 3, 4).finished());
  Var b = t.constant((Mat(2, 2) << 5, 6, 7, 8).finished());
  CHECK(add(a, b).val()(1, 1) == 12);
  CHECK(sub(a, b).val()(0, 0) == -4);
  CHECK(mul(a, b).val()(1, 0) == 21);
  CHECK(matmul(a, b).val()(0, 0) == doctest::Approx(1 * 5 + 2 * 7));
  CHECK(sum(a).val()(0, 0) == 10);
  CHECK(sigmoid(t.constant(Mat::Zero(1, 1))).val()(0, 0) == doctest::Approx(0.5));
  CHECK(softplus(t.constant(Mat::Zero(1, 1))).val()(0, 0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("clamp_prob keeps logs finite and matches bounds") {
  Tape t;
  Var p = t.constant((Mat(1, 3) << 0.0, 0.5, 1.0).finished());
  Var c = clamp_prob(p, 1e-7);
  CHECK(c.val()(0, 0) == doctest::Approx(1e-7));
  CHECK(c.val()(0, 1) == doctest::Approx(0.5));
  CHECK(c.val()(0, 2) == doctest::Approx(1.0 - 1e-7));
  CHECK(std::isfinite(-std::log(c.val()(0, 0))));
  CHECK(-std::log(c.val()(0, 0)) == doctest::Approx(16.11809565095832));
}

// Every composite op gets the same treatment: build a scalar loss from
// parameters, backward, compare each parameter coordinate against central
// finite differences of the rebuilt loss.
static void fd_check(const std::function<Var(Tape&, nn::ParamStore&)>& make_loss, nn::ParamStore& ps,
                     double tol = 1e-6) {
  std::vector<Mat> analytic = ps.zero_grads();
  {
    Tape t;
    Var loss = make_loss(t, ps);
    t.backward(loss);
    t.add_param_grads_to(ps, analytic);
  }
  auto loss_value = [&]() {
    Tape t;
    return make_loss(t, ps).val()(0, 0);
  };
  auto res = stx::testing::grad_check(ps, analytic, loss_value, tol);
  INFO("worst: ", res.worst_name, " rel=", res.worst_rel);
  CHECK(res.passed == res.total);
}

TEST_CASE("gradients: elementwise and matmul chain") {
  Rng rng(11);
  nn::ParamStore ps;
  int w = ps.add("w", random_mat(rng, 4, 3));
  int b = ps.add("b", random_mat(rng, 4, 1));
  Mat x = random_mat(rng, 3, 5);
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var wx = matmul(t.param(s, w), t.constant(x));
        Var y = add_colvec(wx, t.param(s, b));
        Var z = mul(tanh_(y), sigmoid(y));
        Var q = add(softplus(scale(z, 0.7)), exp_(scale(z, -0.3)));
        return sum(mul(q, q));
      },
      ps);
}

TEST_CASE("gradients: log, div, square, l2_normalize, lerp_mask") {
  Rng rng(12);
  nn::ParamStore ps;
  int a = ps.add("a", random_mat(rng, 3, 4, 0.5));
  int b = ps.add("b", (Mat)(random_mat(rng, 3, 4, 0.3).array() + 2.0));
  Row mask(4);
  mask << 1, 0, 1, 1;
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var va = t.param(s, a);
        Var vb = t.param(s, b);
        Var d = div(va, vb);
        Var l = log_(vb);
        Var n = l2_normalize_cols(add(d, l));
        Var m = lerp_mask(n, square(d), mask);
        return weighted_sum(m, Mat::Ones(3, 4));
      },
      ps);
}

TEST_CASE("gradients: concat/slice/hstack/gather_cols/rowsum") {
  Rng rng(13);
  nn::ParamStore ps;
  int a = ps.add("a", random_mat(rng, 3, 4));
  int e = ps.add("emb", random_mat(rng, 2, 6));
  std::vector<int> ids{0, 3, 5, 3};
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var va = t.param(s, a);
        Var top = slice_rows(va, 0, 2);
        Var g = gather_cols(t.param(s, e), ids);
        Var cat = concat_rows({top, g});
        Var st = hstack({cat, scale(cat, 0.5)});
        Var cs = col_sums(st);
        Var rs = row_sums(st);
        return add(sum(mul(cs, cs)), sum(square(rs)));
      },
      ps);
}

TEST_CASE("gradients: gru_cell") {
  Rng rng(14);
  nn::ParamStore ps;
  nn::GRULayer gru(ps, rng, "gru", 5, 4);
  Mat x0 = random_mat(rng, 5, 3), x1 = random_mat(rng, 5, 3);
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var h = t.constant(Mat::Zero(4, 3));
        h = gru.step(t, s, t.constant(x0), h);
        h = gru.step(t, s, t.constant(x1), h);
        return sum(square(h));
      },
      ps, 1e-5);
}

TEST_CASE("gradients: gru_cell input path") {
  Rng rng(15);
  nn::ParamStore ps;
  nn::GRULayer gru(ps, rng, "gru", 3, 4);
  int xin = ps.add("x", random_mat(rng, 3, 2));
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var h = t.constant(Mat::Constant(4, 2, 0.1));
        Var h2 = gru.step(t, s, t.param(s, xin), h);
        return sum(square(h2));
      },
      ps, 1e-5);
}

TEST_CASE("gradients: lstmp_cell over two steps") {
  Rng rng(16);
  nn::ParamStore ps;
  nn::LSTMPLayer lstm(ps, rng, "lstm", 4, 6, 3);
  Mat x0 = random_mat(rng, 4, 2), x1 = random_mat(rng, 4, 2);
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var p = t.constant(Mat::Zero(3, 2));
        Var c = t.constant(Mat::Zero(6, 2));
        Var out = lstm.step(t, s, t.constant(x0), p, c);
        p = slice_rows(out, 0, 3);
        c = slice_rows(out, 3, 6);
        out = lstm.step(t, s, t.constant(x1), p, c);
        return sum(square(slice_rows(out, 0, 3)));
      },
      ps, 1e-5);
}

TEST_CASE("gradients: attend") {
  Rng rng(17);
  nn::ParamStore ps;
  int l_max = 4, b_cols = 3, d_att = 5, d_mem = 6;
  int q = ps.add("q", random_mat(rng, d_att, b_cols));
  int k = ps.add("k", random_mat(rng, d_att, l_max * b_cols));
  int mm = ps.add("m", random_mat(rng, d_mem, l_max * b_cols));
  int vv = ps.add("v", random_mat(rng, d_att, 1));
  Mat mask = Mat::Ones(l_max, b_cols);
  mask(3, 1) = 0;  // one padded position
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        Var ctx = attend(t.param(s, q), t.param(s, k), t.param(s, mm), t.param(s, vv), mask);
        return sum(square(ctx));
      },
      ps, 1e-5);
}

TEST_CASE("attend rows are a distribution and padding is excluded") {
  Rng rng(18);
  Tape t;
  int l_max = 5, b_cols = 2;
  Mat mask = Mat::Ones(l_max, b_cols);
  mask(4, 0) = 0;
  Mat weights;
  attend(t.constant(random_mat(rng, 3, b_cols)), t.constant(random_mat(rng, 3, l_max * b_cols)),
         t.constant(random_mat(rng, 4, l_max * b_cols)), t.constant(random_mat(rng, 3, 1)), mask, &weights);
  for (int b = 0; b < b_cols; ++b) CHECK(weights.col(b).sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(weights(4, 0) == 0.0);
}

TEST_CASE("gradients: conv2d stride 1 and 2") {
  Rng rng(19);
  nn::ParamStore ps;
  int h = 6, w = 5, c_in = 2, c_out = 3;
  int x = ps.add("x", random_mat(rng, c_in, h * w));
  nn::Conv2dLayer conv1(ps, rng, "c1", c_in, c_out, 1);
  nn::Conv2dLayer conv2(ps, rng, "c2", c_out, 2, 2);
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        int oh = 0, ow = 0;
        Var y = conv1.apply(t, s, t.param(s, x), h, w, &oh, &ow);
        y = leaky_relu(y);
        int oh2 = 0, ow2 = 0;
        y = conv2.apply(t, s, y, oh, ow, &oh2, &ow2);
        return sum(square(y));
      },
      ps, 1e-5);
}

TEST_CASE("conv2d output shape") {
  Rng rng(20);
  nn::ParamStore ps;
  nn::Conv2dLayer conv(ps, rng, "c", 1, 4, 2);
  Tape t;
  int oh = 0, ow = 0;
  conv.apply(t, ps, t.constant(random_mat(rng, 1, 9 * 7)), 9, 7, &oh, &ow);
  CHECK(oh == 5);  // ceil(9/2)
  CHECK(ow == 4);  // ceil(7/2)
}

TEST_CASE("gradients: gather_frames and fused losses") {
  Rng rng(21);
  nn::ParamStore ps;
  int f_dim = 3, b_cols = 2, steps = 4;
  std::vector<int> ids;
  for (int i = 0; i < steps; ++i) ids.push_back(ps.add("f" + std::to_string(i), random_mat(rng, f_dim, b_cols)));
  std::vector<Mat> targets;
  std::vector<Row> masks, stop_t, stop_w;
  for (int i = 0; i < steps; ++i) {
    targets.push_back(random_mat(rng, f_dim, b_cols));
    Row m(b_cols);
    m << 1, (i < 3 ? 1.0 : 0.0);
    masks.push_back(m);
    Row st(b_cols);
    st << (i == steps - 1 ? 1.0 : 0.0), (i == 2 ? 1.0 : 0.0);
    stop_t.push_back(st);
    Row sw(b_cols);
    sw << m(0) * (st(0) > 0.5 ? 5.0 : 1.0), m(1) * (st(1) > 0.5 ? 5.0 : 1.0);
    stop_w.push_back(sw);
  }
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        std::vector<Var> frames;
        for (int id : ids) frames.push_back(t.param(s, id));
        Var nll = gauss_nll_cols(t, frames, targets, masks);
        std::vector<Var> logits;
        for (int i = 0; i < steps; ++i) logits.push_back(col_sums(frames[i]));
        Var bce = stop_bce_cols(t, logits, stop_t, stop_w);
        Var g = gather_frames(frames, 0, 3);
        return add(add(sum(nll), sum(bce)), sum(square(g)));
      },
      ps, 1e-5);
}

TEST_CASE("gradients: masked matmul respects the mask") {
  Rng rng(22);
  nn::ParamStore ps;
  int w = ps.add("w", random_mat(rng, 4, 4));
  Mat mask = Mat::Zero(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < i; ++j) mask(i, j) = 1;  // strictly lower triangular
  Mat x = random_mat(rng, 4, 3);
  fd_check(
      [&](Tape& t, nn::ParamStore& s) {
        return sum(square(matmul_masked(t.param(s, w), mask, t.constant(x))));
      },
      ps);
  // gradient w.r.t. masked-out coordinates must be exactly zero
  std::vector<Mat> grads = ps.zero_grads();
  Tape t;
  Var loss = sum(square(matmul_masked(t.param(ps, w), mask, t.constant(x))));
  t.backward(loss);
  t.add_param_grads_to(ps, grads);
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) CHECK(grads[0](i, j) == 0.0);
}

TEST_CASE("detach blocks gradient flow") {
  nn::ParamStore ps;
  Rng rng(23);
  int a = ps.add("a", random_mat(rng, 2, 2));
  Tape t;
  Var va = t.param(ps, a);
  Var loss = sum(square(detach(va)));
  t.backward(loss);
  std::vector<Mat> grads = ps.zero_grads();
  t.add_param_grads_to(ps, grads);
  CHECK(grads[0].norm() == 0.0);
}

TEST_CASE("param_const contributes no gradient") {
  nn::ParamStore ps;
  Rng rng(24);
  int a = ps.add("a", random_mat(rng, 2, 2));
  Tape t;
  Var loss = sum(square(t.param_const(ps, a)));
  t.backward(loss);
  std::vector<Mat> grads = ps.zero_grads();
  t.add_param_grads_to(ps, grads);
  CHECK(grads[0].norm() == 0.0);
}

TEST_CASE("adam step moves parameters against the gradient") {
  nn::ParamStore ps;
  int a = ps.add("a", Mat::Ones(1, 1));
  nn::Adam adam;
  adam.lr = 0.1;
  std::vector<Mat> grads{Mat::Ones(1, 1)};
  adam.step(ps, grads, 0);
  CHECK(ps.value(a)(0, 0) < 1.0);
}

TEST_CASE("gradient clipping bounds the global norm") {
  std::vector<Mat> grads{Mat::Ones(2, 2) * 10, Mat::Ones(3, 1) * -10};
  double norm = nn::global_grad_norm(grads);
  CHECK(norm > 1.0);
  nn::ParamStore ps;
  ps.add("a", Mat::Zero(2, 2));
  ps.add("b", Mat::Zero(3, 1));
  nn::Adam adam;
  adam.step(ps, grads, 1.0);
  CHECK(nn::global_grad_norm(grads) == doctest::Approx(1.0));
}

TEST_CASE("chi2_sf matches reference values") {
  CHECK(stx::testing::chi2_sf(18.307, 10) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(stx::testing::chi2_sf(62.428, 39) == doctest::Approx(0.01).epsilon(1e-3));
  CHECK(stx::testing::chi2_sf(50.0, 39) == doctest::Approx(0.1115162684).epsilon(1e-6));
}
