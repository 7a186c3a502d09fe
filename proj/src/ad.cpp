#include "stx/ad.hpp"

#include <cmath>
#include <memory>

#include "stx/nn.hpp"

namespace stx::ad {

namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols(), op);
}

}  // namespace

Var Tape::param(const nn::ParamStore& store, int pid) {
  auto key = std::make_pair(static_cast<const void*>(&store), pid);
  auto it = param_nodes_.find(key);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = push(store.value(pid), true);
  nodes_[v.id].store = &store;
  nodes_[v.id].param_id = pid;
  param_nodes_.emplace(key, v.id);
  return v;
}

Var Tape::param_const(const nn::ParamStore& store, int pid) {
  auto key = std::make_pair(static_cast<const void*>(&store), pid);
  auto it = const_param_nodes_.find(key);
  if (it != const_param_nodes_.end()) return Var{this, it->second};
  Var v = push(store.value(pid), false);
  const_param_nodes_.emplace(key, v.id);
  return v;
}

void Tape::backward(Var loss) {
  require(loss.tape == this && loss.val().size() == 1, "backward takes a scalar node of this tape");
  nodes_[loss.id].grad = Mat::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0 || !n.back) continue;
    n.back(*this, n.grad);
  }
}

void Tape::add_param_grads_to(const nn::ParamStore& store, std::vector<Mat>& grads) const {
  for (const Node& n : nodes_) {
    if (n.store != &store || n.param_id < 0 || n.grad.size() == 0) continue;
    grads[n.param_id] += n.grad;
  }
}

// ---- arithmetic ----------------------------------------------------------

Var add(Var a, Var b) {
  same_shape(a, b, "add shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val() + b.val(), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      tp.accum(pa, g);
      tp.accum(pb, g);
    };
  }
  return out;
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val() - b.val(), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      tp.accum(pa, g);
      tp.accum(pb, -g);
    };
  }
  return out;
}

Var neg(Var a) { return scale(a, -1.0); }

Var mul(Var a, Var b) {
  same_shape(a, b, "mul shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseProduct(b.val()), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      tp.accum(pa, g.cwiseProduct(tp.node(pb).value));
      tp.accum(pb, g.cwiseProduct(tp.node(pa).value));
    };
  }
  return out;
}

Var div(Var a, Var b) {
  same_shape(a, b, "div shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseQuotient(b.val()), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id, self = out.id;
    t.node(out.id).back = [pa, pb, self](Tape& tp, const Mat& g) {
      const Mat& bv = tp.node(pb).value;
      tp.accum(pa, g.cwiseQuotient(bv));
      tp.accum(pb, -g.cwiseProduct(tp.node(self).value).cwiseQuotient(bv));
    };
  }
  return out;
}

Var matmul(Var a, Var b) {
  require(a.val().cols() == b.val().rows(), "matmul shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val() * b.val(), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      if (tp.node(pa).needs_grad) tp.accum(pa, g * tp.node(pb).value.transpose());
      if (tp.node(pb).needs_grad) tp.accum(pb, tp.node(pa).value.transpose() * g);
    };
  }
  return out;
}

Var matmul_tn(Var a, Var b) {
  require(a.val().rows() == b.val().rows(), "matmul_tn shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().transpose() * b.val(), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      if (tp.node(pa).needs_grad) tp.accum(pa, tp.node(pb).value * g.transpose());
      if (tp.node(pb).needs_grad) tp.accum(pb, tp.node(pa).value * g);
    };
  }
  return out;
}

Var affine(Var w, Var x, Var b) {
  require(w.val().cols() == x.val().rows() && b.val().cols() == 1 && b.val().rows() == w.val().rows(),
          "affine shapes");
  Tape& t = *w.tape;
  Mat y(w.val().rows(), x.val().cols());
  y.noalias() = w.val() * x.val();
  y.colwise() += Col(b.val().col(0));
  Var out = t.push(std::move(y), t.node(w.id).needs_grad || t.node(x.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pw = w.id, px = x.id, pb = b.id;
    t.node(out.id).back = [pw, px, pb](Tape& tp, const Mat& g) {
      if (tp.node(pw).needs_grad) tp.accum(pw, g * tp.node(px).value.transpose());
      if (tp.node(pb).needs_grad) tp.accum(pb, g.rowwise().sum());
      if (tp.node(px).needs_grad) tp.accum(px, tp.node(pw).value.transpose() * g);
    };
  }
  return out;
}

Var matmul_masked(Var w, const Mat& mask, Var x) {
  require(w.val().rows() == mask.rows() && w.val().cols() == mask.cols(), "mask shape");
  require(w.val().cols() == x.val().rows(), "matmul_masked shapes");
  Tape& t = *w.tape;
  Mat wm = w.val().cwiseProduct(mask);
  Var out = t.push(wm * x.val(), t.node(w.id).needs_grad || t.node(x.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pw = w.id, px = x.id;
    Mat m = mask;
    t.node(out.id).back = [pw, px, m](Tape& tp, const Mat& g) {
      if (tp.node(pw).needs_grad) tp.accum(pw, (g * tp.node(px).value.transpose()).cwiseProduct(m));
      if (tp.node(px).needs_grad)
        tp.accum(px, tp.node(pw).value.cwiseProduct(m).transpose() * g);
    };
  }
  return out;
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Var out = t.push(a.val() * c, t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa, c](Tape& tp, const Mat& g) { tp.accum(pa, g * c); };
  }
  return out;
}

Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array() + c, t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) { tp.accum(pa, g); };
  }
  return out;
}

Var add_colvec(Var a, Var b) {
  require(b.val().cols() == 1 && a.val().rows() == b.val().rows(), "add_colvec shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().colwise() + Col(b.val().col(0)), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    t.node(out.id).back = [pa, pb](Tape& tp, const Mat& g) {
      tp.accum(pa, g);
      if (tp.node(pb).needs_grad) tp.accum(pb, g.rowwise().sum());
    };
  }
  return out;
}

Var mul_rowvec(Var a, const Row& m) {
  require(a.val().cols() == m.cols(), "mul_rowvec shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().rowwise() * m.array(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    Row mr = m;
    t.node(out.id).back = [pa, mr](Tape& tp, const Mat& g) {
      tp.accum(pa, g.array().rowwise() * mr.array());
    };
  }
  return out;
}

Var mul_const(Var a, const Mat& w) {
  require(a.val().rows() == w.rows() && a.val().cols() == w.cols(), "mul_const shapes");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseProduct(w), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    Mat wc = w;
    t.node(out.id).back = [pa, wc](Tape& tp, const Mat& g) { tp.accum(pa, g.cwiseProduct(wc)); };
  }
  return out;
}

// ---- activations ----------------------------------------------------------

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Mat s = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
  Var out = t.push(std::move(s), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, self = out.id;
    t.node(out.id).back = [pa, self](Tape& tp, const Mat& g) {
      const Mat& y = tp.node(self).value;
      tp.accum(pa, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
    };
  }
  return out;
}

Var tanh_(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().tanh().matrix(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, self = out.id;
    t.node(out.id).back = [pa, self](Tape& tp, const Mat& g) {
      const Mat& y = tp.node(self).value;
      tp.accum(pa, g.cwiseProduct((1.0 - y.array().square()).matrix()));
    };
  }
  return out;
}

Var softplus(Var a) {
  Tape& t = *a.tape;
  // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
  Mat y = a.val().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      tp.accum(pa, g.cwiseProduct((1.0 / (1.0 + (-x.array()).exp())).matrix()));
    };
  }
  return out;
}

Var exp_(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().exp().matrix(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, self = out.id;
    t.node(out.id).back = [pa, self](Tape& tp, const Mat& g) {
      tp.accum(pa, g.cwiseProduct(tp.node(self).value));
    };
  }
  return out;
}

Var log_(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().log().matrix(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) {
      tp.accum(pa, g.cwiseQuotient(tp.node(pa).value));
    };
  }
  return out;
}

Var log_sigmoid(Var a) {
  Tape& t = *a.tape;
  // log sigmoid(x) = -softplus(-x)
  Mat y = a.val().unaryExpr([](double x) { return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)))); });
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      tp.accum(pa, g.cwiseProduct((1.0 / (1.0 + x.array().exp())).matrix()));
    };
  }
  return out;
}

Var leaky_relu(Var a, double slope) {
  Tape& t = *a.tape;
  Mat y = a.val().unaryExpr([slope](double x) { return x > 0 ? x : slope * x; });
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa, slope](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      Mat gx = g;
      for (int j = 0; j < gx.cols(); ++j)
        for (int i = 0; i < gx.rows(); ++i)
          if (x(i, j) <= 0) gx(i, j) *= slope;
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var square(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().square().matrix(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) {
      tp.accum(pa, 2.0 * g.cwiseProduct(tp.node(pa).value));
    };
  }
  return out;
}

Var clamp_prob(Var a, double eps) {
  Tape& t = *a.tape;
  Mat y = a.val().unaryExpr([eps](double x) { return std::min(std::max(x, eps), 1.0 - eps); });
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa, eps](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      Mat gx = g;
      for (int j = 0; j < gx.cols(); ++j)
        for (int i = 0; i < gx.rows(); ++i)
          if (x(i, j) < eps || x(i, j) > 1.0 - eps) gx(i, j) = 0.0;
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var clamp_sym(Var a, double limit) {
  Tape& t = *a.tape;
  Mat y = a.val().unaryExpr([limit](double x) { return std::min(std::max(x, -limit), limit); });
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa, limit](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      Mat gx = g;
      for (int j = 0; j < gx.cols(); ++j)
        for (int i = 0; i < gx.rows(); ++i)
          if (std::abs(x(i, j)) > limit) gx(i, j) = 0.0;
      tp.accum(pa, gx);
    };
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(Mat::Constant(1, 1, a.val().sum()), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    t.node(out.id).back = [pa](Tape& tp, const Mat& g) {
      const Mat& x = tp.node(pa).value;
      tp.accum(pa, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
    };
  }
  return out;
}

Var weighted_sum(Var a, const Mat& w) {
  require(a.val().rows() == w.rows() && a.val().cols() == w.cols(), "weighted_sum shapes");
  Tape& t = *a.tape;
  Var out = t.push(Mat::Constant(1, 1, a.val().cwiseProduct(w).sum()), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    Mat wc = w;
    t.node(out.id).back = [pa, wc](Tape& tp, const Mat& g) { tp.accum(pa, g(0, 0) * wc); };
  }
  return out;
}

Var col_sums(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().colwise().sum(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    int rows = int(a.val().rows());
    t.node(out.id).back = [pa, rows](Tape& tp, const Mat& g) {
      tp.accum(pa, Mat::Ones(rows, 1) * g);
    };
  }
  return out;
}

Var row_sums(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().rowwise().sum(), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    int cols = int(a.val().cols());
    t.node(out.id).back = [pa, cols](Tape& tp, const Mat& g) {
      tp.accum(pa, g * Mat::Ones(1, cols));
    };
  }
  return out;
}

Var mean_all(Var a) { return scale(sum(a), 1.0 / double(a.val().size())); }

// ---- shape ops --------------------------------------------------------------

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows empty");
  Tape& t = *parts[0].tape;
  int rows = 0, cols = int(parts[0].val().cols());
  bool ng = false;
  for (const Var& p : parts) {
    require(p.val().cols() == cols, "concat_rows cols");
    rows += int(p.val().rows());
    ng = ng || t.node(p.id).needs_grad;
  }
  Mat y(rows, cols);
  int r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.val().rows()) = p.val();
    r += int(p.val().rows());
  }
  Var out = t.push(std::move(y), ng);
  if (ng) {
    std::vector<std::pair<int, int>> spans;  // (id, rows)
    for (const Var& p : parts) spans.emplace_back(p.id, int(p.val().rows()));
    t.node(out.id).back = [spans](Tape& tp, const Mat& g) {
      int r0 = 0;
      for (auto [id, n] : spans) {
        tp.accum(id, g.middleRows(r0, n));
        r0 += n;
      }
    };
  }
  return out;
}

Var slice_rows(Var a, int r0, int n) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().middleRows(r0, n), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    int rows = int(a.val().rows()), cols = int(a.val().cols());
    t.node(out.id).back = [pa, r0, n, rows, cols](Tape& tp, const Mat& g) {
      Mat gx = Mat::Zero(rows, cols);
      gx.middleRows(r0, n) = g;
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var hstack(const std::vector<Var>& blocks) {
  require(!blocks.empty(), "hstack empty");
  Tape& t = *blocks[0].tape;
  int rows = int(blocks[0].val().rows());
  int total = 0;
  bool ng = false;
  for (const Var& b : blocks) {
    require(b.val().rows() == rows, "hstack rows");
    total += int(b.val().cols());
    ng = ng || t.node(b.id).needs_grad;
  }
  Mat y(rows, total);
  int c = 0;
  for (const Var& b : blocks) {
    y.middleCols(c, b.val().cols()) = b.val();
    c += int(b.val().cols());
  }
  Var out = t.push(std::move(y), ng);
  if (ng) {
    std::vector<std::pair<int, int>> spans;
    for (const Var& b : blocks) spans.emplace_back(b.id, int(b.val().cols()));
    t.node(out.id).back = [spans](Tape& tp, const Mat& g) {
      int c0 = 0;
      for (auto [id, n] : spans) {
        tp.accum(id, g.middleCols(c0, n));
        c0 += n;
      }
    };
  }
  return out;
}

Var slice_cols(Var a, int c0, int n) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().middleCols(c0, n), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    int rows = int(a.val().rows()), cols = int(a.val().cols());
    t.node(out.id).back = [pa, c0, n, rows, cols](Tape& tp, const Mat& g) {
      Mat gx = Mat::Zero(rows, cols);
      gx.middleCols(c0, n) = g;
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var gather_cols(Var a, const std::vector<int>& ids) {
  Tape& t = *a.tape;
  Mat y(a.val().rows(), ids.size());
  for (size_t j = 0; j < ids.size(); ++j) y.col(j) = a.val().col(ids[j]);
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id;
    std::vector<int> idx = ids;
    int rows = int(a.val().rows()), cols = int(a.val().cols());
    t.node(out.id).back = [pa, idx, rows, cols](Tape& tp, const Mat& g) {
      Mat gx = Mat::Zero(rows, cols);
      for (size_t j = 0; j < idx.size(); ++j) gx.col(idx[j]) += g.col(j);
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var l2_normalize_cols(Var a, double eps) {
  Tape& t = *a.tape;
  Mat y = a.val();
  Col norms(y.cols());
  for (int j = 0; j < y.cols(); ++j) {
    norms(j) = std::max(y.col(j).norm(), eps);
    y.col(j) /= norms(j);
  }
  Var out = t.push(std::move(y), t.node(a.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, self = out.id;
    Col nc = norms;
    t.node(out.id).back = [pa, self, nc](Tape& tp, const Mat& g) {
      const Mat& y = tp.node(self).value;
      Mat gx(y.rows(), y.cols());
      for (int j = 0; j < y.cols(); ++j) {
        double dot = y.col(j).dot(g.col(j));
        gx.col(j) = (g.col(j) - dot * y.col(j)) / nc(j);
      }
      tp.accum(pa, gx);
    };
  }
  return out;
}

Var lerp_mask(Var a, Var b, const Row& m) {
  same_shape(a, b, "lerp_mask shapes");
  require(a.val().cols() == m.cols(), "lerp_mask mask");
  Tape& t = *a.tape;
  Mat y = a.val().array().rowwise() * m.array();
  y.array() += b.val().array().rowwise() * (1.0 - m.array());
  Var out = t.push(std::move(y), t.node(a.id).needs_grad || t.node(b.id).needs_grad);
  if (t.node(out.id).needs_grad) {
    int pa = a.id, pb = b.id;
    Row mr = m;
    t.node(out.id).back = [pa, pb, mr](Tape& tp, const Mat& g) {
      tp.accum(pa, (g.array().rowwise() * mr.array()).matrix());
      tp.accum(pb, (g.array().rowwise() * (1.0 - mr.array())).matrix());
    };
  }
  return out;
}

Var detach(Var a) { return a.tape->constant(a.val()); }

// ---- fused ops ------------------------------------------------------------

Var gru_cell(Var x, Var h, Var wzr, Var bzr, Var wc, Var bc, const Row* mask) {
  Tape& t = *x.tape;
  int hidden = int(h.val().rows());
  int b_cols = int(x.val().cols());
  require(h.val().cols() == b_cols, "gru batch");
  require(mask == nullptr || mask->cols() == b_cols, "gru mask width");

  Mat u(x.val().rows() + hidden, b_cols);
  u.topRows(x.val().rows()) = x.val();
  u.bottomRows(hidden) = h.val();

  Mat zr(2 * hidden, b_cols);
  zr.noalias() = wzr.val() * u;
  zr.colwise() += Col(bzr.val().col(0));
  zr = (1.0 / (1.0 + (-zr.array()).exp())).matrix();

  Mat u2(u.rows(), b_cols);
  u2.topRows(x.val().rows()) = x.val();
  u2.bottomRows(hidden) = zr.bottomRows(hidden).cwiseProduct(h.val());

  Mat c(hidden, b_cols);
  c.noalias() = wc.val() * u2;
  c.colwise() += Col(bc.val().col(0));
  c = c.array().tanh().matrix();

  Mat hnew = zr.topRows(hidden).cwiseProduct(h.val() - c) + c;
  if (mask) {
    for (int b = 0; b < b_cols; ++b)
      if ((*mask)(b) < 0.5) hnew.col(b) = h.val().col(b);
  }

  bool ng = t.node(x.id).needs_grad || t.node(h.id).needs_grad || t.node(wzr.id).needs_grad ||
            t.node(wc.id).needs_grad;
  Var out = t.push(std::move(hnew), ng);
  if (ng) {
    int px = x.id, ph = h.id, pwzr = wzr.id, pbzr = bzr.id, pwc = wc.id, pbc = bc.id;
    int in_rows = int(x.val().rows());
    struct Cache {
      Mat u, u2, zr, c;
      Row mask;  // empty when unmasked
    };
    auto cache = std::make_shared<Cache>();
    cache->u = std::move(u);
    cache->u2 = std::move(u2);
    cache->zr = std::move(zr);
    cache->c = std::move(c);
    if (mask) cache->mask = *mask;
    t.node(out.id).back = [=](Tape& tp, const Mat& g_in) {
      Mat g = g_in;
      // masked columns: gradient passes straight to h_prev
      if (cache->mask.size() > 0) {
        Mat gh = Mat::Zero(hidden, g.cols());
        bool any = false;
        for (int b = 0; b < g.cols(); ++b) {
          if (cache->mask(b) < 0.5) {
            gh.col(b) = g.col(b);
            g.col(b).setZero();
            any = true;
          }
        }
        if (any) tp.accum(ph, gh);
      }
      auto hprev = cache->u.bottomRows(hidden);
      auto z = cache->zr.topRows(hidden);
      auto r = cache->zr.bottomRows(hidden);
      Mat dh = g.cwiseProduct(z);

      Mat dprec = g.cwiseProduct(Mat::Ones(hidden, g.cols()) - z)
                      .cwiseProduct((1.0 - cache->c.array().square()).matrix());
      if (tp.node(pwc).needs_grad) tp.accum(pwc, dprec * cache->u2.transpose());
      if (tp.node(pbc).needs_grad) tp.accum(pbc, dprec.rowwise().sum());
      Mat du2(cache->u.rows(), g.cols());
      du2.noalias() = tp.node(pwc).value.transpose() * dprec;

      auto drh = du2.bottomRows(hidden);
      dh += drh.cwiseProduct(r);

      Mat dpre(2 * hidden, g.cols());
      dpre.topRows(hidden) = g.cwiseProduct(hprev - cache->c)
                                 .cwiseProduct(z.cwiseProduct((1.0 - z.array()).matrix()));
      dpre.bottomRows(hidden) = drh.cwiseProduct(hprev)
                                    .cwiseProduct(r.cwiseProduct((1.0 - r.array()).matrix()));
      if (tp.node(pwzr).needs_grad) tp.accum(pwzr, dpre * cache->u.transpose());
      if (tp.node(pbzr).needs_grad) tp.accum(pbzr, dpre.rowwise().sum());
      Mat du(cache->u.rows(), g.cols());
      du.noalias() = tp.node(pwzr).value.transpose() * dpre;

      tp.accum(px, du.topRows(in_rows) + du2.topRows(in_rows));
      tp.accum(ph, du.bottomRows(hidden) + dh);
    };
  }
  return out;
}

Var lstmp_cell(Var x, Var p, Var c, Var w, Var b, Var wp, const Row* mask) {
  Tape& t = *x.tape;
  int hidden = int(c.val().rows());
  int proj = int(p.val().rows());
  int b_cols = int(x.val().cols());
  require(mask == nullptr || mask->cols() == b_cols, "lstm mask width");

  Mat u(x.val().rows() + proj, b_cols);
  u.topRows(x.val().rows()) = x.val();
  u.bottomRows(proj) = p.val();

  Mat pre = (w.val() * u).colwise() + Col(b.val().col(0));
  Mat gi = (1.0 / (1.0 + (-pre.topRows(hidden).array()).exp())).matrix();
  Mat gf = (1.0 / (1.0 + (-pre.middleRows(hidden, hidden).array()).exp())).matrix();
  Mat go = (1.0 / (1.0 + (-pre.middleRows(2 * hidden, hidden).array()).exp())).matrix();
  Mat gg = pre.bottomRows(hidden).array().tanh().matrix();

  Mat cnew = gf.cwiseProduct(c.val()) + gi.cwiseProduct(gg);
  Mat tc = cnew.array().tanh().matrix();
  Mat hraw = go.cwiseProduct(tc);
  Mat pnew = wp.val() * hraw;

  Mat stacked(proj + hidden, b_cols);
  stacked.topRows(proj) = pnew;
  stacked.bottomRows(hidden) = cnew;
  if (mask) {
    for (int bb = 0; bb < b_cols; ++bb) {
      if ((*mask)(bb) < 0.5) {
        stacked.col(bb).head(proj) = p.val().col(bb);
        stacked.col(bb).tail(hidden) = c.val().col(bb);
      }
    }
  }

  bool ng = t.node(x.id).needs_grad || t.node(p.id).needs_grad || t.node(c.id).needs_grad ||
            t.node(w.id).needs_grad || t.node(wp.id).needs_grad;
  Var out = t.push(std::move(stacked), ng);
  if (ng) {
    int px = x.id, pp = p.id, pc = c.id, pw = w.id, pb = b.id, pwp = wp.id;
    int in_rows = int(x.val().rows());
    struct Cache {
      Mat u, gi, gf, go, gg, cold, tc, hraw;
      Row mask;
    };
    auto cache = std::make_shared<Cache>();
    cache->u = std::move(u);
    cache->gi = std::move(gi);
    cache->gf = std::move(gf);
    cache->go = std::move(go);
    cache->gg = std::move(gg);
    cache->cold = c.val();
    cache->tc = std::move(tc);
    cache->hraw = std::move(hraw);
    if (mask) cache->mask = *mask;
    t.node(out.id).back = [=](Tape& tp, const Mat& g_in) {
      Mat g = g_in;
      if (cache->mask.size() > 0) {
        Mat gp = Mat::Zero(proj, g.cols());
        Mat gc = Mat::Zero(hidden, g.cols());
        bool any = false;
        for (int bb = 0; bb < g.cols(); ++bb) {
          if (cache->mask(bb) < 0.5) {
            gp.col(bb) = g.col(bb).head(proj);
            gc.col(bb) = g.col(bb).tail(hidden);
            g.col(bb).setZero();
            any = true;
          }
        }
        if (any) {
          tp.accum(pp, gp);
          tp.accum(pc, gc);
        }
      }
      Mat dpnew = g.topRows(proj);
      Mat dcnew = g.bottomRows(hidden);

      if (tp.node(pwp).needs_grad) tp.accum(pwp, dpnew * cache->hraw.transpose());
      Mat dhraw = tp.node(pwp).value.transpose() * dpnew;

      Mat dgo = dhraw.cwiseProduct(cache->tc);
      dcnew += dhraw.cwiseProduct(cache->go)
                   .cwiseProduct((1.0 - cache->tc.array().square()).matrix());

      Mat dgf = dcnew.cwiseProduct(cache->cold);
      Mat dgi = dcnew.cwiseProduct(cache->gg);
      Mat dgg = dcnew.cwiseProduct(cache->gi);
      Mat dc_old = dcnew.cwiseProduct(cache->gf);

      Mat dpre(4 * hidden, g.cols());
      dpre.topRows(hidden) = dgi.cwiseProduct(cache->gi.cwiseProduct((1.0 - cache->gi.array()).matrix()));
      dpre.middleRows(hidden, hidden) =
          dgf.cwiseProduct(cache->gf.cwiseProduct((1.0 - cache->gf.array()).matrix()));
      dpre.middleRows(2 * hidden, hidden) =
          dgo.cwiseProduct(cache->go.cwiseProduct((1.0 - cache->go.array()).matrix()));
      dpre.bottomRows(hidden) = dgg.cwiseProduct((1.0 - cache->gg.array().square()).matrix());

      if (tp.node(pw).needs_grad) tp.accum(pw, dpre * cache->u.transpose());
      if (tp.node(pb).needs_grad) tp.accum(pb, dpre.rowwise().sum());
      Mat du = tp.node(pw).value.transpose() * dpre;

      tp.accum(px, du.topRows(in_rows));
      tp.accum(pp, du.bottomRows(proj));
      tp.accum(pc, dc_old);
    };
  }
  return out;
}

Var attend(Var query, Var keys, Var memory, Var v, const Mat& mask, Mat* weights_out) {
  Tape& t = *query.tape;
  int d_att = int(query.val().rows());
  int b_cols = int(query.val().cols());
  int lb = int(keys.val().cols());
  require(lb % b_cols == 0, "attend layout");
  int l_max = lb / b_cols;
  require(mask.rows() == l_max && mask.cols() == b_cols, "attend mask");
  int d_mem = int(memory.val().rows());

  // th(:, j*B+b) = tanh(keys(:, j*B+b) + query(:, b))
  Mat th(d_att, lb);
  for (int j = 0; j < l_max; ++j)
    th.middleCols(j * b_cols, b_cols) = keys.val().middleCols(j * b_cols, b_cols) + query.val();
  th = th.array().tanh().matrix();

  Mat scores = Mat::Zero(l_max, b_cols);
  {
    Row sv = v.val().col(0).transpose() * th;  // 1 x (L*B)
    for (int j = 0; j < l_max; ++j)
      scores.row(j) = sv.segment(j * b_cols, b_cols);
  }
  // masked softmax over j
  Mat alpha(l_max, b_cols);
  for (int b = 0; b < b_cols; ++b) {
    double mx = -1e300;
    for (int j = 0; j < l_max; ++j)
      if (mask(j, b) > 0.5) mx = std::max(mx, scores(j, b));
    double denom = 0;
    for (int j = 0; j < l_max; ++j) {
      double e = mask(j, b) > 0.5 ? std::exp(scores(j, b) - mx) : 0.0;
      alpha(j, b) = e;
      denom += e;
    }
    alpha.col(b) /= denom;
  }
  if (weights_out) *weights_out = alpha;

  Mat ctx = Mat::Zero(d_mem, b_cols);
  for (int j = 0; j < l_max; ++j)
    ctx += (memory.val().middleCols(j * b_cols, b_cols).array().rowwise() * alpha.row(j).array()).matrix();

  bool ng = t.node(query.id).needs_grad || t.node(keys.id).needs_grad || t.node(memory.id).needs_grad ||
            t.node(v.id).needs_grad;
  Var out = t.push(std::move(ctx), ng);
  if (ng) {
    int pq = query.id, pk = keys.id, pm = memory.id, pv = v.id;
    struct Cache {
      Mat th, alpha;
    };
    auto cache = std::make_shared<Cache>();
    cache->th = std::move(th);
    cache->alpha = std::move(alpha);
    t.node(out.id).back = [=](Tape& tp, const Mat& g) {
      const Mat& memv = tp.node(pm).value;
      const Mat& vv = tp.node(pv).value;
      // dalpha(j,b) = mem_jb . g_b
      Mat dalpha(l_max, b_cols);
      for (int j = 0; j < l_max; ++j)
        dalpha.row(j) =
            (memv.middleCols(j * b_cols, b_cols).cwiseProduct(g)).colwise().sum();
      // softmax backward
      Mat ds(l_max, b_cols);
      for (int b = 0; b < b_cols; ++b) {
        double dot = cache->alpha.col(b).dot(dalpha.col(b));
        for (int j = 0; j < l_max; ++j)
          ds(j, b) = cache->alpha(j, b) * (dalpha(j, b) - dot);
      }

      Mat dth(cache->th.rows(), cache->th.cols());
      Mat dv = Mat::Zero(vv.rows(), 1);
      for (int j = 0; j < l_max; ++j) {
        auto thj = cache->th.middleCols(j * b_cols, b_cols);
        dv += thj * ds.row(j).transpose();
        dth.middleCols(j * b_cols, b_cols) = vv.col(0) * ds.row(j);
      }
      Mat dpre = dth.cwiseProduct((1.0 - cache->th.array().square()).matrix());
      if (tp.node(pv).needs_grad) tp.accum(pv, dv);
      if (tp.node(pk).needs_grad) tp.accum(pk, dpre);
      Mat dq = Mat::Zero(d_att, b_cols);
      for (int j = 0; j < l_max; ++j) dq += dpre.middleCols(j * b_cols, b_cols);
      tp.accum(pq, dq);
      if (tp.node(pm).needs_grad) {
        Mat dmem(memv.rows(), memv.cols());
        for (int j = 0; j < l_max; ++j)
          dmem.middleCols(j * b_cols, b_cols) =
              (g.array().rowwise() * cache->alpha.row(j).array()).matrix();
        tp.accum(pm, dmem);
      }
    };
  }
  return out;
}

namespace {

// im2col for 3x3 same-padded conv with stride s.
void im2col(const Mat& input, int c_in, int h, int w, int stride, int oh, int ow, Mat& col) {
  col.setZero(c_in * 9, oh * ow);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      int out_idx = oy * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          int in_idx = iy * w + ix;
          int krow = ky * 3 + kx;
          for (int c = 0; c < c_in; ++c) col(c * 9 + krow, out_idx) = input(c, in_idx);
        }
      }
    }
  }
}

void col2im_add(Mat& dinput, int c_in, int h, int w, int stride, int oh, int ow, const Mat& dcol) {
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      int out_idx = oy * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          int in_idx = iy * w + ix;
          int krow = ky * 3 + kx;
          for (int c = 0; c < c_in; ++c) dinput(c, in_idx) += dcol(c * 9 + krow, out_idx);
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var input, int h, int w, Var weight, Var bias, int stride, int* out_h, int* out_w) {
  Tape& t = *input.tape;
  int c_in = int(input.val().rows());
  require(input.val().cols() == h * w, "conv2d input layout");
  require(weight.val().cols() == c_in * 9, "conv2d weight layout");
  int oh = (h + 2 - 3) / stride + 1;
  int ow = (w + 2 - 3) / stride + 1;
  if (out_h) *out_h = oh;
  if (out_w) *out_w = ow;

  auto col = std::make_shared<Mat>();
  im2col(input.val(), c_in, h, w, stride, oh, ow, *col);
  Mat y = (weight.val() * (*col)).colwise() + Col(bias.val().col(0));

  bool ng = t.node(input.id).needs_grad || t.node(weight.id).needs_grad;
  Var out = t.push(std::move(y), ng);
  if (ng) {
    int pi = input.id, pw = weight.id, pb = bias.id;
    t.node(out.id).back = [=](Tape& tp, const Mat& g) {
      if (tp.node(pw).needs_grad) tp.accum(pw, g * col->transpose());
      if (tp.node(pb).needs_grad) tp.accum(pb, g.rowwise().sum());
      if (tp.node(pi).needs_grad) {
        Mat dcol = tp.node(pw).value.transpose() * g;
        Mat dinput = Mat::Zero(c_in, h * w);
        col2im_add(dinput, c_in, h, w, stride, oh, ow, dcol);
        tp.accum(pi, dinput);
      }
    };
  }
  return out;
}

Var gather_frames(const std::vector<Var>& frames, int col, int len) {
  require(!frames.empty() && len >= 1 && len <= int(frames.size()), "gather_frames len");
  Tape& t = *frames[0].tape;
  int f_dim = int(frames[0].val().rows());
  Mat y(1, len * f_dim);
  bool ng = false;
  for (int i = 0; i < len; ++i) {
    y.block(0, i * f_dim, 1, f_dim) = frames[i].val().col(col).transpose();
    ng = ng || t.node(frames[i].id).needs_grad;
  }
  Var out = t.push(std::move(y), ng);
  if (ng) {
    std::vector<int> ids(len);
    for (int i = 0; i < len; ++i) ids[i] = frames[i].id;
    t.node(out.id).back = [ids, col, f_dim](Tape& tp, const Mat& g) {
      for (size_t i = 0; i < ids.size(); ++i) {
        Mat gx = Mat::Zero(f_dim, tp.node(ids[i]).value.cols());
        gx.col(col) = g.block(0, int(i) * f_dim, 1, f_dim).transpose();
        tp.accum(int(ids[i]), gx);
      }
    };
  }
  return out;
}

Var gauss_nll_cols(Tape& tape, const std::vector<Var>& frames_hat, const std::vector<Mat>& targets,
                   const std::vector<Row>& masks) {
  require(frames_hat.size() == targets.size() && frames_hat.size() == masks.size(), "gauss_nll sizes");
  int b_cols = int(frames_hat[0].val().cols());
  Mat y = Mat::Zero(1, b_cols);
  bool ng = false;
  for (size_t i = 0; i < frames_hat.size(); ++i) {
    Mat resid = frames_hat[i].val() - targets[i];
    y += 0.5 * (resid.array().square().colwise().sum().rowwise() * masks[i].array()).matrix();
    ng = ng || tape.node(frames_hat[i].id).needs_grad;
  }
  Var out = tape.push(std::move(y), ng);
  if (ng) {
    std::vector<int> ids(frames_hat.size());
    for (size_t i = 0; i < frames_hat.size(); ++i) ids[i] = frames_hat[i].id;
    auto tg = std::make_shared<std::vector<Mat>>(targets);
    auto mk = std::make_shared<std::vector<Row>>(masks);
    tape.node(out.id).back = [ids, tg, mk](Tape& tp, const Mat& g) {
      for (size_t i = 0; i < ids.size(); ++i) {
        if (!tp.node(ids[i]).needs_grad) continue;
        Mat resid = tp.node(ids[i]).value - (*tg)[i];
        Mat gx = (resid.array().rowwise() * ((*mk)[i].array() * g.array().row(0))).matrix();
        tp.accum(ids[i], gx);
      }
    };
  }
  return out;
}

Var stop_bce_cols(Tape& tape, const std::vector<Var>& stop_logits, const std::vector<Row>& targets,
                  const std::vector<Row>& weights) {
  require(stop_logits.size() == targets.size() && stop_logits.size() == weights.size(), "stop_bce sizes");
  int b_cols = int(stop_logits[0].val().cols());
  Mat y = Mat::Zero(1, b_cols);
  bool ng = false;
  for (size_t i = 0; i < stop_logits.size(); ++i) {
    // softplus(x) - t*x, weighted
    const Mat& x = stop_logits[i].val();
    for (int b = 0; b < b_cols; ++b) {
      double xv = x(0, b);
      double sp = std::max(xv, 0.0) + std::log1p(std::exp(-std::abs(xv)));
      y(0, b) += weights[i](b) * (sp - targets[i](b) * xv);
    }
    ng = ng || tape.node(stop_logits[i].id).needs_grad;
  }
  Var out = tape.push(std::move(y), ng);
  if (ng) {
    std::vector<int> ids(stop_logits.size());
    for (size_t i = 0; i < stop_logits.size(); ++i) ids[i] = stop_logits[i].id;
    auto tg = std::make_shared<std::vector<Row>>(targets);
    auto wt = std::make_shared<std::vector<Row>>(weights);
    tape.node(out.id).back = [ids, tg, wt](Tape& tp, const Mat& g) {
      for (size_t i = 0; i < ids.size(); ++i) {
        const Mat& x = tp.node(ids[i]).value;
        Mat gx(1, x.cols());
        for (int b = 0; b < x.cols(); ++b) {
          double s = 1.0 / (1.0 + std::exp(-x(0, b)));
          gx(0, b) = g(0, b) * (*wt)[i](b) * (s - (*tg)[i](b));
        }
        tp.accum(ids[i], gx);
      }
    };
  }
  return out;
}

}  // namespace stx::ad
