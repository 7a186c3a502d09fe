#pragma once

#include <string>
#include <vector>

#include "stx/ad.hpp"
#include "stx/common.hpp"
#include "stx/rng.hpp"

namespace stx::nn {

// Owns parameter values plus Adam moment buffers. One store per optimizer
// group (generator / discriminator / style discriminator).
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat value;
    Mat m;  // Adam first moment
    Mat v;  // Adam second moment
  };

  int add(std::string name, Mat init) {
    Entry e;
    e.name = std::move(name);
    e.m = Mat::Zero(init.rows(), init.cols());
    e.v = Mat::Zero(init.rows(), init.cols());
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    return int(entries_.size()) - 1;
  }

  int size() const { return int(entries_.size()); }
  Entry& entry(int i) { return entries_[i]; }
  const Entry& entry(int i) const { return entries_[i]; }
  Mat& value(int i) { return entries_[i].value; }
  const Mat& value(int i) const { return entries_[i].value; }

  int find(const std::string& name) const {
    for (int i = 0; i < int(entries_.size()); ++i)
      if (entries_[i].name == name) return i;
    return -1;
  }

  long total_coords() const {
    long n = 0;
    for (const auto& e : entries_) n += long(e.value.size());
    return n;
  }

  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : entries_) {
      h = fnv1a(e.name, h);
      h = fnv1a_bytes(e.value.data(), sizeof(double) * e.value.size(), h);
    }
    return h;
  }

  std::vector<Mat> zero_grads() const {
    std::vector<Mat> g;
    g.reserve(entries_.size());
    for (const auto& e : entries_) g.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
    return g;
  }

  // Raw (de)serialization used by checkpoint segments; values, moments and
  // the Adam step counter round-trip bit-exactly.
  std::vector<unsigned char> serialize(long adam_step) const;
  long deserialize(const std::vector<unsigned char>& bytes);  // returns adam step

 private:
  std::vector<Entry> entries_;
};

// ---- initializers -------------------------------------------------------

inline Mat glorot(Rng& rng, int rows, int cols) {
  double a = std::sqrt(6.0 / double(rows + cols));
  Mat m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-a, a);
  return m;
}

inline Mat uniform_init(Rng& rng, int rows, int cols, double a) {
  Mat m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-a, a);
  return m;
}

// ---- layers -------------------------------------------------------------

struct Linear {
  Linear() = default;
  Linear(ParamStore& ps, Rng& rng, const std::string& name, int in, int out, bool zero_init = false) {
    w = ps.add(name + ".w", zero_init ? Mat::Zero(out, in) : glorot(rng, out, in));
    b = ps.add(name + ".b", Mat::Zero(out, 1));
  }
  ad::Var apply(ad::Tape& t, const ParamStore& ps, ad::Var x) const {
    return ad::affine(t.param(ps, w), x, t.param(ps, b));
  }
  ad::Var apply_frozen(ad::Tape& t, const ParamStore& ps, ad::Var x) const {
    return ad::affine(t.param_const(ps, w), x, t.param_const(ps, b));
  }
  int w = -1, b = -1;
};

struct GRULayer {
  GRULayer() = default;
  GRULayer(ParamStore& ps, Rng& rng, const std::string& name, int in, int hidden) : units(hidden) {
    wzr = ps.add(name + ".wzr", glorot(rng, 2 * hidden, in + hidden));
    bzr = ps.add(name + ".bzr", Mat::Zero(2 * hidden, 1));
    wc = ps.add(name + ".wc", glorot(rng, hidden, in + hidden));
    bc = ps.add(name + ".bc", Mat::Zero(hidden, 1));
  }
  ad::Var step(ad::Tape& t, const ParamStore& ps, ad::Var x, ad::Var h, bool frozen = false,
               const stx::Row* mask = nullptr) const {
    auto P = [&](int id) { return frozen ? t.param_const(ps, id) : t.param(ps, id); };
    return ad::gru_cell(x, h, P(wzr), P(bzr), P(wc), P(bc), mask);
  }
  int wzr = -1, bzr = -1, wc = -1, bc = -1;
  int units = 0;
};

struct LSTMPLayer {
  LSTMPLayer() = default;
  LSTMPLayer(ParamStore& ps, Rng& rng, const std::string& name, int in, int hidden, int proj)
      : units(hidden), proj_units(proj) {
    w = ps.add(name + ".w", glorot(rng, 4 * hidden, in + proj));
    Mat bias = Mat::Zero(4 * hidden, 1);
    bias.middleRows(hidden, hidden).setConstant(1.0);  // forget gate starts open
    b = ps.add(name + ".b", bias);
    wp = ps.add(name + ".wp", glorot(rng, proj, hidden));
  }
  // Returns [p'; c'] stacked.
  ad::Var step(ad::Tape& t, const ParamStore& ps, ad::Var x, ad::Var p, ad::Var c,
               const stx::Row* mask = nullptr) const {
    return ad::lstmp_cell(x, p, c, t.param(ps, w), t.param(ps, b), t.param(ps, wp), mask);
  }
  int w = -1, b = -1, wp = -1;
  int units = 0, proj_units = 0;
};

struct Conv2dLayer {
  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, Rng& rng, const std::string& name, int c_in, int c_out, int stride_)
      : in_channels(c_in), out_channels(c_out), stride(stride_) {
    double a = std::sqrt(6.0 / double(c_in * 9 + c_out * 9));
    w = ps.add(name + ".w", uniform_init(rng, c_out, c_in * 9, a));
    b = ps.add(name + ".b", Mat::Zero(c_out, 1));
  }
  ad::Var apply(ad::Tape& t, const ParamStore& ps, ad::Var x, int h_in, int w_in, int* h_out, int* w_out,
                bool frozen = false) const {
    auto P = [&](int id) { return frozen ? t.param_const(ps, id) : t.param(ps, id); };
    return ad::conv2d(x, h_in, w_in, P(w), P(b), stride, h_out, w_out);
  }
  int w = -1, b = -1;
  int in_channels = 0, out_channels = 0, stride = 1;
};

// ---- optimizer ----------------------------------------------------------

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;

  // Applies one update. Gradients are clipped to a global L2 norm of
  // `clip_norm` (0 disables clipping) before the moment updates.
  void step(ParamStore& ps, std::vector<Mat>& grads, double clip_norm);
};

double global_grad_norm(const std::vector<Mat>& grads);

}  // namespace stx::nn
