#include "stx/nn.hpp"

#include <cstring>

namespace stx::nn {

namespace {

template <typename T>
void put(std::vector<unsigned char>& out, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<unsigned char>& in, size_t& pos) {
  T v;
  require(pos + sizeof(T) <= in.size(), "segment truncated");
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void put_mat(std::vector<unsigned char>& out, const Mat& m) {
  put<uint32_t>(out, uint32_t(m.rows()));
  put<uint32_t>(out, uint32_t(m.cols()));
  const auto* p = reinterpret_cast<const unsigned char*>(m.data());
  out.insert(out.end(), p, p + sizeof(double) * m.size());
}

Mat get_mat(const std::vector<unsigned char>& in, size_t& pos) {
  uint32_t rows = get<uint32_t>(in, pos);
  uint32_t cols = get<uint32_t>(in, pos);
  Mat m(rows, cols);
  size_t bytes = sizeof(double) * size_t(rows) * cols;
  require(pos + bytes <= in.size(), "segment truncated");
  std::memcpy(m.data(), in.data() + pos, bytes);
  pos += bytes;
  return m;
}

}  // namespace

std::vector<unsigned char> ParamStore::serialize(long adam_step) const {
  std::vector<unsigned char> out;
  put<uint32_t>(out, uint32_t(entries_.size()));
  put<int64_t>(out, int64_t(adam_step));
  for (const auto& e : entries_) {
    put<uint32_t>(out, uint32_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_mat(out, e.value);
    put_mat(out, e.m);
    put_mat(out, e.v);
  }
  return out;
}

long ParamStore::deserialize(const std::vector<unsigned char>& bytes) {
  size_t pos = 0;
  uint32_t n = get<uint32_t>(bytes, pos);
  check(n == entries_.size(), ErrorCategory::Data,
        "checkpoint segment parameter count mismatch (wrong model configuration?)");
  long adam_step = long(get<int64_t>(bytes, pos));
  for (auto& e : entries_) {
    uint32_t len = get<uint32_t>(bytes, pos);
    require(pos + len <= bytes.size(), "segment truncated");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    check(name == e.name, ErrorCategory::Data, "checkpoint parameter name mismatch: " + name + " vs " + e.name);
    Mat value = get_mat(bytes, pos);
    Mat m = get_mat(bytes, pos);
    Mat v = get_mat(bytes, pos);
    check(value.rows() == e.value.rows() && value.cols() == e.value.cols(), ErrorCategory::Data,
          "checkpoint parameter shape mismatch: " + name);
    e.value = std::move(value);
    e.m = std::move(m);
    e.v = std::move(v);
  }
  require(pos == bytes.size(), "segment has trailing bytes");
  return adam_step;
}

double global_grad_norm(const std::vector<Mat>& grads) {
  double sq = 0;
  for (const Mat& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void Adam::step(ParamStore& ps, std::vector<Mat>& grads, double clip_norm) {
  require(int(grads.size()) == ps.size(), "Adam grads size");
  if (clip_norm > 0) {
    double norm = global_grad_norm(grads);
    if (norm > clip_norm) {
      double s = clip_norm / norm;
      for (Mat& g : grads) g *= s;
    }
  }
  ++t;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (int i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry(i);
    e.m.array() = beta1 * e.m.array() + (1.0 - beta1) * grads[i].array();
    e.v.array() = beta2 * e.v.array() + (1.0 - beta2) * grads[i].array().square();
    e.value.array() -= lr * (e.m.array() / bc1) / ((e.v.array() / bc2).sqrt() + eps);
  }
}

}  // namespace stx::nn
