#include "repo/positioning.hpp"

#include <cmath>
#include <stdexcept>

#include "repo/ops.hpp"

namespace repo {

FrequencyVector rope_frequencies(std::size_t head_dim, double base) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw std::invalid_argument("rotary head_dim must be even and positive, got " +
                                std::to_string(head_dim));
  }
  if (!(base > 0.0)) {
    throw std::invalid_argument("rotary base must be positive");
  }
  FrequencyVector f;
  f.base = base;
  f.theta.resize(head_dim / 2);
  for (std::size_t m = 0; m < f.theta.size(); ++m) {
    f.theta[m] = std::pow(base, -2.0 * double(m) / double(head_dim));
  }
  return f;
}

template <typename T>
std::vector<T> rotate(std::span<const T> v, T position,
                      const FrequencyVector& freqs) {
  if (v.size() != freqs.head_dim()) {
    throw ShapeError("rotate: vector of length " + std::to_string(v.size()) +
                     " for head_dim " + std::to_string(freqs.head_dim()));
  }
  std::vector<T> out(v.size());
  for (std::size_t m = 0; m < freqs.theta.size(); ++m) {
    const T ang = position * T(freqs.theta[m]);
    const T c = std::cos(ang), s = std::sin(ang);
    out[2 * m] = v[2 * m] * c - v[2 * m + 1] * s;
    out[2 * m + 1] = v[2 * m] * s + v[2 * m + 1] * c;
  }
  return out;
}

std::string to_string(PositionMode mode) {
  switch (mode) {
    case PositionMode::Linear: return "linear";
    case PositionMode::Constant: return "constant";
    case PositionMode::Learned: return "learned";
  }
  return "?";
}

PositionMode position_mode_from_string(const std::string& s) {
  if (s == "linear" || s == "rope") return PositionMode::Linear;
  if (s == "constant" || s == "nope") return PositionMode::Constant;
  if (s == "learned" || s == "repo") return PositionMode::Learned;
  throw std::invalid_argument("unknown position mode '" + s + "'");
}

template <typename T>
Var<T> position_representation(Var<T> h, Var<T> gate, Var<T> content) {
  return ops::mul(ops::swish(ops::matmul(h, gate)), ops::matmul(h, content));
}

template <typename T>
Tensor<T> position_representation(const Tensor<T>& h,
                                   const RepoParams<T>& params) {
  if (h.rank() != 2 || h.dim(1) != params.width()) {
    throw ShapeError("position_representation: hidden states " +
                     shape_str(h.shape()) + " but f_phi expects width " +
                     std::to_string(params.width()));
  }
  Graph<T> g;
  auto r = position_representation(g.constant(h), g.constant(params.gate.value),
                                   g.constant(params.content.value));
  return r.value();
}

template <typename T>
Var<T> assign_positions(Var<T> r, Var<T> readout) {
  return ops::matmul(r, readout);
}

template <typename T>
std::vector<T> assign_position(const Tensor<T>& r, std::size_t head,
                               const RepoParams<T>& params,
                               std::size_t n_heads) {
  if (head >= n_heads) {
    throw std::out_of_range("head " + std::to_string(head) + " of " +
                            std::to_string(n_heads));
  }
  if (r.rank() != 2 || r.dim(1) != params.rep_width()) {
    throw ShapeError("assign_position: representation " + shape_str(r.shape()) +
                     " but readout expects width " +
                     std::to_string(params.rep_width()));
  }
  const auto& w = params.readout.value;
  const std::size_t col = params.position_heads() == 1 ? 0 : head;
  std::vector<T> z(r.dim(0), T(0));
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t p = 0; p < r.dim(1); ++p) z[i] += r.at(i, p) * w.at(p, col);
  return z;
}

template <typename T>
Tensor<T> relative_rotary_logits(const Tensor<T>& q, const Tensor<T>& k,
                                 std::span<const T> zq, std::span<const T> zk,
                                 const FrequencyVector& freqs) {
  if (q.rank() != 2 || !q.same_shape(k)) {
    throw ShapeError("relative_rotary_logits: q " + shape_str(q.shape()) +
                     " vs k " + shape_str(k.shape()));
  }
  const std::size_t L = q.dim(0), dh = q.dim(1);
  if (zq.size() != L || zk.size() != L) {
    throw ShapeError("relative_rotary_logits: " + std::to_string(L) +
                     " tokens but " + std::to_string(zq.size()) + "/" +
                     std::to_string(zk.size()) + " positions");
  }
  std::vector<std::vector<T>> qr(L), kr(L);
  for (std::size_t i = 0; i < L; ++i) {
    qr[i] = rotate(q.row(i), zq[i], freqs);
    kr[i] = rotate(k.row(i), zk[i], freqs);
  }
  const T scale = T(1) / std::sqrt(T(dh));
  Tensor<T> a(Shape{L, L});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      T s = 0;
      for (std::size_t c = 0; c < dh; ++c) s += qr[i][c] * kr[j][c];
      a.at(i, j) = s * scale;
    }
  }
  return a;
}

template <typename T>
Tensor<T> fixed_positions(PositionMode mode, std::size_t seq_len,
                          double constant) {
  Tensor<T> z(Shape{seq_len, 1});
  switch (mode) {
    case PositionMode::Linear:
      for (std::size_t i = 0; i < seq_len; ++i) z[i] = T(i);
      break;
    case PositionMode::Constant:
      z.fill(T(constant));
      break;
    case PositionMode::Learned:
      throw std::invalid_argument("learned positions depend on hidden states");
  }
  return z;
}

#define REPO_INSTANTIATE_POSITIONING(T)                                        \
  template std::vector<T> rotate<T>(std::span<const T>, T,                     \
                                    const FrequencyVector&);                   \
  template Var<T> position_representation<T>(Var<T>, Var<T>, Var<T>);          \
  template Tensor<T> position_representation<T>(const Tensor<T>&,              \
                                                const RepoParams<T>&);         \
  template Var<T> assign_positions<T>(Var<T>, Var<T>);                         \
  template std::vector<T> assign_position<T>(                                  \
      const Tensor<T>&, std::size_t, const RepoParams<T>&, std::size_t);       \
  template Tensor<T> relative_rotary_logits<T>(                                \
      const Tensor<T>&, const Tensor<T>&, std::span<const T>,                  \
      std::span<const T>, const FrequencyVector&);                             \
  template Tensor<T> fixed_positions<T>(PositionMode, std::size_t, double);

REPO_INSTANTIATE_POSITIONING(float)
REPO_INSTANTIATE_POSITIONING(double)

}  // namespace repo
