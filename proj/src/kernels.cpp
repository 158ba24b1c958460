#include "repo/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <omp.h>

namespace repo::kernels {

namespace {
int g_default_threads = 0;
}

void set_num_threads(int n) {
  if (g_default_threads == 0) g_default_threads = omp_get_max_threads();
  omp_set_num_threads(n > 0 ? n : g_default_threads);
}

int num_threads() { return omp_get_max_threads(); }

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    T* ci = c + i * n;
    std::fill(ci, ci + n, T(0));
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db,
                     std::size_t m, std::size_t k, std::size_t n) {
  const bool big = m * k * n > 32768;
  if (da) {
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
      const T* dci = dc + i * n;
      T* dai = da + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b + p * n;
        T s = 0;
#pragma omp simd reduction(+ : s)
        for (std::size_t j = 0; j < n; ++j) s += dci[j] * bp[j];
        dai[p] += s;
      }
    }
  }
  if (db) {
    const auto inner = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t p = 0; p < inner; ++p) {
      T* dbp = db + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T aip = a[i * k + p];
        if (aip == T(0)) continue;
        const T* dci = dc + i * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * dci[j];
      }
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > 65536)
  for (std::ptrdiff_t i = 0; i < r; ++i) {
    const T* xi = x + i * cols;
    T* yi = y + i * cols;
    const T mx = *std::max_element(xi, xi + cols);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

template <typename T>
void rotate_heads(const T* src, const T* z, std::span<const T> freqs,
                  const AttentionDims& dims, T* dst, int sign) {
  const std::size_t width = dims.width();
  const std::size_t half = dims.head_dim / 2;
  const auto rows = static_cast<std::ptrdiff_t>(dims.seq);
#pragma omp parallel for schedule(static) if (dims.seq * width > 16384)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const T pos = z[i * dims.z_heads + dims.z_col(h)] * T(sign);
      const T* s = src + i * width + h * dims.head_dim;
      T* d = dst + i * width + h * dims.head_dim;
      for (std::size_t m = 0; m < half; ++m) {
        const T ang = pos * freqs[m];
        const T c = std::cos(ang), sn = std::sin(ang);
        const T x0 = s[2 * m], x1 = s[2 * m + 1];
        d[2 * m] = x0 * c - x1 * sn;
        d[2 * m + 1] = x0 * sn + x1 * c;
      }
    }
  }
}

template <typename T>
void rotary_attention_forward(const AttentionDims& dims, const T* q,
                              const T* k, const T* v, const T* z,
                              std::span<const T> freqs, T scale, T* out,
                              T* probs, T* q_rot, T* k_rot) {
  const std::size_t L = dims.seq, W = dims.width(), dh = dims.head_dim;
  rotate_heads(q, z, freqs, dims, q_rot);
  rotate_heads(k, z, freqs, dims, k_rot);
  const auto heads = static_cast<std::ptrdiff_t>(dims.heads);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t h = 0; h < heads; ++h) {
    T* ph = probs + h * L * L;
    for (std::size_t i = 0; i < L; ++i) {
      const T* qi = q_rot + i * W + h * dh;
      T* pi = ph + i * L;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k_rot + j * W + h * dh;
        // Serial order keeps the logits bit-identical to a plain dot product.
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j <= i; ++j) pi[j] *= inv;
      std::fill(pi + i + 1, pi + L, T(0));

      T* oi = out + i * W + h * dh;
      std::fill(oi, oi + dh, T(0));
      for (std::size_t j = 0; j <= i; ++j) {
        const T p = pi[j];
        const T* vj = v + j * W + h * dh;
#pragma omp simd
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
      }
    }
  }
}

template <typename T>
void rotary_attention_backward(const AttentionDims& dims, const T* q_rot,
                               const T* k_rot, const T* v, const T* z,
                               const T* probs, const T* dout,
                               std::span<const T> freqs, T scale, T* dq, T* dk,
                               T* dv, T* dz) {
  const std::size_t L = dims.seq, W = dims.width(), dh = dims.head_dim;
  std::vector<T> dq_rot(L * W, T(0)), dk_rot(L * W, T(0));
  const auto heads = static_cast<std::ptrdiff_t>(dims.heads);
#pragma omp parallel
  {
    std::vector<T> dp(L);
#pragma omp for schedule(static)
    for (std::ptrdiff_t h = 0; h < heads; ++h) {
      const T* ph = probs + h * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const T* pi = ph + i * L;
        const T* doi = dout + i * W + h * dh;
        T row = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = v + j * W + h * dh;
          T* dvj = dv + j * W + h * dh;
          T s = 0;
#pragma omp simd reduction(+ : s)
          for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
          dp[j] = s;
          row += pi[j] * s;
          const T p = pi[j];
#pragma omp simd
          for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * doi[c];
        }
        const T* qi = q_rot + i * W + h * dh;
        T* dqi = dq_rot.data() + i * W + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = pi[j] * (dp[j] - row) * scale;
          if (ds == T(0)) continue;
          const T* kj = k_rot + j * W + h * dh;
          T* dkj = dk_rot.data() + j * W + h * dh;
#pragma omp simd
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
  }

  const std::size_t half = dh / 2;
  const auto rows = static_cast<std::ptrdiff_t>(L);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const std::size_t off = i * W + h * dh;
      const T pos = z[i * dims.z_heads + dims.z_col(h)];
      T grad_pos = 0;
      for (std::size_t m = 0; m < half; ++m) {
        const std::size_t a = off + 2 * m, b = a + 1;
        if (dz) {
          grad_pos += freqs[m] * (dq_rot[b] * q_rot[a] - dq_rot[a] * q_rot[b] +
                                  dk_rot[b] * k_rot[a] - dk_rot[a] * k_rot[b]);
        }
        const T ang = pos * freqs[m];
        const T c = std::cos(ang), s = std::sin(ang);
        // Inverse rotation maps gradients back to the unrotated inputs.
        dq[a] += dq_rot[a] * c + dq_rot[b] * s;
        dq[b] += -dq_rot[a] * s + dq_rot[b] * c;
        dk[a] += dk_rot[a] * c + dk_rot[b] * s;
        dk[b] += -dk_rot[a] * s + dk_rot[b] * c;
      }
      if (dz) dz[i * dims.z_heads + dims.z_col(h)] += grad_pos;
    }
  }
}

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t j = 0; j < n; ++j) {
        const T g = dc[i * n + j];
        if (da) da[i * k + p] += g * b[p * n + j];
        if (db) db[p * n + j] += a[i * k + p] * g;
      }
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    T mx = x[i * cols];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[i * cols + j]);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(x[i * cols + j] - mx);
    for (std::size_t j = 0; j < cols; ++j)
      y[i * cols + j] = std::exp(x[i * cols + j] - mx) / sum;
  }
}

namespace {

// q^T R(delta) k over one head slice, and its derivative in delta.
template <typename T>
void relative_score(const T* q, const T* k, T delta, std::span<const T> freqs,
                    std::size_t dh, T& score, T& dscore) {
  score = 0;
  dscore = 0;
  for (std::size_t m = 0; m < dh / 2; ++m) {
    const T ang = delta * freqs[m];
    const T c = std::cos(ang), s = std::sin(ang);
    const T q0 = q[2 * m], q1 = q[2 * m + 1];
    const T k0 = k[2 * m], k1 = k[2 * m + 1];
    score += q0 * (c * k0 - s * k1) + q1 * (s * k0 + c * k1);
    dscore += freqs[m] * (q0 * (-s * k0 - c * k1) + q1 * (c * k0 - s * k1));
  }
}

// Writes R(delta) k into out, and R(delta)^T q into out_t.
template <typename T>
void relative_rotate(const T* q, const T* k, T delta, std::span<const T> freqs,
                     std::size_t dh, T* out, T* out_t) {
  for (std::size_t m = 0; m < dh / 2; ++m) {
    const T ang = delta * freqs[m];
    const T c = std::cos(ang), s = std::sin(ang);
    out[2 * m] = c * k[2 * m] - s * k[2 * m + 1];
    out[2 * m + 1] = s * k[2 * m] + c * k[2 * m + 1];
    out_t[2 * m] = c * q[2 * m] + s * q[2 * m + 1];
    out_t[2 * m + 1] = -s * q[2 * m] + c * q[2 * m + 1];
  }
}

}  // namespace

template <typename T>
void rotary_attention_forward(const AttentionDims& dims, const T* q,
                              const T* k, const T* v, const T* z,
                              std::span<const T> freqs, T scale, T* out,
                              T* probs) {
  const std::size_t L = dims.seq, W = dims.width(), dh = dims.head_dim;
  std::vector<T> logits(L);
  for (std::size_t h = 0; h < dims.heads; ++h) {
    const std::size_t zc = dims.z_col(h);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        T s, ds;
        const T delta = z[j * dims.z_heads + zc] - z[i * dims.z_heads + zc];
        relative_score(q + i * W + h * dh, k + j * W + h * dh, delta, freqs,
                       dh, s, ds);
        logits[j] = s * scale;
      }
      T* pi = probs + (h * L + i) * L;
      softmax_rows(logits.data(), pi, 1, i + 1);
      for (std::size_t j = i + 1; j < L; ++j) pi[j] = 0;
      for (std::size_t c = 0; c < dh; ++c) {
        T acc = 0;
        for (std::size_t j = 0; j <= i; ++j) acc += pi[j] * v[j * W + h * dh + c];
        out[i * W + h * dh + c] = acc;
      }
    }
  }
}

template <typename T>
void rotary_attention_backward(const AttentionDims& dims, const T* q,
                               const T* k, const T* v, const T* z,
                               const T* probs, const T* dout,
                               std::span<const T> freqs, T scale, T* dq, T* dk,
                               T* dv, T* dz) {
  const std::size_t L = dims.seq, W = dims.width(), dh = dims.head_dim;
  std::vector<T> dp(L), rk(dh), rq(dh);
  for (std::size_t h = 0; h < dims.heads; ++h) {
    const std::size_t zc = dims.z_col(h);
    for (std::size_t i = 0; i < L; ++i) {
      const T* pi = probs + (h * L + i) * L;
      T row = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) {
          s += dout[i * W + h * dh + c] * v[j * W + h * dh + c];
          dv[j * W + h * dh + c] += pi[j] * dout[i * W + h * dh + c];
        }
        dp[j] = s;
        row += pi[j] * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = pi[j] * (dp[j] - row) * scale;
        const T zi = z[i * dims.z_heads + zc], zj = z[j * dims.z_heads + zc];
        const T* qi = q + i * W + h * dh;
        const T* kj = k + j * W + h * dh;
        relative_rotate(qi, kj, zj - zi, freqs, dh, rk.data(), rq.data());
        for (std::size_t c = 0; c < dh; ++c) {
          dq[i * W + h * dh + c] += ds * rk[c];
          dk[j * W + h * dh + c] += ds * rq[c];
        }
        if (dz) {
          T s, dsd;
          relative_score(qi, kj, zj - zi, freqs, dh, s, dsd);
          dz[j * dims.z_heads + zc] += ds * dsd;
          dz[i * dims.z_heads + zc] -= ds * dsd;
        }
      }
    }
  }
}

}  // namespace serial

#define REPO_INSTANTIATE_KERNELS(T)                                            \
  template void matmul<T>(const T*, const T*, T*, std::size_t, std::size_t,    \
                          std::size_t);                                        \
  template void matmul_backward<T>(const T*, const T*, const T*, T*, T*,       \
                                   std::size_t, std::size_t, std::size_t);     \
  template void softmax_rows<T>(const T*, T*, std::size_t, std::size_t);       \
  template void rotate_heads<T>(const T*, const T*, std::span<const T>,        \
                                const AttentionDims&, T*, int);                \
  template void rotary_attention_forward<T>(                                   \
      const AttentionDims&, const T*, const T*, const T*, const T*,            \
      std::span<const T>, T, T*, T*, T*, T*);                                  \
  template void rotary_attention_backward<T>(                                  \
      const AttentionDims&, const T*, const T*, const T*, const T*, const T*,  \
      const T*, std::span<const T>, T, T*, T*, T*, T*);                        \
  template void serial::matmul<T>(const T*, const T*, T*, std::size_t,         \
                                  std::size_t, std::size_t);                   \
  template void serial::matmul_backward<T>(const T*, const T*, const T*, T*,   \
                                           T*, std::size_t, std::size_t,       \
                                           std::size_t);                       \
  template void serial::softmax_rows<T>(const T*, T*, std::size_t,             \
                                        std::size_t);                          \
  template void serial::rotary_attention_forward<T>(                           \
      const AttentionDims&, const T*, const T*, const T*, const T*,            \
      std::span<const T>, T, T*, T*);                                          \
  template void serial::rotary_attention_backward<T>(                          \
      const AttentionDims&, const T*, const T*, const T*, const T*, const T*,  \
      const T*, std::span<const T>, T, T*, T*, T*, T*);

REPO_INSTANTIATE_KERNELS(float)
REPO_INSTANTIATE_KERNELS(double)

}  // namespace repo::kernels
