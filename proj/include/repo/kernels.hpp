#pragma once

// Dense numeric kernels used by the differentiable ops.
//
// Two implementations are kept side by side. The default namespace holds the
// OpenMP-parallel kernels used for training and inference. `serial` holds
// straightforward single-threaded reference kernels; the attention reference
// evaluates q_i^T R(z_j - z_i) k_j pair by pair instead of rotating q and k
// by their absolute positions, so the two agree only if the relative-rotation
// identity holds. Tests compare the two, and bench/ times them.

#include <cstddef>
#include <span>

namespace repo::kernels {

struct AttentionDims {
  std::size_t seq = 0;        // L
  std::size_t heads = 0;      // H
  std::size_t head_dim = 0;   // d_head, even
  std::size_t z_heads = 0;    // 1 (shared positions) or H
  std::size_t width() const { return heads * head_dim; }
  std::size_t z_col(std::size_t h) const { return z_heads == 1 ? 0 : h; }
};

// Worker count for the parallel kernels; 0 restores the OpenMP default.
void set_num_threads(int n);
int num_threads();

// C[m x n] = A[m x k] * B[k x n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n);

// dA += dC * B^T, dB += A^T * dC. Either output may be null.
template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db,
                     std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

// Rotates each (2m, 2m+1) pair of every head slice of `src` by z * freqs[m].
// `sign` = -1 applies the inverse rotation.
template <typename T>
void rotate_heads(const T* src, const T* z, std::span<const T> freqs,
                  const AttentionDims& dims, T* dst, int sign = 1);

// Causal rotary attention with per-token positions z [L x z_heads].
// Writes out [L x H*dh], probs [H x L x L] (zero above the diagonal), and the
// rotated q/k caches needed by the backward pass.
template <typename T>
void rotary_attention_forward(const AttentionDims& dims, const T* q,
                              const T* k, const T* v, const T* z,
                              std::span<const T> freqs, T scale, T* out,
                              T* probs, T* q_rot, T* k_rot);

// Accumulates into dq, dk, dv [L x H*dh] and, when non-null, dz [L x z_heads].
template <typename T>
void rotary_attention_backward(const AttentionDims& dims, const T* q_rot,
                               const T* k_rot, const T* v, const T* z,
                               const T* probs, const T* dout,
                               std::span<const T> freqs, T scale, T* dq, T* dk,
                               T* dv, T* dz);

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n);

template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db,
                     std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

// Same contract as the parallel version except that q/k are the unrotated
// inputs and no rotation caches are produced.
template <typename T>
void rotary_attention_forward(const AttentionDims& dims, const T* q,
                              const T* k, const T* v, const T* z,
                              std::span<const T> freqs, T scale, T* out,
                              T* probs);

template <typename T>
void rotary_attention_backward(const AttentionDims& dims, const T* q,
                               const T* k, const T* v, const T* z,
                               const T* probs, const T* dout,
                               std::span<const T> freqs, T scale, T* dq, T* dk,
                               T* dv, T* dz);

}  // namespace serial
}  // namespace repo::kernels
