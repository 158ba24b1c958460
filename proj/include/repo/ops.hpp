#pragma once

// Differentiable ops recorded on a Graph. Every op validates shapes up front
// and throws ShapeError with the offending extents.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "repo/autograd.hpp"
#include "repo/kernels.hpp"

namespace repo::ops {

// [m x k] * [k x n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

// Sum of all elements, as a scalar.
template <typename T>
Var<T> sum(Var<T> a);

// x * sigmoid(x)
template <typename T>
Var<T> swish(Var<T> a);

// Softmax over the last axis, max-subtracted.
template <typename T>
Var<T> softmax_rows(Var<T> a);

// Weighted mean of -log softmax(logits)[target] over rows with mask > 0.
// Throws std::invalid_argument when the mask has no positive weight.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets,
                     std::span<const T> mask);

// Root-mean-square normalization over the last axis with a learned gain.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps = T(1e-6));

// Gathers rows of `table` [V x d].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids);

template <typename T>
struct AttentionResult {
  Var<T> out;
  // [H x L x L] post-softmax probabilities, zero above the diagonal.
  std::shared_ptr<const Tensor<T>> probs;
};

// Causal multi-head attention with logits q_i^T g(z_j - z_i) k_j / sqrt(dh).
// q, k, v are [L x H*dh]; z is [L x 1] (shared by every head) or [L x H].
template <typename T>
AttentionResult<T> rotary_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> z,
                                    std::size_t heads,
                                    std::span<const T> freqs);

}  // namespace repo::ops
