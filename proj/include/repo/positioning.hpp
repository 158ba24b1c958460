#pragma once

// Position assignment and rotary encoding.
//
// Attention logits are q_i^T g(z_j - z_i) k_j where g is the rotary map and
// z is produced by one of three assignment strategies: linear (z_i = i),
// constant (z_i = a), or learned from the hidden state by a gated projection
// followed by a per-head linear readout.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repo/autograd.hpp"
#include "repo/tensor.hpp"

namespace repo {

struct FrequencyVector {
  double base = 10000.0;
  std::vector<double> theta;  // theta[m] = base^(-2m/d_head)

  std::size_t head_dim() const { return theta.size() * 2; }

  template <typename T>
  std::vector<T> as() const {
    return std::vector<T>(theta.begin(), theta.end());
  }
};

// Throws std::invalid_argument for odd or zero head widths, or base <= 0.
FrequencyVector rope_frequencies(std::size_t head_dim, double base = 10000.0);

// Rotates each (2m, 2m+1) pair of v by position * theta[m].
template <typename T>
std::vector<T> rotate(std::span<const T> v, T position,
                      const FrequencyVector& freqs);

enum class PositionMode { Linear, Constant, Learned };

std::string to_string(PositionMode mode);
// Accepts "linear"/"rope", "constant"/"nope", "learned"/"repo".
PositionMode position_mode_from_string(const std::string& s);

// f_phi weights for one layer. gate/content are shared across the layer's
// heads; readout holds one column per head, or a single shared column.
template <typename T>
struct RepoParams {
  Parameter<T> gate;     // [d x d_p]
  Parameter<T> content;  // [d x d_p]
  Parameter<T> readout;  // [d_p x heads] or [d_p x 1]

  std::size_t width() const { return gate.value.dim(0); }
  std::size_t rep_width() const { return gate.value.dim(1); }
  std::size_t position_heads() const { return readout.value.dim(1); }
};

// r_i = swish(h_i W_gate) * (h_i W_content), recorded on the graph.
template <typename T>
Var<T> position_representation(Var<T> h, Var<T> gate, Var<T> content);

// Eager form on plain tensors. h is [L x d]; returns [L x d_p].
template <typename T>
Tensor<T> position_representation(const Tensor<T>& h,
                                   const RepoParams<T>& params);

// z = r W_readout, [L x position_heads], recorded on the graph.
template <typename T>
Var<T> assign_positions(Var<T> r, Var<T> readout);

// Positions for one head from r [L x d_p]. When the readout is shared, every
// head maps to column 0. Throws std::out_of_range for an unknown head.
template <typename T>
std::vector<T> assign_position(const Tensor<T>& r, std::size_t head,
                               const RepoParams<T>& params,
                               std::size_t n_heads);

// Full [L x L] logit matrix (no causal mask) for one head:
// A_ij = rotate(q_i, zq_i) . rotate(k_j, zk_j) / sqrt(d_head).
template <typename T>
Tensor<T> relative_rotary_logits(const Tensor<T>& q, const Tensor<T>& k,
                                 std::span<const T> zq, std::span<const T> zk,
                                 const FrequencyVector& freqs);

// Positions a fixed mode assigns to L tokens, as an [L x 1] column.
template <typename T>
Tensor<T> fixed_positions(PositionMode mode, std::size_t seq_len,
                          double constant = 0.0);

// z^{k,h} for every learned layer k and head h of one forward pass.
struct PositionTrace {
  struct Entry {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::vector<double> z;
  };
  std::size_t seq_len = 0;
  std::vector<Entry> entries;

  bool empty() const { return entries.empty(); }
};

}  // namespace repo
