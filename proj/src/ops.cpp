#include "repo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace repo::ops {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2,
          "matmul needs rank-2 operands, got " + shape_str(av.shape()) +
              " and " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require(bv.dim(0) == k, "matmul inner extents disagree: " +
                              shape_str(av.shape()) + " x " +
                              shape_str(bv.shape()));
  Tensor<T> out(Shape{m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  const auto ai = a.id, bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    T* da = g.needs_grad(ai) ? g.grad(ai).data() : nullptr;
    T* db = g.needs_grad(bi) ? g.grad(bi).data() : nullptr;
    kernels::matmul_backward(g.value(ai).data(), g.value(bi).data(),
                             g.grad(self).data(), da, db, m, k, n);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.value().same_shape(b.value()),
          "add shape mismatch: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    for (auto in : {ai, bi}) {
      if (!g.needs_grad(in)) continue;
      auto& gi = g.grad(in);
      const auto& go = g.grad(self);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require(a.value().same_shape(b.value()),
          "mul shape mismatch: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    // Read both values before touching grads; a and b may be the same node.
    const auto& av = g.value(ai);
    const auto& bv2 = g.value(bi);
    if (g.needs_grad(ai)) {
      auto& ga = g.grad(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv2[i];
    }
    if (g.needs_grad(bi)) {
      auto& gb = g.grad(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T x : a.value().span()) s += x;
  const auto ai = a.id;
  return a.graph->push(Tensor<T>::scalar(s), {a}, [=](Graph<T>& g, std::size_t self) {
    const T go = g.grad(self)[0];
    for (auto& x : g.grad(ai).span()) x += go;
  });
}

template <typename T>
Var<T> swish(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.span()) x = x * sigmoid(x);
  const auto ai = a.id;
  return a.graph->push(std::move(out), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& x = g.value(ai);
    const auto& go = g.grad(self);
    auto& gi = g.grad(ai);
    for (std::size_t i = 0; i < gi.size(); ++i) {
      const T s = sigmoid(x[i]);
      gi[i] += go[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const auto& av = a.value();
  require(av.rank() >= 1 && av.cols() >= 1,
          "softmax_rows needs a last axis of extent >= 1, got " +
              shape_str(av.shape()));
  Tensor<T> out(av.shape());
  const std::size_t rows = av.rows(), cols = av.cols();
  kernels::softmax_rows(av.data(), out.data(), rows, cols);
  const auto ai = a.id;
  return a.graph->push(std::move(out), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& y = g.value(self);
    const auto& go = g.grad(self);
    auto& gi = g.grad(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += go.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < cols; ++c)
        gi.at(r, c) += y.at(r, c) * (go.at(r, c) - dot);
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets,
                     std::span<const T> mask) {
  const auto& lv = logits.value();
  require(lv.rank() == 2, "cross_entropy logits must be [positions x vocab], got " +
                              shape_str(lv.shape()));
  const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
  require(targets.size() == rows && mask.size() == rows,
          "cross_entropy: " + std::to_string(rows) + " positions but " +
              std::to_string(targets.size()) + " targets and " +
              std::to_string(mask.size()) + " mask weights");
  T total_w = 0;
  for (T w : mask) total_w += w;
  if (!(total_w > T(0))) {
    throw std::invalid_argument("cross_entropy: mask selects no positions");
  }
  Tensor<T> probs(Shape{rows, vocab});
  kernels::softmax_rows(lv.data(), probs.data(), rows, vocab);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == T(0)) continue;
    const auto t = targets[r];
    require(t >= 0 && static_cast<std::size_t>(t) < vocab,
            "cross_entropy target " + std::to_string(t) + " outside vocab " +
                std::to_string(vocab));
    // log-sum-exp form keeps the loss finite when p underflows.
    const T* row = lv.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T se = 0;
    for (std::size_t c = 0; c < vocab; ++c) se += std::exp(row[c] - mx);
    loss += mask[r] * (mx + std::log(se) - row[t]);
  }
  loss /= total_w;
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<T> w(mask.begin(), mask.end());
  const auto li = logits.id;
  return logits.graph->push(
      Tensor<T>::scalar(loss), {logits},
      [=, probs = std::move(probs), tgt = std::move(tgt), w = std::move(w)](
          Graph<T>& g, std::size_t self) {
        const T go = g.grad(self)[0] / total_w;
        auto& gl = g.grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == T(0)) continue;
          const T scale = go * w[r];
          for (std::size_t c = 0; c < vocab; ++c)
            gl.at(r, c) += scale * probs.at(r, c);
          gl.at(r, tgt[r]) -= scale;
        }
      });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(gv.size() == cols, "rms_norm gain has " + std::to_string(gv.size()) +
                                 " elements for width " + std::to_string(cols));
  Tensor<T> out(xv.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ms = 0;
    for (std::size_t c = 0; c < cols; ++c) ms += xv.at(r, c) * xv.at(r, c);
    inv[r] = T(1) / std::sqrt(ms / T(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c)
      out.at(r, c) = xv.at(r, c) * inv[r] * gv[c];
  }
  const auto xi = x.id, gi = gain.id;
  return x.graph->push(
      std::move(out), {x, gain},
      [=, inv = std::move(inv)](Graph<T>& g, std::size_t self) {
        const auto& xv = g.value(xi);
        const auto& gv = g.value(gi);
        const auto& go = g.grad(self);
        if (g.needs_grad(gi)) {
          auto& gg = g.grad(gi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gg[c] += go.at(r, c) * xv.at(r, c) * inv[r];
        }
        if (g.needs_grad(xi)) {
          auto& gx = g.grad(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c)
              dot += go.at(r, c) * gv[c] * xv.at(r, c);
            const T k = dot * inv[r] * inv[r] / T(cols);
            for (std::size_t c = 0; c < cols; ++c)
              gx.at(r, c) += inv[r] * (go.at(r, c) * gv[c] - xv.at(r, c) * k);
          }
        }
      });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
  const auto& tv = table.value();
  require(tv.rank() == 2, "embedding table must be rank 2, got " +
                              shape_str(tv.shape()));
  const std::size_t vocab = tv.dim(0), width = tv.dim(1);
  Tensor<T> out(Shape{ids.size(), width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(ids[r]) +
                              " outside vocab of " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + ids[r] * width, width, out.data() + r * width);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  const auto ti = table.id;
  return table.graph->push(
      std::move(out), {table},
      [=, idv = std::move(idv)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gt = g.grad(ti);
        for (std::size_t r = 0; r < idv.size(); ++r)
          for (std::size_t c = 0; c < width; ++c)
            gt.at(idv[r], c) += go.at(r, c);
      });
}

template <typename T>
AttentionResult<T> rotary_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> z,
                                    std::size_t heads,
                                    std::span<const T> freqs) {
  const auto& qv = q.value();
  require(qv.rank() == 2 && k.value().same_shape(qv) && v.value().same_shape(qv),
          "rotary_attention q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
              shape_str(k.shape()) + ", " + shape_str(v.shape()));
  kernels::AttentionDims dims;
  dims.seq = qv.dim(0);
  dims.heads = heads;
  require(heads > 0 && qv.dim(1) % heads == 0,
          "width " + std::to_string(qv.dim(1)) + " not divisible by " +
              std::to_string(heads) + " heads");
  dims.head_dim = qv.dim(1) / heads;
  require(dims.head_dim % 2 == 0 && freqs.size() == dims.head_dim / 2,
          "rotary head_dim " + std::to_string(dims.head_dim) +
              " needs even width and " + std::to_string(dims.head_dim / 2) +
              " frequencies");
  const auto& zv = z.value();
  require(zv.rank() == 2 && zv.dim(0) == dims.seq &&
              (zv.dim(1) == 1 || zv.dim(1) == heads),
          "rotary_attention positions must be [L x 1] or [L x H], got " +
              shape_str(zv.shape()));
  dims.z_heads = zv.dim(1);

  const T scale = T(1) / std::sqrt(T(dims.head_dim));
  Tensor<T> out(qv.shape());
  auto probs = std::make_shared<Tensor<T>>(Shape{heads, dims.seq, dims.seq});
  auto q_rot = std::make_shared<Tensor<T>>(qv.shape());
  auto k_rot = std::make_shared<Tensor<T>>(qv.shape());
  kernels::rotary_attention_forward(dims, qv.data(), k.value().data(),
                                    v.value().data(), zv.data(), freqs, scale,
                                    out.data(), probs->data(), q_rot->data(),
                                    k_rot->data());
  std::vector<T> fr(freqs.begin(), freqs.end());
  const auto qi = q.id, ki = k.id, vi = v.id, zi = z.id;
  Var<T> result = q.graph->push(
      std::move(out), {q, k, v, z},
      [=, fr = std::move(fr)](Graph<T>& g, std::size_t self) {
        // Scratch for inputs that do not need gradients.
        const std::size_t n = dims.seq * dims.width();
        std::vector<T> scratch;
        auto target = [&](std::size_t id) -> T* {
          if (g.needs_grad(id)) return g.grad(id).data();
          if (scratch.empty()) scratch.assign(n, T(0));
          return scratch.data();
        };
        T* dq = target(qi);
        T* dk = target(ki);
        T* dv = target(vi);
        T* dz = g.needs_grad(zi) ? g.grad(zi).data() : nullptr;
        kernels::rotary_attention_backward(
            dims, q_rot->data(), k_rot->data(), g.value(vi).data(),
            g.value(zi).data(), probs->data(), g.grad(self).data(),
            std::span<const T>(fr), scale, dq, dk, dv, dz);
      });
  return {result, probs};
}

#define REPO_INSTANTIATE_OPS(T)                                                \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                   \
  template Var<T> add<T>(Var<T>, Var<T>);                                      \
  template Var<T> mul<T>(Var<T>, Var<T>);                                      \
  template Var<T> sum<T>(Var<T>);                                              \
  template Var<T> swish<T>(Var<T>);                                            \
  template Var<T> softmax_rows<T>(Var<T>);                                     \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const std::int32_t>,      \
                                   std::span<const T>);                        \
  template Var<T> rms_norm<T>(Var<T>, Var<T>, T);                              \
  template Var<T> embedding<T>(Var<T>, std::span<const std::int32_t>);         \
  template AttentionResult<T> rotary_attention<T>(                             \
      Var<T>, Var<T>, Var<T>, Var<T>, std::size_t, std::span<const T>);

REPO_INSTANTIATE_OPS(float)
REPO_INSTANTIATE_OPS(double)

}  // namespace repo::ops
