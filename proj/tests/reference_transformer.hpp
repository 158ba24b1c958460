#pragma once

// Plain-loop transformer used as an oracle. It reads parameters by name from
// a Model<double> and recomputes the forward pass with scalar loops and its
// own rotary code. Arithmetic follows the library's summation order so that
// the unrotated path can be compared bit for bit.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repo/model.hpp"

namespace reftest {

using Mat = std::vector<std::vector<double>>;

struct RefOutput {
  Mat logits;
  // Pre-softmax attention scores per (layer, head), lower triangle only.
  std::vector<Mat> scores;
  // Positions used per (layer, head).
  std::vector<std::vector<double>> positions;
};

class ReferenceTransformer {
 public:
  explicit ReferenceTransformer(const repo::Model<double>& m) : cfg_(m.config()) {
    for (const auto* p : m.parameters()) params_[p->name] = p->value;
  }

  RefOutput forward(const std::vector<std::int32_t>& tokens) const {
    const std::size_t L = tokens.size(), d = cfg_.d_model, H = cfg_.n_heads;
    const std::size_t dh = d / H;
    RefOutput out;
    Mat x(L, std::vector<double>(d));
    const auto& E = params_.at("embed");
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t c = 0; c < d; ++c) x[i][c] = E.at(std::size_t(tokens[i]), c);

    for (std::size_t k = 0; k < cfg_.n_layers; ++k) {
      const std::string p = "layers." + std::to_string(k) + ".";
      Mat h = rms(x, params_.at(p + "attn_norm"));
      Mat q = mm(h, params_.at(p + "wq"));
      Mat kk = mm(h, params_.at(p + "wk"));
      Mat v = mm(h, params_.at(p + "wv"));

      std::vector<std::vector<double>> z(H, std::vector<double>(L, 0.0));
      const auto mode = cfg_.schedule[k];
      if (mode == repo::PositionMode::Linear) {
        for (auto& zh : z)
          for (std::size_t i = 0; i < L; ++i) zh[i] = double(i);
      } else if (mode == repo::PositionMode::Constant) {
        for (auto& zh : z) std::fill(zh.begin(), zh.end(), cfg_.constant_position);
      } else {
        Mat g = mm(h, params_.at(p + "repo.gate"));
        Mat c = mm(h, params_.at(p + "repo.content"));
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < g[i].size(); ++j)
            g[i][j] = (g[i][j] * (1.0 / (1.0 + std::exp(-g[i][j])))) * c[i][j];
        Mat zz = mm(g, params_.at(p + "repo.readout"));
        for (std::size_t hd = 0; hd < H; ++hd)
          for (std::size_t i = 0; i < L; ++i)
            z[hd][i] = zz[i][zz[i].size() == 1 ? 0 : hd];
      }

      Mat att(L, std::vector<double>(d, 0.0));
      for (std::size_t hd = 0; hd < H; ++hd) {
        out.positions.push_back(z[hd]);
        Mat sc(L);
        for (std::size_t i = 0; i < L; ++i) {
          std::vector<double> qi(q[i].begin() + hd * dh, q[i].begin() + (hd + 1) * dh);
          if (mode != repo::PositionMode::Constant) qi = rotate(qi, z[hd][i]);
          sc[i].resize(i + 1);
          for (std::size_t j = 0; j <= i; ++j) {
            std::vector<double> kj(kk[j].begin() + hd * dh, kk[j].begin() + (hd + 1) * dh);
            if (mode != repo::PositionMode::Constant) kj = rotate(kj, z[hd][j]);
            double s = 0;
            for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
            sc[i][j] = s * (1.0 / std::sqrt(double(dh)));
          }
          double mx = -INFINITY;
          for (double s : sc[i]) mx = std::max(mx, s);
          std::vector<double> pr(i + 1);
          double sum = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            pr[j] = std::exp(sc[i][j] - mx);
            sum += pr[j];
          }
          const double inv = 1.0 / sum;
          for (auto& pj : pr) pj *= inv;
          for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t c = 0; c < dh; ++c)
              att[i][hd * dh + c] += pr[j] * v[j][hd * dh + c];
        }
        out.scores.push_back(std::move(sc));
      }
      add_into(x, mm(att, params_.at(p + "wo")));
      Mat h2 = rms(x, params_.at(p + "ffn_norm"));
      Mat a = mm(h2, params_.at(p + "w_gate"));
      Mat b = mm(h2, params_.at(p + "w_up"));
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j)
          a[i][j] = (a[i][j] * (1.0 / (1.0 + std::exp(-a[i][j])))) * b[i][j];
      add_into(x, mm(a, params_.at(p + "w_down")));
    }
    out.logits = mm(rms(x, params_.at("final_norm")), params_.at("unembed"));
    return out;
  }

 private:
  std::vector<double> rotate(const std::vector<double>& v, double pos) const {
    std::vector<double> r(v.size());
    const double dh = double(v.size());
    for (std::size_t m = 0; m < v.size() / 2; ++m) {
      const double th = std::pow(cfg_.rope_base, -2.0 * double(m) / dh);
      const double c = std::cos(pos * th), s = std::sin(pos * th);
      r[2 * m] = v[2 * m] * c - v[2 * m + 1] * s;
      r[2 * m + 1] = v[2 * m] * s + v[2 * m + 1] * c;
    }
    return r;
  }

  static Mat mm(const Mat& a, const repo::Tensor<double>& b) {
    const std::size_t n = b.dim(1), k = b.dim(0);
    Mat c(a.size(), std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a[i][p] * b.at(p, j);
        c[i][j] = s;
      }
    return c;
  }

  static Mat rms(const Mat& x, const repo::Tensor<double>& g) {
    Mat y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double ms = 0;
      for (double v : x[i]) ms += v * v;
      const double inv = 1.0 / std::sqrt(ms / double(x[i].size()) + 1e-6);
      for (std::size_t c = 0; c < x[i].size(); ++c) y[i][c] = x[i][c] * inv * g[c];
    }
    return y;
  }

  static void add_into(Mat& x, const Mat& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t c = 0; c < x[i].size(); ++c) x[i][c] = x[i][c] + y[i][c];
  }

  repo::ModelConfig cfg_;
  std::map<std::string, repo::Tensor<double>> params_;
};

inline double max_abs_diff(const Mat& a, const repo::Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  return m;
}

inline bool bit_equal(const Mat& a, const repo::Tensor<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      if (a[i][j] != b.at(i, j)) return false;
  return true;
}

}  // namespace reftest
