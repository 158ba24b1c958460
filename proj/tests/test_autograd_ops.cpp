#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "repo/ops.hpp"
#include "repo/positioning.hpp"
#include "test_util.hpp"

using repo::Graph;
using repo::Parameter;
using repo::Shape;
using repo::Tensor;
using repo::Var;
namespace ops = repo::ops;

namespace {

Parameter<double> rp(const std::string& name, Shape s, std::uint64_t seed, double scale = 1.0) {
  return Parameter<double>(name, testutil::random_tensor(std::move(s), seed, scale));
}

// Weighted sum with a fixed random tensor so every output entry matters.
Var<double> probe(Var<double> x, std::uint64_t seed) {
  auto w = testutil::random_tensor(x.shape(), seed);
  return ops::sum(ops::mul(x, x.graph->constant(std::move(w))));
}

}  // namespace

TEST(Ops, MatmulGradient) {
  auto a = rp("a", {4, 5}, 1), b = rp("b", {5, 3}, 2);
  auto r = testutil::gradient_check({&a, &b}, [&](Graph<double>& g) {
    return probe(ops::matmul(g.param(a), g.param(b)), 3);
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Ops, ElementwiseGradients) {
  auto a = rp("a", {3, 4}, 4), b = rp("b", {3, 4}, 5);
  auto r = testutil::gradient_check({&a, &b}, [&](Graph<double>& g) {
    auto x = ops::add(ops::swish(g.param(a)), ops::mul(g.param(a), g.param(b)));
    return probe(x, 6);
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Ops, SelfProductAccumulatesBothOperands) {
  auto a = rp("a", {2, 3}, 7);
  Graph<double> g;
  auto x = g.param(a);
  auto slots = repo::gradient_of(ops::sum(ops::mul(x, x)), {&a});
  for (std::size_t i = 0; i < a.value.size(); ++i)
    EXPECT_DOUBLE_EQ(slots[0].grad[i], 2 * a.value[i]);
}

TEST(Ops, SoftmaxAndRmsNormGradients) {
  auto a = rp("a", {3, 6}, 8, 2.0), gain = rp("gain", {6}, 9);
  auto r = testutil::gradient_check({&a, &gain}, [&](Graph<double>& g) {
    return probe(ops::softmax_rows(ops::rms_norm(g.param(a), g.param(gain))), 10);
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Ops, CrossEntropyGradientRespectsMask) {
  auto logits = rp("logits", {5, 7}, 11);
  const std::vector<std::int32_t> tgt = {0, 3, 6, 2, 1};
  const std::vector<double> mask = {0, 1, 0.5, 1, 0};
  auto r = testutil::gradient_check({&logits}, [&](Graph<double>& g) {
    return ops::cross_entropy(g.param(logits), std::span<const std::int32_t>(tgt),
                              std::span<const double>(mask));
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  // Masked rows carry no gradient.
  for (std::size_t c = 0; c < 7; ++c) {
    EXPECT_EQ(logits.grad.at(0, c), 0.0);
    EXPECT_EQ(logits.grad.at(4, c), 0.0);
  }
}

TEST(Ops, CrossEntropyValueIsWeightedMean) {
  auto l = Tensor<double>::matrix(2, 3, {1, 2, 3, 0, 0, 0});
  const std::vector<std::int32_t> tgt = {2, 1};
  const std::vector<double> mask = {1, 3};
  Graph<double> g;
  const double v = ops::cross_entropy(g.constant(l), std::span<const std::int32_t>(tgt),
                                      std::span<const double>(mask))
                       .value()
                       .item();
  const double l0 = -(3 - std::log(std::exp(1) + std::exp(2) + std::exp(3)));
  const double l1 = std::log(3.0);
  EXPECT_NEAR(v, (l0 + 3 * l1) / 4, 1e-12);
}

TEST(Ops, CrossEntropyRejectsEmptyMask) {
  Graph<double> g;
  auto l = g.constant(Tensor<double>(Shape{2, 3}));
  const std::vector<std::int32_t> tgt = {0, 1};
  const std::vector<double> mask = {0, 0};
  EXPECT_THROW(ops::cross_entropy(l, std::span<const std::int32_t>(tgt),
                                  std::span<const double>(mask)),
               std::invalid_argument);
}

TEST(Ops, EmbeddingGradientAndBounds) {
  auto table = rp("table", {6, 4}, 12);
  const std::vector<std::int32_t> ids = {1, 4, 1, 0};
  auto r = testutil::gradient_check({&table}, [&](Graph<double>& g) {
    return probe(ops::embedding(g.param(table), std::span<const std::int32_t>(ids)), 13);
  });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  Graph<double> g;
  const std::vector<std::int32_t> bad = {6};
  EXPECT_THROW(ops::embedding(g.param(table), std::span<const std::int32_t>(bad)),
               std::out_of_range);
}

TEST(Ops, ShapeMismatchNamesExtents) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{4, 2}));
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const repo::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ops::add(a, b), repo::ShapeError);
}

TEST(Ops, BackwardNeedsScalar) {
  auto a = rp("a", {2, 2}, 14);
  Graph<double> g;
  EXPECT_THROW(g.backward(g.param(a)), repo::ShapeError);
}

TEST(Ops, ConstantsDoNotRecordBackward) {
  Graph<double> g;
  auto a = g.constant(testutil::random_tensor({2, 2}, 15));
  auto y = ops::sum(ops::swish(a));
  EXPECT_FALSE(g.needs_grad(y.id));
}

class AttentionGrad : public ::testing::TestWithParam<std::size_t> {};

TEST_P(AttentionGrad, RotaryAttentionGradientIncludingPositions) {
  const std::size_t L = 6, H = 2, dh = 4, zh = GetParam();
  auto q = rp("q", {L, H * dh}, 20), k = rp("k", {L, H * dh}, 21),
       v = rp("v", {L, H * dh}, 22), z = rp("z", {L, zh}, 23, 2.0);
  const auto freqs = repo::rope_frequencies(dh).as<double>();
  auto r = testutil::gradient_check({&q, &k, &v, &z}, [&](Graph<double>& g) {
    auto att = ops::rotary_attention(g.param(q), g.param(k), g.param(v), g.param(z), H,
                                     std::span<const double>(freqs));
    return probe(att.out, 24);
  });
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(PositionColumns, AttentionGrad, ::testing::Values(1u, 2u));
