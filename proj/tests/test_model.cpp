#include "support.hpp"

#include <streambp/model.hpp>
#include <streambp/oracle.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace streambp {
namespace {

using testing::small_config;

LayerWeights<double> random_layer(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return std::move(ModelParams<double>::random(cfg, rng).layers[0]);
}

Matrix<double> random_hidden(std::size_t t, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return random_matrix<double>(t, d, rng, 1.0);
}

TEST(CausalMask, TwoByTwo) {
  const Mask m = build_causal_mask(2);
  EXPECT_EQ(m(0, 0), 1);
  EXPECT_EQ(m(0, 1), 0);
  EXPECT_EQ(m(1, 0), 1);
  EXPECT_EQ(m(1, 1), 1);
}

TEST(CausalMask, ChunkSpansPrefixColumns) {
  const Mask m = build_causal_mask(5, RowRange{1, 3});
  ASSERT_EQ(m.rows(), 2u);
  ASSERT_EQ(m.cols(), 3u);
  const int expected[2][3] = {{1, 1, 0}, {1, 1, 1}};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m(i, j), expected[i][j]);
  EXPECT_THROW(build_causal_mask(5, RowRange{3, 3}), ShapeError);
  EXPECT_THROW(build_causal_mask(5, RowRange{2, 6}), ShapeError);
}

TEST(CausalMaskProperty, RowTHasTPlusOneOnesAndChunksAgreeWithFull) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = 1 + rng.uniform_index(40);
    const Mask full = build_causal_mask(t);
    for (std::size_t i = 0; i < t; ++i) {
      std::size_t ones = 0;
      for (std::size_t j = 0; j < t; ++j) ones += full(i, j);
      EXPECT_EQ(ones, i + 1);
    }
    const std::size_t b = rng.uniform_index(t);
    const std::size_t e = b + 1 + rng.uniform_index(t - b);
    const Mask chunk = build_causal_mask(t, RowRange{b, e});
    for (std::size_t i = 0; i < chunk.rows(); ++i)
      for (std::size_t j = 0; j < chunk.cols(); ++j) EXPECT_EQ(chunk(i, j), full(b + i, j));
  }
}

TEST(ModelConfig, ValidationNamesTheField) {
  ModelConfig c = small_config(4, 1);
  c.kv_share = 3;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("kv_share"), std::string::npos);
  }
  c = small_config(4, 0);
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(WeightSet, TensorOrderAndShapes) {
  const ModelConfig cfg = small_config(4, 2, 4, 9, 6, 2);
  const auto w = ModelParams<double>::zeros(cfg, Tag::parameter);
  ASSERT_EQ(w.tensor_count(), 13u);
  EXPECT_EQ(w.tensor_name(0), "layers.0.wq");
  EXPECT_EQ(w.tensor_name(7), "layers.1.wk");
  EXPECT_EQ(w.tensor_name(12), "lm_head");
  EXPECT_EQ(w.tensor(1).cols(), 2u);
  EXPECT_EQ(w.tensor(5).rows(), 6u);
  EXPECT_EQ(w.tensor(12).cols(), 9u);
  EXPECT_THROW(const_cast<ModelParams<double>&>(w).tensor(13), ShapeError);
}

TEST(WeightSet, RandomInitWithinFanInBound) {
  const ModelConfig cfg = small_config(4, 1, 4, 9, 16);
  Rng rng(1);
  const auto w = ModelParams<double>::random(cfg, rng);
  w.for_each([](const std::string&, const Matrix<double>& m) {
    const double a = std::sqrt(3.0 / static_cast<double>(m.rows()));
    for (double v : m.flat()) EXPECT_LE(std::abs(v), a);
  });
}

TEST(LayerForward, SingleTokenAttendsToItself) {
  const ModelConfig cfg = small_config(1, 1);
  const auto w = random_layer(cfg, 5);
  const auto h = random_hidden(1, cfg.hidden, 6);
  const auto f = layer_forward_full<double>(h.cview(), w, nullptr);
  EXPECT_EQ(f.acts.acts.p(0, 0), 1.0);
  const auto v = matmul<double>(h.cview(), w.wv.cview(), Trans::no, nullptr, FlopsCategory::qkv_proj);
  for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(f.acts.acts.o(0, c), v(0, c));
  // out = (silu(o W_gate) * (o W_up)) W_down, evaluated by hand.
  for (std::size_t c = 0; c < cfg.hidden; ++c) {
    double expect = 0.0;
    for (std::size_t u = 0; u < cfg.mlp_hidden; ++u) {
      double up = 0.0, gate = 0.0;
      for (std::size_t k = 0; k < cfg.hidden; ++k) {
        up += v(0, k) * w.wup(k, u);
        gate += v(0, k) * w.wgate(k, u);
      }
      expect += gate / (1.0 + std::exp(-gate)) * up * w.wdown(u, c);
    }
    EXPECT_NEAR(f.out(0, c), expect, 1e-14);
  }
}

TEST(LayerForward, ZeroWeightsGiveZeroOutput) {
  const ModelConfig cfg = small_config(6, 1);
  const auto w = std::move(ModelParams<double>::zeros(cfg, Tag::parameter).layers[0]);
  const auto h = random_hidden(6, cfg.hidden, 2);
  const auto f = layer_forward_full<double>(h.cview(), w, nullptr);
  for (double v : f.out.flat()) EXPECT_EQ(v, 0.0);
  // Zero scores: uniform attention over the causal prefix.
  EXPECT_DOUBLE_EQ(f.acts.acts.p(3, 0), 0.25);
}

TEST(LayerForward, AgreesWithReferenceLoops) {
  for (std::size_t share : {1u, 2u}) {
    const ModelConfig cfg = small_config(9, 1, 4, 11, 8, share);
    const auto w = random_layer(cfg, 10 + share);
    const auto h = random_hidden(9, cfg.hidden, 20 + share);
    const auto f = layer_forward_full<double>(h.cview(), w, nullptr);
    oracle::RefLayer rw{oracle::to_dense(w.wq),  oracle::to_dense(w.wk),    oracle::to_dense(w.wv),
                        oracle::to_dense(w.wup), oracle::to_dense(w.wgate), oracle::to_dense(w.wdown)};
    const auto ref = oracle::naive::layer(oracle::to_dense(h), rw);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_NEAR(f.out(i, c), ref.out.at(i, c), 1e-14) << share;
  }
}

TEST(LayerForwardProperty, ChunkedForwardBitwiseEqualsFull) {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t t = 1 + rng.uniform_index(30);
    const std::size_t share = rng.uniform01() < 0.5 ? 1 : 2;
    const ModelConfig cfg = small_config(t, 1, 4, 11, 8, share);
    const auto w = random_layer(cfg, 100 + trial);
    const auto h = random_hidden(t, cfg.hidden, 200 + trial);
    std::vector<std::size_t> ends;
    for (std::size_t e = 1; e < t; ++e)
      if (rng.uniform01() < 0.3) ends.push_back(e);
    ends.push_back(t);
    const Partition plan = Partition::from_boundaries(t, ends);
    const auto full = layer_forward_full<double>(h.cview(), w, nullptr);
    const auto streamed = layer_forward_streamed<double>(h.cview(), w, plan, nullptr);
    EXPECT_TRUE(bitwise_equal<double>(full.out.cview(), streamed.cview())) << "T=" << t << " D=" << plan.count();
  }
}

TEST(LayerForwardProperty, OutputRowsIgnoreLaterPositions) {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t t = 2 + rng.uniform_index(20);
    const ModelConfig cfg = small_config(t, 1);
    const auto w = random_layer(cfg, 300 + trial);
    auto h = random_hidden(t, cfg.hidden, 400 + trial);
    const auto before = layer_forward_full<double>(h.cview(), w, nullptr).out;
    const std::size_t p = rng.uniform_index(t);
    for (std::size_t c = 0; c < cfg.hidden; ++c) h(p, c) += 0.5;
    const auto after = layer_forward_full<double>(h.cview(), w, nullptr).out;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(before(i, c), after(i, c)) << "row " << i << " p " << p;
    bool changed = false;
    for (std::size_t c = 0; c < cfg.hidden; ++c) changed |= before(p, c) != after(p, c);
    EXPECT_TRUE(changed);
  }
}

TEST(LayerForward, ChunkOutOfRangeThrows) {
  const ModelConfig cfg = small_config(4, 1);
  const auto w = random_layer(cfg, 1);
  const auto h = random_hidden(4, cfg.hidden, 2);
  const auto kv = project_kv<double>(h.cview(), w, nullptr);
  EXPECT_THROW(layer_forward_chunk<double>(h.cview(), RowRange{2, 5}, kv, w, nullptr), ShapeError);
  const auto narrow = random_hidden(4, 3, 2);
  EXPECT_THROW(layer_forward_full<double>(narrow.cview(), w, nullptr), ShapeError);
}

TEST(LayerForward, ChunkActivationsShrinkWithChunkCount) {
  const ModelConfig cfg = small_config(64, 1, 8, 11, 16);
  const auto w = random_layer(cfg, 1);
  const auto h = random_hidden(64, cfg.hidden, 2);
  std::uint64_t previous = ~0ull;
  for (std::size_t d : {1u, 2u, 4u, 8u, 16u}) {
    Meter meter;
    layer_forward_streamed<double>(h.cview(), w, Partition::even(64, d), &meter);
    EXPECT_LT(meter.peak_activation(), previous) << d;
    previous = meter.peak_activation();
    EXPECT_EQ(meter.live(Tag::activation), 0u);
  }
}

TEST(LmHead, IdentityAndZero) {
  Matrix<double> eye(3, 3, Tag::parameter);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  const auto h = random_hidden(5, 3, 9);
  const auto logits = lm_head_forward<double>(h.cview(), eye, nullptr);
  EXPECT_TRUE(bitwise_equal<double>(logits.cview(), h.cview()));
  const Matrix<double> zero(5, 3);
  const auto zero_logits = lm_head_forward<double>(zero.cview(), eye, nullptr);
  for (double v : zero_logits.flat()) EXPECT_EQ(v, 0.0);
  Meter meter;
  lm_head_forward<double>(h.cview(), eye, &meter);
  EXPECT_EQ(meter.label_peak("logits"), 5u * 3u * sizeof(double));
  EXPECT_EQ(meter.flops()[FlopsCategory::lm_head], 2u * 5u * 3u * 3u);
}

}  // namespace
}  // namespace streambp
