#include "support.hpp"

#include <streambp/engines.hpp>
#include <streambp/oracle.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace streambp {
namespace {

using testing::kAllObjectives;
using testing::problem;
using testing::run;
using testing::small_config;

double max_abs_vs_reference(const BackwardResult<double>& r, const oracle::ReferenceGradients& ref) {
  double m = 0.0;
  for (std::size_t i = 0; i < r.grads.tensor_count(); ++i) {
    const auto& g = r.grads.tensor(i);
    for (std::size_t k = 0; k < g.size(); ++k) m = std::max(m, std::abs(g.flat()[k] - ref.params[i].a[k]));
  }
  for (std::size_t b = 0; b < r.input_grads.size(); ++b)
    for (std::size_t k = 0; k < r.input_grads[b].size(); ++k)
      m = std::max(m, std::abs(r.input_grads[b].flat()[k] - ref.inputs[b].a[k]));
  return m;
}

TEST(Engines, UniformTwoClassSequence) {
  // T = 2 is the shortest sequence with a next-token target.
  const ModelConfig cfg = small_config(2, 1, 4, 2);
  Problem<double> p;
  p.params = ModelParams<double>::zeros(cfg, Tag::parameter);
  Rng rng(1);
  p.inputs.push_back(random_matrix<double>(2, 4, rng, 1.0));
  p.spec = SftSpec{{{1}}, false};
  for (Engine e : {Engine::standard, Engine::checkpoint, Engine::stream}) {
    const auto r = run(e, p, PartitionPlan::uniform(2, 1));
    EXPECT_DOUBLE_EQ(r.loss, std::numbers::ln2) << to_string(e);
    for (double v : r.grads.lm_head.flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Engines, StandardMatchesReferenceAndFiniteDifferences) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(8, 2, 4, 11), kind, 3);
    const auto r = run(Engine::standard, p);
    const auto ref = oracle::reference_gradients<double>(p.params, p.batch(), p.spec);
    EXPECT_NEAR(r.loss, ref.loss, 1e-12 * std::max(1.0, std::abs(ref.loss)));
    EXPECT_LE(max_abs_vs_reference(r, ref), 1e-12) << to_string(kind);

    auto model = oracle::to_ref(p.params);
    const auto inputs = oracle::to_ref<double>(p.batch());
    const auto loss = oracle::to_ref<double>(p.spec);
    Rng rng(4);
    for (const auto& c : oracle::sample_coordinates(p.params, 4, rng)) {
      const double fd = oracle::extrapolated_diff_grad(model, inputs, loss, c, 1e-4);
      EXPECT_LE(oracle::relative_error(r.grads.tensor(c.tensor)(c.row, c.col), fd), 1e-6)
          << to_string(kind) << " " << p.params.tensor_name(c.tensor);
    }
  }
}

// Scaling the loss by a power of two scales every gradient by exactly that
// factor: mean reduction over B T_o = 8 scored tokens versus the plain sum.
TEST(Engines, PowerOfTwoLossScaleIsExact) {
  auto p = problem<double>(small_config(5, 2, 4, 7), Objective::sft, 5);
  for (Engine e : {Engine::standard, Engine::stream}) {
    std::get<SftSpec>(p.spec).mean_reduction = false;
    const auto sum = run(e, p, PartitionPlan::uniform(3, 2));
    std::get<SftSpec>(p.spec).mean_reduction = true;
    const auto mean = run(e, p, PartitionPlan::uniform(3, 2));
    EXPECT_EQ(sum.loss, 8.0 * mean.loss);
    for (std::size_t i = 0; i < sum.grads.tensor_count(); ++i)
      for (std::size_t k = 0; k < sum.grads.tensor(i).size(); ++k)
        ASSERT_EQ(sum.grads.tensor(i).flat()[k], 8.0 * mean.grads.tensor(i).flat()[k]) << sum.grads.tensor_name(i);
  }
}

TEST(Engines, CheckpointIsBitwiseStandard) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(16, 3, 8, 13, 16), kind, 6);
    const auto s = run(Engine::standard, p);
    const auto c = run(Engine::checkpoint, p);
    EXPECT_EQ(s.loss, c.loss);
    EXPECT_TRUE(grads_bitwise_equal(s.grads, c.grads)) << to_string(kind);
    EXPECT_LT(c.memory.peak_activation_bytes, s.memory.peak_activation_bytes) << to_string(kind);
  }
}

TEST(Engines, StreamWithOneChunkIsBitwiseCheckpoint) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(16, 2, 8, 13, 16), kind, 7);
    const auto c = run(Engine::checkpoint, p);
    const auto s = run(Engine::stream, p, PartitionPlan::uniform(1, 1));
    EXPECT_EQ(s.loss, c.loss);
    EXPECT_TRUE(grads_bitwise_equal(s.grads, c.grads)) << to_string(kind);
    for (std::size_t b = 0; b < c.input_grads.size(); ++b)
      EXPECT_TRUE(bitwise_equal<double>(s.input_grads[b].cview(), c.input_grads[b].cview()));
  }
}

TEST(Engines, StreamMatchesStandardAcrossPlans) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(40, 2, 8, 13, 16), kind, 8);
    const auto s = run(Engine::standard, p);
    for (std::size_t dl : {2u, 4u, 8u})
      for (std::size_t dh : {2u, 5u}) {
        const auto r = run(Engine::stream, p, PartitionPlan::uniform(dl, dh));
        EXPECT_NEAR(r.loss, s.loss, 1e-12 * std::max(1.0, std::abs(s.loss)));
        EXPECT_LE(max_abs_grad_diff(r.grads, s.grads), 1e-12) << to_string(kind) << " " << dl << " " << dh;
      }
  }
}

TEST(EnginesProperty, StreamMatchesStandardForRandomPlans) {
  Rng rng(9);
  for (int trial = 0; trial < 24; ++trial) {
    const Objective kind = kAllObjectives[trial % 3];
    const std::size_t t = 2 + rng.uniform_index(30);
    const std::size_t layers = 1 + rng.uniform_index(3);
    const std::size_t share = rng.uniform01() < 0.5 ? 1 : 2;
    const auto p = problem<double>(small_config(t, layers, 4, 2 + rng.uniform_index(10), 6, share), kind, 100 + trial);
    PartitionPlan plan;
    plan.layer = rng.uniform01() < 0.5 ? Chunking::chunks(1 + rng.uniform_index(t + 2))
                                       : Chunking::rows_per_chunk(1 + rng.uniform_index(t));
    plan.head = Chunking::chunks(1 + rng.uniform_index(t));
    const auto s = run(Engine::standard, p);
    const auto r = run(Engine::stream, p, plan);
    EXPECT_LE(max_abs_grad_diff(r.grads, s.grads), 1e-12) << "trial " << trial;
    for (std::size_t b = 0; b < s.input_grads.size(); ++b)
      EXPECT_LE(max_abs_diff<double>(r.input_grads[b].cview(), s.input_grads[b].cview()), 1e-12);
  }
}

TEST(Engines, GroupedKeyValueSharingMatchesReference) {
  const auto p = problem<double>(small_config(12, 2, 8, 9, 8, 4), Objective::grpo, 10);
  const auto ref = oracle::reference_gradients<double>(p.params, p.batch(), p.spec);
  EXPECT_LE(max_abs_vs_reference(run(Engine::stream, p, PartitionPlan::uniform(3, 4)), ref), 1e-12);
}

TEST(Engines, WeightReloadsPerLayer) {
  const auto p = problem<double>(small_config(16, 3, 4, 7), Objective::sft, 11);
  for (Engine e : {Engine::standard, Engine::checkpoint}) {
    const auto r = run(e, p);
    EXPECT_EQ(r.passes.weight_reloads, 3u);
    EXPECT_EQ(r.passes.reloads_per_layer, (std::vector<std::uint64_t>{1, 1, 1}));
  }
  const auto s = run(Engine::stream, p, PartitionPlan::uniform(4, 2));
  EXPECT_EQ(s.passes.weight_reloads, 12u);
  EXPECT_EQ(s.passes.reloads_per_layer, (std::vector<std::uint64_t>{4, 4, 4}));
}

TEST(Engines, CausalScoreFlopsFollowChunkRatio) {
  const std::size_t t = 32, d = 8;
  const auto p = problem<double>(small_config(t, 2, d, 11, 16), Objective::sft, 12);
  const auto c = run(Engine::checkpoint, p);
  EXPECT_EQ(c.flops[FlopsCategory::attn_out], 0u);
  for (std::size_t chunks : {1u, 2u, 4u, 8u, 16u, 32u}) {
    const auto s = run(Engine::stream, p, PartitionPlan::uniform(chunks, 4));
    const Rational ratio = flops_ratio_attention(t, d, chunks);
    EXPECT_EQ(s.flops[FlopsCategory::attn_score] * ratio.den, c.flops[FlopsCategory::attn_score] * ratio.num)
        << chunks;
    for (FlopsCategory cat : {FlopsCategory::qkv_proj, FlopsCategory::mlp, FlopsCategory::lm_head,
                              FlopsCategory::objective, FlopsCategory::attn_out}) {
      EXPECT_EQ(s.flops[cat], c.flops[cat]) << to_string(cat) << " " << chunks;
    }
  }
}

TEST(Engines, PeakActivationFallsWithChunkCount) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(64, 2, 8, 32, 16), kind, 13);
    const auto c = run(Engine::checkpoint, p);
    std::uint64_t previous = c.memory.peak_activation_bytes + 1;
    for (std::size_t chunks : {1u, 2u, 4u, 8u, 16u}) {
      Meter meter;
      const auto r = run_engine<double>(Engine::stream, p.params, p.batch(), p.spec,
                                        PartitionPlan::uniform(chunks, chunks), meter);
      EXPECT_LT(r.memory.peak_activation_bytes, previous) << to_string(kind) << " " << chunks;
      previous = r.memory.peak_activation_bytes;
      EXPECT_EQ(meter.live(Tag::activation), 0u);
    }
  }
}

TEST(Engines, RepeatedRunsAreBitwiseIdentical) {
  for (Objective kind : kAllObjectives) {
    const auto p = problem<double>(small_config(20, 2, 4, 9), kind, 14);
    const auto a = run(Engine::stream, p, PartitionPlan::uniform(3, 4));
    const auto b = run(Engine::stream, p, PartitionPlan::uniform(3, 4));
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_TRUE(grads_bitwise_equal(a.grads, b.grads));
  }
}

TEST(Engines, InvalidInputsRejected) {
  auto p = problem<double>(small_config(6, 1, 4, 5), Objective::sft, 15);
  p.inputs[0](2, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(run(Engine::standard, p), NumericError);
  auto q = problem<double>(small_config(6, 1, 4, 5), Objective::sft, 15);
  q.inputs.pop_back();
  EXPECT_THROW(run(Engine::stream, q), ShapeError);
}

// ---------------------------------------------------------------------------
// One layer, driven directly with an upstream gradient.

struct LayerCase {
  LayerWeights<double> w;
  Matrix<double> h;
  Matrix<double> up;
};

LayerCase layer_case(std::size_t t, std::size_t share, std::uint64_t seed) {
  const ModelConfig cfg = small_config(t, 1, 4, 5, 6, share);
  auto p = problem<double>(cfg, Objective::sft, seed);
  Rng rng(seed + 1);
  return {std::move(p.params.layers[0]), random_matrix<double>(t, 4, rng, 1.0), random_matrix<double>(t, 4, rng, 1.0)};
}

TEST(LayerStreamBackward, ZeroUpstreamGivesZeroGradients) {
  LayerCase c = layer_case(9, 1, 20);
  c.up = Matrix<double>(9, 4);
  LayerWeights<double> g = std::move(GradStore<double>::zeros(small_config(9, 1, 4, 5, 6)).layers[0]);
  const auto dh = layer_stream_backward<double>(c.w, c.h, c.up, Partition::even(9, 3), g, nullptr);
  for (double v : dh.flat()) EXPECT_EQ(v, 0.0);
  for (std::size_t k = 0; k < kLayerTensors; ++k)
    for (double v : g[static_cast<LayerTensor>(k)].flat()) EXPECT_EQ(v, 0.0);
}

TEST(LayerStreamBackward, InputGradientMatchesFiniteDifferences) {
  for (std::size_t share : {1u, 2u}) {
    const LayerCase c = layer_case(7, share, 21);
    LayerWeights<double> g = std::move(GradStore<double>::zeros(small_config(7, 1, 4, 5, 6, share)).layers[0]);
    const auto dh = layer_stream_backward<double>(c.w, c.h, c.up, Partition::even(7, 3), g, nullptr);
    const oracle::RefLayer rw{oracle::to_dense(c.w.wq),  oracle::to_dense(c.w.wk),    oracle::to_dense(c.w.wv),
                              oracle::to_dense(c.w.wup), oracle::to_dense(c.w.wgate), oracle::to_dense(c.w.wdown)};
    oracle::Dense x = oracle::to_dense(c.h);
    const oracle::Dense u = oracle::to_dense(c.up);
    // f(H) = <U, layer(H)>, so df/dH is the input gradient for upstream U.
    auto f = [&](std::size_t i, std::size_t j, double v) {
      const double saved = x.at(i, j);
      x.at(i, j) = v;
      const auto out = oracle::naive::layer(x, rw).out;
      x.at(i, j) = saved;
      double s = 0.0;
      for (std::size_t k = 0; k < out.a.size(); ++k) s += out.a[k] * u.a[k];
      return s;
    };
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const auto fx = [&](double v) { return f(i, j, v); };
        const double h = 1e-4;
        const double fd = (4.0 * oracle::central_difference(fx, x.at(i, j), h / 2) -
                           oracle::central_difference(fx, x.at(i, j), h)) / 3.0;
        EXPECT_LE(oracle::relative_error(dh(i, j), fd), 1e-6) << share << " " << i << " " << j;
      }
  }
}

TEST(LayerStreamBackward, UpstreamOnOneChunkReachesOnlyThePrefix) {
  const std::size_t t = 12;
  LayerCase c = layer_case(t, 1, 22);
  const Partition plan = Partition::even(t, 4);
  const RowRange only = plan[1];
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i < only.begin || i >= only.end) c.up(i, j) = 0.0;
  LayerWeights<double> g = std::move(GradStore<double>::zeros(small_config(t, 1, 4, 5, 6)).layers[0]);
  const auto dh = layer_stream_backward<double>(c.w, c.h, c.up, plan, g, nullptr);
  for (std::size_t i = 0; i < t; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 4; ++j) norm += std::abs(dh(i, j));
    if (i >= only.end) {
      EXPECT_EQ(norm, 0.0) << "row " << i;
    } else {
      EXPECT_GT(norm, 0.0) << "row " << i;
    }
  }
}

TEST(LayerStreamBackward, PlanMustCoverTheSequence) {
  const LayerCase c = layer_case(8, 1, 23);
  LayerWeights<double> g = std::move(GradStore<double>::zeros(small_config(8, 1, 4, 5, 6)).layers[0]);
  EXPECT_THROW(layer_stream_backward<double>(c.w, c.h, c.up, Partition::even(7, 2), g, nullptr), ShapeError);
  const Matrix<double> short_up(5, 4);
  EXPECT_THROW(layer_stream_backward<double>(c.w, c.h, short_up, Partition::even(8, 2), g, nullptr), ShapeError);
}

}  // namespace
}  // namespace streambp
