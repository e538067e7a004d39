#pragma once

#include <streambp/errors.hpp>
#include <streambp/metering.hpp>
#include <streambp/model.hpp>
#include <streambp/objectives.hpp>
#include <streambp/partition.hpp>
#include <streambp/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace streambp {

template <Real T>
struct BackwardResult {
  T loss{0};
  GradStore<T> grads;
  std::vector<Matrix<T>> input_grads;  // dL/dH_in of layer 0, one per sequence
  MemoryReport memory;
  FlopsReport flops;
  PassReport passes;
};

namespace detail {

// Backward through one chunk's partitioned MLP and attention given its
// activations. Weight gradients and dH rows of the chunk are accumulated in
// place; the K/V contributions land in the full-width dk/dv accumulators.
template <Real T>
void chunk_backward(View<const T> h_in, const KvCache<T>& kv, const ChunkActivations<T>& a, View<const T> d_out,
                    const LayerWeights<T>& w, LayerWeights<T>& g, Matrix<T>& dk, Matrix<T>& dv, Matrix<T>& dh,
                    Meter* meter) {
  const RowRange rows = a.rows;
  const RowRange prefix{0, rows.end};
  const std::size_t rep = kv_repeat(w);
  if (d_out.rows() != rows.size() || d_out.cols() != w.wdown.cols()) throw ShapeError("chunk_backward: upstream");

  // MLP
  Matrix<T> d_up, d_gate;
  {
    Matrix<T> d_act = matmul<T>(d_out, w.wdown.cview(), Trans::yes, meter, FlopsCategory::mlp);
    matmul_add<T>(g.wdown.view(), a.act.cview().transposed(), d_out, Trans::no, meter, FlopsCategory::mlp);
    d_up = Matrix<T>(d_act.rows(), d_act.cols(), Tag::activation, meter);
    d_gate = Matrix<T>(d_act.rows(), d_act.cols(), Tag::activation, meter);
    for (std::size_t i = 0; i < d_act.rows(); ++i) {
      for (std::size_t j = 0; j < d_act.cols(); ++j) {
        const T x = a.gate(i, j);
        d_up(i, j) = d_act(i, j) * silu(x);
        d_gate(i, j) = d_act(i, j) * a.up(i, j) * silu_grad(x);
      }
    }
    detail::note_kernel(meter, FlopsCategory::mlp, 2ull * d_act.size());
  }
  matmul_add<T>(g.wup.view(), a.o.cview().transposed(), d_up.cview(), Trans::no, meter, FlopsCategory::mlp);
  matmul_add<T>(g.wgate.view(), a.o.cview().transposed(), d_gate.cview(), Trans::no, meter, FlopsCategory::mlp);
  Matrix<T> d_o = matmul<T>(d_up.cview(), w.wup.cview(), Trans::yes, meter, FlopsCategory::mlp);
  matmul_add<T>(d_o.view(), d_gate.cview(), w.wgate.cview(), Trans::yes, meter, FlopsCategory::mlp);
  d_up.release();
  d_gate.release();

  // Attention against the cached K^(:i), V^(:i)
  const View<const T> k_prefix = kv.k.rows_view(prefix).tile_cols(rep);
  const View<const T> v_prefix = kv.v.rows_view(prefix).tile_cols(rep);
  Matrix<T> d_s;
  {
    Matrix<T> d_p = matmul<T>(d_o.cview(), v_prefix, Trans::yes, meter, FlopsCategory::attn_score);
    matmul_add<T>(dv.rows_view(prefix).tile_cols(rep), a.p.cview().transposed(), d_o.cview(), Trans::no, meter,
                  FlopsCategory::attn_score);
    d_o.release();
    d_s = softmax_rows_backward<T>(a.p.cview(), d_p.cview(), meter, FlopsCategory::attn_score);
  }
  Matrix<T> d_q = matmul<T>(d_s.cview(), k_prefix, Trans::no, meter, FlopsCategory::attn_score);
  matmul_add<T>(dk.rows_view(prefix).tile_cols(rep), d_s.cview().transposed(), a.q.cview(), Trans::no, meter,
                FlopsCategory::attn_score);
  d_s.release();

  const View<const T> h_rows = h_in.row_slice(rows);
  matmul_add<T>(g.wq.view(), h_rows.transposed(), d_q.cview(), Trans::no, meter, FlopsCategory::qkv_proj);
  matmul_add<T>(dh.rows_view(rows), d_q.cview(), w.wq.cview(), Trans::yes, meter, FlopsCategory::qkv_proj);
}

// Projects the accumulated K/V gradients back onto W_k, W_v and H_in.
template <Real T>
void kv_backward(View<const T> h_in, const Matrix<T>& dk, const Matrix<T>& dv, const LayerWeights<T>& w,
                 LayerWeights<T>& g, Matrix<T>& dh, Meter* meter) {
  matmul_add<T>(g.wk.view(), h_in.transposed(), dk.cview(), Trans::no, meter, FlopsCategory::qkv_proj);
  matmul_add<T>(g.wv.view(), h_in.transposed(), dv.cview(), Trans::no, meter, FlopsCategory::qkv_proj);
  matmul_add<T>(dh.view(), dk.cview(), w.wk.cview(), Trans::yes, meter, FlopsCategory::qkv_proj);
  matmul_add<T>(dh.view(), dv.cview(), w.wv.cview(), Trans::yes, meter, FlopsCategory::qkv_proj);
}

template <Real T>
struct LayerGradBuffers {
  std::vector<Matrix<T>> dh, dk, dv;

  LayerGradBuffers(std::size_t batch, std::size_t seq, std::size_t d, std::size_t dkv, Meter* meter) {
    for (std::size_t b = 0; b < batch; ++b) {
      dh.emplace_back(seq, d, Tag::gradient, meter);
      dk.emplace_back(seq, dkv, Tag::gradient, meter);
      dv.emplace_back(seq, dkv, Tag::gradient, meter);
    }
  }
};

template <Real T>
void check_batch(std::span<const Matrix<T>> h_in, std::span<const Matrix<T>> d_out) {
  if (h_in.empty() || h_in.size() != d_out.size()) throw ShapeError("layer backward: batch mismatch");
  for (std::size_t b = 0; b < h_in.size(); ++b) {
    if (d_out[b].rows() != h_in[b].rows()) throw ShapeError("layer backward: upstream gradient length");
  }
}

template <Real T>
void check_inputs(const ModelParams<T>& params, std::span<const Matrix<T>> inputs, const LossSpec<T>& spec) {
  if (inputs.size() != batch_size(spec)) {
    throw ShapeError("engine: " + std::to_string(inputs.size()) + " input sequences but the loss spec needs " +
                     std::to_string(batch_size(spec)));
  }
  for (const auto& h : inputs) {
    if (h.rows() != inputs[0].rows() || h.cols() != params.config.hidden) throw ShapeError("engine: input shape");
  }
}

template <Real T>
std::vector<Matrix<T>> metered_inputs(std::span<const Matrix<T>> inputs, Meter& meter) {
  std::vector<Matrix<T>> out;
  for (const auto& h : inputs) out.push_back(h.clone(Tag::activation, &meter));
  return out;
}

template <Real T>
BackwardResult<T> finish(T loss, GradStore<T> grads, std::vector<Matrix<T>> input_grads, Meter& meter,
                         std::uint64_t activation_at_entry) {
  if (!std::isfinite(loss)) throw NumericError("engine: non-finite loss");
  if (meter.live(Tag::activation) != activation_at_entry) {
    throw AccountingError("engine: " + std::to_string(meter.live(Tag::activation) - activation_at_entry) +
                          " activation bytes still live at exit");
  }
  BackwardResult<T> r;
  r.loss = loss;
  r.grads = std::move(grads);
  r.input_grads = std::move(input_grads);
  r.memory = meter.memory_report();
  r.flops = meter.flops();
  r.passes = meter.passes();
  r.grads.for_each([](const std::string&, Matrix<T>& m) { m.detach(); });
  for (auto& g : r.input_grads) g.detach();
  return r;
}

}  // namespace detail

// StreamBP for one transformer layer over a batch: cache K, V once, then for each
// chunk reforward it, backpropagate it, accumulate, and drop its activations.
// Returns dL/dH_in per sequence.
template <Real T>
std::vector<Matrix<T>> layer_stream_backward(const LayerWeights<T>& w, std::span<const Matrix<T>> h_in,
                                             std::span<const Matrix<T>> d_out, const Partition& plan,
                                             LayerWeights<T>& grads, Meter* meter, std::size_t layer_index = 0) {
  detail::check_batch<T>(h_in, d_out);
  const std::size_t seq = h_in[0].rows();
  if (plan.length() != seq) throw ShapeError("layer_stream_backward: plan covers " + std::to_string(plan.length()) +
                                             " rows, sequence has " + std::to_string(seq));
  detail::LayerGradBuffers<T> buf(h_in.size(), seq, w.wq.rows(), w.wk.cols(), meter);
  std::vector<KvCache<T>> kv;
  for (const auto& h : h_in) kv.push_back(project_kv<T>(h.cview(), w, meter));
  for (const RowRange& chunk : plan) {
    if (meter != nullptr) meter->count_weight_reload(layer_index);
    for (std::size_t b = 0; b < h_in.size(); ++b) {
      ChunkForward<T> f = layer_forward_chunk<T>(h_in[b].cview(), chunk, kv[b], w, meter);
      f.out.release();
      detail::chunk_backward<T>(h_in[b].cview(), kv[b], f.acts, d_out[b].rows_view(chunk), w, grads, buf.dk[b],
                                buf.dv[b], buf.dh[b], meter);
    }
  }
  kv.clear();
  for (std::size_t b = 0; b < h_in.size(); ++b) {
    detail::kv_backward<T>(h_in[b].cview(), buf.dk[b], buf.dv[b], w, grads, buf.dh[b], meter);
  }
  return std::move(buf.dh);
}

template <Real T>
Matrix<T> layer_stream_backward(const LayerWeights<T>& w, const Matrix<T>& h_in, const Matrix<T>& d_out,
                                const Partition& plan, LayerWeights<T>& grads, Meter* meter) {
  auto r = layer_stream_backward<T>(w, std::span<const Matrix<T>>(&h_in, 1), std::span<const Matrix<T>>(&d_out, 1),
                                    plan, grads, meter);
  return std::move(r[0]);
}

// Standard BP: one forward that keeps every layer's activations, then backward.
template <Real T>
BackwardResult<T> backward_standard(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                                    const LossSpec<T>& spec, Meter& meter) {
  detail::check_inputs(params, inputs, spec);
  const std::uint64_t act0 = meter.live(Tag::activation);
  ScopedResidency resident(meter, params.bytes(), Tag::parameter);
  const std::size_t nl = params.layers.size(), batch = inputs.size(), seq = inputs[0].rows();
  GradStore<T> grads = GradStore<T>::zeros(params.config, Tag::gradient, &meter);

  std::vector<std::vector<Matrix<T>>> hidden(nl + 1);
  std::vector<std::vector<LayerActivations<T>>> acts(nl);
  hidden[0] = detail::metered_inputs(inputs, meter);
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t b = 0; b < batch; ++b) {
      LayerForward<T> f = layer_forward_full<T>(hidden[l][b].cview(), params.layers[l], &meter);
      hidden[l + 1].push_back(std::move(f.out));
      acts[l].push_back(std::move(f.acts));
    }
  }

  HeadGradResult<T> head = head_stream<T>(hidden[nl], params.lm_head, spec, Chunking::chunks(1), &meter);
  hidden[nl].clear();
  grads.lm_head = std::move(head.g_lm_head);
  std::vector<Matrix<T>> upstream = std::move(head.g_hidden);

  for (std::size_t l = nl; l-- > 0;) {
    const auto& w = params.layers[l];
    meter.count_weight_reload(l);
    detail::LayerGradBuffers<T> buf(batch, seq, w.wq.rows(), w.wk.cols(), &meter);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::chunk_backward<T>(hidden[l][b].cview(), acts[l][b].kv, acts[l][b].acts, upstream[b].cview(), w,
                                grads.layers[l], buf.dk[b], buf.dv[b], buf.dh[b], &meter);
    }
    for (std::size_t b = 0; b < batch; ++b) {
      detail::kv_backward<T>(hidden[l][b].cview(), buf.dk[b], buf.dv[b], w, grads.layers[l], buf.dh[b], &meter);
    }
    acts[l].clear();
    hidden[l].clear();
    upstream = std::move(buf.dh);
  }
  return detail::finish<T>(head.loss, std::move(grads), std::move(upstream), meter, act0);
}

namespace detail {

// Shared by checkpointed BP (one chunk per layer, full head) and StreamBP.
template <Real T>
BackwardResult<T> backward_recompute(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                                     const LossSpec<T>& spec, const PartitionPlan& plan, bool chunked_forward,
                                     Meter& meter) {
  check_inputs(params, inputs, spec);
  const std::uint64_t act0 = meter.live(Tag::activation);
  ScopedResidency resident(meter, params.bytes(), Tag::parameter);
  const std::size_t nl = params.layers.size(), batch = inputs.size(), seq = inputs[0].rows();
  const Partition layer_plan = plan.layer.resolve(seq);
  GradStore<T> grads = GradStore<T>::zeros(params.config, Tag::gradient, &meter);

  // Forward keeps only each layer's input.
  std::vector<std::vector<Matrix<T>>> hidden(nl + 1);
  hidden[0] = metered_inputs(inputs, meter);
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (chunked_forward) {
        hidden[l + 1].push_back(layer_forward_streamed<T>(hidden[l][b].cview(), params.layers[l], layer_plan, &meter));
      } else {
        hidden[l + 1].push_back(layer_forward_full<T>(hidden[l][b].cview(), params.layers[l], &meter).out);
      }
    }
  }

  HeadGradResult<T> head = head_stream<T>(hidden[nl], params.lm_head, spec, plan.head, &meter);
  hidden[nl].clear();
  grads.lm_head = std::move(head.g_lm_head);
  std::vector<Matrix<T>> upstream = std::move(head.g_hidden);

  for (std::size_t l = nl; l-- > 0;) {
    upstream = layer_stream_backward<T>(params.layers[l], hidden[l], upstream, layer_plan, grads.layers[l], &meter, l);
    hidden[l].clear();
  }
  return finish<T>(head.loss, std::move(grads), std::move(upstream), meter, act0);
}

}  // namespace detail

// Gradient checkpointing: forward stores layer inputs only; backward reforwards
// one whole layer at a time.
template <Real T>
BackwardResult<T> backward_checkpoint(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                                      const LossSpec<T>& spec, Meter& meter) {
  return detail::backward_recompute<T>(params, inputs, spec, PartitionPlan::uniform(1, 1), false, meter);
}

// StreamBP: chunked forward, lm-head/objective streamed over plan.head, every
// layer backpropagated chunk by chunk over plan.layer.
template <Real T>
BackwardResult<T> backward_stream(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                                  const LossSpec<T>& spec, const PartitionPlan& plan, Meter& meter) {
  return detail::backward_recompute<T>(params, inputs, spec, plan, true, meter);
}

enum class Engine { standard, checkpoint, stream };

inline constexpr std::string_view to_string(Engine e) {
  switch (e) {
    case Engine::standard: return "standard";
    case Engine::checkpoint: return "checkpoint";
    case Engine::stream: return "stream";
  }
  return "?";
}

template <Real T>
BackwardResult<T> run_engine(Engine engine, const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                             const LossSpec<T>& spec, const PartitionPlan& plan, Meter& meter) {
  switch (engine) {
    case Engine::standard: return backward_standard<T>(params, inputs, spec, meter);
    case Engine::checkpoint: return backward_checkpoint<T>(params, inputs, spec, meter);
    case Engine::stream: return backward_stream<T>(params, inputs, spec, plan, meter);
  }
  throw std::logic_error("run_engine: unknown engine");
}

template <Real T>
T max_abs_grad_diff(const GradStore<T>& a, const GradStore<T>& b) {
  T m{0};
  for (std::size_t i = 0; i < a.tensor_count(); ++i) m = std::max(m, max_abs_diff<T>(a.tensor(i), b.tensor(i)));
  return m;
}

template <Real T>
bool grads_bitwise_equal(const GradStore<T>& a, const GradStore<T>& b) {
  if (a.tensor_count() != b.tensor_count()) return false;
  for (std::size_t i = 0; i < a.tensor_count(); ++i)
    if (!bitwise_equal<T>(a.tensor(i), b.tensor(i))) return false;
  return true;
}

}  // namespace streambp
