#pragma once

#include <streambp/errors.hpp>
#include <streambp/metering.hpp>
#include <streambp/partition.hpp>
#include <streambp/rng.hpp>
#include <streambp/tensor.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace streambp {

// Simplified causal transformer: single-head attention without scaling,
// normalization or residuals, then a SiLU-gated MLP; L layers and an lm-head.
struct ModelConfig {
  std::size_t seq_len = 8;     // T
  std::size_t hidden = 4;      // d
  std::size_t mlp_hidden = 8;  // d_up
  std::size_t vocab = 11;      // C
  std::size_t layers = 1;      // L
  std::size_t kv_share = 1;    // G: K and V are d / G wide

  std::size_t kv_width() const { return hidden / kv_share; }
  // Rows of logits that receive a label (next-token shift).
  std::size_t scored_rows() const { return seq_len - 1; }

  void validate() const {
    auto need = [](bool ok, const char* field) {
      if (!ok) throw ConfigError(std::string("model config: invalid ") + field);
    };
    need(seq_len >= 1, "seq_len");
    need(hidden >= 1, "hidden");
    need(mlp_hidden >= 1, "mlp_hidden");
    need(vocab >= 1, "vocab");
    need(layers >= 1, "layers");
    need(kv_share >= 1 && hidden % kv_share == 0, "kv_share");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class LayerTensor : std::size_t { wq, wk, wv, wup, wgate, wdown };
inline constexpr std::size_t kLayerTensors = 6;
inline constexpr std::array<const char*, kLayerTensors> kLayerTensorNames = {"wq", "wk", "wv", "wup", "wgate", "wdown"};

template <Real T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wup, wgate, wdown;

  Matrix<T>& operator[](LayerTensor t) { return *ptrs()[static_cast<std::size_t>(t)]; }
  const Matrix<T>& operator[](LayerTensor t) const {
    return *const_cast<LayerWeights*>(this)->ptrs()[static_cast<std::size_t>(t)];
  }

  std::uint64_t bytes() const {
    return wq.bytes() + wk.bytes() + wv.bytes() + wup.bytes() + wgate.bytes() + wdown.bytes();
  }

 private:
  std::array<Matrix<T>*, kLayerTensors> ptrs() { return {&wq, &wk, &wv, &wup, &wgate, &wdown}; }
};

// Per-layer {W_q, W_k, W_v, W_up, W_gate, W_down} plus W_lm_head. Used both for
// parameters and for the shape-identical gradient accumulators.
template <Real T>
struct WeightSet {
  ModelConfig config;
  std::vector<LayerWeights<T>> layers;
  Matrix<T> lm_head;

  static WeightSet zeros(const ModelConfig& cfg, Tag tag = Tag::gradient, Meter* meter = nullptr) {
    cfg.validate();
    WeightSet w;
    w.config = cfg;
    const std::size_t d = cfg.hidden, dkv = cfg.kv_width(), dup = cfg.mlp_hidden;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerWeights<T> lw{Matrix<T>(d, d, tag, meter),     Matrix<T>(d, dkv, tag, meter),
                         Matrix<T>(d, dkv, tag, meter),   Matrix<T>(d, dup, tag, meter),
                         Matrix<T>(d, dup, tag, meter),   Matrix<T>(dup, d, tag, meter)};
      w.layers.push_back(std::move(lw));
    }
    w.lm_head = Matrix<T>(d, cfg.vocab, tag, meter);
    return w;
  }

  // Uniform(-a, a) with a = gain * sqrt(3 / fan_in): unit-variance preserving.
  static WeightSet random(const ModelConfig& cfg, Rng& rng, double gain = 1.0, Tag tag = Tag::parameter,
                          Meter* meter = nullptr) {
    WeightSet w = zeros(cfg, tag, meter);
    w.for_each([&](const std::string&, Matrix<T>& m) {
      const double a = gain * std::sqrt(3.0 / static_cast<double>(m.rows()));
      for (T& v : m.flat()) v = static_cast<T>(rng.uniform(-a, a));
    });
    return w;
  }

  std::size_t tensor_count() const { return layers.size() * kLayerTensors + 1; }

  Matrix<T>& tensor(std::size_t i) {
    if (i == layers.size() * kLayerTensors) return lm_head;
    if (i > layers.size() * kLayerTensors) throw ShapeError("WeightSet: tensor index out of range");
    return layers[i / kLayerTensors][static_cast<LayerTensor>(i % kLayerTensors)];
  }
  const Matrix<T>& tensor(std::size_t i) const { return const_cast<WeightSet*>(this)->tensor(i); }

  std::string tensor_name(std::size_t i) const {
    if (i == layers.size() * kLayerTensors) return "lm_head";
    return "layers." + std::to_string(i / kLayerTensors) + "." + kLayerTensorNames[i % kLayerTensors];
  }

  template <class F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < tensor_count(); ++i) f(tensor_name(i), tensor(i));
  }
  template <class F>
  void for_each(F&& f) const {
    for (std::size_t i = 0; i < tensor_count(); ++i) f(tensor_name(i), tensor(i));
  }

  std::uint64_t bytes() const {
    std::uint64_t b = lm_head.bytes();
    for (const auto& l : layers) b += l.bytes();
    return b;
  }
};

template <Real T>
using ModelParams = WeightSet<T>;
template <Real T>
using GradStore = WeightSet<T>;

template <Real T>
struct KvCache {
  Matrix<T> k;  // T x d_kv
  Matrix<T> v;  // T x d_kv
};

// Activations of one row chunk, everything its backward needs. The score matrix S
// is transient: the softmax backward only needs P.
template <Real T>
struct ChunkActivations {
  RowRange rows;
  Mask mask;        // rows x end(rows)
  Matrix<T> q;      // rows x d
  Matrix<T> p;      // rows x end(rows)
  Matrix<T> o;      // rows x d
  Matrix<T> up;     // rows x d_up
  Matrix<T> gate;   // rows x d_up
  Matrix<T> act;    // silu(gate) o up
};

template <Real T>
struct ChunkForward {
  Matrix<T> out;  // rows x d
  ChunkActivations<T> acts;
};

template <Real T>
struct LayerActivations {
  KvCache<T> kv;
  ChunkActivations<T> acts;  // a single chunk covering all rows
};

template <Real T>
struct LayerForward {
  Matrix<T> out;
  LayerActivations<T> acts;
};

// M[t, t'] = 1 iff t' <= t. With a chunk, only its rows and the columns
// [0, end(chunk)) that its scores span.
inline Mask build_causal_mask(std::size_t seq_len, std::optional<RowRange> chunk = std::nullopt,
                              Meter* meter = nullptr) {
  const RowRange rows = chunk.value_or(RowRange{0, seq_len});
  if (rows.begin >= rows.end || rows.end > seq_len) throw ShapeError("build_causal_mask: invalid chunk");
  const std::size_t width = chunk ? rows.end : seq_len;
  Mask m(rows.size(), width, Tag::activation, meter, "mask");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t t = rows.begin + i;
    for (std::size_t j = 0; j <= t && j < width; ++j) m(i, j) = 1;
  }
  return m;
}

namespace detail {

template <Real T>
void check_layer_input(View<const T> h_in, const LayerWeights<T>& w) {
  if (h_in.cols() != w.wq.rows()) throw ShapeError("layer: hidden width does not match W_q");
  if (h_in.rows() == 0) throw ShapeError("layer: empty sequence");
}

template <Real T>
std::size_t kv_repeat(const LayerWeights<T>& w) {
  return w.wq.cols() / w.wk.cols();
}

}  // namespace detail

// K and V for the whole sequence, computed once per layer and cached.
template <Real T>
KvCache<T> project_kv(View<const T> h_in, const LayerWeights<T>& w, Meter* meter) {
  detail::check_layer_input(h_in, w);
  return {matmul<T>(h_in, w.wk.cview(), Trans::no, meter, FlopsCategory::qkv_proj, Tag::activation, "kv"),
          matmul<T>(h_in, w.wv.cview(), Trans::no, meter, FlopsCategory::qkv_proj, Tag::activation, "kv")};
}

// Partitioned attention and MLP for rows `chunk`, against K, V rows [0, end(chunk)).
template <Real T>
ChunkForward<T> layer_forward_chunk(View<const T> h_in, RowRange chunk, const KvCache<T>& kv,
                                    const LayerWeights<T>& w, Meter* meter) {
  detail::check_layer_input(h_in, w);
  const std::size_t seq = h_in.rows();
  if (chunk.begin >= chunk.end || chunk.end > seq) {
    throw ShapeError("layer_forward_chunk: chunk [" + std::to_string(chunk.begin) + ", " +
                     std::to_string(chunk.end) + ") out of range for T=" + std::to_string(seq));
  }
  if (kv.k.rows() != seq || kv.v.rows() != seq) throw ShapeError("layer_forward_chunk: K/V cache length");
  const std::size_t rep = detail::kv_repeat(w);
  const RowRange prefix{0, chunk.end};
  const View<const T> k_prefix = kv.k.rows_view(prefix).tile_cols(rep);
  const View<const T> v_prefix = kv.v.rows_view(prefix).tile_cols(rep);

  ChunkForward<T> f;
  auto& a = f.acts;
  a.rows = chunk;
  a.q = matmul<T>(h_in.row_slice(chunk), w.wq.cview(), Trans::no, meter, FlopsCategory::qkv_proj);
  a.mask = build_causal_mask(seq, chunk, meter);
  {
    Matrix<T> s = matmul<T>(a.q.cview(), k_prefix, Trans::yes, meter, FlopsCategory::attn_score);
    a.p = stable_softmax_rows<T>(s.cview(), a.mask.cview(), meter, FlopsCategory::attn_score);
  }
  a.o = matmul<T>(a.p.cview(), v_prefix, Trans::no, meter, FlopsCategory::attn_score);
  a.up = matmul<T>(a.o.cview(), w.wup.cview(), Trans::no, meter, FlopsCategory::mlp);
  a.gate = matmul<T>(a.o.cview(), w.wgate.cview(), Trans::no, meter, FlopsCategory::mlp);
  a.act = Matrix<T>(a.up.rows(), a.up.cols(), Tag::activation, meter);
  for (std::size_t i = 0; i < a.act.rows(); ++i)
    for (std::size_t j = 0; j < a.act.cols(); ++j) a.act(i, j) = silu(a.gate(i, j)) * a.up(i, j);
  detail::note_kernel(meter, FlopsCategory::mlp, a.act.size());
  f.out = matmul<T>(a.act.cview(), w.wdown.cview(), Trans::no, meter, FlopsCategory::mlp, Tag::activation, "h_out");
  return f;
}

template <Real T>
LayerForward<T> layer_forward_full(View<const T> h_in, const LayerWeights<T>& w, Meter* meter) {
  LayerForward<T> r;
  r.acts.kv = project_kv(h_in, w, meter);
  ChunkForward<T> c = layer_forward_chunk(h_in, RowRange{0, h_in.rows()}, r.acts.kv, w, meter);
  r.out = std::move(c.out);
  r.acts.acts = std::move(c.acts);
  return r;
}

// Forward through one layer chunk by chunk, keeping only the output. Peak
// activation is K, V plus one chunk.
template <Real T>
Matrix<T> layer_forward_streamed(View<const T> h_in, const LayerWeights<T>& w, const Partition& plan,
                                 Meter* meter) {
  if (plan.length() != h_in.rows()) throw ShapeError("layer_forward_streamed: plan length != T");
  Matrix<T> out(h_in.rows(), w.wdown.cols(), Tag::activation, meter);
  KvCache<T> kv = project_kv(h_in, w, meter);
  for (const RowRange& c : plan) {
    ChunkForward<T> f = layer_forward_chunk(h_in, c, kv, w, meter);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(c.begin + i, j) = f.out(i, j);
  }
  return out;
}

template <Real T>
Matrix<T> lm_head_forward(View<const T> h, const Matrix<T>& w_lm_head, Meter* meter) {
  return matmul<T>(h, w_lm_head.cview(), Trans::no, meter, FlopsCategory::lm_head, Tag::activation, "logits");
}

}  // namespace streambp
