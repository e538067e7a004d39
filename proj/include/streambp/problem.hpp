#pragma once

// Seeded end-to-end problems: parameters, input hidden states and a loss spec
// for one objective, all drawn from a single seed.

#include <streambp/engines.hpp>
#include <streambp/model.hpp>
#include <streambp/objectives.hpp>
#include <streambp/rng.hpp>
#include <streambp/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace streambp {

struct ObjectiveSettings {
  Objective kind = Objective::sft;
  std::size_t group = 2;  // GRPO responses; SFT batch size
  double epsilon = 0.2;
  double beta_grpo = 0.04;
  double beta_dpo = 0.1;
  bool mean_reduction = false;
  // Spread of the synthetic old/reference logits around zero.
  double aux_logit_scale = 1.0;
};

template <Real T>
struct Problem {
  ModelParams<T> params;
  std::vector<Matrix<T>> inputs;
  LossSpec<T> spec;

  std::span<const Matrix<T>> batch() const { return inputs; }
};

namespace detail {

inline std::vector<std::size_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = static_cast<std::size_t>(rng.uniform_index(vocab));
  return y;
}

}  // namespace detail

template <Real T>
LossSpec<T> make_loss_spec(const ModelConfig& cfg, const ObjectiveSettings& obj, Rng& rng) {
  const std::size_t scored = cfg.scored_rows(), vocab = cfg.vocab;
  const T aux = static_cast<T>(obj.aux_logit_scale);
  switch (obj.kind) {
    case Objective::sft: {
      SftSpec s;
      for (std::size_t b = 0; b < obj.group; ++b) s.labels.push_back(detail::random_tokens(scored, vocab, rng));
      s.mean_reduction = obj.mean_reduction;
      return s;
    }
    case Objective::grpo: {
      GrpoSpec<T> g;
      g.epsilon = static_cast<T>(obj.epsilon);
      g.beta = static_cast<T>(obj.beta_grpo);
      for (std::size_t j = 0; j < obj.group; ++j) {
        g.tokens.push_back(detail::random_tokens(scored, vocab, rng));
        g.old_logits.push_back(random_matrix<T>(scored, vocab, rng, aux));
        g.ref_logits.push_back(random_matrix<T>(scored, vocab, rng, aux));
        std::vector<T> a(scored);
        for (T& v : a) v = static_cast<T>(rng.uniform(-1.0, 1.0));
        g.advantages.push_back(std::move(a));
      }
      return g;
    }
    case Objective::dpo: {
      DpoSpec<T> d;
      d.beta = static_cast<T>(obj.beta_dpo);
      d.chosen = detail::random_tokens(scored, vocab, rng);
      d.rejected = detail::random_tokens(scored, vocab, rng);
      d.ref_chosen = random_matrix<T>(scored, vocab, rng, aux);
      d.ref_rejected = random_matrix<T>(scored, vocab, rng, aux);
      return d;
    }
  }
  throw std::logic_error("make_loss_spec: unknown objective");
}

inline std::size_t batch_for(const ObjectiveSettings& obj) { return obj.kind == Objective::dpo ? 2 : obj.group; }

namespace detail {

template <Real T>
double mean_square(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

// LSUV-style rescaling on the actual inputs, one layer at a time: W_q and W_k
// so the causal scores have unit RMS, then W_down so the layer output does.
template <Real T>
void calibrate_scales(ModelParams<T>& params, std::span<const Matrix<T>> inputs) {
  std::vector<Matrix<T>> hidden;
  for (const auto& h : inputs) hidden.push_back(h.clone(Tag::scratch, nullptr));
  for (auto& w : params.layers) {
    double score_sq = 0.0;
    std::size_t score_n = 0;
    for (const auto& h : hidden) {
      const auto q = matmul<T>(h.cview(), w.wq.cview(), Trans::no, nullptr, FlopsCategory::qkv_proj);
      const auto k = matmul<T>(h.cview(), w.wk.cview().tile_cols(w.wq.cols() / w.wk.cols()), Trans::no, nullptr,
                               FlopsCategory::qkv_proj);
      const auto s = matmul<T>(q.cview(), k.cview(), Trans::yes, nullptr, FlopsCategory::attn_score);
      for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = 0; j <= i; ++j) score_sq += static_cast<double>(s(i, j)) * static_cast<double>(s(i, j));
      score_n += s.rows() * (s.rows() + 1) / 2;
    }
    const double score_rms = std::sqrt(score_sq / static_cast<double>(score_n));
    if (score_rms > 0.0) {
      const T f = static_cast<T>(1.0 / std::sqrt(score_rms));
      scale_inplace(w.wq, f);
      scale_inplace(w.wk, f);
    }
    std::vector<Matrix<T>> out;
    double out_sq = 0.0;
    for (const auto& h : hidden) {
      out.push_back(layer_forward_full<T>(h.cview(), w, nullptr).out);
      out_sq += detail::mean_square<T>(out.back().flat());
    }
    const double out_rms = std::sqrt(out_sq / static_cast<double>(out.size()));
    if (out_rms > 0.0) {
      const T f = static_cast<T>(1.0 / out_rms);
      scale_inplace(w.wdown, f);
      for (auto& o : out) scale_inplace(o, f);
    }
    hidden = std::move(out);
  }
}

// Parameters, inputs and loss come from independent child streams, so changing
// the objective leaves the model and inputs unchanged.
template <Real T>
Problem<T> make_problem(const ModelConfig& cfg, const ObjectiveSettings& obj, std::uint64_t seed,
                        bool calibrate = true) {
  cfg.validate();
  if (cfg.seq_len < 2) throw ConfigError("problem: seq_len must be >= 2 for a next-token objective");
  if (obj.kind != Objective::dpo && obj.group == 0) throw ConfigError("problem: objective.group must be >= 1");
  const Rng root(seed);
  Rng param_rng = root.split(1), input_rng = root.split(2), loss_rng = root.split(3);
  Problem<T> p;
  p.params = ModelParams<T>::random(cfg, param_rng);
  for (std::size_t b = 0; b < batch_for(obj); ++b) {
    p.inputs.push_back(random_matrix<T>(cfg.seq_len, cfg.hidden, input_rng, T{1}));
  }
  p.spec = make_loss_spec<T>(cfg, obj, loss_rng);
  if (calibrate) calibrate_scales<T>(p.params, p.batch());
  return p;
}

}  // namespace streambp
