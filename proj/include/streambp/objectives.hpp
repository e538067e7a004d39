#pragma once

#include <streambp/errors.hpp>
#include <streambp/metering.hpp>
#include <streambp/model.hpp>
#include <streambp/partition.hpp>
#include <streambp/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace streambp {

// Next-token convention for every objective: logits row t scores target t, for
// t in [0, T-1). The last hidden row receives no label and zero gradient.

// Un-normalized next-token cross-entropy, one label vector per sequence.
struct SftSpec {
  std::vector<std::vector<std::size_t>> labels;
  bool mean_reduction = false;
};

// Clipped-ratio objective with a log-ratio penalty to the reference policy.
// old/ref logits and advantages are constants: no gradient flows into them.
template <Real T>
struct GrpoSpec {
  std::vector<std::vector<std::size_t>> tokens;  // G x T_o sampled tokens
  std::vector<Matrix<T>> old_logits;             // G of T_o x C
  std::vector<Matrix<T>> ref_logits;             // G of T_o x C
  std::vector<std::vector<T>> advantages;        // G x T_o
  T epsilon = T(0.2);
  T beta = T(0.04);
};

// Sequence 0 of the batch is the chosen response, sequence 1 the rejected one.
template <Real T>
struct DpoSpec {
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> rejected;
  Matrix<T> ref_chosen;    // T_o x C
  Matrix<T> ref_rejected;  // T_o x C
  T beta = T(0.1);
};

template <Real T>
using LossSpec = std::variant<SftSpec, GrpoSpec<T>, DpoSpec<T>>;

enum class Objective { sft, grpo, dpo };

inline constexpr std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::sft: return "sft";
    case Objective::grpo: return "grpo";
    case Objective::dpo: return "dpo";
  }
  return "?";
}

template <Real T>
Objective objective_of(const LossSpec<T>& spec) {
  return static_cast<Objective>(spec.index());
}

template <Real T>
std::size_t batch_size(const LossSpec<T>& spec) {
  return std::visit(
      [](const auto& s) -> std::size_t {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, SftSpec>) {
          return s.labels.size();
        } else if constexpr (std::is_same_v<S, GrpoSpec<T>>) {
          return s.tokens.size();
        } else {
          return 2;
        }
      },
      spec);
}

template <Real T>
struct HeadGradResult {
  T loss{0};
  Matrix<T> g_lm_head;
  std::vector<Matrix<T>> g_hidden;  // one T x d per sequence
  // DPO only: summed log-ratio margin and the applied factor sigma(beta l) - 1.
  T dpo_margin{0};
  T dpo_factor{0};
};

namespace detail {

inline void check_tokens(std::span<const std::size_t> tokens, std::size_t expected_len, std::size_t vocab,
                         const char* what) {
  if (tokens.size() != expected_len) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(expected_len) + " targets, got " +
                     std::to_string(tokens.size()));
  }
  for (std::size_t y : tokens) {
    if (y >= vocab) throw std::out_of_range(std::string(what) + ": target " + std::to_string(y) + " >= C");
  }
}

template <Real T>
void check_hidden(std::span<const Matrix<T>> hidden, std::size_t batch, const Matrix<T>& w) {
  if (hidden.size() != batch) throw ShapeError("head: batch size does not match the loss spec");
  if (batch == 0) throw ShapeError("head: empty batch");
  const std::size_t seq = hidden[0].rows();
  if (seq < 2) throw ShapeError("head: need T >= 2 for a next-token target");
  for (const auto& h : hidden) {
    if (h.rows() != seq || h.cols() != w.rows()) throw ShapeError("head: hidden state shape");
  }
}

template <Real T>
struct RowStats {
  T max;
  T sum;  // sum exp(x - max), ascending column order
  T log_sum_exp() const { return max + std::log(sum); }
};

template <Real T>
RowStats<T> row_stats(std::span<const T> x) {
  T m = x[0];
  for (T v : x) m = std::max(m, v);
  T s{0};
  for (T v : x) s += std::exp(v - m);
  return {m, s};
}

template <Real T>
T log_prob(std::span<const T> x, std::size_t y) {
  return x[y] - row_stats(x).log_sum_exp();
}

// row <- c * (onehot(y) - softmax(row)), in place.
template <Real T>
void write_logprob_grad(std::span<T> row, const RowStats<T>& st, std::size_t y, T c) {
  for (std::size_t j = 0; j < row.size(); ++j) {
    const T p = std::exp(row[j] - st.max) / st.sum;
    row[j] = c * ((j == y ? T{1} : T{0}) - p);
  }
}

template <Real T>
std::span<T> row_of(Matrix<T>& m, std::size_t r) {
  return m.flat().subspan(r * m.cols(), m.cols());
}
template <Real T>
std::span<const T> row_of(const Matrix<T>& m, std::size_t r) {
  return m.flat().subspan(r * m.cols(), m.cols());
}

// Drives the chunk loop shared by all heads: logits^(i) for each sequence, an
// in-place loss/gradient pass over its rows, then g_lm_head and g_H accumulation.
// Logits and their gradient share one buffer, released before the next chunk.
template <Real T, class RowFn>
void stream_head(std::span<const Matrix<T>> hidden, const Matrix<T>& w, const Partition& plan, Meter* meter,
                 HeadGradResult<T>& out, RowFn&& row_fn) {
  const std::size_t seq = hidden[0].rows();
  const std::size_t vocab = w.cols();
  out.g_lm_head = Matrix<T>(w.rows(), vocab, Tag::gradient, meter);
  out.g_hidden.clear();
  for (std::size_t b = 0; b < hidden.size(); ++b) out.g_hidden.emplace_back(seq, w.rows(), Tag::gradient, meter);
  for (std::size_t ci = 0; ci < plan.count(); ++ci) {
    const RowRange rows = plan[ci];
    for (std::size_t b = 0; b < hidden.size(); ++b) {
      const View<const T> h_rows = hidden[b].rows_view(rows);
      Matrix<T> logits = lm_head_forward<T>(h_rows, w, meter);
      for (std::size_t i = 0; i < rows.size(); ++i) row_fn(ci, b, rows.begin + i, row_of(logits, i));
      detail::note_kernel(meter, FlopsCategory::objective, 2ull * logits.size());
      matmul_add<T>(out.g_lm_head.view(), h_rows.transposed(), logits.cview(), Trans::no, meter,
                    FlopsCategory::lm_head);
      matmul_add<T>(out.g_hidden[b].rows_view(rows), logits.cview(), w.cview(), Trans::yes, meter,
                    FlopsCategory::lm_head);
    }
  }
}

template <Real T>
T log_sigmoid(T z) {
  return z >= T{0} ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SFT

template <Real T>
HeadGradResult<T> sft_head_stream(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                                  const SftSpec& spec, const Chunking& head_chunks, Meter* meter = nullptr) {
  detail::check_hidden(hidden, spec.labels.size(), w_lm_head);
  const std::size_t scored = hidden[0].rows() - 1;
  for (const auto& y : spec.labels) detail::check_tokens(y, scored, w_lm_head.cols(), "sft labels");
  const T scale = spec.mean_reduction ? T{1} / static_cast<T>(scored * hidden.size()) : T{1};

  HeadGradResult<T> r;
  T total{0};
  detail::stream_head<T>(hidden, w_lm_head, head_chunks.resolve(scored), meter, r,
                         [&](std::size_t, std::size_t b, std::size_t t, std::span<T> row) {
                           const std::size_t y = spec.labels[b][t];
                           const auto st = detail::row_stats<T>(row);
                           total += st.log_sum_exp() - row[y];
                           detail::write_logprob_grad<T>(row, st, y, -scale);
                         });
  r.loss = total * scale;
  return r;
}

template <Real T>
HeadGradResult<T> sft_head_stream(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                                  const SftSpec& spec, std::size_t head_chunks, Meter* meter = nullptr) {
  return sft_head_stream(hidden, w_lm_head, spec, Chunking::chunks(head_chunks), meter);
}

// Full path: one chunk spanning every scored row.
template <Real T>
HeadGradResult<T> sft_head_full(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head, const SftSpec& spec,
                                Meter* meter = nullptr) {
  return sft_head_stream(hidden, w_lm_head, spec, Chunking::chunks(1), meter);
}

// ---------------------------------------------------------------------------
// GRPO

template <Real T>
void validate_grpo(const GrpoSpec<T>& spec, std::size_t scored, std::size_t vocab) {
  if (!(spec.epsilon > T{0})) throw DomainError("grpo: epsilon must be > 0");
  const std::size_t g = spec.tokens.size();
  if (g == 0) throw DomainError("grpo: group size must be >= 1");
  if (spec.old_logits.size() != g || spec.ref_logits.size() != g || spec.advantages.size() != g) {
    throw ShapeError("grpo: tokens, old/ref logits and advantages must have one entry per response");
  }
  for (std::size_t j = 0; j < g; ++j) {
    detail::check_tokens(spec.tokens[j], scored, vocab, "grpo tokens");
    if (spec.advantages[j].size() != scored) throw ShapeError("grpo: advantages length != T_o");
    for (const Matrix<T>* m : {&spec.old_logits[j], &spec.ref_logits[j]}) {
      if (m->rows() != scored || m->cols() != vocab) throw ShapeError("grpo: old/ref logits must be T_o x C");
    }
  }
}

// Per-token f = min(r A, clip(r, 1-eps, 1+eps) A) - beta log(pi/pi_ref), r = pi/pi_old.
// Loss = -(1 / (G T_o)) sum f. On the closed clip interval the unclipped branch
// supplies the gradient.
template <Real T>
HeadGradResult<T> grpo_head_stream(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                                   const GrpoSpec<T>& spec, const Chunking& head_chunks, Meter* meter = nullptr) {
  detail::check_hidden(hidden, spec.tokens.size(), w_lm_head);
  const std::size_t scored = hidden[0].rows() - 1;
  validate_grpo(spec, scored, w_lm_head.cols());
  const T norm = T{1} / static_cast<T>(scored * spec.tokens.size());

  HeadGradResult<T> r;
  T total{0};
  detail::stream_head<T>(
      hidden, w_lm_head, head_chunks.resolve(scored), meter, r,
      [&](std::size_t, std::size_t j, std::size_t t, std::span<T> row) {
        const std::size_t o = spec.tokens[j][t];
        const T adv = spec.advantages[j][t];
        const auto st = detail::row_stats<T>(row);
        const T logp = row[o] - st.log_sum_exp();
        const T logp_old = detail::log_prob<T>(detail::row_of(spec.old_logits[j], t), o);
        const T logp_ref = detail::log_prob<T>(detail::row_of(spec.ref_logits[j], t), o);
        const T ratio = std::exp(logp - logp_old);
        const T unclipped = ratio * adv;
        const T clipped = std::clamp(ratio, T{1} - spec.epsilon, T{1} + spec.epsilon) * adv;
        const bool use_clipped = clipped < unclipped;
        const T f = (use_clipped ? clipped : unclipped) - spec.beta * (logp - logp_ref);
        total += f;
        const T df_dlogp = (use_clipped ? T{0} : unclipped) - spec.beta;
        detail::write_logprob_grad<T>(row, st, o, -norm * df_dlogp);
      });
  r.loss = -total * norm;
  return r;
}

template <Real T>
HeadGradResult<T> grpo_head_stream(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                                   const GrpoSpec<T>& spec, std::size_t head_chunks, Meter* meter = nullptr) {
  return grpo_head_stream(hidden, w_lm_head, spec, Chunking::chunks(head_chunks), meter);
}

template <Real T>
HeadGradResult<T> grpo_head_full(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                                 const GrpoSpec<T>& spec, Meter* meter = nullptr) {
  return grpo_head_stream(hidden, w_lm_head, spec, Chunking::chunks(1), meter);
}

// ---------------------------------------------------------------------------
// DPO

template <Real T>
void validate_dpo(const DpoSpec<T>& spec, std::size_t scored, std::size_t vocab) {
  if (spec.chosen.size() != spec.rejected.size()) throw ShapeError("dpo: chosen and rejected lengths differ");
  detail::check_tokens(spec.chosen, scored, vocab, "dpo chosen");
  detail::check_tokens(spec.rejected, scored, vocab, "dpo rejected");
  for (const Matrix<T>* m : {&spec.ref_chosen, &spec.ref_rejected}) {
    if (m->rows() != scored || m->cols() != vocab) throw ShapeError("dpo: reference logits must be T_o x C");
  }
}

// Streaming DPO head. Each chunk adds its log-ratio margin to l and its
// beta-weighted, uncorrected gradient to the accumulators; finalize() applies
// the scalar (sigma(beta l) - 1) once every chunk has been seen.
template <Real T>
class DpoAccumulator {
 public:
  DpoAccumulator(const Matrix<T>& h_chosen, const Matrix<T>& h_rejected, const Matrix<T>& w_lm_head,
                 const DpoSpec<T>& spec, Meter* meter)
      : hidden_{&h_chosen, &h_rejected}, w_(&w_lm_head), spec_(&spec), meter_(meter) {
    if (h_chosen.rows() != h_rejected.rows()) throw ShapeError("dpo: chosen/rejected hidden lengths differ");
    if (h_chosen.rows() < 2) throw ShapeError("head: need T >= 2 for a next-token target");
    for (const Matrix<T>* h : hidden_) {
      if (h->cols() != w_lm_head.rows()) throw ShapeError("head: hidden state shape");
    }
    scored_ = h_chosen.rows() - 1;
    validate_dpo(spec, scored_, w_lm_head.cols());
    result_.g_lm_head = Matrix<T>(w_lm_head.rows(), w_lm_head.cols(), Tag::gradient, meter);
    for (const Matrix<T>* h : hidden_) result_.g_hidden.emplace_back(h->rows(), h->cols(), Tag::gradient, meter);
  }

  std::size_t scored_rows() const { return scored_; }

  void accumulate_chunk(RowRange rows) {
    if (finalized_) throw std::logic_error("dpo: accumulate after finalize");
    if (rows.begin >= rows.end || rows.end > scored_) throw ShapeError("dpo: chunk out of range");
    T side_sum[2] = {T{0}, T{0}};
    for (std::size_t b = 0; b < 2; ++b) {
      const auto& targets = b == 0 ? spec_->chosen : spec_->rejected;
      const Matrix<T>& ref = b == 0 ? spec_->ref_chosen : spec_->ref_rejected;
      const T sign = b == 0 ? T{1} : T{-1};
      const View<const T> h_rows = hidden_[b]->rows_view(rows);
      Matrix<T> logits = lm_head_forward<T>(h_rows, *w_, meter_);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t t = rows.begin + i;
        const std::size_t y = targets[t];
        auto row = detail::row_of(logits, i);
        const auto st = detail::row_stats<T>(std::span<const T>(row));
        side_sum[b] += (row[y] - st.log_sum_exp()) - detail::log_prob<T>(detail::row_of(ref, t), y);
        detail::write_logprob_grad<T>(row, st, y, spec_->beta * sign);
      }
      detail::note_kernel(meter_, FlopsCategory::objective, 2ull * logits.size());
      matmul_add<T>(result_.g_lm_head.view(), h_rows.transposed(), logits.cview(), Trans::no, meter_,
                    FlopsCategory::lm_head);
      matmul_add<T>(result_.g_hidden[b].rows_view(rows), logits.cview(), w_->cview(), Trans::yes, meter_,
                    FlopsCategory::lm_head);
    }
    margin_ += side_sum[0] - side_sum[1];
  }

  T margin() const { return margin_; }
  // beta * sum d l(t) / dW_lm_head over the chunks seen so far (before correction).
  const Matrix<T>& uncorrected_lm_head_grad() const { return result_.g_lm_head; }

  HeadGradResult<T> finalize() {
    if (finalized_) throw std::logic_error("dpo: finalize called twice");
    finalized_ = true;
    const T z = spec_->beta * margin_;
    const T factor = sigmoid(z) - T{1};
    scale_inplace(result_.g_lm_head, factor);
    for (auto& g : result_.g_hidden) scale_inplace(g, factor);
    detail::note_kernel(meter_, FlopsCategory::objective,
                        result_.g_lm_head.size() + result_.g_hidden[0].size() + result_.g_hidden[1].size());
    result_.loss = -detail::log_sigmoid(z);
    result_.dpo_margin = margin_;
    result_.dpo_factor = factor;
    return std::move(result_);
  }

 private:
  std::array<const Matrix<T>*, 2> hidden_;
  const Matrix<T>* w_;
  const DpoSpec<T>* spec_;
  Meter* meter_;
  std::size_t scored_ = 0;
  T margin_{0};
  bool finalized_ = false;
  HeadGradResult<T> result_;
};

template <Real T>
HeadGradResult<T> dpo_head_stream(const Matrix<T>& h_chosen, const Matrix<T>& h_rejected,
                                  const Matrix<T>& w_lm_head, const DpoSpec<T>& spec, const Chunking& head_chunks,
                                  Meter* meter = nullptr) {
  DpoAccumulator<T> acc(h_chosen, h_rejected, w_lm_head, spec, meter);
  for (const RowRange& rows : head_chunks.resolve(acc.scored_rows())) acc.accumulate_chunk(rows);
  return acc.finalize();
}

template <Real T>
HeadGradResult<T> dpo_head_stream(const Matrix<T>& h_chosen, const Matrix<T>& h_rejected,
                                  const Matrix<T>& w_lm_head, const DpoSpec<T>& spec, std::size_t head_chunks,
                                  Meter* meter = nullptr) {
  return dpo_head_stream(h_chosen, h_rejected, w_lm_head, spec, Chunking::chunks(head_chunks), meter);
}

template <Real T>
HeadGradResult<T> dpo_head_full(const Matrix<T>& h_chosen, const Matrix<T>& h_rejected, const Matrix<T>& w_lm_head,
                                const DpoSpec<T>& spec, Meter* meter = nullptr) {
  return dpo_head_stream(h_chosen, h_rejected, w_lm_head, spec, Chunking::chunks(1), meter);
}

// ---------------------------------------------------------------------------

template <Real T>
HeadGradResult<T> head_stream(std::span<const Matrix<T>> hidden, const Matrix<T>& w_lm_head,
                              const LossSpec<T>& spec, const Chunking& head_chunks, Meter* meter = nullptr) {
  return std::visit(
      [&](const auto& s) -> HeadGradResult<T> {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, SftSpec>) {
          return sft_head_stream<T>(hidden, w_lm_head, s, head_chunks, meter);
        } else if constexpr (std::is_same_v<S, GrpoSpec<T>>) {
          return grpo_head_stream<T>(hidden, w_lm_head, s, head_chunks, meter);
        } else {
          if (hidden.size() != 2) throw ShapeError("dpo: batch must be {chosen, rejected}");
          return dpo_head_stream<T>(hidden[0], hidden[1], w_lm_head, s, head_chunks, meter);
        }
      },
      spec);
}

}  // namespace streambp
