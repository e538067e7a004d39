#pragma once

// Reference implementation used as ground truth by the tests and the gradcheck
// harness. Plain nested loops in double precision over std::vector storage, full
// T x T attention, no metering, no chunking, nothing shared with the engines.

#include <streambp/errors.hpp>
#include <streambp/model.hpp>
#include <streambp/objectives.hpp>
#include <streambp/rng.hpp>
#include <streambp/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace streambp::oracle {

inline constexpr std::size_t kMaxSeqLen = 64;

struct Dense {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  Dense() = default;
  Dense(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

template <Real T>
Dense to_dense(const Matrix<T>& m) {
  Dense d(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) d.at(i, j) = static_cast<double>(m(i, j));
  return d;
}

struct RefLayer {
  Dense wq, wk, wv, wup, wgate, wdown;
};

struct RefModel {
  std::vector<RefLayer> layers;
  Dense lm_head;

  // Same ordering as WeightSet::tensor(i).
  Dense& tensor(std::size_t i) {
    if (i == layers.size() * kLayerTensors) return lm_head;
    RefLayer& l = layers.at(i / kLayerTensors);
    Dense* t[] = {&l.wq, &l.wk, &l.wv, &l.wup, &l.wgate, &l.wdown};
    return *t[i % kLayerTensors];
  }
  std::size_t tensor_count() const { return layers.size() * kLayerTensors + 1; }
};

struct RefSft {
  std::vector<std::vector<std::size_t>> labels;
  bool mean = false;
};
struct RefGrpo {
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<Dense> old_logits, ref_logits;
  std::vector<std::vector<double>> adv;
  double eps = 0.2, beta = 0.04;
};
struct RefDpo {
  std::vector<std::size_t> chosen, rejected;
  Dense ref_chosen, ref_rejected;
  double beta = 0.1;
};
using RefLoss = std::variant<RefSft, RefGrpo, RefDpo>;

template <Real T>
RefModel to_ref(const ModelParams<T>& p) {
  RefModel m;
  for (const auto& l : p.layers) {
    m.layers.push_back({to_dense(l.wq), to_dense(l.wk), to_dense(l.wv), to_dense(l.wup), to_dense(l.wgate),
                        to_dense(l.wdown)});
  }
  m.lm_head = to_dense(p.lm_head);
  return m;
}

template <Real T>
RefLoss to_ref(const LossSpec<T>& spec) {
  if (const auto* s = std::get_if<SftSpec>(&spec)) return RefSft{s->labels, s->mean_reduction};
  if (const auto* g = std::get_if<GrpoSpec<T>>(&spec)) {
    RefGrpo r;
    r.tokens = g->tokens;
    for (const auto& m : g->old_logits) r.old_logits.push_back(to_dense(m));
    for (const auto& m : g->ref_logits) r.ref_logits.push_back(to_dense(m));
    for (const auto& a : g->advantages) r.adv.emplace_back(a.begin(), a.end());
    r.eps = g->epsilon;
    r.beta = g->beta;
    return r;
  }
  const auto& d = std::get<DpoSpec<T>>(spec);
  return RefDpo{d.chosen, d.rejected, to_dense(d.ref_chosen), to_dense(d.ref_rejected), static_cast<double>(d.beta)};
}

template <Real T>
std::vector<Dense> to_ref(std::span<const Matrix<T>> inputs) {
  std::vector<Dense> out;
  for (const auto& m : inputs) out.push_back(to_dense(m));
  return out;
}

namespace naive {

// c = a * b
inline Dense mul(const Dense& a, const Dense& b) {
  Dense c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

// c = a^T * b
inline Dense mul_tn(const Dense& a, const Dense& b) {
  Dense c(a.cols, b.cols);
  for (std::size_t i = 0; i < a.cols; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.rows; ++k) s += a.at(k, i) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

// c = a * b^T
inline Dense mul_nt(const Dense& a, const Dense& b) {
  Dense c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(j, k);
      c.at(i, j) = s;
    }
  return c;
}

inline void add_to(Dense& dst, const Dense& src) {
  for (std::size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

inline double sigm(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// [K K ... K] with `rep` copies side by side.
inline Dense widen(const Dense& k, std::size_t rep) {
  Dense w(k.rows, k.cols * rep);
  for (std::size_t i = 0; i < k.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) w.at(i, j) = k.at(i, j % k.cols);
  return w;
}

inline Dense narrow(const Dense& wide, std::size_t cols) {
  Dense n(wide.rows, cols);
  for (std::size_t i = 0; i < wide.rows; ++i)
    for (std::size_t j = 0; j < wide.cols; ++j) n.at(i, j % cols) += wide.at(i, j);
  return n;
}

struct LayerTape {
  Dense q, k, v, p, o, up, gate, act, out;
};

inline LayerTape layer(const Dense& h, const RefLayer& w) {
  LayerTape t;
  const std::size_t n = h.rows, rep = w.wq.cols / w.wk.cols;
  t.q = mul(h, w.wq);
  t.k = mul(h, w.wk);
  t.v = mul(h, w.wv);
  const Dense kw = widen(t.k, rep), vw = widen(t.v, rep);
  t.p = Dense(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < t.q.cols; ++c) acc += t.q.at(i, c) * kw.at(j, c);
      s[j] = acc;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      t.p.at(i, j) = std::exp(s[j] - mx);
      z += t.p.at(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) t.p.at(i, j) /= z;
  }
  t.o = Dense(n, vw.cols);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < vw.cols; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j <= i; ++j) acc += t.p.at(i, j) * vw.at(j, c);
      t.o.at(i, c) = acc;
    }
  t.up = mul(t.o, w.wup);
  t.gate = mul(t.o, w.wgate);
  t.act = Dense(n, t.up.cols);
  for (std::size_t i = 0; i < t.act.a.size(); ++i) t.act.a[i] = t.gate.a[i] * sigm(t.gate.a[i]) * t.up.a[i];
  t.out = mul(t.act, w.wdown);
  return t;
}

struct RowLse {
  double max, sum;
  double lse() const { return max + std::log(sum); }
};

inline RowLse lse_row(const Dense& x, std::size_t r) {
  double m = x.at(r, 0);
  for (std::size_t j = 0; j < x.cols; ++j) m = std::max(m, x.at(r, j));
  double s = 0.0;
  for (std::size_t j = 0; j < x.cols; ++j) s += std::exp(x.at(r, j) - m);
  return {m, s};
}

inline double logp(const Dense& x, std::size_t r, std::size_t y) { return x.at(r, y) - lse_row(x, r).lse(); }

// d logp(y) / d x_j = [j == y] - softmax_j
inline void add_logp_grad(Dense& g, const Dense& x, std::size_t r, std::size_t y, double c) {
  const RowLse st = lse_row(x, r);
  for (std::size_t j = 0; j < x.cols; ++j) g.at(r, j) += c * ((j == y ? 1.0 : 0.0) - std::exp(x.at(r, j) - st.max) / st.sum);
}

// Loss and dL/dlogits for each sequence (logits have T rows; the last row is unscored).
inline double objective(const RefLoss& loss, const std::vector<Dense>& logits, std::vector<Dense>* dlogits) {
  const std::size_t scored = logits.at(0).rows - 1;
  if (dlogits != nullptr) {
    dlogits->clear();
    for (const auto& l : logits) dlogits->emplace_back(l.rows, l.cols);
  }
  if (const auto* s = std::get_if<RefSft>(&loss)) {
    const double scale = s->mean ? 1.0 / static_cast<double>(scored * logits.size()) : 1.0;
    double total = 0.0;
    for (std::size_t b = 0; b < logits.size(); ++b)
      for (std::size_t t = 0; t < scored; ++t) {
        const std::size_t y = s->labels[b][t];
        total += lse_row(logits[b], t).lse() - logits[b].at(t, y);
        if (dlogits) add_logp_grad((*dlogits)[b], logits[b], t, y, -scale);
      }
    return total * scale;
  }
  if (const auto* g = std::get_if<RefGrpo>(&loss)) {
    const double norm = 1.0 / static_cast<double>(scored * logits.size());
    double total = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j)
      for (std::size_t t = 0; t < scored; ++t) {
        const std::size_t o = g->tokens[j][t];
        const double lp = logp(logits[j], t, o);
        const double r = std::exp(lp - logp(g->old_logits[j], t, o));
        const double a = g->adv[j][t];
        const double unclipped = r * a;
        const double clipped = std::min(std::max(r, 1.0 - g->eps), 1.0 + g->eps) * a;
        const bool take_clipped = clipped < unclipped;
        total += (take_clipped ? clipped : unclipped) - g->beta * (lp - logp(g->ref_logits[j], t, o));
        if (dlogits) add_logp_grad((*dlogits)[j], logits[j], t, o, -norm * ((take_clipped ? 0.0 : unclipped) - g->beta));
      }
    return -total * norm;
  }
  const auto& d = std::get<RefDpo>(loss);
  double side[2] = {0.0, 0.0};
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& y = b == 0 ? d.chosen : d.rejected;
    const Dense& ref = b == 0 ? d.ref_chosen : d.ref_rejected;
    for (std::size_t t = 0; t < scored; ++t) side[b] += logp(logits[b], t, y[t]) - logp(ref, t, y[t]);
  }
  const double margin = side[0] - side[1];
  const double z = d.beta * margin;
  // dL/dmargin = -beta (1 - sigmoid(z))
  const double dmargin = -d.beta * (1.0 - sigm(z));
  if (dlogits) {
    for (std::size_t b = 0; b < 2; ++b) {
      const auto& y = b == 0 ? d.chosen : d.rejected;
      for (std::size_t t = 0; t < scored; ++t) add_logp_grad((*dlogits)[b], logits[b], t, y[t], b == 0 ? dmargin : -dmargin);
    }
  }
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

}  // namespace naive

struct ReferenceGradients {
  double loss = 0.0;
  std::vector<Dense> params;  // WeightSet tensor order
  std::vector<Dense> inputs;
};

inline void guard(const std::vector<Dense>& inputs) {
  if (inputs.empty()) throw ShapeError("oracle: empty batch");
  if (inputs[0].rows > kMaxSeqLen) {
    throw ResourceGuardError("oracle: T=" + std::to_string(inputs[0].rows) + " exceeds the reference cap of " +
                             std::to_string(kMaxSeqLen));
  }
}

inline double forward_loss(const RefModel& model, const std::vector<Dense>& inputs, const RefLoss& loss) {
  guard(inputs);
  std::vector<Dense> logits;
  for (const Dense& x : inputs) {
    Dense h = x;
    for (const auto& l : model.layers) h = naive::layer(h, l).out;
    logits.push_back(naive::mul(h, model.lm_head));
  }
  return naive::objective(loss, logits, nullptr);
}

// Full-graph backward over the whole batch.
inline ReferenceGradients gradients(const RefModel& model, const std::vector<Dense>& inputs, const RefLoss& loss) {
  guard(inputs);
  const std::size_t nl = model.layers.size();
  ReferenceGradients g;
  g.params.resize(nl * kLayerTensors + 1);
  RefModel shapes = model;
  for (std::size_t i = 0; i < shapes.tensor_count(); ++i) g.params[i] = Dense(shapes.tensor(i).rows, shapes.tensor(i).cols);

  std::vector<std::vector<naive::LayerTape>> tapes(inputs.size());
  std::vector<std::vector<Dense>> layer_in(inputs.size());
  std::vector<Dense> logits, finals;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    Dense h = inputs[b];
    for (const auto& l : model.layers) {
      layer_in[b].push_back(h);
      tapes[b].push_back(naive::layer(h, l));
      h = tapes[b].back().out;
    }
    finals.push_back(h);
    logits.push_back(naive::mul(h, model.lm_head));
  }
  std::vector<Dense> dlogits;
  g.loss = naive::objective(loss, logits, &dlogits);

  Dense& g_head = g.params[nl * kLayerTensors];
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    naive::add_to(g_head, naive::mul_tn(finals[b], dlogits[b]));
    Dense dh = naive::mul_nt(dlogits[b], model.lm_head);
    for (std::size_t l = nl; l-- > 0;) {
      const RefLayer& w = model.layers[l];
      const naive::LayerTape& t = tapes[b][l];
      const Dense& h = layer_in[b][l];
      const std::size_t rep = w.wq.cols / w.wk.cols;
      Dense* gw = &g.params[l * kLayerTensors];

      const Dense d_act = naive::mul_nt(dh, w.wdown);
      naive::add_to(gw[5], naive::mul_tn(t.act, dh));
      Dense d_up(d_act.rows, d_act.cols), d_gate(d_act.rows, d_act.cols);
      for (std::size_t i = 0; i < d_act.a.size(); ++i) {
        const double x = t.gate.a[i], s = naive::sigm(x);
        d_up.a[i] = d_act.a[i] * x * s;
        d_gate.a[i] = d_act.a[i] * t.up.a[i] * (s + x * s * (1.0 - s));
      }
      naive::add_to(gw[3], naive::mul_tn(t.o, d_up));
      naive::add_to(gw[4], naive::mul_tn(t.o, d_gate));
      Dense d_o = naive::mul_nt(d_up, w.wup);
      naive::add_to(d_o, naive::mul_nt(d_gate, w.wgate));

      const Dense kw = naive::widen(t.k, rep), vw = naive::widen(t.v, rep);
      const Dense d_p = naive::mul_nt(d_o, vw);
      const Dense d_vw = naive::mul_tn(t.p, d_o);
      Dense d_s(d_p.rows, d_p.cols);
      for (std::size_t i = 0; i < d_p.rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += d_p.at(i, j) * t.p.at(i, j);
        for (std::size_t j = 0; j <= i; ++j) d_s.at(i, j) = t.p.at(i, j) * (d_p.at(i, j) - dot);
      }
      const Dense d_q = naive::mul(d_s, kw);
      const Dense d_k = naive::narrow(naive::mul_tn(d_s, t.q), w.wk.cols);
      const Dense d_v = naive::narrow(d_vw, w.wv.cols);

      naive::add_to(gw[0], naive::mul_tn(h, d_q));
      naive::add_to(gw[1], naive::mul_tn(h, d_k));
      naive::add_to(gw[2], naive::mul_tn(h, d_v));
      Dense d_h = naive::mul_nt(d_q, w.wq);
      naive::add_to(d_h, naive::mul_nt(d_k, w.wk));
      naive::add_to(d_h, naive::mul_nt(d_v, w.wv));
      dh = std::move(d_h);
    }
    g.inputs.push_back(std::move(dh));
  }
  return g;
}

template <Real T>
double reference_forward_loss(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                              const LossSpec<T>& spec) {
  return forward_loss(to_ref(params), to_ref<T>(inputs), to_ref<T>(spec));
}

template <Real T>
ReferenceGradients reference_gradients(const ModelParams<T>& params, std::span<const Matrix<T>> inputs,
                                       const LossSpec<T>& spec) {
  return gradients(to_ref(params), to_ref<T>(inputs), to_ref<T>(spec));
}

struct Coordinate {
  std::size_t tensor = 0;  // WeightSet tensor index
  std::size_t row = 0;
  std::size_t col = 0;
};

// (f(x + h) - f(x - h)) / 2h
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  if (!(h > 0.0)) throw DomainError("finite difference: h must be > 0");
  const double up = f(x + h), down = f(x - h);
  if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("finite difference: non-finite loss");
  return (up - down) / (2.0 * h);
}

// Central difference of the reference loss along one parameter coordinate.
inline double finite_diff_grad(RefModel& model, const std::vector<Dense>& inputs, const RefLoss& loss,
                               const Coordinate& c, double h) {
  double& slot = model.tensor(c.tensor).at(c.row, c.col);
  const double saved = slot;
  const double g = central_difference(
      [&](double v) {
        slot = v;
        return forward_loss(model, inputs, loss);
      },
      saved, h);
  slot = saved;
  return g;
}

template <Real T>
double finite_diff_grad(const ModelParams<T>& params, std::span<const Matrix<T>> inputs, const LossSpec<T>& spec,
                        const Coordinate& c, double h) {
  RefModel m = to_ref(params);
  return finite_diff_grad(m, to_ref<T>(inputs), to_ref<T>(spec), c, h);
}

// Richardson extrapolation of two central differences, (4 D(h/2) - D(h)) / 3:
// fourth-order accurate, so a larger h keeps round-off low.
inline double extrapolated_diff_grad(RefModel& model, const std::vector<Dense>& inputs, const RefLoss& loss,
                                     const Coordinate& c, double h) {
  const double coarse = finite_diff_grad(model, inputs, loss, c, h);
  const double fine = finite_diff_grad(model, inputs, loss, c, h / 2);
  return (4.0 * fine - coarse) / 3.0;
}

// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Up to `per_tensor` distinct coordinates per tensor; every coordinate when the
// tensor is smaller than that.
template <Real T>
std::vector<Coordinate> sample_coordinates(const ModelParams<T>& params, std::size_t per_tensor, Rng& rng) {
  std::vector<Coordinate> out;
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    const Matrix<T>& m = params.tensor(i);
    std::vector<std::size_t> idx(m.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    const std::size_t take = std::min(per_tensor, idx.size());
    for (std::size_t k = 0; k < take; ++k) std::swap(idx[k], idx[k + rng.uniform_index(idx.size() - k)]);
    for (std::size_t k = 0; k < take; ++k) out.push_back({i, idx[k] / m.cols(), idx[k] % m.cols()});
  }
  return out;
}

}  // namespace streambp::oracle
