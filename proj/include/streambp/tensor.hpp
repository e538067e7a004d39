#pragma once

#include <streambp/errors.hpp>
#include <streambp/metering.hpp>
#include <streambp/rng.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace streambp {

template <class T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

enum class Dtype : std::uint8_t { real32, real64 };

template <Real T>
inline constexpr Dtype dtype_of = std::same_as<T, float> ? Dtype::real32 : Dtype::real64;

inline constexpr std::string_view to_string(Dtype d) { return d == Dtype::real32 ? "real32" : "real64"; }

// Half-open row interval [begin, end).
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t r) const { return r >= begin && r < end; }
  bool operator==(const RowRange&) const = default;
};

// Strided, non-owning 2-D window. A non-zero period repeats the first `period`
// rows/columns logically (used to widen shared K/V without copying).
template <class E>
class View {
 public:
  View() = default;
  View(E* data, std::size_t rows, std::size_t cols, std::ptrdiff_t row_stride, std::ptrdiff_t col_stride,
       std::size_t row_period = 0, std::size_t col_period = 0)
      : data_(data), rows_(rows), cols_(cols), rs_(row_stride), cs_(col_stride), rp_(row_period), cp_(col_period) {}

  // View<T> -> View<const T>
  template <class U>
    requires std::same_as<E, const U>
  View(const View<U>& o)  // NOLINT(google-explicit-constructor)
      : data_(o.data()), rows_(o.rows()), cols_(o.cols()), rs_(o.row_stride()), cs_(o.col_stride()),
        rp_(o.row_period()), cp_(o.col_period()) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  E* data() const { return data_; }
  std::ptrdiff_t row_stride() const { return rs_; }
  std::ptrdiff_t col_stride() const { return cs_; }
  std::size_t row_period() const { return rp_; }
  std::size_t col_period() const { return cp_; }
  bool contiguous_rows() const { return cs_ == 1 && cp_ == 0; }

  E& operator()(std::size_t r, std::size_t c) const {
    if (rp_ != 0) r %= rp_;
    if (cp_ != 0) c %= cp_;
    return data_[static_cast<std::ptrdiff_t>(r) * rs_ + static_cast<std::ptrdiff_t>(c) * cs_];
  }

  View transposed() const { return View(data_, cols_, rows_, cs_, rs_, cp_, rp_); }

  View row_slice(RowRange r) const {
    if (r.begin > r.end || r.end > rows_) throw ShapeError("row_slice: range out of bounds");
    if (rp_ != 0) throw ShapeError("row_slice: cannot slice a row-periodic view");
    return View(data_ + static_cast<std::ptrdiff_t>(r.begin) * rs_, r.size(), cols_, rs_, cs_, 0, cp_);
  }

  // Logical column repetition: result has cols() * factor columns.
  View tile_cols(std::size_t factor) const {
    if (cp_ != 0) throw ShapeError("tile_cols: view already tiled");
    if (factor == 1) return *this;
    return View(data_, rows_, cols_ * factor, rs_, cs_, rp_, cols_);
  }

 private:
  E* data_ = nullptr;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::ptrdiff_t rs_ = 0;
  std::ptrdiff_t cs_ = 0;
  std::size_t rp_ = 0;
  std::size_t cp_ = 0;
};

// Dense row-major array whose lifetime is reported to an optional Meter.
template <class E>
class Array2D {
 public:
  Array2D() = default;

  Array2D(std::size_t rows, std::size_t cols, Tag tag = Tag::scratch, Meter* meter = nullptr,
          std::string_view label = {})
      : rows_(rows), cols_(cols), data_(rows * cols, E{}), tag_(tag), meter_(meter), label_(label) {
    acquire();
  }

  Array2D(std::initializer_list<std::initializer_list<E>> init, Tag tag = Tag::scratch, Meter* meter = nullptr)
      : tag_(tag), meter_(meter) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("Array2D: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
    acquire();
  }

  Array2D(const Array2D& o)
      : rows_(o.rows_), cols_(o.cols_), data_(o.data_), tag_(o.tag_), meter_(o.meter_), label_(o.label_) {
    acquire();
  }

  Array2D(Array2D&& o) noexcept
      : rows_(std::exchange(o.rows_, 0)), cols_(std::exchange(o.cols_, 0)), data_(std::move(o.data_)),
        tag_(o.tag_), meter_(std::exchange(o.meter_, nullptr)), label_(std::move(o.label_)) {
    o.data_.clear();
  }

  Array2D& operator=(const Array2D& o) {
    if (this != &o) {
      Array2D tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }

  Array2D& operator=(Array2D&& o) noexcept {
    if (this != &o) {
      release();
      rows_ = std::exchange(o.rows_, 0);
      cols_ = std::exchange(o.cols_, 0);
      data_ = std::move(o.data_);
      o.data_.clear();
      tag_ = o.tag_;
      meter_ = std::exchange(o.meter_, nullptr);
      label_ = std::move(o.label_);
    }
    return *this;
  }

  ~Array2D() { release(); }

  // Copy with a new tag/meter, e.g. to move an input under metering.
  Array2D clone(Tag tag, Meter* meter, std::string_view label = {}) const {
    Array2D out;
    out.rows_ = rows_;
    out.cols_ = cols_;
    out.data_ = data_;
    out.tag_ = tag;
    out.meter_ = meter;
    out.label_ = label;
    out.acquire();
    return out;
  }

  // Frees the buffer early and reports it to the meter.
  void release() {
    if (meter_ != nullptr && !data_.empty()) meter_->track_free(bytes(), tag_, label_);
    meter_ = nullptr;
    data_.clear();
    data_.shrink_to_fit();
    rows_ = cols_ = 0;
  }

  // Stops metering but keeps the contents: for results that outlive their meter.
  void detach() {
    if (meter_ != nullptr && !data_.empty()) meter_->track_free(bytes(), tag_, label_);
    meter_ = nullptr;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::uint64_t bytes() const { return static_cast<std::uint64_t>(data_.size()) * sizeof(E); }
  bool empty() const { return data_.empty(); }
  Tag tag() const { return tag_; }
  Meter* meter() const { return meter_; }
  const std::string& label() const { return label_; }

  E& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const E& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<E> flat() { return data_; }
  std::span<const E> flat() const { return data_; }
  E* data() { return data_.data(); }
  const E* data() const { return data_.data(); }

  View<E> view() { return View<E>(data_.data(), rows_, cols_, static_cast<std::ptrdiff_t>(cols_), 1); }
  View<const E> view() const {
    return View<const E>(data_.data(), rows_, cols_, static_cast<std::ptrdiff_t>(cols_), 1);
  }
  View<const E> cview() const { return view(); }
  View<E> rows_view(RowRange r) { return view().row_slice(r); }
  View<const E> rows_view(RowRange r) const { return view().row_slice(r); }

  operator View<const E>() const { return view(); }  // NOLINT(google-explicit-constructor)

 private:
  void acquire() {
    if (meter_ != nullptr && !data_.empty()) meter_->track_alloc(bytes(), tag_, label_);
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<E> data_;
  Tag tag_ = Tag::scratch;
  Meter* meter_ = nullptr;
  std::string label_;
};

template <Real T>
using Matrix = Array2D<T>;

// 1 = attention allowed, 0 = masked.
using Mask = Array2D<std::uint8_t>;

enum class Trans : bool { no = false, yes = true };

namespace detail {

inline void note_kernel(Meter* meter, FlopsCategory cat, std::uint64_t flops) {
  if (meter == nullptr) return;
  meter->add_flops(cat, flops);
  meter->count_kernel();
}

// out(i, j) = sum_k a(i, k) b(k, j), k ascending from zero, then store/accumulate.
// The per-element summation order equals the naive triple loop.
template <Real T, bool Accumulate>
void gemm(View<T> out, View<const T> a, View<const T> b) {
  const std::size_t m = a.rows(), kk = a.cols(), n = b.cols();
  std::vector<T> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), T{0});
    for (std::size_t k = 0; k < kk; ++k) {
      const T aik = a(i, k);
      if (b.contiguous_rows()) {
        const T* brow = &b(k, 0);
        for (std::size_t j = 0; j < n; ++j) acc[j] += aik * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) acc[j] += aik * b(k, j);
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      if constexpr (Accumulate) {
        out(i, j) += acc[j];
      } else {
        out(i, j) = acc[j];
      }
    }
  }
}

}  // namespace detail

// A (m x k) times B (k x n), or B^T when transpose_b. Reports 2mkn FLOPs.
template <Real T>
Matrix<T> matmul(View<const T> a, View<const T> b, Trans transpose_b, Meter* meter, FlopsCategory category,
                 Tag tag = Tag::activation, std::string_view label = {}) {
  View<const T> bb = transpose_b == Trans::yes ? b.transposed() : b;
  if (a.cols() != bb.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " * " + std::to_string(bb.rows()) + "x" +
                     std::to_string(bb.cols()) + ")");
  }
  Matrix<T> out(a.rows(), bb.cols(), tag, meter, label);
  detail::gemm<T, false>(out.view(), a, bb);
  detail::note_kernel(meter, category, 2ull * a.rows() * a.cols() * bb.cols());
  return out;
}

// out += A * op(B). The product is summed first, then added, so a zero-initialized
// accumulator reproduces matmul() bit for bit.
template <Real T>
void matmul_add(View<T> out, View<const T> a, View<const T> b, Trans transpose_b, Meter* meter,
                FlopsCategory category) {
  View<const T> bb = transpose_b == Trans::yes ? b.transposed() : b;
  if (a.cols() != bb.rows() || out.rows() != a.rows() || out.cols() != bb.cols()) {
    throw ShapeError("matmul_add: shape mismatch");
  }
  detail::gemm<T, true>(out, a, bb);
  detail::note_kernel(meter, category, 2ull * a.rows() * a.cols() * bb.cols());
}

template <Real T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <Real T>
T silu(T x) {
  return x * sigmoid(x);
}

// d/dx [x sigmoid(x)] = s (1 + x (1 - s))
template <Real T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T{1} + x * (T{1} - s));
}

template <Real T, class F>
Matrix<T> map_elementwise(View<const T> x, F&& f, Meter* meter, FlopsCategory category, Tag tag,
                          std::string_view label) {
  Matrix<T> out(x.rows(), x.cols(), tag, meter, label);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = f(x(i, j));
  detail::note_kernel(meter, category, static_cast<std::uint64_t>(x.rows()) * x.cols());
  return out;
}

template <Real T>
Matrix<T> sigmoid(View<const T> x, Meter* meter = nullptr, FlopsCategory category = FlopsCategory::mlp,
                  Tag tag = Tag::activation, std::string_view label = {}) {
  return map_elementwise<T>(x, [](T v) { return sigmoid(v); }, meter, category, tag, label);
}

template <Real T>
Matrix<T> silu(View<const T> x, Meter* meter = nullptr, FlopsCategory category = FlopsCategory::mlp,
               Tag tag = Tag::activation, std::string_view label = {}) {
  return map_elementwise<T>(x, [](T v) { return silu(v); }, meter, category, tag, label);
}

// Row-wise softmax over unmasked entries after max subtraction. Masked entries
// are exactly zero.
template <Real T>
Matrix<T> stable_softmax_rows(View<const T> s, View<const std::uint8_t> mask, Meter* meter = nullptr,
                              FlopsCategory category = FlopsCategory::attn_score, Tag tag = Tag::activation,
                              std::string_view label = {}) {
  if (mask.rows() != s.rows() || mask.cols() != s.cols()) throw ShapeError("stable_softmax_rows: mask shape");
  Matrix<T> p(s.rows(), s.cols(), tag, meter, label);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    T row_max = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (mask(i, j) != 0) {
        row_max = any ? std::max(row_max, s(i, j)) : s(i, j);
        any = true;
      }
    }
    if (!any) throw DegenerateRowError("stable_softmax_rows: row " + std::to_string(i) + " is fully masked");
    T sum{0};
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (mask(i, j) != 0) {
        p(i, j) = std::exp(s(i, j) - row_max);
        sum += p(i, j);
      }
    }
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (mask(i, j) != 0) p(i, j) /= sum;
    }
  }
  detail::note_kernel(meter, category, static_cast<std::uint64_t>(s.rows()) * s.cols());
  return p;
}

// dS = P o (dP - rowsum(dP o P)).
template <Real T>
Matrix<T> softmax_rows_backward(View<const T> p, View<const T> dp, Meter* meter = nullptr,
                                FlopsCategory category = FlopsCategory::attn_score, Tag tag = Tag::activation,
                                std::string_view label = {}) {
  if (p.rows() != dp.rows() || p.cols() != dp.cols()) throw ShapeError("softmax_rows_backward: shape");
  Matrix<T> ds(p.rows(), p.cols(), tag, meter, label);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    T dot{0};
    for (std::size_t j = 0; j < p.cols(); ++j) dot += dp(i, j) * p(i, j);
    for (std::size_t j = 0; j < p.cols(); ++j) {
#ifdef STREAMBP_INJECT_SOFTMAX_BWD_SIGN_FLIP
      ds(i, j) = p(i, j) * (dot - dp(i, j));
#else
      ds(i, j) = p(i, j) * (dp(i, j) - dot);
#endif
    }
  }
  detail::note_kernel(meter, category, static_cast<std::uint64_t>(p.rows()) * p.cols());
  return ds;
}

template <Real T>
void add_inplace(View<T> dst, View<const T> src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw ShapeError("add_inplace: shape");
  for (std::size_t i = 0; i < dst.rows(); ++i)
    for (std::size_t j = 0; j < dst.cols(); ++j) dst(i, j) += src(i, j);
}

template <Real T>
void scale_inplace(Matrix<T>& m, T factor) {
  for (T& v : m.flat()) v *= factor;
}

template <Real T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, T scale, Tag tag = Tag::scratch,
                        Meter* meter = nullptr) {
  Matrix<T> m(rows, cols, tag, meter);
  for (T& v : m.flat()) v = static_cast<T>(rng.uniform(-1.0, 1.0)) * scale;
  return m;
}

template <Real T>
T max_abs_diff(View<const T> a, View<const T> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff: shape");
  T m{0};
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

// Same shape and identical bit patterns.
template <Real T>
bool bitwise_equal(View<const T> a, View<const T> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  using Bits = std::conditional_t<std::same_as<T, float>, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (std::bit_cast<Bits>(a(i, j)) != std::bit_cast<Bits>(b(i, j))) return false;
  return true;
}

template <Real T>
bool all_finite(View<const T> a) {
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (!std::isfinite(a(i, j))) return false;
  return true;
}

}  // namespace streambp
