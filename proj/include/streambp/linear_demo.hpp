#pragma once

// Two chained linear maps Y = X W1, Z = Y W2 with L = sum(Z). Backward either
// keeps all of Y and dY, or streams row chunks of X and keeps one chunk of
// intermediates at a time.

#include <streambp/metering.hpp>
#include <streambp/partition.hpp>
#include <streambp/tensor.hpp>

#include <cstddef>
#include <cstdint>

namespace streambp {

template <Real T>
struct LinearGrads {
  T loss{0};
  Matrix<T> dw1;
  Matrix<T> dw2;
  MemoryReport memory;
  FlopsReport flops;
  std::uint64_t intermediate_peak_bytes = 0;
};

inline constexpr std::string_view kIntermediateLabel = "intermediate";

namespace detail {

template <Real T>
void check_linear(const Matrix<T>& x, const Matrix<T>& w1, const Matrix<T>& w2) {
  if (x.cols() != w1.rows() || w1.cols() != w2.rows()) throw ShapeError("linear demo: shape mismatch");
  if (x.rows() == 0) throw ShapeError("linear demo: empty input");
}

template <Real T>
LinearGrads<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w1, const Matrix<T>& w2, const Partition& plan,
                               Meter& meter) {
  check_linear(x, w1, w2);
  ScopedResidency resident(meter, x.bytes() + w1.bytes() + w2.bytes(), Tag::parameter);
  LinearGrads<T> g;
  g.dw1 = Matrix<T>(w1.rows(), w1.cols(), Tag::gradient, &meter);
  g.dw2 = Matrix<T>(w2.rows(), w2.cols(), Tag::gradient, &meter);
  for (const RowRange& rows : plan) {
    const View<const T> x_i = x.rows_view(rows);
    Matrix<T> y = matmul<T>(x_i, w1.cview(), Trans::no, &meter, FlopsCategory::mlp, Tag::activation, kIntermediateLabel);
    {
      Matrix<T> z = matmul<T>(y.cview(), w2.cview(), Trans::no, &meter, FlopsCategory::mlp, Tag::activation,
                              kIntermediateLabel);
      for (T v : z.flat()) g.loss += v;
      detail::note_kernel(&meter, FlopsCategory::objective, z.size());
    }
    Matrix<T> dz(rows.size(), w2.cols(), Tag::activation, &meter, kIntermediateLabel);
    for (T& v : dz.flat()) v = T{1};
    Matrix<T> dy = matmul<T>(dz.cview(), w2.cview(), Trans::yes, &meter, FlopsCategory::mlp, Tag::activation,
                             kIntermediateLabel);
    matmul_add<T>(g.dw2.view(), y.cview().transposed(), dz.cview(), Trans::no, &meter, FlopsCategory::mlp);
    matmul_add<T>(g.dw1.view(), x_i.transposed(), dy.cview(), Trans::no, &meter, FlopsCategory::mlp);
  }
  g.memory = meter.memory_report();
  g.flops = meter.flops();
  g.intermediate_peak_bytes = meter.label_peak(kIntermediateLabel);
  g.dw1.detach();
  g.dw2.detach();
  return g;
}

}  // namespace detail

// Whole-batch backward: Y, Z, dZ and dY for all N rows are live together.
template <Real T>
LinearGrads<T> linear_standard_backward(const Matrix<T>& x, const Matrix<T>& w1, const Matrix<T>& w2, Meter& meter) {
  return detail::linear_backward<T>(x, w1, w2, Partition::even(x.rows(), 1), meter);
}

// dW1 = sum_i X_i^T dY_i, dW2 = sum_i Y_i^T dZ_i over D row chunks.
template <Real T>
LinearGrads<T> linear_stream_backward(const Matrix<T>& x, const Matrix<T>& w1, const Matrix<T>& w2, std::size_t chunks,
                                      Meter& meter) {
  return detail::linear_backward<T>(x, w1, w2, Partition::even(x.rows(), chunks), meter);
}

struct LinearDemoRow {
  std::size_t chunks = 1;
  std::uint64_t peak_total_bytes = 0;
  std::uint64_t intermediate_bytes = 0;
  std::uint64_t flops = 0;
};

struct LinearDemoShape {
  std::size_t rows = 4096;  // N
  std::size_t in = 32;      // m
  std::size_t mid = 32;     // n
  std::size_t out = 32;     // k
};

// One row per chunk count, each from a fresh meter over the same seeded data.
template <Real T>
std::vector<LinearDemoRow> run_linear_demo(const LinearDemoShape& shape, std::span<const std::size_t> chunk_counts,
                                           std::uint64_t seed) {
  Rng rng(seed);
  const Matrix<T> x = random_matrix<T>(shape.rows, shape.in, rng, T{1});
  const Matrix<T> w1 = random_matrix<T>(shape.in, shape.mid, rng, T{1});
  const Matrix<T> w2 = random_matrix<T>(shape.mid, shape.out, rng, T{1});
  std::vector<LinearDemoRow> rows;
  for (std::size_t d : chunk_counts) {
    Meter meter;
    const LinearGrads<T> g = linear_stream_backward<T>(x, w1, w2, d, meter);
    rows.push_back({d, g.memory.peak_total_bytes, g.intermediate_peak_bytes, g.flops.total()});
  }
  return rows;
}

}  // namespace streambp
