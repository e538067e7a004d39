#pragma once

// Metered sweeps over engines, sequence lengths and partitions.

#include <streambp/engines.hpp>
#include <streambp/errors.hpp>
#include <streambp/metering.hpp>
#include <streambp/parallel.hpp>
#include <streambp/partition.hpp>
#include <streambp/problem.hpp>

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace streambp {

inline constexpr std::uint64_t kDefaultActivationBudget = std::uint64_t{2} << 30;  // 2 GiB

struct BenchPoint {
  Engine engine = Engine::stream;
  std::size_t seq_len = 64;
  Chunking layer = Chunking::chunks(1);
  Chunking head = Chunking::chunks(1);
};

struct BenchRow {
  Engine engine = Engine::stream;
  std::size_t seq_len = 0;
  std::size_t layer_chunks = 1;  // resolved chunk counts
  std::size_t head_chunks = 1;
  std::size_t layer_chunk_rows = 0;  // largest chunk
  std::size_t head_chunk_rows = 0;
  std::uint64_t peak_activation_bytes = 0;
  std::uint64_t peak_total_bytes = 0;
  FlopsReport flops;
  std::uint64_t weight_reloads = 0;
  double wall_seconds = 0.0;
};

struct BenchSettings {
  ModelConfig model{64, 16, 64, 128, 2, 1};  // seq_len comes from each point
  ObjectiveSettings objective;
  std::uint64_t seed = 0;
  std::uint64_t activation_budget = kDefaultActivationBudget;
};

// Standard and checkpointed BP appear once per T; StreamBP once per partition.
// An empty head list ties the head partition to the layer partition.
inline std::vector<BenchPoint> bench_points(const std::vector<std::size_t>& seq_lens, const std::vector<Engine>& engines,
                                            const std::vector<std::size_t>& layer_chunks,
                                            const std::vector<std::size_t>& head_chunks, Chunking::Kind kind) {
  std::vector<BenchPoint> out;
  if (layer_chunks.empty()) return out;
  for (std::size_t t : seq_lens)
    for (Engine e : engines) {
      if (e != Engine::stream) {
        out.push_back({e, t, Chunking::chunks(1), Chunking::chunks(1)});
        continue;
      }
      for (std::size_t dl : layer_chunks) {
        if (head_chunks.empty()) {
          out.push_back({e, t, {kind, dl}, {kind, dl}});
        } else {
          for (std::size_t dh : head_chunks) out.push_back({e, t, {kind, dl}, {kind, dh}});
        }
      }
    }
  return out;
}

// Rejects a point whose largest single buffer (T x C logits, T x T scores or
// T x d hidden states, per sequence of the batch) would exceed the budget.
inline void check_budget(const ModelConfig& cfg, std::size_t batch, std::size_t scalar_bytes, std::uint64_t budget) {
  const std::uint64_t t = cfg.seq_len;
  const std::uint64_t widest = std::max({cfg.vocab, cfg.hidden, cfg.seq_len});
  const std::uint64_t bytes = t * widest * scalar_bytes * batch;
  if (bytes > budget) {
    throw ResourceGuardError("bench: T=" + std::to_string(t) + " needs a " + std::to_string(bytes) +
                             "-byte buffer, over the activation budget of " + std::to_string(budget) + " bytes");
  }
}

template <Real T>
std::vector<BenchRow> run_bench(const std::vector<BenchPoint>& points, const BenchSettings& s, std::size_t threads = 1) {
  for (const auto& pt : points) {
    ModelConfig cfg = s.model;
    cfg.seq_len = pt.seq_len;
    cfg.validate();
    check_budget(cfg, batch_for(s.objective), sizeof(T), s.activation_budget);
  }
  std::vector<BenchRow> rows(points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) {
    const BenchPoint& pt = points[i];
    ModelConfig cfg = s.model;
    cfg.seq_len = pt.seq_len;
    const Problem<T> p = make_problem<T>(cfg, s.objective, s.seed, false);
    const PartitionPlan plan{pt.layer, pt.head};
    Meter meter;
    const auto start = std::chrono::steady_clock::now();
    const BackwardResult<T> r = run_engine<T>(pt.engine, p.params, p.batch(), p.spec, plan, meter);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    BenchRow& row = rows[i];
    row.engine = pt.engine;
    row.seq_len = pt.seq_len;
    const Partition layer = pt.engine == Engine::stream ? pt.layer.resolve(cfg.seq_len) : Partition::even(cfg.seq_len, 1);
    const Partition head =
        pt.engine == Engine::stream ? pt.head.resolve(cfg.scored_rows()) : Partition::even(cfg.scored_rows(), 1);
    row.layer_chunks = layer.count();
    row.head_chunks = head.count();
    row.layer_chunk_rows = layer.max_chunk_rows();
    row.head_chunk_rows = head.max_chunk_rows();
    row.peak_activation_bytes = r.memory.peak_activation_bytes;
    row.peak_total_bytes = r.memory.peak_total_bytes;
    row.flops = r.flops;
    row.weight_reloads = r.passes.weight_reloads;
    row.wall_seconds = elapsed.count();
  });
  return rows;
}

}  // namespace streambp
