#pragma once

// Event-counting model of one distributed backward step. No networking: each
// layer gradient computation either triggers a collective or it does not, and
// the counters are tallied.

#include <streambp/errors.hpp>

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace streambp {

enum class CommStrategy { naive, cached };
// replicated: every worker holds all parameters (DDP-like).
// param_sharded: parameters are split across workers and gathered on use (ZeRO-3-like).
enum class Sharding { replicated, param_sharded };

inline constexpr std::string_view to_string(CommStrategy s) { return s == CommStrategy::naive ? "naive" : "cached"; }
inline constexpr std::string_view to_string(Sharding s) {
  return s == Sharding::replicated ? "replicated" : "param_sharded";
}

struct ClusterSpec {
  std::size_t workers = 1;
  std::size_t layers = 1;
  std::size_t chunks = 1;  // StreamBP D
  CommStrategy strategy = CommStrategy::cached;
  Sharding sharding = Sharding::replicated;
  std::uint64_t bytes_per_layer_params = 0;
  std::uint64_t bytes_per_layer_grads = 0;
  std::size_t accumulation_steps = 1;       // K micro-batches per optimizer step
  bool reduce_at_accumulation_end = false;  // reduce once after the last micro-batch

  void validate() const {
    if (workers == 0) throw ConfigError("distsim: workers must be >= 1");
    if (layers == 0) throw ConfigError("distsim: layers must be >= 1");
    if (chunks == 0) throw ConfigError("distsim: chunks must be >= 1");
    if (accumulation_steps == 0) throw ConfigError("distsim: accumulation_steps must be >= 1");
  }
};

struct LayerComm {
  std::uint64_t allgather_events = 0;
  std::uint64_t reduce_events = 0;
  bool operator==(const LayerComm&) const = default;
};

struct CommReport {
  std::uint64_t allgather_events = 0;
  std::uint64_t reduce_events = 0;
  std::uint64_t allgather_bytes = 0;
  std::uint64_t reduce_bytes = 0;
  // Memory for holding one gathered layer until its gradient accumulation ends.
  std::uint64_t extra_resident_bytes = 0;
  std::vector<LayerComm> per_layer;
  bool operator==(const CommReport&) const = default;
};

// Backward of every micro-batch visits layers L-1..0 and, within a layer, the D
// chunk gradient computations.
//  - param_sharded: a chunk needs the full layer. naive gathers before every
//    chunk; cached gathers before the first and keeps the layer until the last.
//  - gradient averaging: naive reduces each chunk's partial gradient as soon as
//    it exists; cached reduces once the chunk accumulation has finished. With
//    reduce_at_accumulation_end only the last micro-batch reduces.
inline CommReport simulate_step(const ClusterSpec& spec) {
  spec.validate();
  CommReport r;
  r.per_layer.assign(spec.layers, {});
  const bool naive = spec.strategy == CommStrategy::naive;
  for (std::size_t k = 0; k < spec.accumulation_steps; ++k) {
    const bool reduces = !spec.reduce_at_accumulation_end || k + 1 == spec.accumulation_steps;
    for (std::size_t l = spec.layers; l-- > 0;) {
      LayerComm& c = r.per_layer[l];
      for (std::size_t i = 0; i < spec.chunks; ++i) {
        const bool last_chunk = i + 1 == spec.chunks;
        if (spec.sharding == Sharding::param_sharded && (naive || i == 0)) ++c.allgather_events;
        if (reduces && (naive || last_chunk)) ++c.reduce_events;
      }
    }
  }
  for (const LayerComm& c : r.per_layer) {
    r.allgather_events += c.allgather_events;
    r.reduce_events += c.reduce_events;
  }
  r.allgather_bytes = r.allgather_events * spec.bytes_per_layer_params;
  r.reduce_bytes = r.reduce_events * spec.bytes_per_layer_grads;
  if (!naive && spec.sharding == Sharding::param_sharded) r.extra_resident_bytes = spec.bytes_per_layer_params;
  return r;
}

// Standard (unpartitioned) BP: one gradient computation per layer.
inline CommReport simulate_standard_step(ClusterSpec spec) {
  spec.chunks = 1;
  spec.strategy = CommStrategy::naive;
  return simulate_step(spec);
}

}  // namespace streambp
