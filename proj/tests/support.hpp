#pragma once

#include <streambp/engines.hpp>
#include <streambp/oracle.hpp>
#include <streambp/problem.hpp>

#include <cstddef>
#include <cstdint>

namespace streambp::testing {

inline ModelConfig small_config(std::size_t seq_len, std::size_t layers, std::size_t hidden = 4,
                                std::size_t vocab = 11, std::size_t mlp = 8, std::size_t kv_share = 1) {
  return ModelConfig{seq_len, hidden, mlp, vocab, layers, kv_share};
}

inline ObjectiveSettings objective(Objective kind) {
  ObjectiveSettings s;
  s.kind = kind;
  return s;
}

template <Real T>
Problem<T> problem(const ModelConfig& cfg, Objective kind, std::uint64_t seed) {
  return make_problem<T>(cfg, objective(kind), seed);
}

template <Real T>
BackwardResult<T> run(Engine engine, const Problem<T>& p, const PartitionPlan& plan = {}) {
  Meter meter;
  return run_engine<T>(engine, p.params, p.batch(), p.spec, plan, meter);
}

inline constexpr Objective kAllObjectives[] = {Objective::sft, Objective::grpo, Objective::dpo};

}  // namespace streambp::testing
