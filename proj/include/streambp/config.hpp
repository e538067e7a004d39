#pragma once

// Strict JSON experiment configs. Sections: model, plan, objective, sweep,
// budget, seed. Unknown keys, wrong types and invalid values raise ConfigError
// naming the offending field.

#include <streambp/bench.hpp>
#include <streambp/distsim.hpp>
#include <streambp/engines.hpp>
#include <streambp/errors.hpp>
#include <streambp/gradcheck.hpp>
#include <streambp/model.hpp>
#include <streambp/objectives.hpp>
#include <streambp/partition.hpp>
#include <streambp/problem.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace streambp {

struct PlanSettings {
  Chunking::Kind mode = Chunking::Kind::count;  // "count": D chunks; "rows": chunks of D rows
  std::vector<std::size_t> layer_chunks{1};
  std::vector<std::size_t> head_chunks;  // empty: tied to layer_chunks
};

struct SweepSettings {
  std::vector<std::size_t> seq_lens;
  std::vector<std::size_t> layers;  // empty: model.layers
  std::vector<Objective> objectives;
  std::vector<Engine> engines{Engine::standard, Engine::checkpoint, Engine::stream};
};

struct BudgetSettings {
  std::uint64_t activation_bytes = kDefaultActivationBudget;
  double abs_tol = 1e-12;
  double rel_tol = 1e-5;
  std::size_t fd_coords = 64;
  double fd_step = 1e-4;
};

struct ExperimentConfig {
  ModelConfig model;
  PlanSettings plan;
  ObjectiveSettings objective;
  SweepSettings sweep;
  BudgetSettings budget;
  std::uint64_t seed = 0;
};

namespace config_detail {

using nlohmann::json;

inline void only_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string(where) + "." + key + ": unknown key");
  }
}

inline std::string field(std::string_view where, std::string_view key) {
  return std::string(where) + "." + std::string(key);
}

inline std::uint64_t get_uint(const json& v, const std::string& name, std::uint64_t min_value) {
  if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
  if (v.is_number_unsigned()) {
    const auto x = v.get<std::uint64_t>();
    if (x < min_value) throw ConfigError(name + ": must be >= " + std::to_string(min_value));
    return x;
  }
  const auto x = v.get<std::int64_t>();
  if (x < 0 || static_cast<std::uint64_t>(x) < min_value) {
    throw ConfigError(name + ": must be >= " + std::to_string(min_value));
  }
  return static_cast<std::uint64_t>(x);
}

inline double get_positive(const json& v, const std::string& name) {
  if (!v.is_number()) throw ConfigError(name + ": expected a number");
  const double x = v.get<double>();
  if (!(x > 0.0)) throw ConfigError(name + ": must be > 0");
  return x;
}

inline double get_nonneg(const json& v, const std::string& name) {
  if (!v.is_number()) throw ConfigError(name + ": expected a number");
  const double x = v.get<double>();
  if (!(x >= 0.0)) throw ConfigError(name + ": must be >= 0");
  return x;
}

inline bool get_bool(const json& v, const std::string& name) {
  if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
  return v.get<bool>();
}

inline std::string get_string(const json& v, const std::string& name) {
  if (!v.is_string()) throw ConfigError(name + ": expected a string");
  return v.get<std::string>();
}

inline std::vector<std::size_t> get_uint_list(const json& v, const std::string& name, std::uint64_t min_value) {
  if (!v.is_array()) throw ConfigError(name + ": expected an array");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(get_uint(v[i], name + "[" + std::to_string(i) + "]", min_value));
  }
  return out;
}

inline Objective parse_objective(const std::string& s, const std::string& name) {
  if (s == "sft") return Objective::sft;
  if (s == "grpo") return Objective::grpo;
  if (s == "dpo") return Objective::dpo;
  throw ConfigError(name + ": unknown objective '" + s + "' (expected sft, grpo or dpo)");
}

inline Engine parse_engine(const std::string& s, const std::string& name) {
  if (s == "standard") return Engine::standard;
  if (s == "checkpoint") return Engine::checkpoint;
  if (s == "stream") return Engine::stream;
  throw ConfigError(name + ": unknown engine '" + s + "' (expected standard, checkpoint or stream)");
}

template <class F>
void if_present(const json& obj, const char* key, F&& f) {
  if (auto it = obj.find(key); it != obj.end()) f(*it);
}

inline void parse_model(const json& j, ModelConfig& m) {
  only_keys(j, "model", {"seq_len", "hidden", "mlp_hidden", "vocab", "layers", "kv_share"});
  if_present(j, "seq_len", [&](const json& v) { m.seq_len = get_uint(v, "model.seq_len", 2); });
  if_present(j, "hidden", [&](const json& v) { m.hidden = get_uint(v, "model.hidden", 1); });
  if_present(j, "mlp_hidden", [&](const json& v) { m.mlp_hidden = get_uint(v, "model.mlp_hidden", 1); });
  if_present(j, "vocab", [&](const json& v) { m.vocab = get_uint(v, "model.vocab", 1); });
  if_present(j, "layers", [&](const json& v) { m.layers = get_uint(v, "model.layers", 1); });
  if_present(j, "kv_share", [&](const json& v) { m.kv_share = get_uint(v, "model.kv_share", 1); });
  if (m.hidden % m.kv_share != 0) throw ConfigError("model.kv_share: must divide model.hidden");
}

inline void parse_plan(const json& j, PlanSettings& p) {
  only_keys(j, "plan", {"mode", "layer_chunks", "head_chunks"});
  if_present(j, "mode", [&](const json& v) {
    const std::string s = get_string(v, "plan.mode");
    if (s == "count") {
      p.mode = Chunking::Kind::count;
    } else if (s == "rows") {
      p.mode = Chunking::Kind::size;
    } else {
      throw ConfigError("plan.mode: expected \"count\" or \"rows\"");
    }
  });
  if_present(j, "layer_chunks", [&](const json& v) { p.layer_chunks = get_uint_list(v, "plan.layer_chunks", 1); });
  if_present(j, "head_chunks", [&](const json& v) { p.head_chunks = get_uint_list(v, "plan.head_chunks", 1); });
}

inline void parse_objective_section(const json& j, ObjectiveSettings& o) {
  only_keys(j, "objective", {"kind", "group", "epsilon", "beta_grpo", "beta_dpo", "mean_reduction"});
  if_present(j, "kind", [&](const json& v) { o.kind = parse_objective(get_string(v, "objective.kind"), "objective.kind"); });
  if_present(j, "group", [&](const json& v) { o.group = get_uint(v, "objective.group", 1); });
  if_present(j, "epsilon", [&](const json& v) { o.epsilon = get_positive(v, "objective.epsilon"); });
  if_present(j, "beta_grpo", [&](const json& v) { o.beta_grpo = get_nonneg(v, "objective.beta_grpo"); });
  if_present(j, "beta_dpo", [&](const json& v) { o.beta_dpo = get_positive(v, "objective.beta_dpo"); });
  if_present(j, "mean_reduction", [&](const json& v) { o.mean_reduction = get_bool(v, "objective.mean_reduction"); });
}

inline void parse_sweep(const json& j, SweepSettings& s) {
  only_keys(j, "sweep", {"seq_lens", "layers", "objectives", "engines"});
  if_present(j, "seq_lens", [&](const json& v) { s.seq_lens = get_uint_list(v, "sweep.seq_lens", 2); });
  if_present(j, "layers", [&](const json& v) { s.layers = get_uint_list(v, "sweep.layers", 1); });
  if_present(j, "objectives", [&](const json& v) {
    if (!v.is_array()) throw ConfigError("sweep.objectives: expected an array");
    s.objectives.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string name = "sweep.objectives[" + std::to_string(i) + "]";
      s.objectives.push_back(parse_objective(get_string(v[i], name), name));
    }
  });
  if_present(j, "engines", [&](const json& v) {
    if (!v.is_array()) throw ConfigError("sweep.engines: expected an array");
    s.engines.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string name = "sweep.engines[" + std::to_string(i) + "]";
      s.engines.push_back(parse_engine(get_string(v[i], name), name));
    }
  });
}

inline void parse_budget(const json& j, BudgetSettings& b) {
  only_keys(j, "budget", {"activation_bytes", "abs_tol", "rel_tol", "fd_coords", "fd_step"});
  if_present(j, "activation_bytes", [&](const json& v) { b.activation_bytes = get_uint(v, "budget.activation_bytes", 1); });
  if_present(j, "abs_tol", [&](const json& v) { b.abs_tol = get_nonneg(v, "budget.abs_tol"); });
  if_present(j, "rel_tol", [&](const json& v) { b.rel_tol = get_nonneg(v, "budget.rel_tol"); });
  if_present(j, "fd_coords", [&](const json& v) { b.fd_coords = get_uint(v, "budget.fd_coords", 1); });
  if_present(j, "fd_step", [&](const json& v) { b.fd_step = get_positive(v, "budget.fd_step"); });
}

inline json parse_text(std::string_view text, std::string_view source) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(source) + ": malformed JSON: " + e.what());
  }
}

}  // namespace config_detail

// Overlays `j` on `defaults`; absent sections and keys keep their defaults.
inline ExperimentConfig parse_experiment(const nlohmann::json& j, ExperimentConfig defaults) {
  using namespace config_detail;
  only_keys(j, "config", {"model", "plan", "objective", "sweep", "budget", "seed"});
  if_present(j, "model", [&](const json& v) { parse_model(v, defaults.model); });
  if_present(j, "plan", [&](const json& v) { parse_plan(v, defaults.plan); });
  if_present(j, "objective", [&](const json& v) { parse_objective_section(v, defaults.objective); });
  if_present(j, "sweep", [&](const json& v) { parse_sweep(v, defaults.sweep); });
  if_present(j, "budget", [&](const json& v) { parse_budget(v, defaults.budget); });
  if_present(j, "seed", [&](const json& v) { defaults.seed = get_uint(v, "seed", 0); });
  return defaults;
}

inline ExperimentConfig parse_experiment_text(std::string_view text, const ExperimentConfig& defaults) {
  return parse_experiment(config_detail::parse_text(text, "config"), defaults);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path, const ExperimentConfig& defaults) {
  return parse_experiment(config_detail::parse_text(read_text_file(path), path.string()), defaults);
}

inline ExperimentConfig gradcheck_defaults() {
  ExperimentConfig c;
  c.model = ModelConfig{8, 8, 16, 13, 2, 1};
  c.plan.layer_chunks = {1, 2, 4, 7};
  c.sweep.seq_lens = {8, 33, 64};
  c.sweep.objectives = {Objective::sft, Objective::grpo, Objective::dpo};
  return c;
}

inline ExperimentConfig bench_defaults() {
  ExperimentConfig c;
  c.model = ModelConfig{64, 16, 64, 128, 2, 1};
  c.plan.layer_chunks = {1, 2, 4, 8};
  c.sweep.seq_lens = {64, 128, 256};
  return c;
}

inline std::vector<GradcheckCase> gradcheck_cases(const ExperimentConfig& c) {
  if (c.plan.mode != Chunking::Kind::count) throw ConfigError("plan.mode: gradcheck supports \"count\" only");
  const std::vector<std::size_t> layers = c.sweep.layers.empty() ? std::vector<std::size_t>{c.model.layers} : c.sweep.layers;
  const std::vector<Objective> objectives =
      c.sweep.objectives.empty() ? std::vector<Objective>{c.objective.kind} : c.sweep.objectives;
  return gradcheck_grid(objectives, c.sweep.seq_lens, layers, c.plan.layer_chunks, c.plan.head_chunks);
}

inline GradcheckSettings gradcheck_settings(const ExperimentConfig& c) {
  GradcheckSettings s;
  s.model = c.model;
  s.objective = c.objective;
  s.abs_tol = c.budget.abs_tol;
  s.rel_tol = c.budget.rel_tol;
  s.fd_coords = c.budget.fd_coords;
  s.fd_step = c.budget.fd_step;
  s.seed = c.seed;
  return s;
}

inline std::vector<BenchPoint> bench_points(const ExperimentConfig& c) {
  if (!c.sweep.layers.empty()) throw ConfigError("sweep.layers: bench uses model.layers");
  if (c.sweep.objectives.size() > 1) throw ConfigError("sweep.objectives: bench runs a single objective");
  return bench_points(c.sweep.seq_lens, c.sweep.engines, c.plan.layer_chunks, c.plan.head_chunks, c.plan.mode);
}

inline BenchSettings bench_settings(const ExperimentConfig& c) {
  BenchSettings s;
  s.model = c.model;
  s.objective = c.objective;
  if (c.sweep.objectives.size() == 1) s.objective.kind = c.sweep.objectives.front();
  s.seed = c.seed;
  s.activation_budget = c.budget.activation_bytes;
  return s;
}

// ---------------------------------------------------------------------------
// distsim scenario files: one scenario object, or {"scenarios": [...]}.

enum class DistStrategy { standard, naive, cached };

inline constexpr std::string_view to_string(DistStrategy s) {
  switch (s) {
    case DistStrategy::standard: return "standard";
    case DistStrategy::naive: return "naive";
    case DistStrategy::cached: return "cached";
  }
  return "?";
}

struct DistScenario {
  std::string name;
  ClusterSpec cluster;
  std::vector<DistStrategy> strategies{DistStrategy::standard, DistStrategy::naive, DistStrategy::cached};
};

namespace config_detail {

inline DistScenario parse_scenario(const json& j, const std::string& where, std::size_t index) {
  only_keys(j, where, {"name", "workers", "layers", "chunks", "sharding", "strategies", "bytes_per_layer_params",
                       "bytes_per_layer_grads", "accumulation_steps", "reduce_at_accumulation_end"});
  DistScenario s;
  s.name = "scenario" + std::to_string(index);
  ClusterSpec& c = s.cluster;
  if_present(j, "name", [&](const json& v) { s.name = get_string(v, field(where, "name")); });
  if_present(j, "workers", [&](const json& v) { c.workers = get_uint(v, field(where, "workers"), 1); });
  if_present(j, "layers", [&](const json& v) { c.layers = get_uint(v, field(where, "layers"), 1); });
  if_present(j, "chunks", [&](const json& v) { c.chunks = get_uint(v, field(where, "chunks"), 1); });
  if_present(j, "sharding", [&](const json& v) {
    const std::string x = get_string(v, field(where, "sharding"));
    if (x == "replicated") {
      c.sharding = Sharding::replicated;
    } else if (x == "param_sharded") {
      c.sharding = Sharding::param_sharded;
    } else {
      throw ConfigError(field(where, "sharding") + ": expected \"replicated\" or \"param_sharded\"");
    }
  });
  if_present(j, "strategies", [&](const json& v) {
    if (!v.is_array() || v.empty()) throw ConfigError(field(where, "strategies") + ": expected a non-empty array");
    s.strategies.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string name = field(where, "strategies") + "[" + std::to_string(i) + "]";
      const std::string x = get_string(v[i], name);
      if (x == "standard") {
        s.strategies.push_back(DistStrategy::standard);
      } else if (x == "naive") {
        s.strategies.push_back(DistStrategy::naive);
      } else if (x == "cached") {
        s.strategies.push_back(DistStrategy::cached);
      } else {
        throw ConfigError(name + ": expected standard, naive or cached");
      }
    }
  });
  if_present(j, "bytes_per_layer_params",
             [&](const json& v) { c.bytes_per_layer_params = get_uint(v, field(where, "bytes_per_layer_params"), 0); });
  if_present(j, "bytes_per_layer_grads",
             [&](const json& v) { c.bytes_per_layer_grads = get_uint(v, field(where, "bytes_per_layer_grads"), 0); });
  if_present(j, "accumulation_steps",
             [&](const json& v) { c.accumulation_steps = get_uint(v, field(where, "accumulation_steps"), 1); });
  if_present(j, "reduce_at_accumulation_end", [&](const json& v) {
    c.reduce_at_accumulation_end = get_bool(v, field(where, "reduce_at_accumulation_end"));
  });
  return s;
}

}  // namespace config_detail

inline std::vector<DistScenario> parse_dist_scenarios(const nlohmann::json& j) {
  using namespace config_detail;
  if (!j.is_object()) throw ConfigError("distsim: expected a JSON object");
  std::vector<DistScenario> out;
  if (j.contains("scenarios")) {
    only_keys(j, "distsim", {"scenarios"});
    const json& list = j["scenarios"];
    if (!list.is_array()) throw ConfigError("scenarios: expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      out.push_back(parse_scenario(list[i], "scenarios[" + std::to_string(i) + "]", i));
    }
  } else {
    out.push_back(parse_scenario(j, "distsim", 0));
  }
  return out;
}

inline std::vector<DistScenario> load_dist_scenarios(const std::filesystem::path& path) {
  return parse_dist_scenarios(config_detail::parse_text(read_text_file(path), path.string()));
}

inline CommReport simulate(const ClusterSpec& spec, DistStrategy strategy) {
  if (strategy == DistStrategy::standard) return simulate_standard_step(spec);
  ClusterSpec s = spec;
  s.strategy = strategy == DistStrategy::naive ? CommStrategy::naive : CommStrategy::cached;
  return simulate_step(s);
}

}  // namespace streambp
