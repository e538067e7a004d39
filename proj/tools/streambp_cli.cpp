#include <streambp/bench.hpp>
#include <streambp/config.hpp>
#include <streambp/csv.hpp>
#include <streambp/distsim.hpp>
#include <streambp/gradcheck.hpp>
#include <streambp/linear_demo.hpp>

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace streambp;

constexpr int kExitPass = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string dtype = "real64";
  std::size_t threads = 1;
};

void add_common(CLI::App& cmd, CommonFlags& f, bool with_config) {
  if (with_config) cmd.add_option("--config", f.config, "JSON config file");
  cmd.add_option("--out", f.out, "Output CSV path (default: stdout)");
  cmd.add_option("--seed", f.seed, "Seed override");
  cmd.add_option("--dtype", f.dtype, "Scalar type")->check(CLI::IsMember({"real32", "real64"}));
  cmd.add_option("--threads", f.threads, "Worker threads for sweep points")->check(CLI::PositiveNumber);
}

// Renders to a buffer first so a failed run never leaves a partial file.
void emit(const CommonFlags& f, const std::string& text) {
  if (f.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(f.out, std::ios::binary);
  if (!out) throw ConfigError(f.out + ": cannot open for writing");
  out << text;
}

ExperimentConfig load_or_default(const CommonFlags& f, ExperimentConfig defaults) {
  ExperimentConfig c = f.config.empty() ? defaults : load_experiment(f.config, defaults);
  if (f.seed) c.seed = *f.seed;
  return c;
}

template <Real T>
int gradcheck(const CommonFlags& f) {
  ExperimentConfig defaults = gradcheck_defaults();
  if constexpr (std::is_same_v<T, float>) {
    defaults.budget.abs_tol = 1e-3;
    defaults.budget.rel_tol = 1e-2;
  }
  const ExperimentConfig cfg = load_or_default(f, defaults);
  const auto cases = gradcheck_cases(cfg);
  const auto rows = run_gradcheck<T>(cases, gradcheck_settings(cfg), f.threads);

  std::ostringstream text;
  CsvWriter csv(text);
  csv.header({"objective", "T", "L", "D_layer", "D_head", "dtype", "loss", "er_abs", "er_rel", "max_abs_vs_standard",
              "max_rel_vs_fd", "fd_points", "pass"});
  std::size_t failures = 0;
  for (const auto& r : rows) {
    csv.row(to_string(r.c.objective), r.c.seq_len, r.c.layers, r.c.layer_chunks, r.c.head_chunks, to_string(dtype_of<T>),
            r.loss, r.er_abs, r.er_rel, r.max_abs_vs_standard, r.max_rel_vs_fd, r.fd_points, r.pass);
    if (!r.pass) {
      ++failures;
      std::cerr << "FAIL " << to_string(r.c.objective) << " T=" << r.c.seq_len << " L=" << r.c.layers
                << " D_layer=" << r.c.layer_chunks << " D_head=" << r.c.head_chunks
                << " max_abs_vs_standard=" << format_real(r.max_abs_vs_standard) << " (tol "
                << format_real(cfg.budget.abs_tol) << ") max_rel_vs_fd=" << format_real(r.max_rel_vs_fd) << " (tol "
                << format_real(cfg.budget.rel_tol) << ")\n";
    }
  }
  emit(f, text.str());
  if (failures != 0) {
    std::cerr << failures << " of " << rows.size() << " cases outside tolerance\n";
    return kExitCheckFailed;
  }
  return kExitPass;
}

template <Real T>
int bench(const CommonFlags& f) {
  const ExperimentConfig cfg = load_or_default(f, bench_defaults());
  const auto rows = run_bench<T>(bench_points(cfg), bench_settings(cfg), f.threads);
  std::ostringstream text;
  CsvWriter csv(text);
  std::vector<std::string> header{"engine",          "T",          "D_layer", "D_head", "layer_chunk_rows",
                                  "head_chunk_rows", "peak_activation_bytes", "peak_total_bytes"};
  for (auto name : kFlopsCategoryNames) header.push_back("flops_" + std::string(name));
  header.insert(header.end(), {"weight_reloads", "wall_seconds"});
  csv.header(header);
  for (const auto& r : rows) {
    std::vector<std::string> cells{std::string(to_string(r.engine)), CsvWriter::cell(r.seq_len),
                                   CsvWriter::cell(r.layer_chunks), CsvWriter::cell(r.head_chunks),
                                   CsvWriter::cell(r.layer_chunk_rows), CsvWriter::cell(r.head_chunk_rows),
                                   CsvWriter::cell(r.peak_activation_bytes), CsvWriter::cell(r.peak_total_bytes)};
    for (auto v : r.flops.by_category) cells.push_back(CsvWriter::cell(v));
    cells.push_back(CsvWriter::cell(r.weight_reloads));
    cells.push_back(CsvWriter::cell(r.wall_seconds));
    csv.write_row(cells);
  }
  emit(f, text.str());
  return kExitPass;
}

template <Real T>
int lineardemo(const CommonFlags& f, const std::vector<std::size_t>& d_list) {
  const auto rows = run_linear_demo<T>(LinearDemoShape{}, d_list, f.seed.value_or(0));
  std::ostringstream text;
  CsvWriter csv(text);
  csv.header({"D", "peak_total_bytes", "intermediate_bytes", "flops"});
  for (const auto& r : rows) csv.row(r.chunks, r.peak_total_bytes, r.intermediate_bytes, r.flops);
  emit(f, text.str());
  return kExitPass;
}

int distsim(const CommonFlags& f, const std::string& spec_path) {
  const auto scenarios = load_dist_scenarios(spec_path);
  std::ostringstream text;
  CsvWriter csv(text);
  csv.header({"scenario", "strategy", "sharding", "workers", "layers", "chunks", "accumulation_steps",
              "allgather_events", "reduce_events", "allgather_bytes", "reduce_bytes", "extra_resident_bytes"});
  for (const auto& s : scenarios) {
    for (DistStrategy strategy : s.strategies) {
      const CommReport r = simulate(s.cluster, strategy);
      const ClusterSpec& c = s.cluster;
      const std::size_t chunks = strategy == DistStrategy::standard ? 1 : c.chunks;
      csv.row(s.name, to_string(strategy), to_string(c.sharding), c.workers, c.layers, chunks, c.accumulation_steps,
              r.allgather_events, r.reduce_events, r.allgather_bytes, r.reduce_bytes, r.extra_resident_bytes);
    }
  }
  emit(f, text.str());
  return kExitPass;
}

template <class Fn>
int by_dtype(const CommonFlags& f, Fn&& fn) {
  return f.dtype == "real32" ? fn(float{}) : fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact chunked backpropagation: gradient checks, metered benchmarks and simulators"};
  app.require_subcommand(1);

  CommonFlags grad_flags, bench_flags, linear_flags, dist_flags;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Stream-vs-standard and stream-vs-finite-difference checks");
  add_common(*grad_cmd, grad_flags, true);
  auto* bench_cmd = app.add_subcommand("bench", "Metered memory/FLOPs sweep over engines, T and partitions");
  add_common(*bench_cmd, bench_flags, true);

  std::vector<std::size_t> d_list{1, 20, 50, 100};
  auto* linear_cmd = app.add_subcommand("lineardemo", "Two-matmul chunked backward memory table");
  add_common(*linear_cmd, linear_flags, false);
  linear_cmd->add_option("--d-list", d_list, "Chunk counts, comma separated")->delimiter(',')->check(CLI::PositiveNumber);

  std::string spec_path;
  auto* dist_cmd = app.add_subcommand("distsim", "Count collectives for a distributed step");
  add_common(*dist_cmd, dist_flags, false);
  dist_cmd->add_option("--config,spec", spec_path, "Scenario JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitPass : kExitUsage;
  }

  try {
    if (*grad_cmd) {
      return by_dtype(grad_flags, [&](auto tag) { return gradcheck<decltype(tag)>(grad_flags); });
    }
    if (*bench_cmd) {
      return by_dtype(bench_flags, [&](auto tag) { return bench<decltype(tag)>(bench_flags); });
    }
    if (*linear_cmd) {
      return by_dtype(linear_flags, [&](auto tag) { return lineardemo<decltype(tag)>(linear_flags, d_list); });
    }
    return distsim(dist_flags, spec_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ResourceGuardError& e) {
    std::cerr << "resource guard: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}
