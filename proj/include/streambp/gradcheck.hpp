#pragma once

// Engine-vs-engine and engine-vs-oracle gradient checks over a grid of cases.

#include <streambp/engines.hpp>
#include <streambp/model.hpp>
#include <streambp/objectives.hpp>
#include <streambp/oracle.hpp>
#include <streambp/parallel.hpp>
#include <streambp/problem.hpp>
#include <streambp/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <tuple>
#include <vector>

namespace streambp {

struct GradcheckCase {
  Objective objective = Objective::sft;
  std::size_t seq_len = 8;
  std::size_t layers = 1;
  std::size_t layer_chunks = 1;
  std::size_t head_chunks = 1;
};

struct GradcheckSettings {
  ModelConfig model{8, 8, 16, 13, 2, 1};  // seq_len and layers come from each case
  ObjectiveSettings objective;            // kind comes from each case
  double abs_tol = 1e-12;                 // stream vs standard, max-abs over every parameter
  double rel_tol = 1e-5;                  // stream vs finite differences, per sampled coordinate
  std::size_t fd_coords = 64;             // per parameter tensor
  double fd_step = 1e-4;
  std::uint64_t seed = 0;
};

struct GradcheckRow {
  GradcheckCase c;
  double loss = 0.0;
  // Mean absolute and mean relative deviation from standard BP over all
  // parameter entries, relative terms divided by |g_standard + 1e-10|.
  double er_abs = 0.0;
  double er_rel = 0.0;
  double max_abs_vs_standard = 0.0;
  double max_rel_vs_fd = 0.0;
  std::size_t fd_points = 0;  // 0 when T exceeds the oracle cap
  bool pass = false;
};

// T x D (layer and head tied) x objective, with `layers` fixed.
inline std::vector<GradcheckCase> gradcheck_grid(const std::vector<Objective>& objectives,
                                                 const std::vector<std::size_t>& seq_lens,
                                                 const std::vector<std::size_t>& layers,
                                                 const std::vector<std::size_t>& layer_chunks,
                                                 const std::vector<std::size_t>& head_chunks) {
  std::vector<GradcheckCase> out;
  for (Objective o : objectives)
    for (std::size_t l : layers)
      for (std::size_t t : seq_lens)
        for (std::size_t dl : layer_chunks) {
          if (head_chunks.empty()) {
            out.push_back({o, t, l, dl, dl});
          } else {
            for (std::size_t dh : head_chunks) out.push_back({o, t, l, dl, dh});
          }
        }
  return out;
}

inline std::vector<GradcheckCase> default_gradcheck_grid() {
  return gradcheck_grid({Objective::sft, Objective::grpo, Objective::dpo}, {8, 33, 64}, {2}, {1, 2, 4, 7}, {});
}

namespace detail {

inline std::uint64_t problem_seed(std::uint64_t seed, Objective o, std::size_t seq_len, std::size_t layers) {
  const std::uint64_t key = (static_cast<std::uint64_t>(o) << 48) ^ (static_cast<std::uint64_t>(seq_len) << 16) ^
                            static_cast<std::uint64_t>(layers);
  return Rng(seed).split(key).next_u64();
}

struct FdProbe {
  oracle::Coordinate at;
  double value = 0.0;
};

}  // namespace detail

// Cases sharing (objective, T, L) share one seeded problem, one standard-BP
// baseline and one set of finite differences; the partition varies within it.
template <Real T>
std::vector<GradcheckRow> run_gradcheck(const std::vector<GradcheckCase>& cases, const GradcheckSettings& s,
                                        std::size_t threads = 1) {
  using Key = std::tuple<Objective, std::size_t, std::size_t>;
  std::vector<Key> keys;
  std::map<Key, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Key k{cases[i].objective, cases[i].seq_len, cases[i].layers};
    if (!members.contains(k)) keys.push_back(k);
    members[k].push_back(i);
  }

  std::vector<GradcheckRow> rows(cases.size());
  parallel_for(keys.size(), threads, [&](std::size_t gi) {
    const auto [objective, seq_len, layers] = keys[gi];
    ModelConfig cfg = s.model;
    cfg.seq_len = seq_len;
    cfg.layers = layers;
    ObjectiveSettings obj = s.objective;
    obj.kind = objective;
    const std::uint64_t seed = detail::problem_seed(s.seed, objective, seq_len, layers);
    const Problem<T> p = make_problem<T>(cfg, obj, seed);

    Meter base_meter;
    const BackwardResult<T> base = backward_standard<T>(p.params, p.batch(), p.spec, base_meter);

    std::vector<detail::FdProbe> probes;
    if (seq_len <= oracle::kMaxSeqLen) {
      oracle::RefModel model = oracle::to_ref(p.params);
      const auto inputs = oracle::to_ref<T>(p.batch());
      const oracle::RefLoss loss = oracle::to_ref<T>(p.spec);
      Rng coord_rng = Rng(seed).split(0xfd);
      for (const auto& c : oracle::sample_coordinates(p.params, s.fd_coords, coord_rng)) {
        probes.push_back({c, oracle::extrapolated_diff_grad(model, inputs, loss, c, s.fd_step)});
      }
    }

    for (std::size_t ci : members.at(keys[gi])) {
      const GradcheckCase& c = cases[ci];
      Meter meter;
      const BackwardResult<T> r =
          backward_stream<T>(p.params, p.batch(), p.spec, PartitionPlan::uniform(c.layer_chunks, c.head_chunks), meter);
      GradcheckRow row;
      row.c = c;
      row.loss = static_cast<double>(r.loss);
      double sum_abs = 0.0, sum_rel = 0.0;
      std::size_t n = 0;
      bool finite = std::isfinite(row.loss);
      for (std::size_t t = 0; t < r.grads.tensor_count(); ++t) {
        const auto g = r.grads.tensor(t).flat();
        const auto b = base.grads.tensor(t).flat();
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double gv = static_cast<double>(g[k]), bv = static_cast<double>(b[k]);
          finite = finite && std::isfinite(gv);
          const double d = std::abs(gv - bv);
          sum_abs += d;
          sum_rel += d / std::abs(bv + 1e-10);
          row.max_abs_vs_standard = std::max(row.max_abs_vs_standard, d);
          ++n;
        }
      }
      row.er_abs = sum_abs / static_cast<double>(n);
      row.er_rel = sum_rel / static_cast<double>(n);
      for (const auto& probe : probes) {
        const double g = static_cast<double>(r.grads.tensor(probe.at.tensor)(probe.at.row, probe.at.col));
        row.max_rel_vs_fd = std::max(row.max_rel_vs_fd, oracle::relative_error(g, probe.value));
      }
      row.fd_points = probes.size();
      row.pass = finite && row.max_abs_vs_standard <= s.abs_tol && row.max_rel_vs_fd <= s.rel_tol;
      rows[ci] = row;
    }
  });
  return rows;
}

}  // namespace streambp
