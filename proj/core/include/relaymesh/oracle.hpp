#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>

#include "relaymesh/instances.hpp"
#include "relaymesh/model.hpp"
#include "relaymesh/routing.hpp"

namespace relaymesh {

struct OracleLimits {
  int max_surrogates = 4;
  std::size_t max_ladder_size = 5;
  // Upper limit on per-flow (tree, rate) candidates before dominance pruning.
  std::uint64_t max_candidates_per_flow = 2'000'000;
};

class OracleRefused : public std::runtime_error {
 public:
  OracleRefused(const std::string& what, double search_space)
      : std::runtime_error(what), search_space_(search_space) {}
  double search_space() const { return search_space_; }

 private:
  double search_space_;
};

struct OracleResult {
  bool feasible = false;
  RateSolution solution;  // valid only when feasible
  double objective = 0.0;
  std::uint64_t candidates_enumerated = 0;
  std::uint64_t candidates_kept = 0;   // after dominance pruning
  std::uint64_t search_nodes = 0;
};

// Exhaustive optimum over every arborescence per flow and every ladder rate
// assignment that never increases along a path. Equal objectives resolve to
// the lexicographically smallest (flow, child, parent, rate) encoding.
// Throws OracleRefused when the instance exceeds `limits`.
OracleResult solve_exact(const RoutingInstance& instance,
                         const OracleLimits& limits = {});

struct GapReport {
  OracleResult oracle;
  bool heuristic_feasible = false;
  double heuristic_objective = 0.0;
  double gap = 0.0;  // oracle minus heuristic; 0 when both are infeasible
  QuiescenceReport run;
  RateSolution heuristic_solution;
};

GapReport heuristic_gap(const RoutingInstance& instance,
                        const QuiescenceOptions& options = {},
                        const OracleLimits& limits = {});

}  // namespace relaymesh
