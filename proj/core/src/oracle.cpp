#include "relaymesh/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <tuple>

namespace relaymesh {
namespace {

constexpr double kTieEps = 1e-9;

struct Candidate {
  DisseminationTree tree;
  double utility = 0.0;
  std::vector<Kbps> usage;  // indexed like LinkIndex::links
  // (child, parent, rate) sorted by child. All candidates of a flow have the
  // same length, so flow-by-flow comparison orders whole solutions.
  std::vector<std::tuple<std::uint32_t, std::uint32_t, Kbps>> code;
};

struct LinkIndex {
  std::vector<DirectedLink> links;
  std::map<DirectedLink, std::size_t> index;
  std::vector<Kbps> capacity;
};

LinkIndex index_links(const TopologySnapshot& topo) {
  LinkIndex li;
  for (const auto& [edge, link] : topo.links()) {
    li.index[edge] = li.links.size();
    li.links.push_back(edge);
    li.capacity.push_back(link.capacity_kbps);
  }
  return li;
}

// Smallest ladder rate at or above `rate`; the top rung when none is.
Kbps ladder_ceil(const RateLadder& ladder, Kbps rate) {
  for (Kbps r : ladder.rates()) {
    if (r >= rate) return r;
  }
  return ladder.max();
}

double count_arborescences_upper(const TopologySnapshot& topo, FlowId root) {
  double total = 1.0;
  for (auto v : topo.surrogates()) {
    if (v == root) continue;
    total *= static_cast<double>(topo.in_neighbors(v).size());
  }
  return total;
}

class FlowEnumerator {
 public:
  FlowEnumerator(const RoutingInstance& inst, const LinkIndex& li, FlowId flow)
      : inst_(inst), li_(li), flow_(flow) {
    for (auto v : inst.topo.surrogates()) {
      if (v != flow) others_.push_back(v);
    }
  }

  std::vector<Candidate> run(std::uint64_t& enumerated) {
    enumerated_ = &enumerated;
    DisseminationTree tree;
    tree.flow = flow_;
    choose_parent(tree, 0);
    return std::move(out_);
  }

 private:
  void choose_parent(DisseminationTree& tree, std::size_t i) {
    if (i == others_.size()) {
      if (tree.is_acyclic()) assign_rates(tree);
      return;
    }
    const SurrogateId v = others_[i];
    for (auto u : inst_.topo.in_neighbors(v)) {
      tree.parent[v] = u;
      choose_parent(tree, i + 1);
    }
    tree.parent.erase(v);
  }

  void assign_rates(DisseminationTree& tree) {
    order_ = tree.subtree(flow_);
    order_.erase(order_.begin());
    subtree_need_.clear();
    for (auto v : order_) {
      Kbps need = 0;
      for (auto w : tree.subtree(v)) {
        need = std::max(need, inst_.topo.accept_rate(flow_, w));
      }
      subtree_need_[v] = ladder_ceil(inst_.ladder, need);
    }
    tree.edge_rate.clear();
    rate_step(tree, 0);
  }

  void rate_step(DisseminationTree& tree, std::size_t i) {
    if (i == order_.size()) {
      emit(tree);
      return;
    }
    const SurrogateId v = order_[i];
    const SurrogateId u = tree.parent.at(v);
    const Kbps upstream = u == flow_ ? inst_.topo.source_rate(flow_)
                                     : tree.edge_rate.at(u);
    const Kbps capacity = inst_.topo.link(u, v)->capacity_kbps;
    const Kbps limit = std::min({upstream, capacity, subtree_need_.at(v)});
    for (Kbps r : inst_.ladder.rates()) {
      if (r > limit) break;
      tree.edge_rate[v] = r;
      rate_step(tree, i + 1);
    }
    tree.edge_rate.erase(v);
  }

  void emit(const DisseminationTree& tree) {
    ++*enumerated_;
    Candidate c;
    c.tree = tree;
    for (auto n : others_) {
      if (end_to_end_delay(inst_.topo, inst_.model, tree, n) >
          inst_.bounds.get(flow_, n)) {
        return;
      }
      const Kbps cap = inst_.topo.accept_rate(flow_, n);
      if (cap > 0) {
        c.utility += utility(std::min(tree.edge_rate.at(n), cap), cap);
      }
    }
    c.usage.assign(li_.links.size(), 0);
    for (const auto& [child, up] : tree.parent) {
      c.usage[li_.index.at({up, child})] += tree.edge_rate.at(child);
      c.code.emplace_back(child.value, up.value, tree.edge_rate.at(child));
    }
    out_.push_back(std::move(c));
  }

  const RoutingInstance& inst_;
  const LinkIndex& li_;
  FlowId flow_;
  std::vector<SurrogateId> others_;
  std::vector<SurrogateId> order_;
  std::map<SurrogateId, Kbps> subtree_need_;
  std::vector<Candidate> out_;
  std::uint64_t* enumerated_ = nullptr;
};

bool dominates(const Candidate& b, const Candidate& a) {
  if (b.utility < a.utility - kTieEps) return false;
  for (std::size_t k = 0; k < a.usage.size(); ++k) {
    if (b.usage[k] > a.usage[k]) return false;
  }
  return b.utility > a.utility + kTieEps || b.code < a.code;
}

std::vector<Candidate> prune_dominated(std::vector<Candidate> cands) {
  std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    if (std::abs(x.utility - y.utility) > kTieEps) return x.utility > y.utility;
    return x.code < y.code;
  });
  // Anything that dominates a candidate sorts before it.
  std::vector<Candidate> kept;
  for (auto& c : cands) {
    const bool beaten = std::any_of(kept.begin(), kept.end(),
                                    [&](const Candidate& k) { return dominates(k, c); });
    if (!beaten) kept.push_back(std::move(c));
  }
  return kept;
}

class JointSearch {
 public:
  JointSearch(std::vector<std::vector<Candidate>>& per_flow,
              std::vector<Kbps> capacity)
      : per_flow_(per_flow), residual_(std::move(capacity)) {
    suffix_best_.assign(per_flow_.size() + 1, 0.0);
    for (std::size_t i = per_flow_.size(); i-- > 0;) {
      suffix_best_[i] = suffix_best_[i + 1] + per_flow_[i].front().utility;
    }
    chosen_.assign(per_flow_.size(), 0);
  }

  bool run() {
    dfs(0, 0.0);
    return found_;
  }
  const std::vector<std::size_t>& best() const { return best_; }
  double best_objective() const { return best_objective_; }
  std::uint64_t nodes() const { return nodes_; }

 private:
  // Compares the first `len` chosen candidates with the incumbent's.
  int prefix_cmp(std::size_t len) const {
    for (std::size_t j = 0; j < len; ++j) {
      const auto& a = per_flow_[j][chosen_[j]].code;
      const auto& b = per_flow_[j][best_[j]].code;
      if (a < b) return -1;
      if (b < a) return 1;
    }
    return 0;
  }

  void dfs(std::size_t i, double util) {
    ++nodes_;
    if (i == per_flow_.size()) {
      if (!found_ || util > best_objective_ + kTieEps ||
          (util >= best_objective_ - kTieEps && prefix_cmp(i) < 0)) {
        found_ = true;
        best_objective_ = util;
        best_ = chosen_;
      }
      return;
    }
    for (std::size_t k = 0; k < per_flow_[i].size(); ++k) {
      const Candidate& c = per_flow_[i][k];
      const double bound = util + c.utility + suffix_best_[i + 1];
      if (found_) {
        if (bound < best_objective_ - kTieEps) continue;
        // Cannot win on objective, so it must win the ordering.
        if (bound <= best_objective_ + kTieEps) {
          chosen_[i] = k;
          if (prefix_cmp(i + 1) > 0) continue;
        }
      }
      if (!fits(c)) continue;
      take(c, -1);
      chosen_[i] = k;
      dfs(i + 1, util + c.utility);
      take(c, +1);
    }
  }

  bool fits(const Candidate& c) const {
    for (std::size_t l = 0; l < residual_.size(); ++l) {
      if (c.usage[l] > residual_[l]) return false;
    }
    return true;
  }
  void take(const Candidate& c, int sign) {
    for (std::size_t l = 0; l < residual_.size(); ++l) {
      residual_[l] += sign * c.usage[l];
    }
  }

  std::vector<std::vector<Candidate>>& per_flow_;
  std::vector<Kbps> residual_;
  std::vector<double> suffix_best_;
  std::vector<std::size_t> chosen_;
  std::vector<std::size_t> best_;
  double best_objective_ = 0.0;
  bool found_ = false;
  std::uint64_t nodes_ = 0;
};

}  // namespace

OracleResult solve_exact(const RoutingInstance& inst, const OracleLimits& limits) {
  const auto& surrogates = inst.topo.surrogates();
  double space = 1.0;
  for (auto m : surrogates) {
    space *= count_arborescences_upper(inst.topo, m) *
             std::pow(static_cast<double>(inst.ladder.rates().size()),
                      static_cast<double>(surrogates.size() - 1));
  }
  if (static_cast<int>(surrogates.size()) > limits.max_surrogates ||
      inst.ladder.rates().size() > limits.max_ladder_size) {
    std::ostringstream os;
    os << "instance too large for exhaustive search: " << surrogates.size()
       << " surrogates, " << inst.ladder.rates().size()
       << " ladder rates, about " << space << " joint assignments";
    throw OracleRefused(os.str(), space);
  }
  for (auto m : surrogates) {
    const double per_flow =
        count_arborescences_upper(inst.topo, m) *
        std::pow(static_cast<double>(inst.ladder.rates().size()),
                 static_cast<double>(surrogates.size() - 1));
    if (per_flow > static_cast<double>(limits.max_candidates_per_flow)) {
      std::ostringstream os;
      os << "flow " << to_string(m) << " has about " << per_flow
         << " (tree, rate) candidates";
      throw OracleRefused(os.str(), space);
    }
  }

  OracleResult result;
  const LinkIndex li = index_links(inst.topo);
  std::vector<std::vector<Candidate>> per_flow;
  for (auto m : surrogates) {
    FlowEnumerator en(inst, li, m);
    auto cands = en.run(result.candidates_enumerated);
    if (cands.empty()) return result;
    cands = prune_dominated(std::move(cands));
    result.candidates_kept += cands.size();
    per_flow.push_back(std::move(cands));
  }
  if (per_flow.empty()) {
    result.feasible = true;
    return result;
  }

  JointSearch search(per_flow, li.capacity);
  const bool found = search.run();
  result.search_nodes = search.nodes();
  if (!found) return result;

  result.feasible = true;
  for (std::size_t i = 0; i < per_flow.size(); ++i) {
    DisseminationTree tree = per_flow[i][search.best()[i]].tree;
    result.solution.trees.emplace(tree.flow, std::move(tree));
  }
  derive_end_rates(inst.topo, result.solution);
  result.objective = aggregate_utility(inst.topo, result.solution);

  const auto report = validate_solution(inst.topo, inst.model, result.solution,
                                        inst.bounds, &inst.ladder);
  if (!report.valid()) {
    throw std::logic_error("oracle produced an invalid solution: " +
                           report.summary());
  }
  return result;
}

GapReport heuristic_gap(const RoutingInstance& inst,
                        const QuiescenceOptions& options,
                        const OracleLimits& limits) {
  GapReport out;
  out.oracle = solve_exact(inst, limits);

  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  if (engine.initialize().ok()) {
    out.run = run_to_quiescence(engine, options);
    out.heuristic_solution = engine.solution();
    const auto report = validate_solution(inst.topo, inst.model,
                                          out.heuristic_solution, inst.bounds,
                                          &inst.ladder);
    out.heuristic_feasible = report.valid();
    out.heuristic_objective = engine.objective();
  }

  if (out.oracle.feasible && out.heuristic_feasible) {
    out.gap = out.oracle.objective - out.heuristic_objective;
    if (std::abs(out.gap) <= kTieEps) out.gap = 0.0;
  } else if (out.oracle.feasible) {
    out.gap = kUnbounded;
  }
  return out;
}

}  // namespace relaymesh
