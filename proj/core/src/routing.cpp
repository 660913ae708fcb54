#include "relaymesh/routing.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "relaymesh/rng.hpp"

namespace relaymesh {
namespace {

constexpr double kEps = 1e-9;

struct ShortestPaths {
  std::map<SurrogateId, Millis> dist;
  std::map<SurrogateId, SurrogateId> parent;
};

bool is_ancestor(const std::map<SurrogateId, SurrogateId>& parent,
                 SurrogateId maybe_ancestor, SurrogateId node) {
  SurrogateId cur = node;
  for (std::size_t guard = 0; guard <= parent.size(); ++guard) {
    if (cur == maybe_ancestor) return true;
    auto it = parent.find(cur);
    if (it == parent.end()) return false;
    cur = it->second;
  }
  return true;  // already cyclic; treat as unsafe
}

// Synchronous distance-vector relaxation, as each surrogate would run it on
// its neighbours' advertisements.
ShortestPaths bellman_ford(const TopologySnapshot& topo, SurrogateId source) {
  ShortestPaths sp;
  for (auto s : topo.surrogates()) sp.dist[s] = kUnbounded;
  sp.dist[source] = 0.0;
  const std::size_t limit = topo.surrogates().size() * topo.surrogates().size() + 1;
  for (std::size_t round = 0; round < limit; ++round) {
    bool changed = false;
    for (const auto& [edge, link] : topo.links()) {
      const auto [u, v] = edge;
      if (v == source || sp.dist[u] == kUnbounded) continue;
      const Millis via = sp.dist[u] + link.latency_ms;
      const Millis cur = sp.dist[v];
      const bool shorter = via < cur - kEps;
      bool tie = false;
      if (!shorter && std::abs(via - cur) <= kEps) {
        auto p = sp.parent.find(v);
        tie = p != sp.parent.end() && u < p->second &&
              !is_ancestor(sp.parent, v, u);
      }
      if (shorter || tie) {
        sp.dist[v] = shorter ? via : cur;
        sp.parent[v] = u;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return sp;
}

}  // namespace

const CandidateEntry* PeerTables::candidate(FlowId flow,
                                            SurrogateId via) const {
  auto it = custab.find(flow);
  if (it == custab.end()) return nullptr;
  for (const auto& e : it->second) {
    if (e.via == via) return &e;
  }
  return nullptr;
}

Kbps requested_rate(Kbps own_cap, std::span<const Kbps> child_requests,
                    Kbps headroom) {
  Kbps need = own_cap;
  for (Kbps r : child_requests) need = std::max(need, r);
  return std::min(need, headroom);
}

Millis maximal_delay(Millis own_bound,
                     std::span<const ChildDelayTerm> children) {
  Millis out = own_bound;
  for (const auto& c : children) {
    out = std::min(out, c.beta - c.link_ms - c.transcode_ms);
  }
  return out;
}

const char* to_string(SwitchKind kind) {
  switch (kind) {
    case SwitchKind::kReparent:
      return "reparent";
    case SwitchKind::kUpgrade:
      return "upgrade";
    case SwitchKind::kRepair:
      return "repair";
  }
  return "unknown";
}

DisconnectedTopology::DisconnectedTopology(std::vector<FlowReceiver> unreachable)
    : ModelError([&] {
        std::ostringstream os;
        os << "topology is disconnected; unreachable pairs:";
        for (const auto& [m, n] : unreachable) {
          os << ' ' << m.value << "->" << n.value;
        }
        return os.str();
      }()),
      unreachable_(std::move(unreachable)) {}

std::map<FlowId, DisseminationTree> build_shortest_path_trees(
    const TopologySnapshot& topo) {
  std::map<FlowId, DisseminationTree> trees;
  std::vector<FlowReceiver> unreachable;
  for (auto m : topo.surrogates()) {
    const auto sp = bellman_ford(topo, m);
    DisseminationTree tree;
    tree.flow = m;
    tree.path_delay[m] = 0.0;
    for (auto n : topo.surrogates()) {
      if (n == m) continue;
      if (sp.dist.at(n) == kUnbounded) {
        unreachable.emplace_back(m, n);
        continue;
      }
      tree.parent[n] = sp.parent.at(n);
      tree.edge_rate[n] = 0;
      tree.path_delay[n] = sp.dist.at(n);
    }
    trees.emplace(m, std::move(tree));
  }
  if (!unreachable.empty()) throw DisconnectedTopology(std::move(unreachable));
  return trees;
}

FeasibilityResult check_feasibility(
    const std::map<FlowId, DisseminationTree>& trees,
    const DelayBounds& bounds) {
  FeasibilityResult result;
  for (const auto& [m, tree] : trees) {
    for (const auto& [n, omega] : tree.path_delay) {
      if (n == m) continue;
      const Millis bound = bounds.get(m, n);
      if (omega > bound) result.witnesses.push_back({m, n, omega, bound});
    }
  }
  return result;
}

BasicAllocation allocate_basic_rates(
    const TopologySnapshot& topo, const RateLadder& ladder,
    std::map<FlowId, DisseminationTree> trees) {
  BasicAllocation out;
  for (const auto& [m, tree] : trees) {
    for (const auto& [child, up] : tree.parent) {
      ++out.trees_per_link[{up, child}];
    }
  }
  for (auto& [m, tree] : trees) {
    double rate = static_cast<double>(topo.source_rate(m));
    for (const auto& [child, up] : tree.parent) {
      const Kbps cap = topo.accept_rate(m, child);
      if (cap > 0) rate = std::min(rate, static_cast<double>(cap));
      const Link* link = topo.link(up, child);
      if (link == nullptr) {
        throw ModelError("tree edge " + to_string(up) + "->" +
                         to_string(child) + " is not a link");
      }
      const int sharing = out.trees_per_link.at({up, child});
      rate = std::min(rate, static_cast<double>(link->capacity_kbps) / sharing);
    }
    const Kbps basic = ladder.floor(rate);
    if (basic == 0) out.starved.push_back(m);
    for (auto& [child, r] : tree.edge_rate) r = basic;
  }
  out.solution.trees = std::move(trees);
  derive_end_rates(topo, out.solution);
  return out;
}

// ---------------------------------------------------------------------------
// RoutingEngine

RoutingEngine::RoutingEngine(TopologySnapshot topo, TranscodeModel model,
                             RateLadder ladder, DelayBounds bounds)
    : topo_(std::move(topo)),
      model_(std::move(model)),
      ladder_(std::move(ladder)),
      bounds_(std::move(bounds)) {}

FeasibilityResult RoutingEngine::initialize() {
  auto trees = build_shortest_path_trees(topo_);
  auto feasibility = check_feasibility(trees, bounds_);
  if (!feasibility.ok()) return feasibility;

  auto basic = allocate_basic_rates(topo_, ladder_, std::move(trees));
  trees_ = std::move(basic.solution.trees);
  load_.clear();
  tables_.clear();
  for (auto s : topo_.surrogates()) tables_[s];
  for (auto& [m, tree] : trees_) {
    for (const auto& [child, up] : tree.parent) {
      load_[{up, child}] += tree.edge_rate.at(child);
    }
    recompute_omega(tree, m);
    rebuild_dstab(m);
    check_tree(tree);
  }
  recompute_all_tables();
  ++version_;
  return feasibility;
}

const DisseminationTree& RoutingEngine::tree(FlowId flow) const {
  auto it = trees_.find(flow);
  if (it == trees_.end()) throw ModelError("no tree for flow " + to_string(flow));
  return it->second;
}

const PeerTables& RoutingEngine::tables(SurrogateId id) const {
  auto it = tables_.find(id);
  if (it == tables_.end()) throw ModelError("unknown surrogate " + to_string(id));
  return it->second;
}

RateSolution RoutingEngine::solution() const {
  RateSolution sol;
  sol.trees = trees_;
  derive_end_rates(topo_, sol);
  return sol;
}

double RoutingEngine::objective() const {
  return aggregate_utility(topo_, solution());
}

Kbps RoutingEngine::link_load(SurrogateId from, SurrogateId to) const {
  auto it = load_.find({from, to});
  return it == load_.end() ? 0 : it->second;
}

Kbps RoutingEngine::residual(SurrogateId from, SurrogateId to) const {
  const Link* link = topo_.link(from, to);
  if (link == nullptr) return 0;
  return std::max<Kbps>(0, link->capacity_kbps - link_load(from, to));
}

Kbps RoutingEngine::in_rate(const DisseminationTree& tree,
                            SurrogateId id) const {
  return tree.rate_into(id, topo_.source_rate(tree.flow));
}

Kbps RoutingEngine::demand(FlowId flow, SurrogateId id) const {
  const auto& tree = this->tree(flow);
  Kbps need = id == flow ? 0 : topo_.accept_rate(flow, id);
  for (auto c : tree.children(id)) need = std::max(need, demand(flow, c));
  return need;
}

Millis RoutingEngine::hop_delay(const DisseminationTree& tree,
                                SurrogateId parent, Kbps parent_in,
                                SurrogateId child, Kbps child_rate) const {
  const Link* link = topo_.link(parent, child);
  const Millis d = link == nullptr ? kUnbounded : link->latency_ms;
  if (parent == tree.flow) return d;
  return d + transcode_latency(model_, parent, parent_in, child_rate);
}

Millis RoutingEngine::delivery_latency(FlowId flow,
                                       SurrogateId receiver) const {
  const auto& t = tree(flow);
  const Millis omega = t.path_delay.at(receiver);
  const Kbps cap = receiver == flow ? 0 : topo_.accept_rate(flow, receiver);
  if (cap <= 0) return omega;
  return omega + transcode_latency(model_, receiver, in_rate(t, receiver), cap);
}

bool RoutingEngine::latency_violated(FlowId flow, SurrogateId receiver) const {
  if (receiver == flow) return false;
  return delivery_latency(flow, receiver) > bounds_.get(flow, receiver) + kEps;
}

// ---------------------------------------------------------------------------
// Tables

PathBroadcast RoutingEngine::make_broadcast(SurrogateId from,
                                            FlowId flow) const {
  const auto& t = tree(flow);
  const auto& tab = tables(from);
  PathBroadcast msg;
  msg.flow_id = flow;
  msg.rate = in_rate(t, from);
  auto a = tab.alpha.find(flow);
  msg.max_rate = a == tab.alpha.end() ? msg.rate : a->second;
  msg.latency = t.path_delay.at(from);
  std::ostringstream os;
  os << "speed=" << model_.speed(from);
  msg.vm_config = os.str();
  return msg;
}

Admission RoutingEngine::admit_path_broadcast(SurrogateId at,
                                              const PathBroadcast& msg,
                                              SurrogateId from) {
  Admission result;
  auto& tab = tables_.at(at);
  auto& entries = tab.custab[msg.flow_id];
  auto drop_existing = [&] {
    std::erase_if(entries, [&](const CandidateEntry& e) { return e.via == from; });
  };
  if (msg.flow_id == at) {
    result.reason = "own flow";
    return result;
  }
  if (from == at) {
    result.reason = "self";
    return result;
  }
  const Link* link = topo_.link(from, at);
  if (link == nullptr) {
    drop_existing();
    result.reason = "no link";
    return result;
  }
  auto a = tab.alpha.find(msg.flow_id);
  const Kbps own_alpha = a == tab.alpha.end() ? 0 : a->second;
  const Millis transcode =
      from == msg.flow_id
          ? 0.0
          : transcode_latency(model_, from, msg.max_rate, own_alpha);
  result.estimate = msg.latency + link->latency_ms + transcode;
  auto b = tab.beta.find(msg.flow_id);
  const Millis beta = b == tab.beta.end() ? kUnbounded : b->second;
  drop_existing();
  if (result.estimate > beta + kEps) {
    result.reason = "estimated latency exceeds maximal delay";
    return result;
  }
  entries.push_back({from, msg.rate, msg.max_rate, msg.latency});
  std::sort(entries.begin(), entries.end(),
            [](const auto& x, const auto& y) { return x.via < y.via; });
  result.admitted = true;
  return result;
}

void RoutingEngine::gossip_round() {
  for (auto from : topo_.surrogates()) {
    for (const auto& [m, t] : trees_) {
      if (!t.contains(from)) continue;
      const auto msg = make_broadcast(from, m);
      for (auto to : topo_.out_neighbors(from)) {
        if (t.contains(to)) admit_path_broadcast(to, msg, from);
      }
    }
  }
}

Kbps RoutingEngine::recompute_alpha(SurrogateId id, FlowId flow) {
  const auto& t = tree(flow);
  if (!t.contains(id)) {
    throw ModelError("surrogate " + to_string(id) + " has no upstream for flow " +
                     to_string(flow));
  }
  auto& tab = tables_.at(id);
  std::vector<Kbps> kids;
  for (auto c : t.children(id)) kids.push_back(tables_.at(c).alpha[flow]);
  Kbps value;
  if (id == flow) {
    value = requested_rate(0, kids, topo_.source_rate(flow));
  } else {
    const SurrogateId up = t.parent.at(id);
    const Kbps headroom = residual(up, id) + t.edge_rate.at(id);
    value = requested_rate(topo_.accept_rate(flow, id), kids, headroom);
  }
  tab.alpha[flow] = value;
  return value;
}

Millis RoutingEngine::recompute_beta(SurrogateId id, FlowId flow) {
  const auto& t = tree(flow);
  if (!t.contains(id)) {
    throw ModelError("surrogate " + to_string(id) + " is not in flow " +
                     to_string(flow));
  }
  const Kbps in = in_rate(t, id);
  std::vector<ChildDelayTerm> kids;
  for (auto c : t.children(id)) {
    const Link* link = topo_.link(id, c);
    const Millis transcode =
        id == flow ? 0.0
                   : transcode_latency(model_, id, in, t.edge_rate.at(c));
    kids.push_back({tables_.at(c).beta[flow],
                    link == nullptr ? kUnbounded : link->latency_ms, transcode});
  }
  const Millis own = id == flow ? kUnbounded : bounds_.get(flow, id);
  const Millis value = maximal_delay(own, kids);
  tables_.at(id).beta[flow] = value;
  return value;
}

std::map<SurrogateId, PeerTables> RoutingEngine::scratch_tables() const {
  RoutingEngine copy = *this;
  for (auto& [id, tab] : copy.tables_) {
    tab.alpha.clear();
    tab.beta.clear();
  }
  for (const auto& [m, t] : copy.trees_) {
    auto order = t.subtree(m);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      copy.recompute_alpha(*it, m);
      copy.recompute_beta(*it, m);
    }
  }
  return std::move(copy.tables_);
}

bool RoutingEngine::recompute_all_tables() {
  auto fresh = scratch_tables();
  bool same = true;
  for (auto& [id, tab] : tables_) {
    auto& f = fresh.at(id);
    if (tab.alpha != f.alpha || tab.beta != f.beta) same = false;
    tab.alpha = std::move(f.alpha);
    tab.beta = std::move(f.beta);
  }
  return same;
}

void RoutingEngine::rebuild_dstab(FlowId flow) {
  const auto& t = tree(flow);
  for (auto& [id, tab] : tables_) {
    if (!t.contains(id)) {
      tab.dstab.erase(flow);
      continue;
    }
    auto kids = t.children(id);
    tab.dstab[flow] = std::set<SurrogateId>(kids.begin(), kids.end());
  }
}

void RoutingEngine::refresh_tables(FlowId flow, std::set<SurrogateId> dirty) {
  const auto& t = tree(flow);
  std::set<SurrogateId> all;
  for (auto d : dirty) {
    if (!t.contains(d)) continue;
    for (auto a : t.path_to(d)) all.insert(a);
  }
  std::vector<std::pair<std::size_t, SurrogateId>> order;
  for (auto id : all) order.emplace_back(t.path_to(id).size(), id);
  std::sort(order.begin(), order.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  for (const auto& [depth, id] : order) {
    recompute_alpha(id, flow);
    recompute_beta(id, flow);
  }
}

void RoutingEngine::refresh_link_users(const std::set<DirectedLink>& links) {
  for (const auto& [m, t] : trees_) {
    std::set<SurrogateId> dirty;
    for (const auto& [from, to] : links) {
      auto it = t.parent.find(to);
      if (it != t.parent.end() && it->second == from) dirty.insert(to);
    }
    if (!dirty.empty()) refresh_tables(m, std::move(dirty));
  }
}

// ---------------------------------------------------------------------------
// Tree mutation helpers

void RoutingEngine::recompute_omega(DisseminationTree& t, SurrogateId from) {
  for (auto id : t.subtree(from)) {
    if (id == t.flow) {
      t.path_delay[id] = 0.0;
      continue;
    }
    const SurrogateId up = t.parent.at(id);
    t.path_delay[id] = t.path_delay.at(up) +
                       hop_delay(t, up, in_rate(t, up), id, t.edge_rate.at(id));
  }
}

void RoutingEngine::set_edge_rate(DisseminationTree& t, SurrogateId child,
                                  Kbps rate) {
  const SurrogateId up = t.parent.at(child);
  Kbps& current = t.edge_rate[child];
  load_[{up, child}] += rate - current;
  current = rate;
}

void RoutingEngine::detach(DisseminationTree& t, SurrogateId child) {
  const SurrogateId up = t.parent.at(child);
  load_[{up, child}] -= t.edge_rate.at(child);
  t.parent.erase(child);
  t.edge_rate.erase(child);
}

void RoutingEngine::attach(DisseminationTree& t, SurrogateId child,
                           SurrogateId parent, Kbps rate) {
  t.parent[child] = parent;
  t.edge_rate[child] = rate;
  load_[{parent, child}] += rate;
}

void RoutingEngine::check_tree([[maybe_unused]] const DisseminationTree& t) const {
#ifndef NDEBUG
  if (!t.is_acyclic()) {
    throw std::logic_error("flow " + to_string(t.flow) + " tree has a cycle");
  }
#endif
}

// ---------------------------------------------------------------------------
// Evaluation

RoutingEngine::NewRates RoutingEngine::project_subtree(
    const DisseminationTree& t, SurrogateId node, SurrogateId new_parent,
    Kbps new_rate) const {
  NewRates out;
  out.rate[node] = new_rate;
  out.omega[node] = t.path_delay.at(new_parent) +
                    hop_delay(t, new_parent, in_rate(t, new_parent), node,
                              new_rate);
  const auto order = t.subtree(node);
  for (std::size_t i = 1; i < order.size(); ++i) {
    const SurrogateId q = order[i];
    const SurrogateId p = t.parent.at(q);
    const Kbps upstream = out.rate.at(p);
    const Kbps old = t.edge_rate.at(q);
    const Kbps headroom = residual(p, q) + old;
    const Kbps offered = ladder_.floor(static_cast<double>(
        std::min({upstream, headroom, demand(t.flow, q)})));
    const Kbps rate = std::min(upstream, std::max(old, offered));
    out.rate[q] = rate;
    out.omega[q] = out.omega.at(p) + hop_delay(t, p, upstream, q, rate);
  }
  return out;
}

bool RoutingEngine::projection_meets_bounds(const DisseminationTree& t,
                                            const NewRates& projected) const {
  for (const auto& [q, omega] : projected.omega) {
    const Kbps cap = topo_.accept_rate(t.flow, q);
    const Millis latency =
        omega + (cap > 0 ? transcode_latency(model_, q, projected.rate.at(q), cap)
                         : 0.0);
    if (latency > bounds_.get(t.flow, q) + kEps) return false;
  }
  return true;
}

std::optional<SwitchProposal> RoutingEngine::evaluate_switch(
    SurrogateId node, FlowId flow) const {
  if (node == flow) return std::nullopt;
  const auto& t = tree(flow);
  if (!t.contains(node)) return std::nullopt;
  const SurrogateId current_parent = t.parent.at(node);
  const Kbps current = t.edge_rate.at(node);
  const Kbps need = demand(flow, node);
  if (current >= need) return std::nullopt;

  struct Option {
    Kbps rate;
    bool is_current;
    SurrogateId via;
  };
  std::vector<Option> options;
  auto consider = [&](SurrogateId k, Kbps headroom) {
    const Kbps offered = std::min({in_rate(t, k), headroom, need});
    const Kbps rate = ladder_.floor(static_cast<double>(offered));
    if (rate > current) options.push_back({rate, k == current_parent, k});
  };
  consider(current_parent, residual(current_parent, node) + current);
  const auto& tab = tables(node);
  if (auto it = tab.custab.find(flow); it != tab.custab.end()) {
    for (const auto& entry : it->second) {
      const SurrogateId k = entry.via;
      if (k == current_parent || k == node || !t.contains(k)) continue;
      if (topo_.link(k, node) == nullptr) continue;
      consider(k, residual(k, node));
    }
  }
  std::sort(options.begin(), options.end(), [](const Option& a, const Option& b) {
    if (a.rate != b.rate) return a.rate > b.rate;
    if (a.is_current != b.is_current) return a.is_current;
    return a.via < b.via;
  });
  for (const auto& opt : options) {
    const auto projected = project_subtree(t, node, opt.via, opt.rate);
    if (!projection_meets_bounds(t, projected)) continue;
    SwitchProposal p;
    p.kind = opt.is_current ? SwitchKind::kUpgrade : SwitchKind::kReparent;
    p.flow = flow;
    p.node = node;
    p.old_parent = current_parent;
    p.new_parent = opt.via;
    p.old_rate = current;
    p.new_rate = opt.rate;
    p.version = version_;
    return p;
  }
  return std::nullopt;
}

std::optional<SwitchProposal> RoutingEngine::evaluate_repair(
    SurrogateId node, FlowId flow) const {
  if (!latency_violated(flow, node)) return std::nullopt;
  const auto& t = tree(flow);
  const SurrogateId current_parent = t.parent.at(node);
  const auto below = t.subtree(node);
  const std::set<SurrogateId> excluded(below.begin(), below.end());
  const Kbps need = demand(flow, node);

  struct Option {
    Kbps rate;
    SurrogateId via;
  };
  std::vector<Option> options;
  const auto& tab = tables(node);
  if (auto it = tab.custab.find(flow); it != tab.custab.end()) {
    for (const auto& entry : it->second) {
      const SurrogateId k = entry.via;
      if (k == current_parent || excluded.contains(k) || !t.contains(k)) continue;
      if (topo_.link(k, node) == nullptr) continue;
      const Kbps rate = ladder_.floor(static_cast<double>(
          std::min({in_rate(t, k), residual(k, node), need})));
      if (rate > 0) options.push_back({rate, k});
    }
  }
  std::sort(options.begin(), options.end(), [](const Option& a, const Option& b) {
    return a.rate != b.rate ? a.rate > b.rate : a.via < b.via;
  });
  for (const auto& opt : options) {
    const auto projected = project_subtree(t, node, opt.via, opt.rate);
    bool acceptable = true;
    for (const auto& [q, omega] : projected.omega) {
      const Kbps cap = topo_.accept_rate(flow, q);
      const Millis latency =
          omega + (cap > 0 ? transcode_latency(model_, q, projected.rate.at(q), cap)
                           : 0.0);
      const bool within = latency <= bounds_.get(flow, q) + kEps;
      // The repairing node must end up within its bound; descendants must
      // not get worse than they already are.
      if (q == node ? !within
                    : !(within || latency <= delivery_latency(flow, q) + kEps)) {
        acceptable = false;
        break;
      }
    }
    if (!acceptable) continue;
    SwitchProposal p;
    p.kind = SwitchKind::kRepair;
    p.flow = flow;
    p.node = node;
    p.old_parent = current_parent;
    p.new_parent = opt.via;
    p.old_rate = t.edge_rate.at(node);
    p.new_rate = opt.rate;
    p.version = version_;
    return p;
  }
  return std::nullopt;
}

std::optional<SwitchProposal> RoutingEngine::evaluate(SurrogateId node,
                                                      FlowId flow) const {
  if (node == flow || !trees_.contains(flow) || !tree(flow).contains(node)) {
    return std::nullopt;
  }
  if (latency_violated(flow, node)) return evaluate_repair(node, flow);
  return evaluate_switch(node, flow);
}

void RoutingEngine::apply_switch(const SwitchProposal& p) {
  if (p.version != version_) {
    throw StaleProposal("proposal for flow " + to_string(p.flow) + " at " +
                        to_string(p.node) + " predates the current state");
  }
  auto& t = trees_.at(p.flow);
  if (!t.parent.contains(p.node) || t.parent.at(p.node) != p.old_parent ||
      t.edge_rate.at(p.node) != p.old_rate) {
    throw StaleProposal("tree of flow " + to_string(p.flow) + " changed");
  }
  const auto projected = project_subtree(t, p.node, p.new_parent, p.new_rate);

  std::set<DirectedLink> touched{{p.old_parent, p.node}, {p.new_parent, p.node}};
  detach(t, p.node);
  attach(t, p.node, p.new_parent, p.new_rate);
  for (const auto& [q, rate] : projected.rate) {
    if (q == p.node) continue;
    if (t.edge_rate.at(q) != rate) {
      touched.insert({t.parent.at(q), q});
      set_edge_rate(t, q, rate);
    }
  }
  recompute_omega(t, p.node);
  check_tree(t);

  auto& old_tab = tables_.at(p.old_parent).dstab[p.flow];
  old_tab.erase(p.node);
  tables_.at(p.new_parent).dstab[p.flow].insert(p.node);

  std::set<SurrogateId> dirty;
  for (const auto& [q, rate] : projected.rate) dirty.insert(q);
  dirty.insert(p.old_parent);
  dirty.insert(p.new_parent);
  refresh_tables(p.flow, std::move(dirty));
  refresh_link_users(touched);
  ++version_;
}

// ---------------------------------------------------------------------------
// Environment changes

void RoutingEngine::set_bound(FlowId flow, SurrogateId receiver,
                              Millis bound_ms) {
  bounds_.set(flow, receiver, bound_ms);
  if (trees_.contains(flow) && tree(flow).contains(receiver)) {
    refresh_tables(flow, {receiver});
  }
  ++version_;
}

void RoutingEngine::set_link_latency(SurrogateId from, SurrogateId to,
                                     Millis latency_ms) {
  Link link = topo_.mutable_link(from, to);
  link.latency_ms = latency_ms;
  topo_.set_link(from, to, link);
  for (auto& [m, t] : trees_) {
    auto it = t.parent.find(to);
    if (it == t.parent.end() || it->second != from) continue;
    recompute_omega(t, to);
    refresh_tables(m, {from});
  }
  ++version_;
}

void RoutingEngine::set_link_capacity(SurrogateId from, SurrogateId to,
                                      Kbps capacity_kbps) {
  Link link = topo_.mutable_link(from, to);
  link.capacity_kbps = capacity_kbps;
  topo_.set_link(from, to, link);
  std::set<DirectedLink> touched{{from, to}};
  while (link_load(from, to) > capacity_kbps) {
    // Step the heaviest flow on the link one ladder rung down.
    FlowId heaviest{};
    Kbps best = 0;
    for (const auto& [m, t] : trees_) {
      auto it = t.parent.find(to);
      if (it == t.parent.end() || it->second != from) continue;
      const Kbps r = t.edge_rate.at(to);
      if (r > best) {
        best = r;
        heaviest = m;
      }
    }
    if (best == 0) break;
    auto& t = trees_.at(heaviest);
    const Kbps lowered = ladder_.floor(static_cast<double>(best) - 0.5);
    set_edge_rate(t, to, lowered);
    for (auto q : t.subtree(to)) {
      if (q == to) continue;
      const Kbps upstream = in_rate(t, t.parent.at(q));
      if (t.edge_rate.at(q) > upstream) {
        touched.insert({t.parent.at(q), q});
        set_edge_rate(t, q, upstream);
      }
    }
    recompute_omega(t, to);
    const auto below = t.subtree(to);
    refresh_tables(heaviest, std::set<SurrogateId>(below.begin(), below.end()));
  }
  refresh_link_users(touched);
  ++version_;
}

void RoutingEngine::set_accept_rate(FlowId flow, SurrogateId receiver,
                                    Kbps rate) {
  topo_.mutable_last_mile(receiver).accept_rate_kbps[flow] = rate;
  if (trees_.contains(flow) && tree(flow).contains(receiver)) {
    refresh_tables(flow, {receiver});
  }
  ++version_;
}

void RoutingEngine::add_member(SurrogateId id, LastMile last_mile,
                               const std::map<DirectedLink, Link>& links) {
  if (topo_.contains(id)) return;
  topo_.add_surrogate(id, std::move(last_mile));
  for (const auto& [edge, link] : links) {
    topo_.set_link(edge.first, edge.second, link);
  }
  tables_[id];

  for (auto& [m, t] : trees_) {
    std::optional<SurrogateId> best;
    Millis best_delay = kUnbounded;
    for (auto p : t.members()) {
      const Link* link = topo_.link(p, id);
      if (link == nullptr) continue;
      const Millis d = t.path_delay.at(p) + link->latency_ms;
      if (!best || d < best_delay - kEps) {
        best = p;
        best_delay = d;
      }
    }
    if (!best) throw ModelError("new member " + to_string(id) + " unreachable");
    const Kbps rate = ladder_.floor(static_cast<double>(std::min(
        {in_rate(t, *best), residual(*best, id), topo_.accept_rate(m, id)})));
    attach(t, id, *best, rate);
    recompute_omega(t, id);
  }

  const auto sp = bellman_ford(topo_, id);
  DisseminationTree own;
  own.flow = id;
  for (auto n : topo_.surrogates()) {
    if (n == id) continue;
    if (sp.dist.at(n) == kUnbounded) {
      throw DisconnectedTopology({{id, n}});
    }
    own.parent[n] = sp.parent.at(n);
    own.edge_rate[n] = 0;
  }
  trees_[id] = own;
  auto& t = trees_.at(id);
  for (auto q : t.subtree(id)) {
    if (q == id) continue;
    const SurrogateId p = t.parent.at(q);
    const Kbps rate = ladder_.floor(static_cast<double>(
        std::min({in_rate(t, p), residual(p, q), demand(id, q)})));
    set_edge_rate(t, q, rate);
  }
  recompute_omega(t, id);
  for (const auto& [m, tr] : trees_) {
    rebuild_dstab(m);
    check_tree(tr);
  }
  recompute_all_tables();
  ++version_;
}

void RoutingEngine::remove_member(SurrogateId id) {
  if (!topo_.contains(id)) return;
  if (auto it = trees_.find(id); it != trees_.end()) {
    for (const auto& [child, up] : it->second.parent) {
      load_[{up, child}] -= it->second.edge_rate.at(child);
    }
    trees_.erase(it);
  }
  for (auto& [m, t] : trees_) {
    if (!t.parent.contains(id)) continue;
    const SurrogateId up = t.parent.at(id);
    const auto orphans = t.children(id);
    detach(t, id);
    for (auto c : orphans) {
      const auto below = t.subtree(c);
      const Kbps old_rate = t.edge_rate.at(c);
      load_[{id, c}] -= old_rate;
      t.parent.erase(c);
      t.edge_rate.erase(c);
      const std::set<SurrogateId> excluded(below.begin(), below.end());
      std::optional<SurrogateId> next;
      if (topo_.link(up, c) != nullptr) {
        next = up;
      } else {
        Millis best = kUnbounded;
        for (auto p : t.members()) {
          if (p == id || excluded.contains(p)) continue;
          const Link* link = topo_.link(p, c);
          if (link == nullptr) continue;
          const Millis d = t.path_delay.at(p) + link->latency_ms;
          if (!next || d < best - kEps) {
            next = p;
            best = d;
          }
        }
      }
      if (!next) throw ModelError("cannot reattach " + to_string(c));
      const Kbps rate = std::min(
          old_rate, ladder_.floor(static_cast<double>(std::min(
                        {in_rate(t, *next), residual(*next, c), demand(m, c)}))));
      attach(t, c, *next, rate);
      for (auto q : t.subtree(c)) {
        if (q == c) continue;
        const Kbps upstream = in_rate(t, t.parent.at(q));
        if (t.edge_rate.at(q) > upstream) set_edge_rate(t, q, upstream);
      }
      recompute_omega(t, c);
    }
    t.path_delay.erase(id);
  }
  topo_.remove_surrogate(id);
  std::erase_if(load_, [id](const auto& kv) {
    return kv.first.first == id || kv.first.second == id;
  });
  tables_.erase(id);
  for (auto& [s, tab] : tables_) {
    tab.custab.erase(id);
    tab.dstab.erase(id);
    tab.alpha.erase(id);
    tab.beta.erase(id);
    for (auto& [m, entries] : tab.custab) {
      std::erase_if(entries, [id](const CandidateEntry& e) { return e.via == id; });
    }
  }
  for (const auto& [m, t] : trees_) {
    rebuild_dstab(m);
    check_tree(t);
  }
  recompute_all_tables();
  ++version_;
}

// ---------------------------------------------------------------------------

QuiescenceReport run_to_quiescence(RoutingEngine& engine,
                                   const QuiescenceOptions& options,
                                   const SwitchObserver& observer) {
  QuiescenceReport report;
  Rng rng(options.seed);
  for (int round = 0; round < options.max_rounds; ++round) {
    engine.gossip_round();
    std::vector<FlowReceiver> pairs;
    for (const auto& [m, t] : engine.trees()) {
      for (auto n : t.members()) {
        if (n != m) pairs.emplace_back(m, n);
      }
    }
    rng.shuffle(pairs);
    bool accepted = false;
    for (const auto& [m, n] : pairs) {
      auto proposal = engine.evaluate(n, m);
      if (!proposal) continue;
      engine.apply_switch(*proposal);
      report.accepted.push_back(*proposal);
      accepted = true;
      if (observer) observer(engine, *proposal);
    }
    report.rounds = round + 1;
    if (!accepted) {
      report.converged = true;
      return report;
    }
  }
  return report;
}

}  // namespace relaymesh
