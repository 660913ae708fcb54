#include "relaymesh/model.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <sstream>

namespace relaymesh {

std::string to_string(SurrogateId id) { return std::to_string(id.value); }

// ---------------------------------------------------------------------------
// TopologySnapshot

void TopologySnapshot::add_surrogate(SurrogateId id, LastMile last_mile) {
  auto it = std::lower_bound(surrogates_.begin(), surrogates_.end(), id);
  if (it == surrogates_.end() || *it != id) surrogates_.insert(it, id);
  last_mile_[id] = std::move(last_mile);
}

void TopologySnapshot::remove_surrogate(SurrogateId id) {
  std::erase(surrogates_, id);
  last_mile_.erase(id);
  std::erase_if(links_, [id](const auto& kv) {
    return kv.first.first == id || kv.first.second == id;
  });
}

void TopologySnapshot::set_link(SurrogateId from, SurrogateId to, Link link) {
  if (from == to) throw ModelError("self-link on surrogate " + to_string(from));
  if (!contains(from) || !contains(to)) {
    throw ModelError("link " + to_string(from) + "->" + to_string(to) +
                     " references an unknown surrogate");
  }
  if (link.capacity_kbps <= 0) {
    throw ModelError("link " + to_string(from) + "->" + to_string(to) +
                     " needs positive capacity");
  }
  if (!(link.latency_ms >= 0.0)) {
    throw ModelError("link " + to_string(from) + "->" + to_string(to) +
                     " has negative latency");
  }
  links_[{from, to}] = link;
}

void TopologySnapshot::remove_link(SurrogateId from, SurrogateId to) {
  links_.erase({from, to});
}

bool TopologySnapshot::contains(SurrogateId id) const {
  return std::binary_search(surrogates_.begin(), surrogates_.end(), id);
}

const Link* TopologySnapshot::link(SurrogateId from, SurrogateId to) const {
  auto it = links_.find({from, to});
  return it == links_.end() ? nullptr : &it->second;
}

Link& TopologySnapshot::mutable_link(SurrogateId from, SurrogateId to) {
  auto it = links_.find({from, to});
  if (it == links_.end()) {
    throw ModelError("no link " + to_string(from) + "->" + to_string(to));
  }
  return it->second;
}

const LastMile& TopologySnapshot::last_mile(SurrogateId id) const {
  auto it = last_mile_.find(id);
  if (it == last_mile_.end()) {
    throw ModelError("unknown surrogate " + to_string(id));
  }
  return it->second;
}

LastMile& TopologySnapshot::mutable_last_mile(SurrogateId id) {
  auto it = last_mile_.find(id);
  if (it == last_mile_.end()) {
    throw ModelError("unknown surrogate " + to_string(id));
  }
  return it->second;
}

Kbps TopologySnapshot::source_rate(FlowId flow) const {
  return last_mile(flow).source_rate_kbps;
}

Kbps TopologySnapshot::accept_rate(FlowId flow, SurrogateId receiver) const {
  const auto& caps = last_mile(receiver).accept_rate_kbps;
  auto it = caps.find(flow);
  return it == caps.end() ? 0 : it->second;
}

std::vector<SurrogateId> TopologySnapshot::out_neighbors(SurrogateId id) const {
  std::vector<SurrogateId> out;
  for (auto it = links_.lower_bound({id, SurrogateId{0}});
       it != links_.end() && it->first.first == id; ++it) {
    out.push_back(it->first.second);
  }
  return out;
}

std::vector<SurrogateId> TopologySnapshot::in_neighbors(SurrogateId id) const {
  std::vector<SurrogateId> in;
  for (const auto& [edge, link] : links_) {
    if (edge.second == id) in.push_back(edge.first);
  }
  return in;
}

// ---------------------------------------------------------------------------
// Transcoding, ladder, utility

double TranscodeModel::speed(SurrogateId id) const {
  auto it = speed_factor.find(id);
  return it == speed_factor.end() ? 1.0 : it->second;
}

Millis transcode_latency(const TranscodeModel& model, SurrogateId surrogate,
                         Kbps r1, Kbps r2) {
  if (r1 <= r2) return 0.0;
  const double speed = model.speed(surrogate);
  return (model.base_ms + model.in_coef_ms_per_kbps * static_cast<double>(r1) +
          model.out_coef_ms_per_kbps * static_cast<double>(r2)) /
         speed;
}

RateLadder::RateLadder() : RateLadder(kDefaultLadderKbps) {}

RateLadder::RateLadder(std::vector<Kbps> rates_kbps)
    : rates_(std::move(rates_kbps)) {
  if (rates_.empty()) throw ModelError("rate ladder must not be empty");
  for (std::size_t i = 0; i < rates_.size(); ++i) {
    if (rates_[i] <= 0) throw ModelError("ladder rates must be positive");
    if (i > 0 && rates_[i] <= rates_[i - 1]) {
      throw ModelError("ladder rates must be strictly increasing");
    }
  }
}

Kbps RateLadder::floor(double rate) const {
  auto it = std::upper_bound(rates_.begin(), rates_.end(), rate,
                             [](double r, Kbps step) {
                               return r < static_cast<double>(step);
                             });
  if (it == rates_.begin()) return 0;
  return *std::prev(it);
}

bool RateLadder::contains(Kbps rate) const {
  return std::binary_search(rates_.begin(), rates_.end(), rate);
}

double utility(Kbps rate, Kbps max_rate) {
  if (max_rate <= 0) throw ModelError("utility needs a positive maximum rate");
  if (rate <= 0) return -std::numeric_limits<double>::infinity();
  return std::log(static_cast<double>(rate) / static_cast<double>(max_rate));
}

// ---------------------------------------------------------------------------
// Bounds

void DelayBounds::set(FlowId flow, SurrogateId receiver, Millis bound_ms) {
  bounds_[{flow, receiver}] = bound_ms;
}

Millis DelayBounds::get(FlowId flow, SurrogateId receiver) const {
  auto it = bounds_.find({flow, receiver});
  return it == bounds_.end() ? kUnbounded : it->second;
}

DelayBounds DelayBounds::uniform(const TopologySnapshot& topo,
                                 Millis bound_ms) {
  DelayBounds bounds;
  for (auto m : topo.surrogates()) {
    for (auto n : topo.surrogates()) {
      if (m != n) bounds.set(m, n, bound_ms);
    }
  }
  return bounds;
}

// ---------------------------------------------------------------------------
// DisseminationTree

std::vector<SurrogateId> DisseminationTree::members() const {
  std::vector<SurrogateId> out{flow};
  for (const auto& [child, up] : parent) out.push_back(child);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SurrogateId> DisseminationTree::children(SurrogateId id) const {
  std::vector<SurrogateId> out;
  for (const auto& [child, up] : parent) {
    if (up == id) out.push_back(child);
  }
  return out;
}

std::vector<SurrogateId> DisseminationTree::subtree(SurrogateId id) const {
  std::map<SurrogateId, std::vector<SurrogateId>> kids;
  for (const auto& [child, up] : parent) kids[up].push_back(child);
  std::vector<SurrogateId> out{id};
  std::set<SurrogateId> seen{id};
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto it = kids.find(out[i]);
    if (it == kids.end()) continue;
    for (auto c : it->second) {
      if (seen.insert(c).second) out.push_back(c);
    }
  }
  return out;
}

std::vector<SurrogateId> DisseminationTree::path_to(SurrogateId id) const {
  std::vector<SurrogateId> path{id};
  std::set<SurrogateId> seen{id};
  SurrogateId cur = id;
  while (cur != flow) {
    auto it = parent.find(cur);
    if (it == parent.end()) return {};
    cur = it->second;
    if (!seen.insert(cur).second) return {};  // cycle
    path.push_back(cur);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

Kbps DisseminationTree::rate_into(SurrogateId id, Kbps source_rate) const {
  if (id == flow) return source_rate;
  auto it = edge_rate.find(id);
  return it == edge_rate.end() ? 0 : it->second;
}

bool DisseminationTree::is_acyclic() const {
  if (parent.contains(flow)) return false;
  for (const auto& [child, up] : parent) {
    if (path_to(child).empty()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Solutions

Kbps end_rate(const TopologySnapshot& topo, const DisseminationTree& tree,
              SurrogateId receiver) {
  auto it = tree.edge_rate.find(receiver);
  if (it == tree.edge_rate.end()) return 0;
  return std::min(it->second, topo.accept_rate(tree.flow, receiver));
}

void derive_end_rates(const TopologySnapshot& topo, RateSolution& solution) {
  solution.end_rates.clear();
  for (const auto& [flow, tree] : solution.trees) {
    for (auto n : topo.surrogates()) {
      if (n != flow) solution.end_rates[{flow, n}] = end_rate(topo, tree, n);
    }
  }
}

double aggregate_utility(const TopologySnapshot& topo,
                         const RateSolution& solution) {
  double total = 0.0;
  for (const auto& [key, rate] : solution.end_rates) {
    const Kbps cap = topo.accept_rate(key.first, key.second);
    if (cap <= 0) continue;  // receiver does not want the flow
    total += utility(rate, cap);
  }
  return total;
}

const char* to_string(Constraint c) {
  switch (c) {
    case Constraint::kSinglePath:
      return "single-path";
    case Constraint::kUnicastWithinMulticast:
      return "unicast-within-multicast";
    case Constraint::kLinkCapacity:
      return "link-capacity";
    case Constraint::kEndToEndDelay:
      return "end-to-end-delay";
    case Constraint::kSourceRate:
      return "source-rate";
    case Constraint::kAcceptRate:
      return "accept-rate";
    case Constraint::kRateLadder:
      return "rate-ladder";
  }
  return "unknown";
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  for (const auto& e : structural_errors) os << "structural: " << e << '\n';
  for (const auto& v : violations) {
    os << to_string(v.constraint) << " flow=" << v.flow.value
       << " at=" << v.receiver.value;
    if (v.constraint == Constraint::kLinkCapacity) os << "->" << v.other.value;
    os << " observed=" << v.observed << " limit=" << v.limit;
    if (!v.detail.empty()) os << " (" << v.detail << ')';
    os << '\n';
  }
  return os.str();
}

Millis end_to_end_delay(const TopologySnapshot& topo,
                        const TranscodeModel& model,
                        const DisseminationTree& tree, SurrogateId receiver) {
  const auto path = tree.path_to(receiver);
  if (path.empty()) return kUnbounded;
  Millis total = 0.0;
  for (std::size_t h = 1; h < path.size(); ++h) {
    const Link* link = topo.link(path[h - 1], path[h]);
    if (link == nullptr) return kUnbounded;
    total += link->latency_ms;
    // Transcoding at intermediate hops only; the source never transcodes.
    if (h >= 2) {
      total += transcode_latency(model, path[h - 1],
                                 tree.rate_into(path[h - 1], 0),
                                 tree.rate_into(path[h], 0));
    }
  }
  const Kbps cap = receiver == tree.flow ? 0 : topo.accept_rate(tree.flow, receiver);
  if (cap > 0) {
    total += transcode_latency(model, receiver, tree.rate_into(receiver, 0), cap);
  }
  return total;
}

ValidationReport validate_solution(const TopologySnapshot& topo,
                                   const TranscodeModel& model,
                                   const RateSolution& solution,
                                   const DelayBounds& bounds,
                                   const RateLadder* ladder) {
  ValidationReport report;
  std::map<DirectedLink, Kbps> link_load;

  for (const auto& [flow, tree] : solution.trees) {
    const std::string tag = "flow " + to_string(flow);
    if (tree.flow != flow) {
      report.structural_errors.push_back(tag + ": tree keyed under wrong flow");
      continue;
    }
    if (!topo.contains(flow)) {
      report.structural_errors.push_back(tag + ": source not in topology");
      continue;
    }
    bool malformed = false;
    for (const auto& [child, up] : tree.parent) {
      if (!topo.contains(child) || !topo.contains(up)) {
        report.structural_errors.push_back(tag + ": edge " + to_string(up) +
                                           "->" + to_string(child) +
                                           " has unknown endpoint");
        malformed = true;
        continue;
      }
      if (topo.link(up, child) == nullptr) {
        report.structural_errors.push_back(tag + ": edge " + to_string(up) +
                                           "->" + to_string(child) +
                                           " is not a topology link");
        malformed = true;
        continue;
      }
      auto rate = tree.edge_rate.find(child);
      if (rate == tree.edge_rate.end()) {
        report.structural_errors.push_back(tag + ": edge " + to_string(up) +
                                           "->" + to_string(child) +
                                           " has no rate");
        malformed = true;
        continue;
      }
      link_load[{up, child}] += rate->second;
      if (ladder != nullptr && rate->second != 0 &&
          !ladder->contains(rate->second)) {
        report.violations.push_back({Constraint::kRateLadder, flow, child, up,
                                     static_cast<double>(rate->second), 0.0,
                                     "edge rate off the ladder"});
      }
    }
    if (malformed) continue;

    for (auto n : topo.surrogates()) {
      if (n == flow) continue;
      const auto path = tree.path_to(n);
      if (path.empty()) {
        report.violations.push_back({Constraint::kSinglePath, flow, n, n, 0.0,
                                     0.0, "no acyclic path from source"});
        continue;
      }
      auto er = solution.end_rates.find({flow, n});
      if (er == solution.end_rates.end()) {
        report.structural_errors.push_back(tag + ": no end rate for receiver " +
                                           to_string(n));
        continue;
      }
      const Kbps r = er->second;
      for (std::size_t h = 1; h < path.size(); ++h) {
        const Kbps c = tree.rate_into(path[h], 0);
        if (r > c) {
          report.violations.push_back(
              {Constraint::kUnicastWithinMulticast, flow, n, path[h],
               static_cast<double>(r), static_cast<double>(c),
               "unicast rate exceeds multicast rate on edge into " +
                   to_string(path[h])});
        }
      }
      const Kbps src = topo.source_rate(flow);
      if (r > src) {
        report.violations.push_back({Constraint::kSourceRate, flow, n, n,
                                     static_cast<double>(r),
                                     static_cast<double>(src), ""});
      }
      const Kbps cap = topo.accept_rate(flow, n);
      if (r > cap) {
        report.violations.push_back({Constraint::kAcceptRate, flow, n, n,
                                     static_cast<double>(r),
                                     static_cast<double>(cap), ""});
      }
      const Millis delay = end_to_end_delay(topo, model, tree, n);
      const Millis bound = bounds.get(flow, n);
      if (delay > bound) {
        report.violations.push_back(
            {Constraint::kEndToEndDelay, flow, n, n, delay, bound, ""});
      }
    }
  }

  for (const auto& [edge, load] : link_load) {
    const Link* link = topo.link(edge.first, edge.second);
    if (link != nullptr && load > link->capacity_kbps) {
      report.violations.push_back(
          {Constraint::kLinkCapacity, SurrogateId{}, edge.first, edge.second,
           static_cast<double>(load), static_cast<double>(link->capacity_kbps),
           "aggregate multicast rate exceeds capacity"});
    }
  }
  return report;
}

}  // namespace relaymesh
