#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "relaymesh/model.hpp"

namespace relaymesh {

// ---------------------------------------------------------------------------
// Gossip state kept by each surrogate.

struct CandidateEntry {
  SurrogateId via;
  Kbps offered_rate = 0;
  Kbps offered_max_rate = 0;  // alpha of `via`
  Millis latency = 0.0;       // omega of `via`
};

struct PeerTables {
  std::map<FlowId, std::vector<CandidateEntry>> custab;
  std::map<FlowId, std::set<SurrogateId>> dstab;
  std::map<FlowId, Kbps> alpha;
  std::map<FlowId, Millis> beta;

  const CandidateEntry* candidate(FlowId flow, SurrogateId via) const;
};

struct PathBroadcast {
  FlowId flow_id;
  Kbps rate = 0;
  Kbps max_rate = 0;
  Millis latency = 0.0;
  std::string vm_config;
};

// Requested rate: own cap at a leaf, otherwise the largest need among the node
// and its children, both limited by the headroom on the incoming link.
Kbps requested_rate(Kbps own_cap, std::span<const Kbps> child_requests,
                    Kbps headroom);

struct ChildDelayTerm {
  Millis beta = 0.0;
  Millis link_ms = 0.0;
  Millis transcode_ms = 0.0;
};

// Maximal tolerable arrival delay at a node given its own bound and the
// slack each child leaves after the link and transcoding costs.
Millis maximal_delay(Millis own_bound, std::span<const ChildDelayTerm> children);

// ---------------------------------------------------------------------------
// Initial tree construction and basic allocation.

class DisconnectedTopology : public ModelError {
 public:
  DisconnectedTopology(std::vector<FlowReceiver> unreachable);
  const std::vector<FlowReceiver>& unreachable() const { return unreachable_; }

 private:
  std::vector<FlowReceiver> unreachable_;
};

// Distance-vector shortest paths from every surrogate; equal-cost ties go to
// the lowest-numbered parent. path_delay holds pure link latency.
std::map<FlowId, DisseminationTree> build_shortest_path_trees(
    const TopologySnapshot& topo);

struct InfeasiblePair {
  FlowId flow;
  SurrogateId receiver;
  Millis shortest_delay = 0.0;  // the smallest bound that would be feasible
  Millis bound = 0.0;
};

struct FeasibilityResult {
  std::vector<InfeasiblePair> witnesses;
  bool ok() const { return witnesses.empty(); }
};

FeasibilityResult check_feasibility(
    const std::map<FlowId, DisseminationTree>& trees, const DelayBounds& bounds);

struct BasicAllocation {
  RateSolution solution;
  std::map<DirectedLink, int> trees_per_link;
  std::vector<FlowId> starved;  // rate fell below the ladder minimum
};

BasicAllocation allocate_basic_rates(
    const TopologySnapshot& topo, const RateLadder& ladder,
    std::map<FlowId, DisseminationTree> trees);

// ---------------------------------------------------------------------------
// Self-evolving adjustment.

struct Admission {
  bool admitted = false;
  Millis estimate = 0.0;
  std::string reason;
};

enum class SwitchKind {
  kReparent,  // higher rate through a different upstream
  kUpgrade,   // higher rate from the current upstream
  kRepair,    // latency bound violated; move to an upstream that meets it
};

const char* to_string(SwitchKind kind);

struct SwitchProposal {
  SwitchKind kind = SwitchKind::kReparent;
  FlowId flow;
  SurrogateId node;
  SurrogateId old_parent;
  SurrogateId new_parent;
  Kbps old_rate = 0;
  Kbps new_rate = 0;
  std::uint64_t version = 0;
};

class StaleProposal : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RoutingEngine {
 public:
  RoutingEngine(TopologySnapshot topo, TranscodeModel model, RateLadder ladder,
                DelayBounds bounds);

  // Shortest-path trees, feasibility check and basic rates. Trees are
  // installed only when feasible.
  FeasibilityResult initialize();

  const TopologySnapshot& topology() const { return topo_; }
  const TranscodeModel& model() const { return model_; }
  const RateLadder& ladder() const { return ladder_; }
  const DelayBounds& bounds() const { return bounds_; }
  const std::map<FlowId, DisseminationTree>& trees() const { return trees_; }
  const DisseminationTree& tree(FlowId flow) const;
  const PeerTables& tables(SurrogateId id) const;
  std::uint64_t version() const { return version_; }

  RateSolution solution() const;
  double objective() const;

  Kbps link_load(SurrogateId from, SurrogateId to) const;
  // C-bar: capacity not yet allocated to any flow.
  Kbps residual(SurrogateId from, SurrogateId to) const;
  // Arrival latency plus the receiver's own transcode to its accept rate.
  Millis delivery_latency(FlowId flow, SurrogateId receiver) const;
  bool latency_violated(FlowId flow, SurrogateId receiver) const;

  // Gossip.
  PathBroadcast make_broadcast(SurrogateId from, FlowId flow) const;
  Admission admit_path_broadcast(SurrogateId at, const PathBroadcast& msg,
                                 SurrogateId from);
  // Every surrogate broadcasts every flow it carries to its out-neighbours.
  void gossip_round();

  Kbps recompute_alpha(SurrogateId id, FlowId flow);
  Millis recompute_beta(SurrogateId id, FlowId flow);
  // Bottom-up pass over every tree. Returns true when nothing changed.
  bool recompute_all_tables();
  // Fresh alpha/beta values from a full pass without touching the engine.
  std::map<SurrogateId, PeerTables> scratch_tables() const;

  std::optional<SwitchProposal> evaluate_switch(SurrogateId node,
                                                FlowId flow) const;
  std::optional<SwitchProposal> evaluate_repair(SurrogateId node,
                                                FlowId flow) const;
  // Repair when the node's bound is violated, otherwise rate improvement.
  std::optional<SwitchProposal> evaluate(SurrogateId node, FlowId flow) const;
  void apply_switch(const SwitchProposal& proposal);

  // Environment changes.
  void set_bound(FlowId flow, SurrogateId receiver, Millis bound_ms);
  void set_link_latency(SurrogateId from, SurrogateId to, Millis latency_ms);
  void set_link_capacity(SurrogateId from, SurrogateId to, Kbps capacity_kbps);
  void set_accept_rate(FlowId flow, SurrogateId receiver, Kbps rate);
  // Attaches a new member to every tree and grows a tree for its own flow.
  void add_member(SurrogateId id, LastMile last_mile,
                  const std::map<DirectedLink, Link>& links);
  void remove_member(SurrogateId id);

 private:
  struct NewRates {
    std::map<SurrogateId, Kbps> rate;
    std::map<SurrogateId, Millis> omega;
  };

  Kbps demand(FlowId flow, SurrogateId id) const;
  Kbps in_rate(const DisseminationTree& tree, SurrogateId id) const;
  NewRates project_subtree(const DisseminationTree& tree, SurrogateId node,
                           SurrogateId new_parent, Kbps new_rate) const;
  bool projection_meets_bounds(const DisseminationTree& tree,
                               const NewRates& projected) const;
  Millis hop_delay(const DisseminationTree& tree, SurrogateId parent,
                   Kbps parent_in, SurrogateId child, Kbps child_rate) const;
  void recompute_omega(DisseminationTree& tree, SurrogateId from);
  void set_edge_rate(DisseminationTree& tree, SurrogateId child, Kbps rate);
  void detach(DisseminationTree& tree, SurrogateId child);
  void attach(DisseminationTree& tree, SurrogateId child, SurrogateId parent,
              Kbps rate);
  // Re-derives alpha/beta for `dirty` nodes of `flow` and their ancestors.
  void refresh_tables(FlowId flow, std::set<SurrogateId> dirty);
  void refresh_link_users(const std::set<DirectedLink>& links);
  void rebuild_dstab(FlowId flow);
  void check_tree(const DisseminationTree& tree) const;

  TopologySnapshot topo_;
  TranscodeModel model_;
  RateLadder ladder_;
  DelayBounds bounds_;
  std::map<FlowId, DisseminationTree> trees_;
  std::map<SurrogateId, PeerTables> tables_;
  std::map<DirectedLink, Kbps> load_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Driver used by the oracle comparison and the property harness.

struct QuiescenceOptions {
  int max_rounds = 200;
  std::uint64_t seed = 1;
};

struct QuiescenceReport {
  bool converged = false;
  int rounds = 0;
  std::vector<SwitchProposal> accepted;
};

using SwitchObserver =
    std::function<void(const RoutingEngine&, const SwitchProposal&)>;

// Rounds of gossip followed by evaluation of every (node, flow) pair in a
// shuffled order, until a full round accepts nothing.
QuiescenceReport run_to_quiescence(RoutingEngine& engine,
                                   const QuiescenceOptions& options,
                                   const SwitchObserver& observer = {});

}  // namespace relaymesh
