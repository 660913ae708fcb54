#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace relaymesh {

using Kbps = std::int64_t;
using Millis = double;

inline constexpr Millis kUnbounded = std::numeric_limits<Millis>::infinity();

// Identifies a surrogate and, implicitly, the mobile user it serves.
struct SurrogateId {
  std::uint32_t value = 0;

  friend constexpr auto operator<=>(SurrogateId, SurrogateId) = default;
};

std::string to_string(SurrogateId id);

using FlowId = SurrogateId;
using DirectedLink = std::pair<SurrogateId, SurrogateId>;
using FlowReceiver = std::pair<FlowId, SurrogateId>;

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Link {
  Kbps capacity_kbps = 0;
  Millis latency_ms = 0.0;
};

// Last-mile view of one surrogate's mobile user.
struct LastMile {
  Millis uplink_delay_ms = 0.0;
  Millis downlink_delay_ms = 0.0;
  Kbps source_rate_kbps = 0;
  // Maximum acceptable rate of each flow at this user, keyed by flow.
  std::map<FlowId, Kbps> accept_rate_kbps;
};

class TopologySnapshot {
 public:
  void add_surrogate(SurrogateId id, LastMile last_mile = {});
  void remove_surrogate(SurrogateId id);
  void set_link(SurrogateId from, SurrogateId to, Link link);
  void remove_link(SurrogateId from, SurrogateId to);

  const std::vector<SurrogateId>& surrogates() const { return surrogates_; }
  bool contains(SurrogateId id) const;
  const std::map<DirectedLink, Link>& links() const { return links_; }
  const Link* link(SurrogateId from, SurrogateId to) const;
  Link& mutable_link(SurrogateId from, SurrogateId to);

  const LastMile& last_mile(SurrogateId id) const;
  LastMile& mutable_last_mile(SurrogateId id);

  // R^(m) at the source user.
  Kbps source_rate(FlowId flow) const;
  // R^(m) at receiver n; zero when the receiver declared no cap for the flow.
  Kbps accept_rate(FlowId flow, SurrogateId receiver) const;

  std::vector<SurrogateId> out_neighbors(SurrogateId id) const;
  std::vector<SurrogateId> in_neighbors(SurrogateId id) const;

 private:
  std::vector<SurrogateId> surrogates_;  // sorted
  std::map<DirectedLink, Link> links_;
  std::map<SurrogateId, LastMile> last_mile_;
};

// Affine transcoding latency scaled by the VM speed of each surrogate.
struct TranscodeModel {
  Millis base_ms = 0.0;
  double in_coef_ms_per_kbps = 0.0;
  double out_coef_ms_per_kbps = 0.0;
  std::map<SurrogateId, double> speed_factor;  // missing entries mean 1.0

  double speed(SurrogateId id) const;
};

// phi_n(r1, r2): zero unless the stream is down-sampled (r1 > r2).
Millis transcode_latency(const TranscodeModel& model, SurrogateId surrogate,
                         Kbps r1, Kbps r2);

class RateLadder {
 public:
  RateLadder();
  explicit RateLadder(std::vector<Kbps> rates_kbps);

  const std::vector<Kbps>& rates() const { return rates_; }
  Kbps min() const { return rates_.front(); }
  Kbps max() const { return rates_.back(); }
  // Largest ladder rate not above `rate`, or 0 when below the minimum.
  Kbps floor(double rate) const;
  bool contains(Kbps rate) const;

 private:
  std::vector<Kbps> rates_;
};

inline const std::vector<Kbps> kDefaultLadderKbps = {128, 256, 512, 768, 1049};

// ln(r / r_max); -inf for an absent flow.
double utility(Kbps rate, Kbps max_rate);

class DelayBounds {
 public:
  void set(FlowId flow, SurrogateId receiver, Millis bound_ms);
  // Unset pairs are unbounded.
  Millis get(FlowId flow, SurrogateId receiver) const;
  const std::map<FlowReceiver, Millis>& entries() const { return bounds_; }

  static DelayBounds uniform(const TopologySnapshot& topo, Millis bound_ms);

 private:
  std::map<FlowReceiver, Millis> bounds_;
};

// Per-flow routing tree. Each non-root member stores its upstream surrogate
// and the rate of flow m on the edge entering it; edge (parent[n], n) carries
// edge_rate[n].
struct DisseminationTree {
  FlowId flow;
  std::map<SurrogateId, SurrogateId> parent;
  std::map<SurrogateId, Kbps> edge_rate;
  std::map<SurrogateId, Millis> path_delay;  // omega, root at 0

  bool contains(SurrogateId id) const {
    return id == flow || parent.contains(id);
  }
  std::vector<SurrogateId> members() const;
  std::vector<SurrogateId> children(SurrogateId id) const;
  // Members of the subtree rooted at `id`, `id` first, in BFS order.
  std::vector<SurrogateId> subtree(SurrogateId id) const;
  // Root first, `id` last.
  std::vector<SurrogateId> path_to(SurrogateId id) const;
  // Rate arriving at `id`; the source rate is supplied for the root.
  Kbps rate_into(SurrogateId id, Kbps source_rate) const;
  bool is_acyclic() const;
};

struct RateSolution {
  std::map<FlowId, DisseminationTree> trees;
  std::map<FlowReceiver, Kbps> end_rates;
};

// r^(m)_n as seen by the receiver: its in-rate capped by its acceptable rate.
Kbps end_rate(const TopologySnapshot& topo, const DisseminationTree& tree,
              SurrogateId receiver);
void derive_end_rates(const TopologySnapshot& topo, RateSolution& solution);

// Sum of ln(r / R) over all (flow, receiver) pairs.
double aggregate_utility(const TopologySnapshot& topo,
                         const RateSolution& solution);

enum class Constraint {
  kSinglePath,        // flow conservation, one path per unicast flow
  kUnicastWithinMulticast,
  kLinkCapacity,
  kEndToEndDelay,
  kSourceRate,
  kAcceptRate,
  kRateLadder,
};

const char* to_string(Constraint c);

struct Violation {
  Constraint constraint;
  FlowId flow;
  SurrogateId receiver;  // or link tail for capacity violations
  SurrogateId other;     // link head for capacity violations
  double observed = 0.0;
  double limit = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<std::string> structural_errors;
  std::vector<Violation> violations;

  bool valid() const { return structural_errors.empty() && violations.empty(); }
  std::string summary() const;
};

// End-to-end delay of the unicast path m -> n: link delays, transcoding at
// intermediate surrogates, and the final transcode to the receiver's rate.
Millis end_to_end_delay(const TopologySnapshot& topo,
                        const TranscodeModel& model,
                        const DisseminationTree& tree, SurrogateId receiver);

ValidationReport validate_solution(const TopologySnapshot& topo,
                                   const TranscodeModel& model,
                                   const RateSolution& solution,
                                   const DelayBounds& bounds,
                                   const RateLadder* ladder = nullptr);

}  // namespace relaymesh
