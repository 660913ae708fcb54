#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relaymesh/model.hpp"

namespace relaymesh {

class ScenarioError : public ModelError {
 public:
  using ModelError::ModelError;
};

// Per-packet delay on a link: base + N(0, jitter) truncated at zero, plus a
// uniform spike in [0, spike_max] drawn with probability spike_prob.
struct LinkJitterModel {
  Millis base_ms = 0.0;
  Millis jitter_ms = 0.0;
  Millis spike_max_ms = 0.0;
  double spike_prob = 0.0;
};

struct RegionLink {
  Kbps capacity_kbps = 0;
  LinkJitterModel delay;
};

struct Participant {
  SurrogateId id;
  std::string name;
  std::string region;
  Millis uplink_ms = 0.0;
  Millis downlink_ms = 0.0;
  Millis clock_skew_ms = 0.0;  // local clock minus true time
  double vm_speed = 1.0;
  bool initial = true;
  Kbps default_accept_kbps = 128;
  std::map<std::string, Kbps> accept_kbps;  // by sender name
};

enum class EventType { kJoin, kLeave, kCrash, kJitter, kCapacity, kLatency };

const char* to_string(EventType type);

struct ScenarioEvent {
  Millis at_ms = 0.0;
  EventType type = EventType::kJoin;
  std::string participant;              // join, leave, crash
  std::string region_a, region_b;       // link events
  bool symmetric = true;
  std::optional<Millis> jitter_ms;
  std::optional<Millis> spike_max_ms;
  std::optional<double> spike_prob;
  std::optional<Kbps> capacity_kbps;
  std::optional<Millis> latency_ms;
};

struct RoutingTimers {
  Millis gossip_period_ms = 500.0;
  Millis eval_period_ms = 1000.0;     // mean; each node draws its own phase
  Millis latency_report_ms = 5.0;     // re-announce measured latency past this
  double latency_ewma = 0.05;
};

struct Scenario {
  std::string name;
  std::uint64_t seed = 1;
  Millis duration_ms = 60'000.0;
  Millis metrics_tick_ms = 100.0;
  Millis playback_delay_ms = 400.0;
  std::uint32_t frame_rate = 25;
  Kbps source_rate_kbps = 1049;
  std::vector<Kbps> ladder = kDefaultLadderKbps;
  Millis transcode_base_ms = 0.0;
  double transcode_in_coef = 0.0;
  double transcode_out_coef = 0.0;

  std::vector<std::string> regions;
  RegionLink intra_region;
  std::map<std::pair<std::string, std::string>, RegionLink> links;  // directed
  std::vector<Participant> participants;
  std::vector<ScenarioEvent> events;  // time ordered

  RoutingTimers routing;
  Millis heartbeat_period_ms = 1000.0;
  Millis roster_period_ms = 5000.0;
  Millis clock_rtt_slack_ms = 10.0;

  const Participant& participant(const std::string& name) const;
  const Participant& participant(SurrogateId id) const;
  // Link model between two regions; nullptr when they are not connected.
  const RegionLink* region_link(const std::string& a, const std::string& b) const;
  Kbps accept_rate(const Participant& receiver, const Participant& sender) const;
};

Scenario parse_scenario(const std::string& json_text);
Scenario load_scenario(const std::filesystem::path& path);
std::string scenario_to_json(const Scenario& scenario);

// Checks references and ordering; throws ScenarioError on the first problem.
void validate_scenario(const Scenario& scenario);

}  // namespace relaymesh
