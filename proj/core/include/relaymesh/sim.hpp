#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "relaymesh/instances.hpp"
#include "relaymesh/routing.hpp"
#include "relaymesh/scenario.hpp"

namespace relaymesh::sim {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Nothing left to schedule before the run was due to end.
class ScheduleDeadlock : public SimulationError {
 public:
  using SimulationError::SimulationError;
};

class InfeasibleSession : public SimulationError {
 public:
  InfeasibleSession(FeasibilityResult result);
  const FeasibilityResult& result() const { return result_; }

 private:
  FeasibilityResult result_;
};

enum class Mode {
  kOverlay,  // surrogate trees driven by the routing engine
  kUnicast,  // every source sends straight to every receiver
};

const char* to_string(Mode mode);

struct RunOptions {
  Mode mode = Mode::kOverlay;
  std::optional<std::uint64_t> seed;        // overrides the scenario seed
  std::optional<Millis> duration_ms;        // overrides the scenario duration
};

struct RateSample {
  Millis time_ms;
  FlowId flow;
  SurrogateId receiver;
  Kbps rate_kbps;
};

struct BufferSample {
  Millis time_ms;
  FlowId flow;
  SurrogateId receiver;
  Millis occupancy_ms;
  Millis sigma_hat_ms;
  Millis bound_ms;
};

// Mean mouth-to-screen network latency of frames completed during one tick.
struct LatencySample {
  Millis time_ms;
  FlowId flow;
  SurrogateId receiver;
  Millis latency_ms;
  std::uint32_t frames;
};

struct SwitchRecord {
  Millis time_ms;
  SwitchProposal proposal;
};

struct TimeoutRecord {
  Millis time_ms;
  FlowId flow;
  SurrogateId receiver;
  std::uint32_t frame_seq;
  Millis past_deadline_ms;
};

struct SessionRecord {
  Millis time_ms;
  std::string event;
  SurrogateId who;
  std::uint64_t epoch;
  SurrogateId initiator;
};

// A member's smoothed clock offset to the initiator after an exchange.
struct ClockSample {
  Millis time_ms;
  SurrogateId member;
  SurrogateId initiator;
  Millis offset_ms;  // initiator clock minus member clock
};

// Per (flow, receiver) frame accounting at the end of the run.
// generated = on_time + late + lost + in_flight.
struct FrameTally {
  std::uint64_t generated = 0;
  std::uint64_t on_time = 0;
  std::uint64_t late = 0;       // concealed, at least one fragment past deadline
  std::uint64_t lost = 0;       // concealed otherwise
  std::uint64_t in_flight = 0;  // newer than the last released frame
  std::uint64_t latency_frames = 0;
  double latency_mean_ms = 0.0;
  double latency_m2 = 0.0;

  void add_latency(double x);
  double latency_variance() const;
};

struct MetricsLog {
  std::string scenario;
  std::uint64_t seed = 0;
  Mode mode = Mode::kOverlay;
  Millis end_ms = 0.0;
  std::uint64_t events_processed = 0;

  std::vector<RateSample> rates;
  std::vector<BufferSample> buffers;
  std::vector<LatencySample> latencies;
  std::vector<SwitchRecord> switches;
  std::vector<TimeoutRecord> timeouts;
  std::vector<SessionRecord> session;
  std::vector<ClockSample> clocks;
  std::map<FlowReceiver, FrameTally> frames;
};

MetricsLog run(const Scenario& scenario, const RunOptions& options = {});

// Routing problem over `members` using base link latencies and bounds
// D - uplink - downlink; the initial participants when `members` is empty.
RoutingInstance routing_instance(const Scenario& scenario,
                                 std::vector<SurrogateId> members = {});

struct PairedLogs {
  MetricsLog overlay;
  MetricsLog unicast;
};

struct ComparisonSummary {
  double overlay_latency_variance = 0.0;  // mean over (flow, receiver) pairs
  double unicast_latency_variance = 0.0;
  std::uint64_t overlay_timeouts = 0;
  std::uint64_t unicast_timeouts = 0;
};

inline constexpr std::size_t kMaxUnicastParticipants = 3;

// Same scenario and seed through the overlay and through direct paths.
PairedLogs compare_unicast(const Scenario& scenario, const RunOptions& options = {});
ComparisonSummary summarize(const PairedLogs& logs);
double mean_latency_variance(const MetricsLog& log);

// Writes flow_rates, buffer, latency, switches, timeouts, session, clock and frames
// CSV files into `dir`, creating it if needed.
void export_metrics(const MetricsLog& log, const std::filesystem::path& dir);

}  // namespace relaymesh::sim
