#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "relaymesh/sim.hpp"

namespace relaymesh {
namespace {

namespace fs = std::filesystem;

Participant person(std::uint32_t id, std::string region, Kbps accept = 256) {
  Participant p;
  p.id = SurrogateId{id};
  p.name = region + "-" + std::to_string(id);
  p.region = std::move(region);
  p.uplink_ms = 30.0;
  p.downlink_ms = 30.0;
  p.default_accept_kbps = accept;
  return p;
}

RegionLink link(Millis latency, Millis jitter = 0.0, Kbps capacity = 20'000) {
  RegionLink l;
  l.capacity_kbps = capacity;
  l.delay.base_ms = latency;
  l.delay.jitter_ms = jitter;
  return l;
}

// Three regions fully meshed with ample capacity.
Scenario triangle(Millis jitter = 0.0) {
  Scenario s;
  s.name = "triangle";
  s.seed = 5;
  s.duration_ms = 8'000.0;
  s.regions = {"x", "y", "z"};
  s.intra_region = link(1.0);
  for (auto [a, b, d] : {std::tuple{"x", "y", 40.0}, {"y", "z", 30.0}, {"x", "z", 50.0}}) {
    s.links[{a, b}] = link(d, jitter);
    s.links[{b, a}] = link(d, jitter);
  }
  s.participants = {person(1, "x", 512), person(2, "y", 256), person(3, "z", 128)};
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("relaymesh_sim_test_" + name);
  fs::remove_all(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Scenario files

constexpr const char* kMinimal = R"({
  "regions": ["a", "b"],
  "links": [{"a": "a", "b": "b", "latency_ms": 20, "capacity_kbps": 5000}],
  "participants": [
    {"name": "p", "region": "a", "accept_kbps": {"default": 256, "q": 768}},
    {"name": "q", "region": "b"}
  ],
  "events": [{"at_s": 2, "type": "jitter", "a": "a", "b": "b", "spike_max_ms": 100}]
})";

TEST(ScenarioFile, ParsesMinimalWithDefaults) {
  const Scenario s = parse_scenario(kMinimal);
  EXPECT_EQ(s.duration_ms, 60'000.0);
  ASSERT_EQ(s.participants.size(), 2u);
  EXPECT_EQ(s.participants[0].id, SurrogateId{1});
  EXPECT_EQ(s.participants[1].id, SurrogateId{2});
  EXPECT_EQ(s.accept_rate(s.participants[0], s.participants[1]), 768);
  EXPECT_EQ(s.accept_rate(s.participants[1], s.participants[0]), 128);
  ASSERT_NE(s.region_link("b", "a"), nullptr);  // symmetric by default
  EXPECT_EQ(s.region_link("b", "a")->delay.base_ms, 20.0);
  ASSERT_EQ(s.events.size(), 1u);
  EXPECT_EQ(*s.events[0].spike_max_ms, 100.0);
}

TEST(ScenarioFile, RoundTripsThroughJson) {
  const Scenario s = parse_scenario(kMinimal);
  const std::string once = scenario_to_json(s);
  EXPECT_EQ(scenario_to_json(parse_scenario(once)), once);
}

TEST(ScenarioFile, RejectsProblems) {
  const auto bad = [](const std::string& text) {
    EXPECT_THROW(parse_scenario(text), ScenarioError) << text;
  };
  bad("{not json");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a"}], "colour": 1})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "nowhere"}]})");
  bad(R"({"regions": ["a"], "participants": []})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a"},
                                              {"name": "p", "region": "a"}]})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a"}],
           "events": [{"at_s": 5, "type": "leave", "participant": "p"},
                      {"at_s": 1, "type": "join", "participant": "p"}]})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a"}],
           "events": [{"at_s": 1, "type": "leave", "participant": "ghost"}]})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a"}],
           "events": [{"at_s": 1, "type": "teleport", "participant": "p"}]})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a",
                                               "accept_kbps": {"ghost": 256}}]})");
  bad(R"({"regions": ["a"], "duration_s": -1, "participants": [{"name": "p", "region": "a"}]})");
  bad(R"({"regions": ["a"], "participants": [{"name": "p", "region": "a", "id": "one"}]})");
}

TEST(ScenarioFile, ShippedScenariosLoad) {
  for (const char* name : {"ten_party", "three_user", "failover", "bottleneck"}) {
    const fs::path path = fs::path(RELAYMESH_SCENARIO_DIR) / (std::string(name) + ".json");
    EXPECT_NO_THROW(load_scenario(path)) << path;
  }
  EXPECT_THROW(load_scenario("/nonexistent/scenario.json"), ScenarioError);
}

// ---------------------------------------------------------------------------
// Simulation

TEST(Sim, StaticScenarioReachesCapsAndStaysFlat) {
  const auto log = sim::run(triangle());
  EXPECT_TRUE(log.timeouts.empty());
  const Scenario s = triangle();
  for (const auto& r : log.rates) {
    if (r.time_ms < 3'000.0) continue;
    const Kbps cap = s.accept_rate(s.participant(r.receiver), s.participant(r.flow));
    EXPECT_EQ(r.rate_kbps, cap) << to_string(r.flow) << "->" << to_string(r.receiver)
                                << " at " << r.time_ms;
  }
}

TEST(Sim, EveryFrameAccountedFor) {
  Scenario s = triangle(8.0);
  ScenarioEvent spike;
  spike.at_ms = 3'000.0;
  spike.type = EventType::kJitter;
  spike.region_a = "x";
  spike.region_b = "y";
  spike.spike_max_ms = 300.0;
  s.events.push_back(spike);
  const auto log = sim::run(s);
  ASSERT_EQ(log.frames.size(), 6u);
  for (const auto& [key, t] : log.frames) {
    EXPECT_GT(t.generated, 150u);
    EXPECT_EQ(t.generated, t.on_time + t.late + t.lost + t.in_flight);
  }
}

TEST(Sim, SameSeedSameBytes) {
  Scenario s = triangle(5.0);
  const auto a = scratch_dir("det_a");
  const auto b = scratch_dir("det_b");
  sim::export_metrics(sim::run(s), a);
  sim::export_metrics(sim::run(s), b);
  for (const auto& entry : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename()))
        << entry.path().filename();
  }
  sim::RunOptions other;
  other.seed = 99;
  const auto c = scratch_dir("det_c");
  sim::export_metrics(sim::run(s, other), c);
  EXPECT_NE(slurp(a / "buffer.csv"), slurp(c / "buffer.csv"));
}

TEST(Sim, EmptyLogWritesHeadersOnly) {
  const auto dir = scratch_dir("empty");
  sim::export_metrics(sim::MetricsLog{}, dir);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    ++files;
    const std::string text = slurp(entry.path());
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1) << entry.path();
  }
  EXPECT_EQ(files, 8u);
  EXPECT_EQ(slurp(dir / "flow_rates.csv"), "time_ms,flow,receiver,rate_kbps\n");
  EXPECT_EQ(slurp(dir / "buffer.csv"),
            "time_ms,flow,receiver,occupancy_ms,sigma_hat_ms,bound_L_ms\n");
}

TEST(Sim, UnwritableOutputIsAnError) {
  EXPECT_THROW(sim::export_metrics(sim::MetricsLog{}, "/proc/relaymesh/out"),
               sim::SimulationError);
}

TEST(Sim, EveryoneGoneBeforeEndIsDeadlock) {
  Scenario s = triangle();
  s.participants.resize(1);
  ScenarioEvent leave;
  leave.at_ms = 1'000.0;
  leave.type = EventType::kLeave;
  leave.participant = s.participants[0].name;
  s.events.push_back(leave);
  EXPECT_THROW(sim::run(s), sim::ScheduleDeadlock);
}

TEST(Sim, UnreachableBoundIsInfeasible) {
  Scenario s = triangle();
  s.playback_delay_ms = 80.0;  // 20 ms left after the last miles
  EXPECT_THROW(sim::run(s), sim::InfeasibleSession);
}

TEST(Sim, LateJoinerReceivesMedia) {
  Scenario s = triangle();
  s.participants[2].initial = false;
  ScenarioEvent join;
  join.at_ms = 2'000.0;
  join.type = EventType::kJoin;
  join.participant = s.participants[2].name;
  s.events.push_back(join);
  const auto log = sim::run(s);
  const auto& t = log.frames.at({SurrogateId{1}, SurrogateId{3}});
  EXPECT_GT(t.on_time, 100u);
  EXPECT_LT(t.generated, 200u);  // counted from the join only
  bool joined = false;
  for (const auto& r : log.session) joined |= r.event == "joined" && r.who == SurrogateId{3};
  EXPECT_TRUE(joined);
}

TEST(Sim, InitiatorLeaveHandsOver) {
  Scenario s = triangle();
  ScenarioEvent leave;
  leave.at_ms = 3'000.0;
  leave.type = EventType::kLeave;
  leave.participant = s.participants[0].name;
  s.events.push_back(leave);
  const auto log = sim::run(s);
  bool failover = false;
  for (const auto& r : log.session) {
    if (r.event == "failover") {
      failover = true;
      EXPECT_EQ(r.initiator, SurrogateId{2});
      EXPECT_EQ(r.epoch, 1u);
    }
  }
  EXPECT_TRUE(failover);
  EXPECT_GT(log.frames.at({SurrogateId{2}, SurrogateId{3}}).on_time, 150u);
}

TEST(Sim, CrashedInitiatorReplacedBySurvivors) {
  Scenario s = triangle();
  s.duration_ms = 15'000.0;
  ScenarioEvent crash;
  crash.at_ms = 4'000.0;
  crash.type = EventType::kCrash;
  crash.participant = s.participants[0].name;
  s.events.push_back(crash);
  const auto log = sim::run(s);
  std::optional<Millis> converged;
  for (const auto& r : log.session) {
    if (r.event == "converged" && r.time_ms > crash.at_ms) {
      converged = r.time_ms;
      EXPECT_EQ(r.who, SurrogateId{2});
      EXPECT_EQ(r.epoch, 1u);
      break;
    }
  }
  ASSERT_TRUE(converged);
  EXPECT_LE(*converged - crash.at_ms, 2.0 * s.roster_period_ms);
}

TEST(Sim, ClockSkewCalibrated) {
  Scenario s = triangle();
  s.participants[1].clock_skew_ms = 50.0;
  s.participants[1].region = "x";  // symmetric intra-region path to the initiator
  const auto log = sim::run(s);
  ASSERT_FALSE(log.clocks.empty());
  std::optional<Millis> last;
  for (const auto& c : log.clocks) {
    if (c.member == SurrogateId{2}) last = c.offset_ms;
  }
  ASSERT_TRUE(last);
  EXPECT_NEAR(*last, -50.0, 1.0);
}

TEST(Sim, DurationOverride) {
  sim::RunOptions o;
  o.duration_ms = 2'000.0;
  const auto log = sim::run(triangle(), o);
  EXPECT_EQ(log.end_ms, 2'000.0);
  for (const auto& r : log.rates) EXPECT_LE(r.time_ms, 2'000.0);
}

TEST(Compare, RejectsLargeSessions) {
  Scenario s = triangle();
  s.participants.push_back(person(4, "x"));
  EXPECT_THROW(sim::compare_unicast(s), ScenarioError);
}

TEST(Compare, NoJitterBothMeetDeadlines) {
  const auto logs = sim::compare_unicast(triangle());
  const auto sum = sim::summarize(logs);
  EXPECT_EQ(sum.overlay_timeouts, 0u);
  EXPECT_EQ(sum.unicast_timeouts, 0u);
  EXPECT_EQ(logs.unicast.mode, sim::Mode::kUnicast);
  for (const auto& [key, t] : logs.unicast.frames) EXPECT_EQ(t.late + t.lost, 0u);
}

}  // namespace
}  // namespace relaymesh
