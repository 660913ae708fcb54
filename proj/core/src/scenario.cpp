#include "relaymesh/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace relaymesh {

using nlohmann::json;

const char* to_string(EventType type) {
  switch (type) {
    case EventType::kJoin: return "join";
    case EventType::kLeave: return "leave";
    case EventType::kCrash: return "crash";
    case EventType::kJitter: return "jitter";
    case EventType::kCapacity: return "capacity";
    case EventType::kLatency: return "latency";
  }
  return "?";
}

const Participant& Scenario::participant(const std::string& who) const {
  for (const auto& p : participants) {
    if (p.name == who) return p;
  }
  throw ScenarioError("unknown participant '" + who + "'");
}

const Participant& Scenario::participant(SurrogateId id) const {
  for (const auto& p : participants) {
    if (p.id == id) return p;
  }
  throw ScenarioError("unknown participant id " + to_string(id));
}

const RegionLink* Scenario::region_link(const std::string& a,
                                        const std::string& b) const {
  if (a == b) return &intra_region;
  auto it = links.find({a, b});
  return it == links.end() ? nullptr : &it->second;
}

Kbps Scenario::accept_rate(const Participant& receiver,
                           const Participant& sender) const {
  auto it = receiver.accept_kbps.find(sender.name);
  return it == receiver.accept_kbps.end() ? receiver.default_accept_kbps : it->second;
}

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw ScenarioError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw ScenarioError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) {
    throw ScenarioError(std::string("missing '") + key + "' in " + where);
  }
  return get_or<T>(obj, key, T{});
}

LinkJitterModel parse_delay(const json& j) {
  LinkJitterModel d;
  d.base_ms = get_or<double>(j, "latency_ms", 0.0);
  d.jitter_ms = get_or<double>(j, "jitter_ms", 0.0);
  d.spike_max_ms = get_or<double>(j, "spike_max_ms", 0.0);
  d.spike_prob = get_or<double>(j, "spike_prob", d.spike_max_ms > 0.0 ? 1.0 : 0.0);
  return d;
}

EventType parse_event_type(const std::string& s) {
  static const std::map<std::string, EventType> kinds = {
      {"join", EventType::kJoin},         {"leave", EventType::kLeave},
      {"crash", EventType::kCrash},       {"jitter", EventType::kJitter},
      {"capacity", EventType::kCapacity}, {"latency", EventType::kLatency}};
  auto it = kinds.find(s);
  if (it == kinds.end()) throw ScenarioError("unknown event type '" + s + "'");
  return it->second;
}

Scenario parse_root(const json& root) {
  check_keys(root,
             {"name", "seed", "duration_s", "metrics_tick_ms", "playback_delay_ms",
              "frame_rate", "source_rate_kbps", "ladder_kbps", "transcode", "regions",
              "intra_region", "links", "participants", "events", "routing", "session"},
             "scenario");

  Scenario s;
  s.name = get_or<std::string>(root, "name", "unnamed");
  s.seed = get_or<std::uint64_t>(root, "seed", 1);
  s.duration_ms = 1000.0 * get_or<double>(root, "duration_s", 60.0);
  s.metrics_tick_ms = get_or<double>(root, "metrics_tick_ms", 100.0);
  s.playback_delay_ms = get_or<double>(root, "playback_delay_ms", 400.0);
  s.frame_rate = get_or<std::uint32_t>(root, "frame_rate", 25);
  s.source_rate_kbps = get_or<Kbps>(root, "source_rate_kbps", 1049);
  s.ladder = get_or<std::vector<Kbps>>(root, "ladder_kbps", kDefaultLadderKbps);

  if (root.contains("transcode")) {
    const auto& t = root["transcode"];
    check_keys(t, {"base_ms", "in_coef_ms_per_kbps", "out_coef_ms_per_kbps"},
               "transcode");
    s.transcode_base_ms = get_or<double>(t, "base_ms", 0.0);
    s.transcode_in_coef = get_or<double>(t, "in_coef_ms_per_kbps", 0.0);
    s.transcode_out_coef = get_or<double>(t, "out_coef_ms_per_kbps", 0.0);
  }

  s.regions = require<std::vector<std::string>>(root, "regions", "scenario");
  if (root.contains("intra_region")) {
    const auto& j = root["intra_region"];
    check_keys(j, {"latency_ms", "jitter_ms", "spike_max_ms", "spike_prob",
                   "capacity_kbps"},
               "intra_region");
    s.intra_region.capacity_kbps = get_or<Kbps>(j, "capacity_kbps", 100'000);
    s.intra_region.delay = parse_delay(j);
  } else {
    s.intra_region.capacity_kbps = 100'000;
    s.intra_region.delay.base_ms = 1.0;
  }

  for (const auto& j : get_or<json>(root, "links", json::array())) {
    check_keys(j, {"a", "b", "latency_ms", "jitter_ms", "spike_max_ms", "spike_prob",
                   "capacity_kbps", "symmetric"},
               "link");
    RegionLink link;
    link.capacity_kbps = require<Kbps>(j, "capacity_kbps", "link");
    link.delay = parse_delay(j);
    const auto a = require<std::string>(j, "a", "link");
    const auto b = require<std::string>(j, "b", "link");
    s.links[{a, b}] = link;
    if (get_or<bool>(j, "symmetric", true)) s.links[{b, a}] = link;
  }

  std::uint32_t next_id = 1;
  for (const auto& j : require<json>(root, "participants", "scenario")) {
    check_keys(j, {"name", "id", "region", "uplink_ms", "downlink_ms", "clock_skew_ms",
                   "vm_speed", "initial", "accept_kbps"},
               "participant");
    Participant p;
    p.name = require<std::string>(j, "name", "participant");
    p.id = SurrogateId{get_or<std::uint32_t>(j, "id", next_id)};
    next_id = p.id.value + 1;
    p.region = require<std::string>(j, "region", "participant " + p.name);
    p.uplink_ms = get_or<double>(j, "uplink_ms", 0.0);
    p.downlink_ms = get_or<double>(j, "downlink_ms", 0.0);
    p.clock_skew_ms = get_or<double>(j, "clock_skew_ms", 0.0);
    p.vm_speed = get_or<double>(j, "vm_speed", 1.0);
    p.initial = get_or<bool>(j, "initial", true);
    const json accept = get_or<json>(j, "accept_kbps", json::object());
    if (!accept.is_object()) throw ScenarioError("accept_kbps of " + p.name + " must be an object");
    for (const auto& [k, v] : accept.items()) {
      if (k == "default") {
        p.default_accept_kbps = get_or<Kbps>(accept, "default", 0);
      } else {
        p.accept_kbps[k] = get_or<Kbps>(accept, k.c_str(), 0);
      }
    }
    s.participants.push_back(std::move(p));
  }

  for (const auto& j : get_or<json>(root, "events", json::array())) {
    check_keys(j, {"at_s", "type", "participant", "a", "b", "symmetric", "jitter_ms",
                   "spike_max_ms", "spike_prob", "capacity_kbps", "latency_ms"},
               "event");
    ScenarioEvent e;
    e.at_ms = 1000.0 * require<double>(j, "at_s", "event");
    e.type = parse_event_type(require<std::string>(j, "type", "event"));
    e.participant = get_or<std::string>(j, "participant", "");
    e.region_a = get_or<std::string>(j, "a", "");
    e.region_b = get_or<std::string>(j, "b", "");
    e.symmetric = get_or<bool>(j, "symmetric", true);
    if (j.contains("jitter_ms")) e.jitter_ms = get_or<double>(j, "jitter_ms", 0.0);
    if (j.contains("spike_max_ms")) e.spike_max_ms = get_or<double>(j, "spike_max_ms", 0.0);
    if (j.contains("spike_prob")) e.spike_prob = get_or<double>(j, "spike_prob", 0.0);
    if (j.contains("capacity_kbps")) e.capacity_kbps = get_or<Kbps>(j, "capacity_kbps", 0);
    if (j.contains("latency_ms")) e.latency_ms = get_or<double>(j, "latency_ms", 0.0);
    s.events.push_back(std::move(e));
  }

  if (root.contains("routing")) {
    const auto& j = root["routing"];
    check_keys(j, {"gossip_period_ms", "eval_period_ms", "latency_report_ms",
                   "latency_ewma"},
               "routing");
    s.routing.gossip_period_ms = get_or<double>(j, "gossip_period_ms", 500.0);
    s.routing.eval_period_ms = get_or<double>(j, "eval_period_ms", 1000.0);
    s.routing.latency_report_ms = get_or<double>(j, "latency_report_ms", 5.0);
    s.routing.latency_ewma = get_or<double>(j, "latency_ewma", 0.05);
  }
  if (root.contains("session")) {
    const auto& j = root["session"];
    check_keys(j, {"heartbeat_period_ms", "roster_period_ms", "clock_rtt_slack_ms"},
               "session");
    s.heartbeat_period_ms = get_or<double>(j, "heartbeat_period_ms", 1000.0);
    s.roster_period_ms = get_or<double>(j, "roster_period_ms", 5000.0);
    s.clock_rtt_slack_ms = get_or<double>(j, "clock_rtt_slack_ms", 10.0);
  }

  return s;
}

}  // namespace

Scenario parse_scenario(const std::string& text) {
  Scenario s;
  try {
    s = parse_root(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ScenarioError(std::string("scenario is not valid JSON: ") + e.what());
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("malformed scenario: ") + e.what());
  }
  validate_scenario(s);
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

void validate_scenario(const Scenario& s) {
  auto fail = [](const std::string& what) { throw ScenarioError(what); };
  if (s.duration_ms <= 0.0) fail("duration must be positive");
  if (s.metrics_tick_ms <= 0.0) fail("metrics tick must be positive");
  if (s.frame_rate == 0 || s.frame_rate > 255) fail("frame rate must be 1..255");
  if (s.source_rate_kbps <= 0 || s.source_rate_kbps > 65535) {
    fail("source rate must be 1..65535 kbps");
  }
  if (s.ladder.empty()) fail("rate ladder is empty");
  if (!std::is_sorted(s.ladder.begin(), s.ladder.end()) || s.ladder.front() <= 0) {
    fail("rate ladder must be positive and ascending");
  }
  if (s.routing.gossip_period_ms <= 0.0 || s.routing.eval_period_ms <= 0.0) {
    fail("routing timers must be positive");
  }
  if (s.heartbeat_period_ms <= 0.0 || s.roster_period_ms <= 0.0) {
    fail("session timers must be positive");
  }

  const std::set<std::string> regions(s.regions.begin(), s.regions.end());
  if (regions.size() != s.regions.size()) fail("duplicate region");
  for (const auto& [ab, link] : s.links) {
    if (!regions.contains(ab.first) || !regions.contains(ab.second)) {
      fail("link " + ab.first + "-" + ab.second + " references an unknown region");
    }
    if (ab.first == ab.second) fail("inter-region link from a region to itself");
    if (link.capacity_kbps <= 0) fail("link capacity must be positive");
    if (link.delay.base_ms < 0.0 || link.delay.jitter_ms < 0.0) {
      fail("link latency and jitter must be non-negative");
    }
  }

  if (s.participants.empty()) fail("no participants");
  std::set<std::string> names;
  std::set<SurrogateId> ids;
  for (const auto& p : s.participants) {
    if (!names.insert(p.name).second) fail("duplicate participant " + p.name);
    if (!ids.insert(p.id).second) fail("duplicate participant id " + to_string(p.id));
    if (!regions.contains(p.region)) fail(p.name + " is in unknown region " + p.region);
    if (p.vm_speed <= 0.0) fail(p.name + " has a non-positive VM speed");
    if (p.uplink_ms < 0.0 || p.downlink_ms < 0.0) fail(p.name + " has negative last-mile delay");
    if (p.default_accept_kbps <= 0) fail(p.name + " has a non-positive default accept rate");
  }
  for (const auto& p : s.participants) {
    for (const auto& [sender, rate] : p.accept_kbps) {
      if (!names.contains(sender)) fail(p.name + " sets a rate for unknown " + sender);
      if (rate <= 0) fail(p.name + " has a non-positive accept rate");
    }
  }

  Millis last = 0.0;
  for (const auto& e : s.events) {
    const std::string where = std::string(to_string(e.type)) + " event";
    if (e.at_ms < last) fail("events are not time ordered");
    if (e.at_ms < 0.0 || e.at_ms > s.duration_ms) fail(where + " outside the run");
    last = e.at_ms;
    switch (e.type) {
      case EventType::kJoin:
      case EventType::kLeave:
      case EventType::kCrash:
        if (!names.contains(e.participant)) {
          fail(where + " references unknown participant '" + e.participant + "'");
        }
        break;
      case EventType::kJitter:
      case EventType::kCapacity:
      case EventType::kLatency:
        if (!regions.contains(e.region_a) || !regions.contains(e.region_b)) {
          fail(where + " references an unknown region");
        }
        if (s.region_link(e.region_a, e.region_b) == nullptr) {
          fail(where + " on unlinked regions " + e.region_a + "-" + e.region_b);
        }
        if (e.type == EventType::kCapacity && (!e.capacity_kbps || *e.capacity_kbps <= 0)) {
          fail(where + " needs a positive capacity_kbps");
        }
        if (e.type == EventType::kLatency && (!e.latency_ms || *e.latency_ms < 0.0)) {
          fail(where + " needs a non-negative latency_ms");
        }
        break;
    }
  }
}

std::string scenario_to_json(const Scenario& s) {
  json root;
  root["name"] = s.name;
  root["seed"] = s.seed;
  root["duration_s"] = s.duration_ms / 1000.0;
  root["metrics_tick_ms"] = s.metrics_tick_ms;
  root["playback_delay_ms"] = s.playback_delay_ms;
  root["frame_rate"] = s.frame_rate;
  root["source_rate_kbps"] = s.source_rate_kbps;
  root["ladder_kbps"] = s.ladder;
  root["transcode"] = {{"base_ms", s.transcode_base_ms},
                       {"in_coef_ms_per_kbps", s.transcode_in_coef},
                       {"out_coef_ms_per_kbps", s.transcode_out_coef}};
  root["regions"] = s.regions;
  auto delay_json = [](const RegionLink& l) {
    return json{{"latency_ms", l.delay.base_ms},
                {"jitter_ms", l.delay.jitter_ms},
                {"spike_max_ms", l.delay.spike_max_ms},
                {"spike_prob", l.delay.spike_prob},
                {"capacity_kbps", l.capacity_kbps}};
  };
  root["intra_region"] = delay_json(s.intra_region);
  root["links"] = json::array();
  for (const auto& [ab, link] : s.links) {
    auto j = delay_json(link);
    j["a"] = ab.first;
    j["b"] = ab.second;
    j["symmetric"] = false;
    root["links"].push_back(j);
  }
  root["participants"] = json::array();
  for (const auto& p : s.participants) {
    json accept = {{"default", p.default_accept_kbps}};
    for (const auto& [k, v] : p.accept_kbps) accept[k] = v;
    root["participants"].push_back({{"name", p.name},
                                    {"id", p.id.value},
                                    {"region", p.region},
                                    {"uplink_ms", p.uplink_ms},
                                    {"downlink_ms", p.downlink_ms},
                                    {"clock_skew_ms", p.clock_skew_ms},
                                    {"vm_speed", p.vm_speed},
                                    {"initial", p.initial},
                                    {"accept_kbps", accept}});
  }
  root["events"] = json::array();
  for (const auto& e : s.events) {
    json j = {{"at_s", e.at_ms / 1000.0}, {"type", to_string(e.type)}};
    if (!e.participant.empty()) j["participant"] = e.participant;
    if (!e.region_a.empty()) {
      j["a"] = e.region_a;
      j["b"] = e.region_b;
      j["symmetric"] = e.symmetric;
    }
    if (e.jitter_ms) j["jitter_ms"] = *e.jitter_ms;
    if (e.spike_max_ms) j["spike_max_ms"] = *e.spike_max_ms;
    if (e.spike_prob) j["spike_prob"] = *e.spike_prob;
    if (e.capacity_kbps) j["capacity_kbps"] = *e.capacity_kbps;
    if (e.latency_ms) j["latency_ms"] = *e.latency_ms;
    root["events"].push_back(j);
  }
  root["routing"] = {{"gossip_period_ms", s.routing.gossip_period_ms},
                     {"eval_period_ms", s.routing.eval_period_ms},
                     {"latency_report_ms", s.routing.latency_report_ms},
                     {"latency_ewma", s.routing.latency_ewma}};
  root["session"] = {{"heartbeat_period_ms", s.heartbeat_period_ms},
                     {"roster_period_ms", s.roster_period_ms},
                     {"clock_rtt_slack_ms", s.clock_rtt_slack_ms}};
  return root.dump(2);
}

}  // namespace relaymesh
