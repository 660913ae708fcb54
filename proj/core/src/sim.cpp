#include "relaymesh/sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <queue>
#include <set>
#include <variant>

#include "relaymesh/jitter.hpp"
#include "relaymesh/rng.hpp"
#include "relaymesh/session.hpp"
#include "relaymesh/wire.hpp"

namespace relaymesh::sim {

namespace {

std::string describe(const FeasibilityResult& r) {
  std::string out = "infeasible session: " + std::to_string(r.witnesses.size()) +
                    " flow/receiver pair(s) cannot meet their delay bound";
  if (!r.witnesses.empty()) {
    const auto& w = r.witnesses.front();
    out += "; flow " + to_string(w.flow) + " at " + to_string(w.receiver) +
           " needs " + std::to_string(w.shortest_delay) + " ms, bound " +
           std::to_string(w.bound) + " ms";
  }
  return out;
}

}  // namespace

InfeasibleSession::InfeasibleSession(FeasibilityResult result)
    : SimulationError(describe(result)), result_(std::move(result)) {}

const char* to_string(Mode mode) {
  return mode == Mode::kOverlay ? "overlay" : "unicast";
}

void FrameTally::add_latency(double x) {
  ++latency_frames;
  const double delta = x - latency_mean_ms;
  latency_mean_ms += delta / static_cast<double>(latency_frames);
  latency_m2 += delta * (x - latency_mean_ms);
}

double FrameTally::latency_variance() const {
  return latency_frames < 2 ? 0.0 : latency_m2 / static_cast<double>(latency_frames - 1);
}

namespace {

constexpr std::uint8_t kCodecTag = 1;
constexpr std::uint32_t kAssemblyHorizon = 64;  // frames kept per flow at a node

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Events

struct PacketArrival {
  SurrogateId to, from;
  FlowId flow;
  std::uint32_t frame_seq;
  std::uint16_t index, count;
  Millis origin_ms;  // true time the frame reached its source surrogate
  Millis sent_ms;
  std::array<std::uint8_t, wire::kHeaderSize> header;
};
struct FrameTimer { SurrogateId source; std::uint32_t gen; };
struct TranscodeDone {
  SurrogateId at;
  FlowId flow;
  std::uint32_t frame_seq;
  Kbps out_rate;
  std::uint32_t ts_wire;
  Millis origin_ms;
  std::vector<SurrogateId> targets;
  bool to_self;
};
struct HeartbeatTimer { SurrogateId node; std::uint32_t gen; };
struct HeartbeatMsg { SurrogateId from, to; Millis t1; };
struct AckMsg { SurrogateId from, to; Millis t1, t2, t3; };
struct RosterMsg { SurrogateId to; Roster roster; };
struct EvalTimer { SurrogateId node; std::uint32_t gen; };
struct GossipTimer {};
struct PlayoutTimer {};
struct MetricsTimer {};
struct ScriptTimer { std::size_t index; };

using Payload = std::variant<PacketArrival, FrameTimer, TranscodeDone, HeartbeatTimer,
                             HeartbeatMsg, AckMsg, RosterMsg, EvalTimer, GossipTimer,
                             PlayoutTimer, MetricsTimer, ScriptTimer>;

struct Event {
  Millis time;
  std::uint64_t seq;
  Payload payload;
};

struct Later {
  bool operator()(const Event& a, const Event& b) const {
    return a.time != b.time ? a.time > b.time : a.seq > b.seq;
  }
};

// ---------------------------------------------------------------------------
// Actor state

struct Assembly {
  Kbps rate = 0;
  std::uint16_t count = 0;
  std::vector<bool> have;
  std::uint16_t received = 0;
  std::uint32_t ts_wire = 0;
  Millis origin_ms = 0.0;
  bool done = false;
};

enum class Status { kPending, kActive, kGone, kCrashed };

struct Actor {
  const Participant* who = nullptr;
  Status status = Status::kPending;
  std::uint32_t gen = 0;
  std::optional<SessionState> state;  // held by the initiator
  std::optional<MemberView> view;     // held by everyone else
  std::uint32_t next_frame = 0;
  std::map<FlowId, std::uint8_t> wire_seq;
  std::map<FlowId, std::map<std::uint32_t, Assembly>> assembly;

  bool active() const { return status == Status::kActive; }
};

struct PairState {
  PairState(DelayBudget budget, Millis frame_interval_ms)
      : buffer(budget, {.capacity_ms = 400.0, .frame_interval_ms = frame_interval_ms}),
        tracker(budget) {}

  JitterBuffer buffer;
  DelayVarianceEstimator sigma;
  BoundTracker tracker;
  bool active = true;
  std::uint32_t first_frame = 0;
  std::optional<std::uint32_t> end_frame;  // set when the pair stops
  std::optional<std::uint32_t> first_released;
  std::uint64_t released = 0;
  std::uint64_t on_time = 0;
  std::vector<std::uint32_t> concealed;
  std::set<std::uint32_t> late_frames;
  double tick_latency_sum = 0.0;
  std::uint32_t tick_frames = 0;
  FrameTally tally;
};

// ---------------------------------------------------------------------------

class Simulation {
 public:
  Simulation(const Scenario& scenario, const RunOptions& options)
      : sc_(scenario),
        mode_(options.mode),
        seed_(options.seed.value_or(scenario.seed)),
        end_ms_(options.duration_ms.value_or(scenario.duration_ms)),
        net_rng_(mix_seed(seed_, 1)),
        sched_rng_(mix_seed(seed_, 2)),
        ladder_(scenario.ladder) {
    session_cfg_.heartbeat_period_ms = sc_.heartbeat_period_ms;
    session_cfg_.roster_period_ms = sc_.roster_period_ms;
    session_cfg_.clock_rtt_slack_ms = sc_.clock_rtt_slack_ms;
    model_.base_ms = sc_.transcode_base_ms;
    model_.in_coef_ms_per_kbps = sc_.transcode_in_coef;
    model_.out_coef_ms_per_kbps = sc_.transcode_out_coef;
    for (const auto& p : sc_.participants) {
      actors_[p.id].who = &p;
      model_.speed_factor[p.id] = p.vm_speed;
    }
    net_ = sc_.links;
    for (const auto& r : sc_.regions) net_[{r, r}] = sc_.intra_region;
    log_.scenario = sc_.name;
    log_.seed = seed_;
    log_.mode = mode_;
  }

  MetricsLog run() {
    start();
    while (!queue_.empty()) {
      if (queue_.top().time > end_ms_) break;
      Event ev = queue_.top();
      queue_.pop();
      now_ = ev.time;
      ++log_.events_processed;
      std::visit([this](auto& p) { handle(p); }, ev.payload);
    }
    if (queue_.empty() && now_ < end_ms_) {
      throw ScheduleDeadlock("nothing left to simulate at " + std::to_string(now_) +
                             " ms of " + std::to_string(end_ms_) + " ms");
    }
    now_ = end_ms_;
    poll_buffers();
    finish();
    return std::move(log_);
  }

 private:
  // ---- scheduling --------------------------------------------------------

  void schedule(Millis at, Payload p) { queue_.push({at, next_seq_++, std::move(p)}); }

  bool anything_pending() const {
    if (next_script_ < sc_.events.size()) return true;
    return std::any_of(actors_.begin(), actors_.end(),
                       [](const auto& kv) { return kv.second.active(); });
  }

  // ---- clocks and network ------------------------------------------------

  Millis local(const Actor& a) const { return now_ + a.who->clock_skew_ms; }

  // Local clock mapped onto the initiator's clock by the calibrated offset.
  Millis initiator_time(const Actor& a) const {
    const Millis offset = a.view ? a.view->clock().offset() : 0.0;
    return local(a) + offset;
  }

  const RegionLink* net_link(SurrogateId from, SurrogateId to) const {
    auto it = net_.find({region(from), region(to)});
    return it == net_.end() ? nullptr : &it->second;
  }

  const std::string& region(SurrogateId id) const { return actors_.at(id).who->region; }

  Millis sample_delay(const RegionLink& l) {
    Millis d = l.delay.base_ms;
    if (l.delay.jitter_ms > 0.0) d = std::max(0.0, d + net_rng_.normal(0.0, l.delay.jitter_ms));
    if (l.delay.spike_max_ms > 0.0 && l.delay.spike_prob > 0.0 &&
        net_rng_.bernoulli(l.delay.spike_prob)) {
      d += net_rng_.uniform(0.0, l.delay.spike_max_ms);
    }
    return d;
  }

  // Control messages use the direct region link, or a fixed detour estimate.
  Millis control_delay(SurrogateId from, SurrogateId to) {
    if (const RegionLink* l = net_link(from, to)) return sample_delay(*l);
    return 2.0 * sc_.intra_region.delay.base_ms + 250.0;
  }

  // ---- startup -----------------------------------------------------------

  void start() {
    std::vector<SurrogateId> initial;
    for (const auto& p : sc_.participants) {
      if (p.initial) initial.push_back(p.id);
    }
    std::sort(initial.begin(), initial.end());

    if (!initial.empty()) {
      if (mode_ == Mode::kOverlay) bootstrap_engine(initial);
      SessionState state(session_cfg_);
      std::vector<std::pair<SurrogateId, std::string>> joiners;
      for (auto id : initial) joiners.emplace_back(id, actors_.at(id).who->name);
      for (auto id : initial) actors_.at(id).status = Status::kActive;
      now_ = 0.0;
      const SurrogateId founder = initial.front();
      for (const auto& e : state.join_batch(joiners, local(actors_.at(founder)))) {
        record_session(e, founder);
      }
      actors_.at(founder).state = std::move(state);
      for (auto id : initial) {
        if (id == founder) continue;
        Actor& a = actors_.at(id);
        a.view.emplace(id, actors_.at(founder).state->roster(), local(a), session_cfg_);
      }
      for (auto s : initial) {
        for (auto r : initial) {
          if (s != r) open_pair(s, r);
        }
      }
      for (auto id : initial) start_timers(actors_.at(id));
    }

    for (std::size_t i = 0; i < sc_.events.size(); ++i) {
      schedule(sc_.events[i].at_ms, ScriptTimer{i});
    }
    if (anything_pending()) {
      schedule(sc_.metrics_tick_ms, MetricsTimer{});
      schedule(playout_period(), PlayoutTimer{});
      if (mode_ == Mode::kOverlay) schedule(sc_.routing.gossip_period_ms, GossipTimer{});
    }
    check_agreement();
  }

  Millis frame_interval() const { return 1000.0 / sc_.frame_rate; }
  Millis playout_period() const { return frame_interval() / 2.0; }

  LastMile last_mile(SurrogateId id) const {
    const Participant& p = *actors_.at(id).who;
    LastMile lm;
    lm.uplink_delay_ms = p.uplink_ms;
    lm.downlink_delay_ms = p.downlink_ms;
    lm.source_rate_kbps = sc_.source_rate_kbps;
    for (const auto& q : sc_.participants) {
      if (q.id != id) lm.accept_rate_kbps[q.id] = sc_.accept_rate(p, q);
    }
    return lm;
  }

  Millis script_L(SurrogateId flow, SurrogateId receiver) const {
    return sc_.playback_delay_ms - actors_.at(flow).who->uplink_ms -
           actors_.at(receiver).who->downlink_ms;
  }

  std::optional<Link> surrogate_link(SurrogateId a, SurrogateId b) const {
    const RegionLink* l = net_link(a, b);
    if (l == nullptr) return std::nullopt;
    return Link{l->capacity_kbps, l->delay.base_ms};
  }

  void bootstrap_engine(const std::vector<SurrogateId>& members) {
    RoutingInstance inst = routing_instance(sc_, members);
    engine_ = std::make_unique<RoutingEngine>(std::move(inst.topo), std::move(inst.model),
                                              std::move(inst.ladder),
                                              std::move(inst.bounds));
    auto feasible = engine_->initialize();
    if (!feasible.ok()) throw InfeasibleSession(std::move(feasible));
  }

  void start_timers(Actor& a) {
    const SurrogateId id = a.who->id;
    schedule(now_ + sched_rng_.uniform(0.0, frame_interval()), FrameTimer{id, a.gen});
    // First heartbeat right away so clocks calibrate early.
    schedule(now_ + sched_rng_.uniform(0.0, 100.0), HeartbeatTimer{id, a.gen});
    if (mode_ == Mode::kOverlay) {
      schedule(now_ + sc_.routing.eval_period_ms * sched_rng_.uniform(0.5, 1.5),
               EvalTimer{id, a.gen});
    }
  }

  void open_pair(SurrogateId flow, SurrogateId receiver) {
    const Participant& src = *actors_.at(flow).who;
    const Participant& dst = *actors_.at(receiver).who;
    const DelayBudget budget =
        make_budget(sc_.playback_delay_ms, src.uplink_ms, dst.downlink_ms);
    auto [it, fresh] = pairs_.insert_or_assign({flow, receiver}, PairState(budget, frame_interval()));
    it->second.first_frame = actors_.at(flow).next_frame;
  }

  void close_pairs_of(SurrogateId id, bool as_source, bool as_receiver) {
    for (auto& [key, pair] : pairs_) {
      if (!pair.active) continue;
      if ((as_source && key.first == id) || (as_receiver && key.second == id)) {
        pair.active = false;
        pair.end_frame = actors_.at(key.first).next_frame;
      }
    }
  }

  // ---- data plane --------------------------------------------------------

  Kbps unicast_rate(SurrogateId flow, SurrogateId receiver) const {
    const Kbps cap = sc_.accept_rate(*actors_.at(receiver).who, *actors_.at(flow).who);
    return ladder_.floor(static_cast<double>(std::min(cap, sc_.source_rate_kbps)));
  }

  Kbps accept(SurrogateId flow, SurrogateId receiver) const {
    return sc_.accept_rate(*actors_.at(receiver).who, *actors_.at(flow).who);
  }

  void send_packet(SurrogateId from, SurrogateId to, FlowId flow, std::uint32_t frame_seq,
                   std::uint16_t index, std::uint16_t count, Kbps rate, Millis origin,
                   std::uint32_t ts_wire) {
    const RegionLink* l = net_link(from, to);
    if (l == nullptr) return;
    Actor& a = actors_.at(from);
    wire::MediaPacketHeader h;
    h.timestamp_ms = ts_wire;
    h.flow_id = flow.value;
    h.rate_kbps = static_cast<std::uint16_t>(rate);
    h.frame_rate = static_cast<std::uint8_t>(sc_.frame_rate);
    h.seq = a.wire_seq[flow]++;
    h.codec = kCodecTag;
    const auto bytes = wire::encode(h, {});
    PacketArrival p{to, from, flow, frame_seq, index, count, origin, now_, {}};
    std::copy(bytes.begin(), bytes.end(), p.header.begin());
    schedule(now_ + sample_delay(*l), std::move(p));
  }

  void send_frame(SurrogateId from, SurrogateId to, FlowId flow, std::uint32_t frame_seq,
                  Kbps rate, Millis origin, std::uint32_t ts_wire) {
    const auto count = static_cast<std::uint16_t>(
        wire::packets_per_frame(static_cast<std::uint32_t>(rate), sc_.frame_rate));
    for (std::uint16_t i = 0; i < count; ++i) {
      send_packet(from, to, flow, frame_seq, i, count, rate, origin, ts_wire);
    }
  }

  void handle(FrameTimer& t) {
    Actor& a = actors_.at(t.source);
    if (!a.active() || a.gen != t.gen) return;
    const std::uint32_t seq = a.next_frame++;
    const Millis ts = initiator_time(a);
    const auto ts_wire = static_cast<std::uint32_t>(static_cast<std::int64_t>(std::llround(ts)));
    if (mode_ == Mode::kOverlay) {
      if (engine_ && engine_->trees().contains(t.source)) {
        const auto& tree = engine_->tree(t.source);
        for (auto c : tree.children(t.source)) {
          const Kbps r = tree.edge_rate.at(c);
          if (r > 0) send_frame(t.source, c, t.source, seq, r, now_, ts_wire);
        }
      }
    } else {
      for (const auto& [key, pair] : pairs_) {
        if (key.first != t.source || !pair.active) continue;
        send_frame(t.source, key.second, t.source, seq, unicast_rate(key.first, key.second),
                   now_, ts_wire);
      }
    }
    schedule(now_ + frame_interval(), FrameTimer{t.source, t.gen});
  }

  void handle(PacketArrival& p) {
    Actor& a = actors_.at(p.to);
    if (!a.active()) return;
    const auto header = wire::decode(p.header).header;
    const Kbps rate = header.rate_kbps;
    if (mode_ == Mode::kOverlay) observe_link(p.from, p.to, now_ - p.sent_ms);

    auto& frames = a.assembly[p.flow];
    Assembly& as = frames[p.frame_seq];
    if (as.count == 0) {
      as.rate = rate;
      as.count = p.count;
      as.have.assign(p.count, false);
      as.ts_wire = header.timestamp_ms;
      as.origin_ms = p.origin_ms;
    }
    // A fragment of the same frame at another rate arrives only around a
    // switch; it cannot complete this copy.
    if (rate != as.rate || p.index >= as.count || as.have[p.index]) return;
    as.have[p.index] = true;
    ++as.received;

    std::vector<std::pair<SurrogateId, Kbps>> downsampled;
    if (mode_ == Mode::kOverlay && engine_ && engine_->trees().contains(p.flow)) {
      const auto& tree = engine_->tree(p.flow);
      if (tree.contains(p.to)) {
        for (auto c : tree.children(p.to)) {
          const Kbps rc = tree.edge_rate.at(c);
          if (rc <= 0) continue;
          if (rc >= as.rate) {
            send_packet(p.to, c, p.flow, p.frame_seq, p.index, p.count, as.rate,
                        as.origin_ms, as.ts_wire);
          } else {
            downsampled.emplace_back(c, rc);
          }
        }
      }
    }

    auto pit = pairs_.find({p.flow, p.to});
    const bool consume = pit != pairs_.end() && pit->second.active;
    const Kbps cap = consume ? accept(p.flow, p.to) : 0;
    if (consume && as.rate <= cap) {
      deliver_fragment(pit->second, a, p.flow, p.frame_seq, p.index, p.count, as.ts_wire);
    }

    if (as.received == as.count && !as.done) {
      as.done = true;
      if (consume) {
        if (as.rate <= cap) {
          frame_complete(pit->second, p.flow, p.to, as.origin_ms);
        } else {
          schedule(now_ + transcode_latency(model_, p.to, as.rate, cap),
                   TranscodeDone{p.to, p.flow, p.frame_seq, cap, as.ts_wire,
                                 as.origin_ms, {}, true});
        }
      }
      std::map<Kbps, std::vector<SurrogateId>> by_rate;
      for (const auto& [c, rc] : downsampled) by_rate[rc].push_back(c);
      // Children that needed a lower rate wait for the whole frame.
      if (mode_ == Mode::kOverlay && engine_ && engine_->trees().contains(p.flow) &&
          engine_->tree(p.flow).contains(p.to)) {
        const auto& tree = engine_->tree(p.flow);
        for (auto c : tree.children(p.to)) {
          const Kbps rc = tree.edge_rate.at(c);
          if (rc > 0 && rc < as.rate &&
              std::find(by_rate[rc].begin(), by_rate[rc].end(), c) == by_rate[rc].end()) {
            by_rate[rc].push_back(c);
          }
        }
      }
      for (auto& [rc, targets] : by_rate) {
        if (targets.empty()) continue;
        schedule(now_ + transcode_latency(model_, p.to, as.rate, rc),
                 TranscodeDone{p.to, p.flow, p.frame_seq, rc, as.ts_wire, as.origin_ms,
                               std::move(targets), false});
      }
    }

    if (p.frame_seq >= kAssemblyHorizon) {
      frames.erase(frames.begin(), frames.lower_bound(p.frame_seq - kAssemblyHorizon));
    }
  }

  void handle(TranscodeDone& t) {
    Actor& a = actors_.at(t.at);
    if (!a.active()) return;
    if (t.to_self) {
      auto pit = pairs_.find({t.flow, t.at});
      if (pit == pairs_.end() || !pit->second.active) return;
      const auto count = static_cast<std::uint16_t>(
          wire::packets_per_frame(static_cast<std::uint32_t>(t.out_rate), sc_.frame_rate));
      for (std::uint16_t i = 0; i < count; ++i) {
        deliver_fragment(pit->second, a, t.flow, t.frame_seq, i, count, t.ts_wire);
      }
      frame_complete(pit->second, t.flow, t.at, t.origin_ms);
      return;
    }
    for (auto c : t.targets) {
      send_frame(t.at, c, t.flow, t.frame_seq, t.out_rate, t.origin_ms, t.ts_wire);
    }
  }

  void deliver_fragment(PairState& pair, const Actor& at, FlowId flow,
                        std::uint32_t frame_seq, std::uint16_t index, std::uint16_t count,
                        std::uint32_t ts_wire) {
    const Millis clock = initiator_time(at);
    const auto source_ts = static_cast<Millis>(
        wire::unwrap_timestamp(ts_wire, static_cast<std::int64_t>(std::llround(clock))));
    const auto outcome = pair.buffer.push(clock, {source_ts, frame_seq, index, count, 0});
    pair.sigma.add(clock - source_ts);
    if (outcome == PushOutcome::kLate) {
      const auto& t = pair.buffer.timeouts().back();
      pair.late_frames.insert(t.frame_seq);
      log_.timeouts.push_back({now_, flow, at.who->id, t.frame_seq, t.past_deadline_ms});
    }
  }

  void frame_complete(PairState& pair, FlowId flow, SurrogateId receiver, Millis origin) {
    const Millis latency = now_ - origin + actors_.at(flow).who->uplink_ms +
                           actors_.at(receiver).who->downlink_ms;
    pair.tick_latency_sum += latency;
    ++pair.tick_frames;
    pair.tally.add_latency(latency);
  }

  void poll_buffers() {
    for (auto& [key, pair] : pairs_) {
      if (!pair.active) continue;
      const Actor& r = actors_.at(key.second);
      if (!r.active()) continue;
      for (const auto& f : pair.buffer.pop_due(initiator_time(r))) {
        if (!pair.first_released) pair.first_released = f.frame_seq;
        ++pair.released;
        if (f.concealed) {
          pair.concealed.push_back(f.frame_seq);
        } else {
          ++pair.on_time;
        }
      }
    }
  }

  void handle(PlayoutTimer&) {
    poll_buffers();
    if (anything_pending()) schedule(now_ + playout_period(), PlayoutTimer{});
  }

  // ---- routing -----------------------------------------------------------

  void observe_link(SurrogateId from, SurrogateId to, Millis sample) {
    auto [it, fresh] = link_ewma_.try_emplace({from, to}, sample);
    if (!fresh) it->second += sc_.routing.latency_ewma * (sample - it->second);
  }

  void handle(GossipTimer&) {
    if (engine_) {
      for (const auto& [edge, measured] : link_ewma_) {
        const Link* l = engine_->topology().link(edge.first, edge.second);
        if (l == nullptr) continue;
        if (std::abs(measured - l->latency_ms) > sc_.routing.latency_report_ms) {
          engine_->set_link_latency(edge.first, edge.second, measured);
        }
      }
      engine_->gossip_round();
    }
    if (anything_pending()) schedule(now_ + sc_.routing.gossip_period_ms, GossipTimer{});
  }

  void handle(EvalTimer& t) {
    Actor& a = actors_.at(t.node);
    if (!a.active() || a.gen != t.gen) return;
    if (engine_ && engine_->topology().contains(t.node)) {
      std::vector<FlowId> flows;
      for (const auto& [m, tree] : engine_->trees()) {
        if (m != t.node && tree.contains(t.node)) flows.push_back(m);
      }
      for (auto m : flows) {
        auto proposal = engine_->evaluate(t.node, m);
        if (!proposal) continue;
        engine_->apply_switch(*proposal);
        log_.switches.push_back({now_, *proposal});
      }
    }
    schedule(now_ + sc_.routing.eval_period_ms * sched_rng_.uniform(0.5, 1.5),
             EvalTimer{t.node, t.gen});
  }

  void drop_from_routing(SurrogateId id) {
    if (engine_ && engine_->topology().contains(id)) engine_->remove_member(id);
  }

  // ---- session -----------------------------------------------------------

  void record_session(const RosterEvent& e) {
    log_.session.push_back({now_, to_string(e.kind), e.who, e.epoch, current_initiator_id()});
  }

  void record_session(const RosterEvent& e, SurrogateId initiator) {
    log_.session.push_back({now_, to_string(e.kind), e.who, e.epoch, initiator});
  }

  void record_session(const std::string& what, SurrogateId who, std::uint64_t epoch) {
    log_.session.push_back({now_, what, who, epoch, current_initiator_id()});
  }

  Actor* current_initiator() {
    Actor* best = nullptr;
    for (auto& [id, a] : actors_) {
      if (!a.active() || !a.state || a.state->closed()) continue;
      if (best == nullptr || a.state->epoch() > best->state->epoch()) best = &a;
    }
    return best;
  }

  SurrogateId current_initiator_id() {
    Actor* a = current_initiator();
    return a ? a->who->id : SurrogateId{};
  }

  void broadcast(Actor& init) {
    const Roster r = init.state->roster();
    for (auto m : r.members) {
      if (m == init.who->id) continue;
      schedule(now_ + control_delay(init.who->id, m), RosterMsg{m, r});
    }
    init.state->mark_broadcast(local(init));
  }

  std::map<SurrogateId, std::string> addresses() const {
    std::map<SurrogateId, std::string> out;
    for (const auto& [id, a] : actors_) out[id] = a.who->name;
    return out;
  }

  void handle(HeartbeatTimer& t) {
    Actor& a = actors_.at(t.node);
    if (!a.active() || a.gen != t.gen) return;
    if (a.state) {
      const auto tick = a.state->heartbeat_tick(local(a));
      for (const auto& e : tick.events) {
        record_session(e);
        if (e.kind == RosterEventKind::kExpired) {
          drop_from_routing(e.who);
          close_pairs_of(e.who, true, true);
        }
      }
      if (tick.broadcast_due) broadcast(a);
    } else if (a.view) {
      if (auto s = a.view->check_initiator(local(a))) {
        record_session("suspect", s->failed, a.view->roster().epoch);
        if (s->self_promoted) {
          a.state = SessionState::take_over(a.view->roster(), addresses(), local(a),
                                            session_cfg_);
          a.view.reset();
          record_session("failover", a.who->id, a.state->epoch());
          drop_from_routing(s->failed);
          close_pairs_of(s->failed, true, true);
          broadcast(a);
        }
      }
      if (a.view) {
        schedule(now_ + control_delay(t.node, a.view->roster().initiator),
                 HeartbeatMsg{t.node, a.view->roster().initiator, local(a)});
      }
    }
    check_agreement();
    schedule(now_ + sc_.heartbeat_period_ms, HeartbeatTimer{t.node, t.gen});
  }

  void handle(HeartbeatMsg& m) {
    Actor& init = actors_.at(m.to);
    if (!init.active() || !init.state || !init.state->contains(m.from)) return;
    const Millis t2 = local(init);
    init.state->record_heartbeat(m.from, t2);
    schedule(now_ + control_delay(m.to, m.from), AckMsg{m.to, m.from, m.t1, t2, t2});
  }

  void handle(AckMsg& m) {
    Actor& a = actors_.at(m.to);
    if (!a.active() || !a.view || a.view->roster().initiator != m.from) return;
    a.view->on_ack(local(a), m.t1, m.t2, m.t3);
    if (a.view->clock().calibrated()) {
      log_.clocks.push_back({now_, m.to, m.from, a.view->clock().offset()});
    }
  }

  void handle(RosterMsg& m) {
    Actor& a = actors_.at(m.to);
    if (!a.active() || !a.view) return;
    a.view->on_roster(m.roster, local(a));
    check_agreement();
  }

  // Every live member holds the initiator's roster, and the roster is
  // exactly the live set.
  void check_agreement() {
    bool agreed = false;
    if (Actor* init = current_initiator()) {
      const Roster r = init->state->roster();
      std::vector<SurrogateId> live;
      for (const auto& [id, a] : actors_) {
        if (a.active()) live.push_back(id);
      }
      agreed = live == r.members;
      for (auto id : live) {
        if (!agreed) break;
        const Actor& a = actors_.at(id);
        if (&a == init) continue;
        agreed = a.view && a.view->roster() == r;
      }
      if (agreed && !agreed_) record_session("converged", init->who->id, r.epoch);
    }
    agreed_ = agreed;
  }

  // ---- script ------------------------------------------------------------

  void handle(ScriptTimer& t) {
    next_script_ = t.index + 1;
    const ScenarioEvent& e = sc_.events[t.index];
    switch (e.type) {
      case EventType::kJoin: join(sc_.participant(e.participant).id); break;
      case EventType::kLeave: leave(sc_.participant(e.participant).id); break;
      case EventType::kCrash: crash(sc_.participant(e.participant).id); break;
      case EventType::kJitter:
      case EventType::kCapacity:
      case EventType::kLatency: change_link(e); break;
    }
    check_agreement();
  }

  void join(SurrogateId id) {
    Actor& a = actors_.at(id);
    Actor* init = current_initiator();
    if (a.active()) {
      if (init) record_session(init->state->join(id, a.who->name, local(*init)));
      return;
    }
    a.status = Status::kActive;
    ++a.gen;
    a.view.reset();
    a.state.reset();
    a.assembly.clear();
    if (init == nullptr) {
      SessionState state(session_cfg_);
      record_session(state.join(id, a.who->name, local(a)), id);
      a.state = std::move(state);
    } else {
      record_session(init->state->join(id, a.who->name, local(*init)));
      a.view.emplace(id, init->state->roster(), local(a), session_cfg_);
    }

    std::vector<SurrogateId> others;
    for (const auto& [oid, o] : actors_) {
      if (oid != id && o.active()) others.push_back(oid);
    }
    if (mode_ == Mode::kOverlay) {
      if (!engine_) {
        bootstrap_engine({id});
      } else {
        std::map<DirectedLink, Link> links;
        for (auto o : others) {
          if (auto l = surrogate_link(id, o)) links[{id, o}] = *l;
          if (auto l = surrogate_link(o, id)) links[{o, id}] = *l;
        }
        engine_->add_member(id, last_mile(id), links);
        for (auto o : others) {
          engine_->set_bound(id, o, script_L(id, o));
          engine_->set_bound(o, id, script_L(o, id));
        }
      }
    }
    for (auto o : others) {
      open_pair(id, o);
      open_pair(o, id);
    }
    start_timers(a);
  }

  void leave(SurrogateId id) {
    Actor& a = actors_.at(id);
    if (!a.active()) return;
    Actor* init = current_initiator();
    a.status = Status::kGone;
    ++a.gen;
    if (a.state) {
      SessionState state = std::move(*a.state);
      a.state.reset();
      const auto events = state.leave(id, local(a));
      const SurrogateId next = state.closed() ? SurrogateId{} : state.initiator();
      for (const auto& e : events) record_session(e, next);
      if (!state.closed()) {
        Actor& next = actors_.at(state.initiator());
        next.view.reset();
        next.state = std::move(state);
        broadcast(next);
      }
    } else if (init) {
      for (const auto& e : init->state->leave(id, local(*init))) record_session(e);
    }
    a.view.reset();
    drop_from_routing(id);
    close_pairs_of(id, true, true);
  }

  void crash(SurrogateId id) {
    Actor& a = actors_.at(id);
    if (!a.active()) return;
    a.status = Status::kCrashed;
    ++a.gen;
    record_session("crash", id, a.state ? a.state->epoch()
                                        : (a.view ? a.view->roster().epoch : 0));
    // Its own playout stops now; others notice only through the session.
    close_pairs_of(id, false, true);
  }

  void change_link(const ScenarioEvent& e) {
    std::vector<std::pair<std::string, std::string>> dirs{{e.region_a, e.region_b}};
    if (e.symmetric && e.region_a != e.region_b) dirs.emplace_back(e.region_b, e.region_a);
    for (const auto& d : dirs) {
      RegionLink& l = net_.at(d);
      if (e.jitter_ms) l.delay.jitter_ms = *e.jitter_ms;
      if (e.spike_max_ms) {
        l.delay.spike_max_ms = *e.spike_max_ms;
        if (!e.spike_prob) l.delay.spike_prob = *e.spike_max_ms > 0.0 ? 1.0 : 0.0;
      }
      if (e.spike_prob) l.delay.spike_prob = *e.spike_prob;
      if (e.latency_ms) l.delay.base_ms = *e.latency_ms;
      if (e.capacity_kbps) {
        l.capacity_kbps = *e.capacity_kbps;
        if (engine_) {
          for (const auto& [edge, link] : std::map(engine_->topology().links())) {
            if (region(edge.first) == d.first && region(edge.second) == d.second) {
              engine_->set_link_capacity(edge.first, edge.second, *e.capacity_kbps);
            }
          }
        }
      }
    }
  }

  // ---- metrics -----------------------------------------------------------

  void handle(MetricsTimer&) {
    poll_buffers();
    for (auto& [key, pair] : pairs_) {
      if (!pair.active) continue;
      const auto [flow, receiver] = key;
      Kbps rate = 0;
      if (mode_ == Mode::kUnicast) {
        rate = unicast_rate(flow, receiver);
      } else if (engine_ && engine_->trees().contains(flow) &&
                 engine_->tree(flow).contains(receiver)) {
        rate = end_rate(engine_->topology(), engine_->tree(flow), receiver);
      }
      log_.rates.push_back({now_, flow, receiver, rate});

      const auto change = pair.tracker.update(pair.sigma.sigma_hat());
      if (change.notify && mode_ == Mode::kOverlay && engine_ &&
          engine_->trees().contains(flow) && engine_->tree(flow).contains(receiver)) {
        engine_->set_bound(flow, receiver, change.bound_ms);
      }
      log_.buffers.push_back({now_, flow, receiver, pair.buffer.headroom_ms(),
                              pair.sigma.sigma_hat(), pair.tracker.budget().bound_ms});
      if (pair.tick_frames > 0) {
        log_.latencies.push_back({now_, flow, receiver,
                                  pair.tick_latency_sum / pair.tick_frames,
                                  pair.tick_frames});
        pair.tick_latency_sum = 0.0;
        pair.tick_frames = 0;
      }
    }
    if (anything_pending()) schedule(now_ + sc_.metrics_tick_ms, MetricsTimer{});
  }

  void finish() {
    log_.end_ms = now_;
    for (auto& [key, pair] : pairs_) {
      FrameTally t = pair.tally;
      const std::uint32_t end = pair.end_frame.value_or(actors_.at(key.first).next_frame);
      t.generated = end > pair.first_frame ? end - pair.first_frame : 0;
      std::uint64_t late = 0;
      for (auto seq : pair.concealed) {
        if (pair.late_frames.contains(seq)) ++late;
      }
      t.on_time = pair.on_time;
      t.late = late;
      t.lost = pair.concealed.size() - late;
      // Frames before the first released one never arrived.
      if (pair.first_released && *pair.first_released > pair.first_frame) {
        t.lost += *pair.first_released - pair.first_frame;
      }
      const std::uint64_t accounted = t.on_time + t.late + t.lost;
      t.in_flight = t.generated > accounted ? t.generated - accounted : 0;
      if (accounted > t.generated) {
        throw SimulationError("frame accounting exceeds generated frames for flow " +
                              to_string(key.first) + " at " + to_string(key.second));
      }
      log_.frames[key] = t;
    }
  }

  // ---- members -----------------------------------------------------------

  const Scenario& sc_;
  Mode mode_;
  std::uint64_t seed_;
  Millis end_ms_;
  Rng net_rng_;
  Rng sched_rng_;
  RateLadder ladder_;
  TranscodeModel model_;
  SessionConfig session_cfg_;

  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t next_seq_ = 0;
  Millis now_ = 0.0;
  std::size_t next_script_ = 0;

  std::map<SurrogateId, Actor> actors_;
  std::map<std::pair<std::string, std::string>, RegionLink> net_;
  std::map<DirectedLink, Millis> link_ewma_;
  std::map<FlowReceiver, PairState> pairs_;
  std::unique_ptr<RoutingEngine> engine_;
  bool agreed_ = false;

  MetricsLog log_;
};

}  // namespace

RoutingInstance routing_instance(const Scenario& scenario, std::vector<SurrogateId> members) {
  if (members.empty()) {
    for (const auto& p : scenario.participants) {
      if (p.initial) members.push_back(p.id);
    }
  }
  RoutingInstance inst;
  inst.ladder = RateLadder(scenario.ladder);
  inst.model.base_ms = scenario.transcode_base_ms;
  inst.model.in_coef_ms_per_kbps = scenario.transcode_in_coef;
  inst.model.out_coef_ms_per_kbps = scenario.transcode_out_coef;
  for (auto id : members) {
    const Participant& p = scenario.participant(id);
    inst.model.speed_factor[id] = p.vm_speed;
    LastMile lm;
    lm.uplink_delay_ms = p.uplink_ms;
    lm.downlink_delay_ms = p.downlink_ms;
    lm.source_rate_kbps = scenario.source_rate_kbps;
    for (const auto& q : scenario.participants) {
      if (q.id != id) lm.accept_rate_kbps[q.id] = scenario.accept_rate(p, q);
    }
    inst.topo.add_surrogate(id, lm);
  }
  for (auto a : members) {
    for (auto b : members) {
      if (a == b) continue;
      const Participant& pa = scenario.participant(a);
      const Participant& pb = scenario.participant(b);
      if (const RegionLink* l = scenario.region_link(pa.region, pb.region)) {
        inst.topo.set_link(a, b, Link{l->capacity_kbps, l->delay.base_ms});
      }
      inst.bounds.set(a, b, scenario.playback_delay_ms - pa.uplink_ms - pb.downlink_ms);
    }
  }
  return inst;
}

MetricsLog run(const Scenario& scenario, const RunOptions& options) {
  validate_scenario(scenario);
  Simulation sim(scenario, options);
  return sim.run();
}

PairedLogs compare_unicast(const Scenario& scenario, const RunOptions& options) {
  if (scenario.participants.size() > kMaxUnicastParticipants) {
    throw ScenarioError("unicast comparison supports at most " +
                        std::to_string(kMaxUnicastParticipants) + " participants, got " +
                        std::to_string(scenario.participants.size()));
  }
  for (const auto& a : scenario.participants) {
    for (const auto& b : scenario.participants) {
      if (scenario.region_link(a.region, b.region) == nullptr) {
        throw ScenarioError("no direct path between " + a.name + " and " + b.name);
      }
    }
  }
  RunOptions overlay = options;
  overlay.mode = Mode::kOverlay;
  RunOptions unicast = options;
  unicast.mode = Mode::kUnicast;
  return {run(scenario, overlay), run(scenario, unicast)};
}

double mean_latency_variance(const MetricsLog& log) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [key, t] : log.frames) {
    if (t.latency_frames < 2) continue;
    sum += t.latency_variance();
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

ComparisonSummary summarize(const PairedLogs& logs) {
  ComparisonSummary s;
  s.overlay_latency_variance = mean_latency_variance(logs.overlay);
  s.unicast_latency_variance = mean_latency_variance(logs.unicast);
  s.overlay_timeouts = logs.overlay.timeouts.size();
  s.unicast_timeouts = logs.unicast.timeouts.size();
  return s;
}

}  // namespace relaymesh::sim
