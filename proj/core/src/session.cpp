#include "relaymesh/session.hpp"

#include <algorithm>

namespace relaymesh {

const char* to_string(RosterEventKind kind) {
  switch (kind) {
    case RosterEventKind::kFounded: return "founded";
    case RosterEventKind::kJoined: return "joined";
    case RosterEventKind::kDuplicate: return "duplicate";
    case RosterEventKind::kLeft: return "left";
    case RosterEventKind::kExpired: return "expired";
    case RosterEventKind::kFailover: return "failover";
    case RosterEventKind::kClosed: return "closed";
  }
  return "?";
}

SessionState::SessionState(SessionConfig config) : config_(config) {}

SessionState SessionState::take_over(
    const Roster& next, const std::map<SurrogateId, std::string>& addresses,
    Millis now, SessionConfig config) {
  SessionState s(config);
  s.founded_ = true;
  s.initiator_ = next.initiator;
  s.epoch_ = next.epoch;
  for (auto id : next.members) {
    auto it = addresses.find(id);
    s.members_[id] = {id, it == addresses.end() ? "" : it->second, now};
  }
  s.dirty_ = true;
  return s;
}

RosterEvent SessionState::join(SurrogateId id, std::string address, Millis now) {
  if (members_.contains(id)) return {RosterEventKind::kDuplicate, id, epoch_};
  members_[id] = {id, std::move(address), now};
  dirty_ = true;
  if (!founded_ || closed_) {
    founded_ = true;
    closed_ = false;
    initiator_ = id;
    last_broadcast_ = now;
    return {RosterEventKind::kFounded, id, epoch_};
  }
  return {RosterEventKind::kJoined, id, epoch_};
}

std::vector<RosterEvent> SessionState::join_batch(
    std::vector<std::pair<SurrogateId, std::string>> joiners, Millis now) {
  std::sort(joiners.begin(), joiners.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<RosterEvent> out;
  for (auto& [id, addr] : joiners) out.push_back(join(id, std::move(addr), now));
  return out;
}

std::vector<RosterEvent> SessionState::leave(SurrogateId id, Millis now) {
  std::vector<RosterEvent> out;
  if (!members_.contains(id)) return out;
  if (id == initiator_) {
    failover(now);
    out.push_back({RosterEventKind::kLeft, id, epoch_});
    out.push_back({closed_ ? RosterEventKind::kClosed : RosterEventKind::kFailover,
                   closed_ ? id : initiator_, epoch_});
    return out;
  }
  members_.erase(id);
  clock_offset_.erase(id);
  dirty_ = true;
  out.push_back({RosterEventKind::kLeft, id, epoch_});
  return out;
}

void SessionState::record_heartbeat(SurrogateId id, Millis now) {
  auto it = members_.find(id);
  if (it != members_.end()) it->second.last_heartbeat_ms = now;
}

HeartbeatTick SessionState::heartbeat_tick(Millis now) {
  HeartbeatTick tick;
  if (closed_) return tick;
  std::vector<SurrogateId> silent;
  for (const auto& [id, m] : members_) {
    if (id == initiator_) continue;
    if (now - m.last_heartbeat_ms >= config_.timeout_ms()) silent.push_back(id);
  }
  for (auto id : silent) {
    members_.erase(id);
    clock_offset_.erase(id);
    dirty_ = true;
    tick.events.push_back({RosterEventKind::kExpired, id, epoch_});
  }
  tick.broadcast_due = dirty_ || now - last_broadcast_ >= config_.roster_period_ms;
  return tick;
}

std::optional<SurrogateId> SessionState::failover(Millis now) {
  members_.erase(initiator_);
  clock_offset_.clear();
  dirty_ = true;
  if (members_.empty()) {
    closed_ = true;
    return std::nullopt;
  }
  initiator_ = members_.begin()->first;
  ++epoch_;
  for (auto& [id, m] : members_) m.last_heartbeat_ms = now;
  return initiator_;
}

void SessionState::set_clock_offset(SurrogateId id, Millis offset_ms) {
  clock_offset_[id] = offset_ms;
}

Millis SessionState::clock_offset(SurrogateId id) const {
  auto it = clock_offset_.find(id);
  return it == clock_offset_.end() ? 0.0 : it->second;
}

Roster SessionState::roster() const {
  Roster r;
  r.epoch = epoch_;
  r.initiator = initiator_;
  for (const auto& [id, m] : members_) r.members.push_back(id);
  return r;
}

void SessionState::mark_broadcast(Millis now) {
  last_broadcast_ = now;
  dirty_ = false;
}

// ---------------------------------------------------------------------------

std::optional<Millis> calibrate_clock(Millis t1, Millis t2, Millis t3, Millis t4) {
  if (t4 < t1) return std::nullopt;
  return ((t2 - t1) + (t3 - t4)) / 2.0;
}

std::optional<Millis> ClockCalibrator::update(Millis t1, Millis t2, Millis t3,
                                              Millis t4) {
  const auto sample = calibrate_clock(t1, t2, t3, t4);
  if (!sample) return std::nullopt;
  const Millis rtt = (t4 - t1) - (t3 - t2);
  min_rtt_ = std::min(min_rtt_, rtt);
  if (samples_ > 0 && rtt > min_rtt_ + rtt_slack_) return std::nullopt;
  offset_ = samples_ == 0 ? *sample : offset_ + weight_ * (*sample - offset_);
  ++samples_;
  return offset_;
}

void ClockCalibrator::reset() {
  offset_ = 0.0;
  samples_ = 0;
  min_rtt_ = kUnbounded;
}

MemberView::MemberView(SurrogateId self, Roster roster, Millis now,
                       SessionConfig config)
    : self_(self),
      roster_(std::move(roster)),
      config_(config),
      clock_(config.offset_ewma_weight, config.clock_rtt_slack_ms),
      last_ack_(now) {}

bool MemberView::on_roster(const Roster& roster, Millis now) {
  if (roster.epoch < roster_.epoch) return false;
  if (roster.epoch > roster_.epoch || roster.initiator != roster_.initiator) {
    // New initiator: recalibrate and give it a full timeout before suspecting.
    clock_.reset();
    last_ack_ = now;
  }
  roster_ = roster;
  return true;
}

void MemberView::on_ack(Millis now, Millis t1, Millis t2, Millis t3) {
  last_ack_ = now;
  clock_.update(t1, t2, t3, now);
}

std::optional<MemberView::Suspicion> MemberView::check_initiator(Millis now) {
  if (roster_.initiator == self_) return std::nullopt;
  if (now - last_ack_ < config_.timeout_ms()) return std::nullopt;
  Suspicion s;
  s.failed = roster_.initiator;
  std::vector<SurrogateId> rest;
  for (auto id : roster_.members) {
    if (id != s.failed) rest.push_back(id);
  }
  if (rest.empty()) rest.push_back(self_);
  s.successor = *std::min_element(rest.begin(), rest.end());
  s.self_promoted = s.successor == self_;

  roster_.members = rest;
  roster_.initiator = s.successor;
  ++roster_.epoch;
  clock_.reset();
  last_ack_ = now;
  return s;
}

// ---------------------------------------------------------------------------

void Gateway::add_to_pool(SurrogateId id, std::string region) {
  region_[id] = std::move(region);
  busy_[id] = false;
}

std::optional<SurrogateId> Gateway::assign(const std::string& region) {
  std::optional<SurrogateId> any;
  for (const auto& [id, r] : region_) {
    if (busy_.at(id)) continue;
    if (r == region) {
      busy_[id] = true;
      ++served_;
      return id;
    }
    if (!any) any = id;
  }
  if (any) {
    busy_[*any] = true;
    ++served_;
  }
  return any;
}

void Gateway::release(SurrogateId id) {
  auto it = busy_.find(id);
  if (it != busy_.end()) it->second = false;
}

std::size_t Gateway::free_count() const {
  return static_cast<std::size_t>(
      std::count_if(busy_.begin(), busy_.end(), [](const auto& kv) { return !kv.second; }));
}

}  // namespace relaymesh
