#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relaymesh/model.hpp"

namespace relaymesh {

struct SessionConfig {
  Millis heartbeat_period_ms = 1000.0;
  int missed_limit = 3;
  Millis roster_period_ms = 5000.0;
  double offset_ewma_weight = 0.25;
  // Exchanges whose round trip exceeds the best seen by more than this are
  // skipped by members. Unbounded keeps every exchange.
  Millis clock_rtt_slack_ms = kUnbounded;

  Millis timeout_ms() const { return heartbeat_period_ms * missed_limit; }
};

struct Member {
  SurrogateId id;
  std::string address;
  Millis last_heartbeat_ms = 0.0;

  friend bool operator==(const Member&, const Member&) = default;
};

// Roster broadcast payload.
struct Roster {
  std::uint64_t epoch = 0;
  SurrogateId initiator;
  std::vector<SurrogateId> members;  // sorted

  friend bool operator==(const Roster&, const Roster&) = default;
};

enum class RosterEventKind {
  kFounded,    // first member, now initiator
  kJoined,
  kDuplicate,  // already present; nothing changed
  kLeft,
  kExpired,
  kFailover,   // initiator replaced
  kClosed,     // last member gone
};

const char* to_string(RosterEventKind kind);

struct RosterEvent {
  RosterEventKind kind;
  SurrogateId who;
  std::uint64_t epoch = 0;
};

struct HeartbeatTick {
  std::vector<RosterEvent> events;
  bool broadcast_due = false;
};

// Authoritative membership kept by the initiator.
class SessionState {
 public:
  explicit SessionState(SessionConfig config = {});
  // Continues a session from a promoted member's view; `next` already names
  // the successor and carries the new epoch.
  static SessionState take_over(const Roster& next,
                                const std::map<SurrogateId, std::string>& addresses,
                                Millis now, SessionConfig config = {});

  RosterEvent join(SurrogateId id, std::string address, Millis now);
  // Joins in SurrogateId order regardless of arrival order within a tick.
  std::vector<RosterEvent> join_batch(
      std::vector<std::pair<SurrogateId, std::string>> joiners, Millis now);
  std::vector<RosterEvent> leave(SurrogateId id, Millis now);
  void record_heartbeat(SurrogateId id, Millis now);
  // Expires silent members and says whether the periodic roster is due.
  HeartbeatTick heartbeat_tick(Millis now);
  // Removes the initiator and promotes the lowest surviving id.
  std::optional<SurrogateId> failover(Millis now);

  void set_clock_offset(SurrogateId id, Millis offset_ms);
  Millis clock_offset(SurrogateId id) const;

  bool closed() const { return closed_; }
  SurrogateId initiator() const { return initiator_; }
  std::uint64_t epoch() const { return epoch_; }
  const std::map<SurrogateId, Member>& members() const { return members_; }
  bool contains(SurrogateId id) const { return members_.contains(id); }
  Roster roster() const;
  void mark_broadcast(Millis now);
  const SessionConfig& config() const { return config_; }

 private:
  SessionConfig config_;
  std::map<SurrogateId, Member> members_;
  std::map<SurrogateId, Millis> clock_offset_;
  SurrogateId initiator_{};
  std::uint64_t epoch_ = 0;
  bool closed_ = false;
  bool founded_ = false;
  Millis last_broadcast_ = 0.0;
  bool dirty_ = false;  // roster changed since the last broadcast
};

// Offset of the initiator clock relative to the local one, from one
// request/ack exchange; nullopt when t4 < t1.
std::optional<Millis> calibrate_clock(Millis t1, Millis t2, Millis t3, Millis t4);

class ClockCalibrator {
 public:
  explicit ClockCalibrator(double ewma_weight = 0.25,
                           Millis rtt_slack_ms = kUnbounded)
      : weight_(ewma_weight), rtt_slack_(rtt_slack_ms) {}

  std::optional<Millis> update(Millis t1, Millis t2, Millis t3, Millis t4);
  Millis offset() const { return offset_; }
  bool calibrated() const { return samples_ > 0; }
  void reset();
  // Local clock reading converted to initiator time.
  Millis to_initiator(Millis local_ms) const { return local_ms + offset_; }

 private:
  double weight_;
  Millis rtt_slack_;
  Millis min_rtt_ = kUnbounded;
  Millis offset_ = 0.0;
  std::uint64_t samples_ = 0;
};

// A member's read-only copy of the session, updated by broadcasts and acks.
class MemberView {
 public:
  MemberView(SurrogateId self, Roster roster, Millis now, SessionConfig config = {});

  SurrogateId self() const { return self_; }
  const Roster& roster() const { return roster_; }
  ClockCalibrator& clock() { return clock_; }
  const ClockCalibrator& clock() const { return clock_; }

  // Accepts rosters from the current or a later epoch.
  bool on_roster(const Roster& roster, Millis now);
  void on_ack(Millis now, Millis t1, Millis t2, Millis t3);

  struct Suspicion {
    SurrogateId failed;
    SurrogateId successor;
    bool self_promoted = false;
  };
  // After missed_limit periods without an ack the initiator is presumed gone
  // and the lowest other member takes over in the next epoch.
  std::optional<Suspicion> check_initiator(Millis now);

 private:
  SurrogateId self_;
  Roster roster_;
  SessionConfig config_;
  ClockCalibrator clock_;
  Millis last_ack_;
};

// Registry assigning pooled surrogates by region label.
class Gateway {
 public:
  void add_to_pool(SurrogateId id, std::string region);
  // Nearest means same label; any free surrogate otherwise.
  std::optional<SurrogateId> assign(const std::string& region);
  void release(SurrogateId id);
  std::size_t free_count() const;
  std::uint64_t sessions_served() const { return served_; }

 private:
  std::map<SurrogateId, std::string> region_;
  std::map<SurrogateId, bool> busy_;
  std::uint64_t served_ = 0;
};

}  // namespace relaymesh
