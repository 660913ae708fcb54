#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "relaymesh/model.hpp"

namespace relaymesh {

// Quantile multiplier for the routing bound: P(X < mu + 3.4 sigma) ~ 99.97%.
inline constexpr double kJitterSigmas = 3.4;

struct DelayBudget {
  Millis playback_delay_ms = 400.0;  // D
  Millis delta_src_ms = 0.0;
  Millis delta_dst_ms = 0.0;
  Millis bound_ms = 0.0;             // L, kept <= script_L()

  Millis script_L() const { return playback_delay_ms - delta_src_ms - delta_dst_ms; }
};

DelayBudget make_budget(Millis playback_delay_ms, Millis delta_src_ms,
                        Millis delta_dst_ms);

// Earliest time a frame stamped `source_ts` may leave the buffer.
Millis release_time(const DelayBudget& budget, Millis source_ts);

struct SigmaEstimatorConfig {
  std::size_t window = 64;
  double ewma_weight = 0.125;
};

// Standard deviation over a sliding window of one-way delays, smoothed by an
// EWMA each time a sample arrives.
class DelayVarianceEstimator {
 public:
  explicit DelayVarianceEstimator(SigmaEstimatorConfig config = {});

  // Folds samples in one at a time; returns the new estimate. With fewer than
  // two samples in the window the estimate is left unchanged.
  Millis update(std::span<const Millis> samples);
  Millis add(Millis sample);

  Millis sigma_hat() const { return sigma_hat_; }
  std::size_t samples_seen() const { return seen_; }
  Millis window_mean() const;

 private:
  SigmaEstimatorConfig config_;
  std::deque<Millis> window_;
  Millis sigma_hat_ = 0.0;
  bool primed_ = false;
  std::size_t seen_ = 0;
};

// L = max(0, script_L - 3.4 sigma). Returns the new bound and stores it.
Millis update_bound(DelayBudget& budget, Millis sigma_hat);

struct BoundChange {
  Millis bound_ms = 0.0;
  bool unsatisfiable = false;  // clamped at zero
  bool notify = false;         // moved past the hysteresis since last notice
};

// Applies update_bound and decides when routing should hear about it.
class BoundTracker {
 public:
  explicit BoundTracker(DelayBudget budget, Millis hysteresis_ms = 10.0);

  BoundChange update(Millis sigma_hat);
  const DelayBudget& budget() const { return budget_; }
  Millis last_notified() const { return notified_; }

 private:
  DelayBudget budget_;
  Millis hysteresis_ms_;
  Millis notified_;
};

// ---------------------------------------------------------------------------

struct Fragment {
  Millis source_ts = 0.0;
  std::uint32_t frame_seq = 0;
  std::uint16_t index = 0;  // position within the frame
  std::uint16_t count = 1;  // fragments in the frame
  std::size_t bytes = 0;
};

struct ReleasedFrame {
  std::uint32_t frame_seq = 0;
  Millis source_ts = 0.0;
  Millis released_at = 0.0;
  bool concealed = false;  // previous frame repeated in its place
  bool overflowed = false; // evicted before release, also concealed
};

struct TimeoutEvent {
  Millis at = 0.0;
  std::uint32_t frame_seq = 0;
  Millis past_deadline_ms = 0.0;
};

enum class PushOutcome { kBuffered, kDuplicate, kLate, kOverflow };

struct JitterStats {
  std::uint64_t pushed_packets = 0;
  std::uint64_t emitted_packets = 0;
  std::uint64_t lost_frame_packets = 0;   // arrived, but their frame was lost
  std::uint64_t overflow_packets = 0;
  std::uint64_t late_packets = 0;
  std::uint64_t duplicate_packets = 0;
  std::uint64_t emitted_frames = 0;       // complete and on time
  std::uint64_t lost_frames = 0;          // incomplete or never seen
  std::uint64_t overflow_frames = 0;
};

struct JitterBufferConfig {
  Millis capacity_ms = 400.0;
  Millis frame_interval_ms = 40.0;  // 25 fps
};

// Per-(flow, receiver) playout buffer. Frames leave at source_ts + script_L;
// frames missing fragments at that moment are lost and concealed.
class JitterBuffer {
 public:
  JitterBuffer(DelayBudget budget, JitterBufferConfig config = {});

  PushOutcome push(Millis now, const Fragment& fragment);
  std::vector<ReleasedFrame> pop_due(Millis now);

  // Release time of the oldest buffered frame, if any.
  std::optional<Millis> next_release() const;
  Millis occupancy_ms() const;
  // Media time queued ahead of playout, taken when the latest fragment was
  // buffered: its frame's release time minus its arrival. Tracks arrival
  // delay without frame quantisation or sampling phase.
  Millis headroom_ms() const { return headroom_ms_; }
  std::size_t buffered_frames() const { return frames_.size(); }
  std::uint64_t buffered_packets() const;
  const JitterStats& stats() const { return stats_; }
  const std::vector<TimeoutEvent>& timeouts() const { return timeouts_; }
  const DelayBudget& budget() const { return budget_; }

 private:
  struct Slot {
    Millis source_ts = 0.0;
    std::uint16_t count = 1;
    std::set<std::uint16_t> have;
  };

  void settle_gap(std::uint32_t up_to, Millis now, std::vector<ReleasedFrame>& out);

  DelayBudget budget_;
  JitterBufferConfig config_;
  std::map<std::uint32_t, Slot> frames_;
  std::set<std::uint32_t> evicted_;  // overflowed, not yet passed
  std::optional<std::uint32_t> last_released_;
  Millis last_release_ts_ = 0.0;
  Millis headroom_ms_ = 0.0;
  JitterStats stats_;
  std::vector<TimeoutEvent> timeouts_;
};

}  // namespace relaymesh
