#include "relaymesh/jitter.hpp"

#include <algorithm>
#include <cmath>

namespace relaymesh {

DelayBudget make_budget(Millis playback_delay_ms, Millis delta_src_ms,
                        Millis delta_dst_ms) {
  DelayBudget b{playback_delay_ms, delta_src_ms, delta_dst_ms, 0.0};
  b.bound_ms = b.script_L();
  return b;
}

Millis release_time(const DelayBudget& budget, Millis source_ts) {
  return source_ts + budget.script_L();
}

// ---------------------------------------------------------------------------

DelayVarianceEstimator::DelayVarianceEstimator(SigmaEstimatorConfig config)
    : config_(config) {
  if (config_.window < 2) throw ModelError("sigma window needs two samples");
  if (!(config_.ewma_weight > 0.0 && config_.ewma_weight <= 1.0)) {
    throw ModelError("EWMA weight must lie in (0, 1]");
  }
}

Millis DelayVarianceEstimator::add(Millis sample) {
  ++seen_;
  window_.push_back(sample);
  if (window_.size() > config_.window) window_.pop_front();
  if (window_.size() < 2) return sigma_hat_;

  const double n = static_cast<double>(window_.size());
  double mean = 0.0;
  for (Millis x : window_) mean += x;
  mean /= n;
  double var = 0.0;
  for (Millis x : window_) var += (x - mean) * (x - mean);
  const Millis s = std::sqrt(var / n);

  if (!primed_) {
    sigma_hat_ = s;
    primed_ = true;
  } else {
    sigma_hat_ += config_.ewma_weight * (s - sigma_hat_);
  }
  return sigma_hat_;
}

Millis DelayVarianceEstimator::update(std::span<const Millis> samples) {
  for (Millis x : samples) add(x);
  return sigma_hat_;
}

Millis DelayVarianceEstimator::window_mean() const {
  if (window_.empty()) return 0.0;
  double sum = 0.0;
  for (Millis x : window_) sum += x;
  return sum / static_cast<double>(window_.size());
}

Millis update_bound(DelayBudget& budget, Millis sigma_hat) {
  if (sigma_hat < 0.0) throw ModelError("negative sigma");
  budget.bound_ms = std::max(0.0, budget.script_L() - kJitterSigmas * sigma_hat);
  return budget.bound_ms;
}

BoundTracker::BoundTracker(DelayBudget budget, Millis hysteresis_ms)
    : budget_(budget), hysteresis_ms_(hysteresis_ms), notified_(budget.bound_ms) {}

BoundChange BoundTracker::update(Millis sigma_hat) {
  BoundChange c;
  c.bound_ms = update_bound(budget_, sigma_hat);
  c.unsatisfiable = budget_.script_L() - kJitterSigmas * sigma_hat <= 0.0;
  if (std::abs(c.bound_ms - notified_) > hysteresis_ms_) {
    c.notify = true;
    notified_ = c.bound_ms;
  }
  return c;
}

// ---------------------------------------------------------------------------

JitterBuffer::JitterBuffer(DelayBudget budget, JitterBufferConfig config)
    : budget_(budget), config_(config) {}

PushOutcome JitterBuffer::push(Millis now, const Fragment& f) {
  ++stats_.pushed_packets;
  const Millis deadline = release_time(budget_, f.source_ts);
  const bool passed = last_released_ && f.frame_seq <= *last_released_;
  if (passed || now > deadline) {
    ++stats_.late_packets;
    timeouts_.push_back({now, f.frame_seq, now - deadline});
    return PushOutcome::kLate;
  }
  if (evicted_.contains(f.frame_seq)) {
    ++stats_.overflow_packets;
    return PushOutcome::kOverflow;
  }

  auto [it, created] = frames_.try_emplace(f.frame_seq);
  Slot& slot = it->second;
  if (created) {
    slot.source_ts = f.source_ts;
    slot.count = std::max<std::uint16_t>(1, f.count);
  }
  if (!slot.have.insert(f.index).second) {
    ++stats_.duplicate_packets;
    return PushOutcome::kDuplicate;
  }

  headroom_ms_ = deadline - now;

  PushOutcome outcome = PushOutcome::kBuffered;
  while (occupancy_ms() > config_.capacity_ms + 1e-9) {
    auto oldest = frames_.begin();
    if (oldest->first == f.frame_seq) outcome = PushOutcome::kOverflow;
    stats_.overflow_packets += oldest->second.have.size();
    ++stats_.overflow_frames;
    evicted_.insert(oldest->first);
    frames_.erase(oldest);
  }
  return outcome;
}

void JitterBuffer::settle_gap(std::uint32_t up_to, Millis now,
                              std::vector<ReleasedFrame>& out) {
  if (!last_released_) return;
  for (std::uint32_t s = *last_released_ + 1; s < up_to; ++s) {
    ReleasedFrame r;
    r.frame_seq = s;
    r.source_ts = last_release_ts_ + config_.frame_interval_ms;
    r.released_at = now;
    r.concealed = true;
    if (evicted_.erase(s) > 0) {
      r.overflowed = true;
    } else {
      ++stats_.lost_frames;
    }
    last_release_ts_ = r.source_ts;
    out.push_back(r);
  }
}

std::vector<ReleasedFrame> JitterBuffer::pop_due(Millis now) {
  std::vector<ReleasedFrame> out;
  while (!frames_.empty()) {
    auto it = frames_.begin();
    const Slot& slot = it->second;
    if (release_time(budget_, slot.source_ts) > now) break;
    const std::uint32_t seq = it->first;
    settle_gap(seq, now, out);

    ReleasedFrame r;
    r.frame_seq = seq;
    r.source_ts = std::max(slot.source_ts, last_release_ts_ + 1e-6);
    r.released_at = now;
    if (slot.have.size() >= slot.count) {
      ++stats_.emitted_frames;
      stats_.emitted_packets += slot.have.size();
    } else {
      r.concealed = true;
      ++stats_.lost_frames;
      stats_.lost_frame_packets += slot.have.size();
    }
    last_released_ = seq;
    last_release_ts_ = r.source_ts;
    evicted_.erase(evicted_.begin(), evicted_.upper_bound(seq));
    frames_.erase(it);
    out.push_back(r);
  }
  return out;
}

std::optional<Millis> JitterBuffer::next_release() const {
  if (frames_.empty()) return std::nullopt;
  return release_time(budget_, frames_.begin()->second.source_ts);
}

Millis JitterBuffer::occupancy_ms() const {
  return static_cast<double>(frames_.size()) * config_.frame_interval_ms;
}

std::uint64_t JitterBuffer::buffered_packets() const {
  std::uint64_t n = 0;
  for (const auto& [seq, slot] : frames_) n += slot.have.size();
  return n;
}

}  // namespace relaymesh
