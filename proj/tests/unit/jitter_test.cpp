#include <gtest/gtest.h>

#include <cmath>

#include "relaymesh/jitter.hpp"
#include "relaymesh/rng.hpp"

namespace relaymesh {
namespace {

TEST(ReleaseTime, Budget) {
  EXPECT_EQ(release_time(make_budget(400, 0, 0), 1000.0), 1400.0);
  EXPECT_EQ(release_time(make_budget(400, 50, 50), 0.0), 300.0);
  const auto b = make_budget(400, 20, 30);
  EXPECT_EQ(release_time(b, 140.0) - release_time(b, 100.0), 40.0);
  EXPECT_EQ(b.bound_ms, 350.0);
}

TEST(Sigma, ConstantSamplesGoToZero) {
  DelayVarianceEstimator est;
  const std::vector<Millis> same(500, 100.0);
  EXPECT_EQ(est.update(same), 0.0);
}

TEST(Sigma, FewerThanTwoSamplesUnchanged) {
  DelayVarianceEstimator est;
  const std::vector<Millis> one{42.0};
  EXPECT_EQ(est.update(one), 0.0);
  EXPECT_EQ(est.samples_seen(), 1u);
}

TEST(Sigma, RecoversGeneratorSpread) {
  Rng rng(12345);
  DelayVarianceEstimator est;
  std::vector<Millis> samples;
  for (int i = 0; i < 10000; ++i) samples.push_back(rng.normal(100.0, 10.0));
  const Millis s = est.update(samples);
  EXPECT_GE(s, 8.0);
  EXPECT_LE(s, 12.0);
  EXPECT_NEAR(est.window_mean(), 100.0, 5.0);
}

TEST(Sigma, OutlierDecays) {
  DelayVarianceEstimator est;
  for (int i = 0; i < 100; ++i) est.add(50.0);
  const Millis spiked = est.add(250.0);
  EXPECT_GT(spiked, 0.0);
  Millis peak = spiked;
  for (int i = 0; i < 63; ++i) peak = std::max(peak, est.add(50.0));
  Millis after = est.sigma_hat();
  for (int i = 0; i < 100; ++i) after = est.add(50.0);
  EXPECT_LT(after, peak * 0.01);
}

TEST(Bound, Rule) {
  auto b = make_budget(300, 0, 0);
  EXPECT_EQ(update_bound(b, 0.0), 300.0);
  EXPECT_NEAR(update_bound(b, 10.0), 266.0, 1e-9);
  auto tight = make_budget(30, 0, 0);
  EXPECT_EQ(update_bound(tight, 20.0), 0.0);
}

TEST(Bound, TrackerHysteresisAndClamp) {
  BoundTracker t(make_budget(300, 0, 0));
  auto c = t.update(2.0);  // 293.2: within 10 ms of 300
  EXPECT_FALSE(c.notify);
  c = t.update(5.0);       // 283
  EXPECT_TRUE(c.notify);
  EXPECT_EQ(t.last_notified(), 283.0);
  c = t.update(100.0);
  EXPECT_TRUE(c.unsatisfiable);
  EXPECT_EQ(c.bound_ms, 0.0);
}

Fragment frag(std::uint32_t seq, std::uint16_t index, std::uint16_t count = 8) {
  return {40.0 * seq, seq, index, count, 480};
}

void check_accounting(const JitterBuffer& b) {
  const auto& s = b.stats();
  EXPECT_EQ(s.pushed_packets, s.emitted_packets + b.buffered_packets() +
                                  s.lost_frame_packets + s.overflow_packets +
                                  s.late_packets + s.duplicate_packets);
}

TEST(JitterBuffer, CompleteFrameReleasedAtDeadline) {
  JitterBuffer buf(make_budget(400, 45, 45));
  for (std::uint16_t i = 0; i < 8; ++i) buf.push(100.0 + i, frag(0, i));
  EXPECT_TRUE(buf.pop_due(309.9).empty());
  const auto out = buf.pop_due(310.0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_FALSE(out[0].concealed);
  EXPECT_EQ(out[0].released_at, 310.0);
  EXPECT_EQ(buf.stats().emitted_frames, 1u);
  check_accounting(buf);
}

TEST(JitterBuffer, HeadroomFollowsNewestFrame) {
  JitterBuffer buf(make_budget(400, 40, 40));  // frames leave at ts + 320
  EXPECT_EQ(buf.headroom_ms(), 0.0);
  buf.push(100.0, frag(0, 0));
  EXPECT_EQ(buf.headroom_ms(), 220.0);
  buf.push(150.0, frag(1, 0));
  EXPECT_EQ(buf.headroom_ms(), 210.0);
  buf.push(400.0, frag(1, 1));  // late: not buffered, reading unchanged
  EXPECT_EQ(buf.headroom_ms(), 210.0);
}

TEST(JitterBuffer, MissingFragmentLosesFrame) {
  JitterBuffer buf(make_budget(400, 0, 0));
  for (std::uint16_t i = 0; i < 8; ++i) buf.push(10.0, frag(0, i));
  for (std::uint16_t i = 0; i < 8; ++i) {
    if (i != 4) buf.push(50.0, frag(1, i));
  }
  auto out = buf.pop_due(1000.0);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_FALSE(out[0].concealed);
  EXPECT_TRUE(out[1].concealed);
  EXPECT_EQ(buf.stats().lost_frames, 1u);
  EXPECT_EQ(buf.stats().lost_frame_packets, 7u);
  check_accounting(buf);
}

TEST(JitterBuffer, LateFragmentLogsTimeout) {
  JitterBuffer buf(make_budget(400, 0, 0));
  for (std::uint16_t i = 0; i < 7; ++i) buf.push(10.0, frag(0, i));
  buf.pop_due(400.0);
  EXPECT_EQ(buf.push(425.0, frag(0, 7)), PushOutcome::kLate);
  ASSERT_EQ(buf.timeouts().size(), 1u);
  EXPECT_EQ(buf.timeouts()[0].past_deadline_ms, 25.0);
  check_accounting(buf);
}

TEST(JitterBuffer, NeverSeenFrameConcealedInOrder) {
  JitterBuffer buf(make_budget(400, 0, 0));
  for (std::uint32_t seq : {0u, 1u, 3u}) {
    for (std::uint16_t i = 0; i < 2; ++i) buf.push(40.0 * seq + 5, frag(seq, i, 2));
  }
  const auto out = buf.pop_due(2000.0);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_TRUE(out[2].concealed);
  EXPECT_EQ(out[2].frame_seq, 2u);
  for (std::size_t i = 1; i < out.size(); ++i) {
    EXPECT_GT(out[i].source_ts, out[i - 1].source_ts);
  }
  EXPECT_EQ(buf.stats().lost_frames, 1u);
  check_accounting(buf);
}

TEST(JitterBuffer, DuplicatesIgnored) {
  JitterBuffer buf(make_budget(400, 0, 0));
  EXPECT_EQ(buf.push(1.0, frag(0, 0, 2)), PushOutcome::kBuffered);
  EXPECT_EQ(buf.push(2.0, frag(0, 0, 2)), PushOutcome::kDuplicate);
  buf.push(3.0, frag(0, 1, 2));
  EXPECT_EQ(buf.pop_due(400.0).size(), 1u);
  EXPECT_EQ(buf.stats().duplicate_packets, 1u);
  check_accounting(buf);
}

TEST(JitterBuffer, OverflowDropsOldest) {
  // A 1 s budget lets more than 400 ms of frames pile up.
  JitterBuffer buf(make_budget(1000, 0, 0));
  for (std::uint32_t seq = 0; seq < 12; ++seq) buf.push(40.0 * seq, frag(seq, 0, 1));
  EXPECT_LE(buf.occupancy_ms(), 400.0);
  EXPECT_EQ(buf.stats().overflow_frames, 2u);
  const auto out = buf.pop_due(5000.0);
  ASSERT_EQ(out.size(), 10u);
  EXPECT_EQ(out.front().frame_seq, 2u);
  check_accounting(buf);
}

TEST(JitterBuffer, RandomTrafficAccounting) {
  Rng rng(77);
  JitterBuffer buf(make_budget(400, 45, 45));
  Millis now = 0.0;
  std::uint64_t emitted_ts_checks = 0;
  Millis last_ts = -1.0;
  for (std::uint32_t seq = 0; seq < 3000; ++seq) {
    const Millis ts = 40.0 * seq;
    for (std::uint16_t i = 0; i < 8; ++i) {
      if (rng.bernoulli(0.01)) continue;
      const Millis delay = std::max(0.0, rng.normal(200.0, 40.0));
      const Millis at = ts + delay;
      now = std::max(now, at);
      buf.push(at, {ts, seq, i, 8, 480});
      if (rng.bernoulli(0.01)) buf.push(at + 1, {ts, seq, i, 8, 480});
    }
    for (const auto& f : buf.pop_due(ts)) {
      EXPECT_GT(f.source_ts, last_ts);
      EXPECT_GE(f.released_at, release_time(buf.budget(), f.source_ts) - 1e-6);
      last_ts = f.source_ts;
      ++emitted_ts_checks;
    }
  }
  EXPECT_GT(emitted_ts_checks, 2000u);
  check_accounting(buf);
}

}  // namespace
}  // namespace relaymesh
