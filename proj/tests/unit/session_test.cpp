#include <gtest/gtest.h>

#include "relaymesh/session.hpp"

namespace relaymesh {
namespace {

SurrogateId S(std::uint32_t v) { return SurrogateId{v}; }

TEST(Clock, SymmetricExample) {
  // True skew +50, 20 ms each way.
  const auto off = calibrate_clock(0, 70, 70, 40);
  ASSERT_TRUE(off);
  EXPECT_EQ(*off, 50.0);
}

TEST(Clock, AsymmetricDelayBiasesEstimate) {
  // No true skew, 10 ms out and 30 ms back.
  const auto off = calibrate_clock(0, 10, 10, 40);
  ASSERT_TRUE(off);
  EXPECT_EQ(*off, -10.0);
}

TEST(Clock, ReversedExchangeDiscarded) {
  EXPECT_FALSE(calibrate_clock(100, 150, 150, 90));
  ClockCalibrator c;
  EXPECT_FALSE(c.update(100, 150, 150, 90));
  EXPECT_FALSE(c.calibrated());
}

TEST(Clock, EwmaConvergesToSkew) {
  ClockCalibrator c(0.25);
  Millis t = 0;
  for (int i = 0; i < 40; ++i, t += 1000) {
    // Alternating asymmetry around a +50 skew.
    const Millis out = (i % 2) ? 15 : 25;
    const Millis back = (i % 2) ? 25 : 15;
    c.update(t, t + out + 50, t + out + 50, t + out + back);
  }
  EXPECT_NEAR(c.offset(), 50.0, 3.0);
  EXPECT_NEAR(c.to_initiator(1000.0), 1000.0 + c.offset(), 1e-12);
}

TEST(Clock, RttFilterSkipsSpikedExchanges) {
  ClockCalibrator c(0.25, 10.0);
  c.update(0, 70, 70, 40);  // rtt 40, offset 50
  // 100 ms spike on the way out only: would read +100.
  EXPECT_FALSE(c.update(1000, 1170, 1170, 1140));
  EXPECT_EQ(c.offset(), 50.0);
  EXPECT_TRUE(c.update(2000, 2070, 2070, 2045));  // rtt 45, within slack
  c.reset();
  EXPECT_FALSE(c.calibrated());
}

TEST(Session, FirstJoinFoundsSession) {
  SessionState s;
  const auto e = s.join(S(7), "hk-7", 0);
  EXPECT_EQ(e.kind, RosterEventKind::kFounded);
  EXPECT_EQ(s.initiator(), S(7));
  EXPECT_EQ(s.epoch(), 0u);
}

TEST(Session, DuplicateJoinIsNoOp) {
  SessionState s;
  s.join(S(1), "a", 0);
  s.join(S(2), "b", 0);
  const auto before = s.roster();
  const auto e = s.join(S(2), "b-again", 500);
  EXPECT_EQ(e.kind, RosterEventKind::kDuplicate);
  EXPECT_EQ(s.roster(), before);
  EXPECT_EQ(s.members().at(S(2)).address, "b");
}

TEST(Session, SameTickJoinsOrderedById) {
  SessionState s;
  const auto ev = s.join_batch({{S(9), "x"}, {S(3), "y"}, {S(5), "z"}}, 0);
  ASSERT_EQ(ev.size(), 3u);
  EXPECT_EQ(ev[0].who, S(3));
  EXPECT_EQ(ev[0].kind, RosterEventKind::kFounded);
  EXPECT_EQ(s.initiator(), S(3));
}

TEST(Session, ThreeMissedHeartbeatsExpire) {
  SessionState s;
  s.join(S(1), "a", 0);
  s.join(S(2), "b", 0);
  s.join(S(3), "c", 0);
  for (Millis t = 1000; t <= 2000; t += 1000) {
    s.record_heartbeat(S(2), t);
    EXPECT_TRUE(s.heartbeat_tick(t).events.empty());
  }
  // Member 3 last heard at 0; member 2 at 2000.
  const auto tick = s.heartbeat_tick(3000);
  ASSERT_EQ(tick.events.size(), 1u);
  EXPECT_EQ(tick.events[0].who, S(3));
  EXPECT_EQ(tick.events[0].kind, RosterEventKind::kExpired);
  EXPECT_TRUE(tick.broadcast_due);
  EXPECT_TRUE(s.contains(S(2)));
  EXPECT_TRUE(s.heartbeat_tick(4999).events.empty());
}

TEST(Session, RosterPeriodic) {
  SessionState s;
  s.join(S(1), "a", 0);
  s.mark_broadcast(0);
  EXPECT_FALSE(s.heartbeat_tick(4000).broadcast_due);
  EXPECT_TRUE(s.heartbeat_tick(5000).broadcast_due);
}

TEST(Session, FailoverPicksLowestSurvivor) {
  SessionState s;
  s.join_batch({{S(4), "a"}, {S(8), "b"}, {S(6), "c"}}, 0);
  ASSERT_EQ(s.initiator(), S(4));
  const auto ev = s.leave(S(4), 100);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[1].kind, RosterEventKind::kFailover);
  EXPECT_EQ(s.initiator(), S(6));
  EXPECT_EQ(s.epoch(), 1u);
  EXPECT_FALSE(s.contains(S(4)));
}

TEST(Session, JoinAfterInitiatorLossUsesNewEpoch) {
  SessionState s;
  s.join_batch({{S(1), "a"}, {S(2), "b"}}, 0);
  s.failover(3000);
  const auto e = s.join(S(3), "c", 3000);
  EXPECT_EQ(e.kind, RosterEventKind::kJoined);
  EXPECT_EQ(e.epoch, 1u);
  EXPECT_EQ(s.initiator(), S(2));
}

TEST(Session, LastLeaveCloses) {
  SessionState s;
  s.join(S(1), "a", 0);
  s.join(S(2), "b", 0);
  s.leave(S(2), 10);
  EXPECT_FALSE(s.closed());
  const auto ev = s.leave(S(1), 20);
  EXPECT_TRUE(s.closed());
  EXPECT_EQ(ev.back().kind, RosterEventKind::kClosed);
  // Rejoining refounds.
  EXPECT_EQ(s.join(S(5), "e", 30).kind, RosterEventKind::kFounded);
}

TEST(Session, LeaveUnknownIgnored) {
  SessionState s;
  s.join(S(1), "a", 0);
  EXPECT_TRUE(s.leave(S(9), 0).empty());
}

TEST(MemberView, DetectsSilentInitiatorAndAgreesOnSuccessor) {
  SessionState s;
  s.join_batch({{S(1), "a"}, {S(2), "b"}, {S(3), "c"}, {S(4), "d"}}, 0);
  const Roster r = s.roster();
  MemberView v2(S(2), r, 0), v3(S(3), r, 0), v4(S(4), r, 0);
  for (Millis t = 1000; t < 3000; t += 1000) {
    v2.on_ack(t, t - 20, t - 10, t - 10);
    v3.on_ack(t, t - 20, t - 10, t - 10);
    v4.on_ack(t, t - 20, t - 10, t - 10);
    EXPECT_FALSE(v2.check_initiator(t));
  }
  // Initiator gone after 2000.
  EXPECT_FALSE(v3.check_initiator(4999));
  const auto a = v2.check_initiator(5000);
  const auto b = v3.check_initiator(5000);
  const auto c = v4.check_initiator(5000);
  ASSERT_TRUE(a && b && c);
  EXPECT_TRUE(a->self_promoted);
  EXPECT_FALSE(b->self_promoted);
  EXPECT_EQ(b->successor, S(2));
  EXPECT_EQ(c->successor, S(2));

  auto next = SessionState::take_over(v2.roster(), {{S(3), "c"}, {S(4), "d"}}, 5000);
  EXPECT_EQ(next.initiator(), S(2));
  EXPECT_EQ(next.epoch(), 1u);
  EXPECT_FALSE(next.contains(S(1)));
  EXPECT_TRUE(v3.on_roster(next.roster(), 5100));
  EXPECT_EQ(v2.roster(), next.roster());
  EXPECT_EQ(v3.roster(), next.roster());
  EXPECT_EQ(v4.roster(), next.roster());
}

TEST(MemberView, NewInitiatorGetsFullTimeout) {
  Roster r{0, S(1), {S(1), S(2), S(3)}};
  MemberView v(S(3), r, 0);
  // Roster from the successor arrives before this member noticed the loss.
  EXPECT_TRUE(v.on_roster({1, S(2), {S(2), S(3)}}, 3500));
  EXPECT_FALSE(v.check_initiator(4000));
  EXPECT_FALSE(v.check_initiator(6499));
  EXPECT_TRUE(v.check_initiator(6500));
}

TEST(MemberView, StaleRosterRejected) {
  Roster r{3, S(1), {S(1), S(2)}};
  MemberView v(S(2), r, 0);
  Roster old{2, S(5), {S(2), S(5)}};
  EXPECT_FALSE(v.on_roster(old, 10));
  EXPECT_EQ(v.roster(), r);
}

TEST(Gateway, AssignsByRegionThenAny) {
  Gateway g;
  g.add_to_pool(S(1), "eu");
  g.add_to_pool(S(2), "hk");
  g.add_to_pool(S(3), "hk");
  EXPECT_EQ(g.assign("hk"), S(2));
  EXPECT_EQ(g.assign("hk"), S(3));
  EXPECT_EQ(g.assign("hk"), S(1));
  EXPECT_FALSE(g.assign("hk"));
  g.release(S(3));
  EXPECT_EQ(g.free_count(), 1u);
  EXPECT_EQ(g.assign("us"), S(3));
}

}  // namespace
}  // namespace relaymesh
