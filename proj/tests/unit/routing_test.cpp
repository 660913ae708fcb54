#include <gtest/gtest.h>

#include "harness.hpp"
#include "relaymesh/instances.hpp"
#include "relaymesh/routing.hpp"

namespace relaymesh {
namespace {

constexpr SurrogateId S0{0}, S1{1}, S2{2}, S3{3}, S4{4};

LastMile caps_for(std::initializer_list<SurrogateId> flows, Kbps cap) {
  LastMile lm;
  lm.source_rate_kbps = 1049;
  for (auto f : flows) lm.accept_rate_kbps[f] = cap;
  return lm;
}

TopologySnapshot full_mesh(int n, Kbps capacity, Millis latency, Kbps cap) {
  TopologySnapshot topo;
  for (int i = 0; i < n; ++i) {
    LastMile lm;
    lm.source_rate_kbps = 1049;
    for (int j = 0; j < n; ++j) {
      if (j != i) lm.accept_rate_kbps[SurrogateId{std::uint32_t(j)}] = cap;
    }
    topo.add_surrogate(SurrogateId{std::uint32_t(i)}, lm);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) {
        topo.set_link(SurrogateId{std::uint32_t(i)}, SurrogateId{std::uint32_t(j)},
                      {capacity, latency});
      }
    }
  }
  return topo;
}

// a=0, b=1, c=2 with d(a,b)=100, d(a,c)=10, d(c,b)=10.
TopologySnapshot triangle() {
  TopologySnapshot topo;
  for (auto s : {S0, S1, S2}) topo.add_surrogate(s, caps_for({S0, S1, S2}, 512));
  auto both = [&](SurrogateId x, SurrogateId y, Millis d) {
    topo.set_link(x, y, {1024, d});
    topo.set_link(y, x, {1024, d});
  };
  both(S0, S1, 100.0);
  both(S0, S2, 10.0);
  both(S2, S1, 10.0);
  return topo;
}

TEST(ShortestPathTrees, TwoNodes) {
  const auto trees = build_shortest_path_trees(full_mesh(2, 1024, 10.0, 768));
  ASSERT_EQ(trees.size(), 2u);
  EXPECT_EQ(trees.at(S0).parent.at(S1), S0);
  EXPECT_EQ(trees.at(S0).path_delay.at(S1), 10.0);
  EXPECT_EQ(trees.at(S1).path_delay.at(S0), 10.0);
}

TEST(ShortestPathTrees, UniformMeshGivesStars) {
  const auto trees = build_shortest_path_trees(full_mesh(4, 1024, 10.0, 768));
  for (const auto& [m, t] : trees) {
    for (const auto& [child, up] : t.parent) EXPECT_EQ(up, m);
  }
}

TEST(ShortestPathTrees, TiesGoToLowestParent) {
  // 3 reaches 0 through 1 or 2 at equal cost.
  TopologySnapshot topo = full_mesh(4, 1024, 10.0, 768);
  topo.remove_link(S0, S3);
  const auto trees = build_shortest_path_trees(topo);
  EXPECT_EQ(trees.at(S0).parent.at(S3), S1);
  EXPECT_EQ(trees.at(S0).path_delay.at(S3), 20.0);
}

TEST(ShortestPathTrees, TriangleDetour) {
  const auto trees = build_shortest_path_trees(triangle());
  EXPECT_EQ(trees.at(S0).parent.at(S1), S2);
  EXPECT_EQ(trees.at(S0).path_delay.at(S1), 20.0);
}

TEST(ShortestPathTrees, DisconnectedNamesPairs) {
  TopologySnapshot topo = full_mesh(2, 1024, 10.0, 768);
  topo.add_surrogate(S2, caps_for({S0}, 256));
  try {
    build_shortest_path_trees(topo);
    FAIL() << "expected DisconnectedTopology";
  } catch (const DisconnectedTopology& e) {
    EXPECT_FALSE(e.unreachable().empty());
    bool saw = false;
    for (const auto& [m, n] : e.unreachable()) saw |= m == S0 && n == S2;
    EXPECT_TRUE(saw);
  }
}

TEST(Feasibility, Cases) {
  const auto topo = triangle();
  const auto trees = build_shortest_path_trees(topo);
  EXPECT_TRUE(check_feasibility(trees, DelayBounds{}).ok());

  DelayBounds tight;
  tight.set(S0, S1, 15.0);
  const auto r = check_feasibility(trees, tight);
  ASSERT_EQ(r.witnesses.size(), 1u);
  EXPECT_EQ(r.witnesses[0].flow, S0);
  EXPECT_EQ(r.witnesses[0].receiver, S1);
  EXPECT_EQ(r.witnesses[0].shortest_delay, 20.0);

  DelayBounds exact;
  for (const auto& [m, t] : trees) {
    for (const auto& [n, w] : t.path_delay) {
      if (n != m) exact.set(m, n, w);
    }
  }
  EXPECT_TRUE(check_feasibility(trees, exact).ok());
}

TEST(BasicRates, SharedBottleneck) {
  const auto inst = bottleneck_instance();
  const auto basic = allocate_basic_rates(inst.topo, inst.ladder,
                                         build_shortest_path_trees(inst.topo));
  EXPECT_EQ(basic.trees_per_link.at({bottleneck::kA, bottleneck::kC}), 2);
  EXPECT_EQ(basic.solution.end_rates.at({bottleneck::kA, bottleneck::kC}), 256);
  EXPECT_EQ(basic.solution.end_rates.at({bottleneck::kB, bottleneck::kC}), 256);
  EXPECT_TRUE(basic.starved.empty());
}

TEST(BasicRates, SingleFlowCappedByReceiver) {
  const auto topo = full_mesh(2, 1024, 10.0, 768);
  const auto basic =
      allocate_basic_rates(topo, RateLadder{}, build_shortest_path_trees(topo));
  EXPECT_EQ(basic.solution.end_rates.at({S0, S1}), 768);
}

TEST(BasicRates, ThreeTreesShareOneLink) {
  // Line 0-1-2-3; only (2,3) is narrow, and flows 0, 1, 2 all cross it.
  TopologySnapshot topo;
  for (auto s : {S0, S1, S2, S3}) topo.add_surrogate(s, caps_for({S0, S1, S2, S3}, 1049));
  for (auto [x, y] : {std::pair{S0, S1}, {S1, S2}, {S2, S3}}) {
    topo.set_link(x, y, {5000, 10.0});
    topo.set_link(y, x, {5000, 10.0});
  }
  topo.mutable_link(S2, S3).capacity_kbps = 900;
  const auto basic =
      allocate_basic_rates(topo, RateLadder{}, build_shortest_path_trees(topo));
  EXPECT_EQ(basic.trees_per_link.at({S2, S3}), 3);
  for (auto m : {S0, S1, S2}) EXPECT_EQ(basic.solution.end_rates.at({m, S3}), 256);
  EXPECT_EQ(basic.solution.end_rates.at({S3, S0}), 1049);
}

TEST(BasicRates, StarvedFlowFlagged) {
  const auto topo = full_mesh(2, 100, 10.0, 768);
  const auto basic =
      allocate_basic_rates(topo, RateLadder{}, build_shortest_path_trees(topo));
  EXPECT_EQ(basic.starved.size(), 2u);
  EXPECT_EQ(basic.solution.end_rates.at({S0, S1}), 0);
}

TEST(RequestedRate, Recursion) {
  EXPECT_EQ(requested_rate(256, {}, 512), 256);
  const Kbps one[] = {512};
  EXPECT_EQ(requested_rate(128, one, 768), 512);
  EXPECT_EQ(requested_rate(768, one, 256), 256);
}

TEST(MaximalDelay, Recursion) {
  EXPECT_EQ(maximal_delay(300.0, {}), 300.0);
  const ChildDelayTerm free_child[] = {{300.0, 50.0, 0.0}};
  EXPECT_EQ(maximal_delay(400.0, free_child), 250.0);
  const ChildDelayTerm costly[] = {{300.0, 50.0, 30.0}};
  EXPECT_EQ(maximal_delay(400.0, costly), 220.0);
}

// Flow 0 reaches 1 and 2 directly; 1 -> 2 costs 50 ms; 2 may wait 200 ms.
RoutingEngine admission_engine() {
  TopologySnapshot topo;
  for (auto s : {S0, S1, S2}) topo.add_surrogate(s, caps_for({S0, S1, S2}, 512));
  auto both = [&](SurrogateId x, SurrogateId y, Millis d) {
    topo.set_link(x, y, {2048, d});
    topo.set_link(y, x, {2048, d});
  };
  both(S0, S1, 10.0);
  both(S0, S2, 5.0);
  both(S1, S2, 50.0);
  DelayBounds bounds = DelayBounds::uniform(topo, 400.0);
  bounds.set(S0, S2, 200.0);
  RoutingEngine engine(topo, {}, RateLadder{}, bounds);
  EXPECT_TRUE(engine.initialize().ok());
  return engine;
}

TEST(Admission, EstimateAgainstBeta) {
  auto engine = admission_engine();
  ASSERT_EQ(engine.tables(S2).beta.at(S0), 200.0);
  PathBroadcast msg{S0, 512, 512, 100.0, ""};
  auto a = engine.admit_path_broadcast(S2, msg, S1);
  EXPECT_TRUE(a.admitted);
  EXPECT_EQ(a.estimate, 150.0);

  msg.latency = 180.0;
  a = engine.admit_path_broadcast(S2, msg, S1);
  EXPECT_FALSE(a.admitted);
  EXPECT_EQ(a.estimate, 230.0);
  // The rejection withdraws the earlier entry for the same upstream.
  EXPECT_EQ(engine.tables(S2).candidate(S0, S1), nullptr);
}

TEST(Admission, ReplacesInsteadOfDuplicating) {
  auto engine = admission_engine();
  PathBroadcast msg{S0, 512, 512, 100.0, ""};
  engine.admit_path_broadcast(S2, msg, S1);
  msg.latency = 90.0;
  engine.admit_path_broadcast(S2, msg, S1);
  const auto& entries = engine.tables(S2).custab.at(S0);
  EXPECT_EQ(std::count_if(entries.begin(), entries.end(),
                          [](const auto& e) { return e.via == S1; }),
            1);
  EXPECT_EQ(engine.tables(S2).candidate(S0, S1)->latency, 90.0);
}

TEST(Admission, OwnFlowAndNegativeBeta) {
  auto engine = admission_engine();
  const auto own = engine.admit_path_broadcast(S2, {S2, 512, 512, 0.0, ""}, S1);
  EXPECT_FALSE(own.admitted);
  EXPECT_EQ(own.reason, "own flow");

  engine.set_bound(S0, S2, -1.0);
  EXPECT_LT(engine.tables(S2).beta.at(S0), 0.0);
  const auto a = engine.admit_path_broadcast(S2, {S0, 512, 512, 0.0, ""}, S1);
  EXPECT_FALSE(a.admitted);
}

TEST(Bottleneck, BasicThenSwitchToD) {
  using namespace bottleneck;
  const auto inst = bottleneck_instance();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
    ASSERT_TRUE(engine.initialize().ok());
    EXPECT_EQ(engine.tree(kB).parent.at(kC), kA);
    EXPECT_EQ(engine.tree(kB).edge_rate.at(kC), 256);
    EXPECT_EQ(engine.tree(kA).edge_rate.at(kC), 256);

    const auto run = run_to_quiescence(engine, {200, seed});
    ASSERT_TRUE(run.converged);
    EXPECT_EQ(engine.tree(kB).parent.at(kC), kD) << "seed " << seed;
    EXPECT_EQ(engine.solution().end_rates.at({kB, kC}), 512);
    bool reparent = false;
    for (const auto& p : run.accepted) {
      reparent |= p.kind == SwitchKind::kReparent && p.flow == kB &&
                  p.node == kC && p.new_parent == kD && p.new_rate == 512;
    }
    EXPECT_TRUE(reparent);
    const auto report = validate_solution(engine.topology(), engine.model(),
                                          engine.solution(), engine.bounds(),
                                          &engine.ladder());
    EXPECT_TRUE(report.valid()) << report.summary();
  }
}

TEST(Bottleneck, NoProposalAtRequestedRate) {
  const auto topo = full_mesh(2, 1024, 10.0, 768);
  RoutingEngine engine(topo, {}, RateLadder{}, DelayBounds::uniform(topo, 400.0));
  ASSERT_TRUE(engine.initialize().ok());
  engine.gossip_round();
  EXPECT_FALSE(engine.evaluate_switch(S1, S0).has_value());
}

TEST(Bottleneck, DescendantBoundBlocksSwitch) {
  using namespace bottleneck;
  auto inst = bottleneck_instance();
  // e hangs off c; through d it would sit 35 ms from b, past its 32 ms bound.
  LastMile lm;
  lm.source_rate_kbps = 1049;
  for (auto f : {kA, kB, kC, kD}) lm.accept_rate_kbps[f] = 512;
  inst.topo.add_surrogate(S4, lm);
  for (auto f : {kA, kB, kC, kD}) {
    inst.topo.mutable_last_mile(f).accept_rate_kbps[S4] = 512;
  }
  inst.topo.set_link(kC, S4, {4096, 10.0});
  inst.topo.set_link(S4, kC, {4096, 10.0});
  inst.bounds = DelayBounds::uniform(inst.topo, 100.0);
  inst.bounds.set(kB, S4, 32.0);

  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  ASSERT_TRUE(engine.initialize().ok());
  ASSERT_EQ(engine.tree(kB).parent.at(S4), kC);
  run_to_quiescence(engine, {200, 5});
  EXPECT_EQ(engine.tree(kB).parent.at(kC), kA);
  EXPECT_LE(engine.delivery_latency(kB, S4), 32.0);
}

TEST(ApplySwitch, StaleProposalRejected) {
  using namespace bottleneck;
  const auto inst = bottleneck_instance();
  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  ASSERT_TRUE(engine.initialize().ok());
  engine.gossip_round();
  std::optional<SwitchProposal> first, second;
  for (const auto& [m, t] : engine.trees()) {
    for (auto n : t.members()) {
      if (n == m) continue;
      if (auto p = engine.evaluate(n, m)) {
        if (!first) {
          first = p;
        } else if (!second) {
          second = p;
        }
      }
    }
  }
  ASSERT_TRUE(first && second);
  engine.apply_switch(*first);
  EXPECT_THROW(engine.apply_switch(*second), StaleProposal);
}

TEST(Environment, LatencyIncreaseTriggersRepair) {
  // Mesh of 3; flow 0 to 2 goes direct until that link slows past the bound.
  TopologySnapshot topo = full_mesh(3, 2048, 10.0, 512);
  RoutingEngine engine(topo, {}, RateLadder{}, DelayBounds::uniform(topo, 50.0));
  ASSERT_TRUE(engine.initialize().ok());
  run_to_quiescence(engine, {});
  engine.set_link_latency(S0, S2, 80.0);
  EXPECT_TRUE(engine.latency_violated(S0, S2));
  const auto run = run_to_quiescence(engine, {});
  EXPECT_TRUE(run.converged);
  EXPECT_EQ(engine.tree(S0).parent.at(S2), S1);
  EXPECT_FALSE(engine.latency_violated(S0, S2));
  ASSERT_FALSE(run.accepted.empty());
  EXPECT_EQ(run.accepted.front().kind, SwitchKind::kRepair);
}

TEST(Environment, CapacityDropKeepsLinksWithinCapacity) {
  const auto inst = bottleneck_instance();
  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  ASSERT_TRUE(engine.initialize().ok());
  run_to_quiescence(engine, {});
  engine.set_link_capacity(bottleneck::kD, bottleneck::kC, 300);
  EXPECT_LE(engine.link_load(bottleneck::kD, bottleneck::kC), 300);
  run_to_quiescence(engine, {});
  const auto report = validate_solution(engine.topology(), engine.model(),
                                        engine.solution(), engine.bounds(),
                                        &engine.ladder());
  EXPECT_TRUE(report.valid()) << report.summary();
}

TEST(Environment, JoinAndLeave) {
  const auto inst = bottleneck_instance();
  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  ASSERT_TRUE(engine.initialize().ok());
  run_to_quiescence(engine, {});

  LastMile lm;
  lm.source_rate_kbps = 1049;
  for (auto f : {bottleneck::kA, bottleneck::kB, bottleneck::kC, bottleneck::kD}) lm.accept_rate_kbps[f] = 256;
  std::map<DirectedLink, Link> links;
  links[{bottleneck::kA, S4}] = {1024, 12.0};
  links[{S4, bottleneck::kA}] = {1024, 12.0};
  links[{bottleneck::kD, S4}] = {1024, 8.0};
  links[{S4, bottleneck::kD}] = {1024, 8.0};
  for (auto f : {bottleneck::kA, bottleneck::kB, bottleneck::kC, bottleneck::kD}) {
    engine.set_accept_rate(S4, f, 256);
  }
  engine.add_member(S4, lm, links);
  for (const auto& [m, t] : engine.trees()) EXPECT_TRUE(t.contains(S4));
  EXPECT_TRUE(engine.trees().contains(S4));
  run_to_quiescence(engine, {});
  auto report = validate_solution(engine.topology(), engine.model(),
                                  engine.solution(), engine.bounds(),
                                  &engine.ladder());
  EXPECT_TRUE(report.valid()) << report.summary();

  engine.remove_member(bottleneck::kD);
  EXPECT_FALSE(engine.trees().contains(bottleneck::kD));
  for (const auto& [m, t] : engine.trees()) {
    EXPECT_FALSE(t.contains(bottleneck::kD));
    EXPECT_TRUE(t.is_acyclic());
  }
  run_to_quiescence(engine, {});
  report = validate_solution(engine.topology(), engine.model(), engine.solution(),
                             engine.bounds(), &engine.ladder());
  EXPECT_TRUE(report.valid()) << report.summary();
}

TEST(Properties, RandomizedAdjustmentSchedules) {
  const auto totals = testing::run_property_harness(2024, 150);
  const auto& s = totals.sum;
  EXPECT_GT(s.switches, 0);
  EXPECT_EQ(totals.non_converged, 0);
  EXPECT_EQ(s.cycle_violations, 0);
  EXPECT_EQ(s.bound_violations, 0);
  EXPECT_EQ(s.downsampling_violations, 0);
  EXPECT_EQ(s.rate_regressions, 0);
  EXPECT_EQ(s.table_mismatches, 0);
  EXPECT_EQ(s.invalid_states, 0);
  for (const auto& n : s.notes) ADD_FAILURE() << n;
  RecordProperty("admission_checks", s.admission_checks);
  RecordProperty("admission_underestimates", s.admission_underestimates);
}

}  // namespace
}  // namespace relaymesh
