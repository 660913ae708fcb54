#include "relaymesh/instances.hpp"

#include <algorithm>
#include <cmath>

#include "relaymesh/routing.hpp"

namespace relaymesh {

namespace {

void link_both(TopologySnapshot& topo, SurrogateId x, SurrogateId y,
               Kbps capacity, Millis latency) {
  topo.set_link(x, y, {capacity, latency});
  topo.set_link(y, x, {capacity, latency});
}

}  // namespace

RoutingInstance bottleneck_instance() {
  using namespace bottleneck;
  RoutingInstance inst;
  const SurrogateId all[] = {kA, kB, kC, kD};
  for (SurrogateId id : all) {
    LastMile lm;
    lm.uplink_delay_ms = 5.0;
    lm.downlink_delay_ms = 5.0;
    lm.source_rate_kbps = 1049;
    for (SurrogateId flow : all) {
      if (flow != id) lm.accept_rate_kbps[flow] = 512;
    }
    inst.topo.add_surrogate(id, lm);
  }
  // c wants more of b than the bottleneck can carry.
  inst.topo.mutable_last_mile(kC).accept_rate_kbps[kB] = 768;

  link_both(inst.topo, kA, kB, 1024, 10.0);
  link_both(inst.topo, kA, kC, 1024, 10.0);
  link_both(inst.topo, kA, kD, 1024, 20.0);
  link_both(inst.topo, kB, kD, 1024, 15.0);
  link_both(inst.topo, kC, kD, 1024, 10.0);
  inst.topo.mutable_link(kA, kC).capacity_kbps = 512;

  inst.bounds = DelayBounds::uniform(inst.topo, 100.0);
  // Otherwise flow a could take the detour instead and leave b on (a,c).
  inst.bounds.set(kA, kC, 25.0);
  return inst;
}

RoutingInstance random_instance(Rng& rng, const RandomInstanceOptions& opt) {
  static constexpr Kbps kCapacities[] = {256, 512, 768, 1024, 1536, 2048};
  static constexpr Kbps kCaps[] = {128, 256, 512, 768, 1049};

  RoutingInstance inst;
  const int span = opt.max_surrogates - opt.min_surrogates + 1;
  const int n = opt.min_surrogates + static_cast<int>(rng.below(span));

  for (int i = 0; i < n; ++i) {
    LastMile lm;
    lm.uplink_delay_ms = rng.uniform(2.0, 20.0);
    lm.downlink_delay_ms = rng.uniform(2.0, 20.0);
    lm.source_rate_kbps = inst.ladder.max();
    for (int j = 0; j < n; ++j) {
      if (j != i) {
        lm.accept_rate_kbps[SurrogateId{static_cast<std::uint32_t>(j)}] =
            kCaps[rng.below(std::size(kCaps))];
      }
    }
    inst.topo.add_surrogate(SurrogateId{static_cast<std::uint32_t>(i)}, lm);
  }

  auto add = [&](int x, int y) {
    const SurrogateId a{static_cast<std::uint32_t>(x)};
    const SurrogateId b{static_cast<std::uint32_t>(y)};
    const Millis latency = std::round(rng.uniform(5.0, 60.0));
    inst.topo.set_link(a, b,
                       {kCapacities[rng.below(std::size(kCapacities))], latency});
    inst.topo.set_link(b, a,
                       {kCapacities[rng.below(std::size(kCapacities))], latency});
  };
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const bool ring = j == i + 1 || (i == 0 && j == n - 1);
      if (ring || rng.bernoulli(opt.link_probability)) add(i, j);
    }
  }

  if (opt.transcoding) {
    inst.model.base_ms = rng.uniform(0.0, 8.0);
    inst.model.in_coef_ms_per_kbps = rng.uniform(0.0, 0.004);
    inst.model.out_coef_ms_per_kbps = rng.uniform(0.0, 0.004);
    for (SurrogateId id : inst.topo.surrogates()) {
      inst.model.speed_factor[id] = rng.uniform(0.5, 2.0);
    }
  }

  const auto trees = build_shortest_path_trees(inst.topo);
  for (const auto& [flow, tree] : trees) {
    for (const auto& [receiver, omega] : tree.path_delay) {
      if (receiver == flow) continue;
      // Leave room for transcoding along the shortest path.
      const Millis floor_ms = omega + 35.0 * tree.path_to(receiver).size();
      inst.bounds.set(flow, receiver,
                      std::round(floor_ms * rng.uniform(opt.min_bound_slack,
                                                        opt.max_bound_slack)));
    }
  }
  return inst;
}

}  // namespace relaymesh
