#pragma once

#include <cstdint>

#include "relaymesh/model.hpp"
#include "relaymesh/rng.hpp"

namespace relaymesh {

// A complete routing problem: graph, transcoding costs, ladder and bounds.
struct RoutingInstance {
  TopologySnapshot topo;
  TranscodeModel model;
  RateLadder ladder;
  DelayBounds bounds;
};

namespace bottleneck {
inline constexpr SurrogateId kA{0};
inline constexpr SurrogateId kB{1};
inline constexpr SurrogateId kC{2};
inline constexpr SurrogateId kD{3};
}  // namespace bottleneck

// Four surrogates a, b, c, d. The only bottleneck is (a,c) at 512 kbps; every
// other link carries 1024 kbps. Shortest paths send flow b to c through a,
// while the detour b -> d -> c has spare capacity. Flow a's bound at c rules
// the detour out for a. Transcoding is free.
RoutingInstance bottleneck_instance();

struct RandomInstanceOptions {
  int min_surrogates = 3;
  int max_surrogates = 6;
  double link_probability = 0.8;  // per unordered pair, beyond a spanning ring
  // Bounds are the shortest-path delay times a factor in this range.
  double min_bound_slack = 1.0;
  double max_bound_slack = 2.5;
  bool transcoding = true;
};

// Connected random instance whose shortest-path trees meet every bound.
RoutingInstance random_instance(Rng& rng, const RandomInstanceOptions& options);

}  // namespace relaymesh
