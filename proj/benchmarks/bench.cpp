#include <benchmark/benchmark.h>

#include <filesystem>

#include "relaymesh/jitter.hpp"
#include "relaymesh/oracle.hpp"
#include "relaymesh/sim.hpp"
#include "relaymesh/wire.hpp"

namespace {

using namespace relaymesh;

std::vector<RoutingInstance> instances(int n, int min_nodes, int max_nodes) {
  Rng rng(17);
  RandomInstanceOptions opt;
  opt.min_surrogates = min_nodes;
  opt.max_surrogates = max_nodes;
  std::vector<RoutingInstance> out;
  for (int i = 0; i < n; ++i) out.push_back(random_instance(rng, opt));
  return out;
}

void BM_RoutingToQuiescence(benchmark::State& state) {
  const int nodes = static_cast<int>(state.range(0));
  const auto pool = instances(16, nodes, nodes);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& inst = pool[i++ % pool.size()];
    RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
    engine.initialize();
    benchmark::DoNotOptimize(run_to_quiescence(engine, {200, i}));
  }
}
BENCHMARK(BM_RoutingToQuiescence)->Arg(3)->Arg(6)->Arg(10);

void BM_OracleFourNodes(benchmark::State& state) {
  const auto pool = instances(8, 4, 4);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(solve_exact(pool[i++ % pool.size()]));
}
BENCHMARK(BM_OracleFourNodes)->Unit(benchmark::kMillisecond);

void BM_WireRoundTrip(benchmark::State& state) {
  wire::MediaPacket p;
  p.header = {123456, 7, 768, 25, 3, 1};
  p.payload.assign(static_cast<std::size_t>(state.range(0)), 0x5a);
  for (auto _ : state) benchmark::DoNotOptimize(wire::decode(wire::encode(p)));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(wire::kHeaderSize + p.payload.size()));
}
BENCHMARK(BM_WireRoundTrip)->Arg(0)->Arg(512);

void BM_JitterBufferFrame(benchmark::State& state) {
  JitterBuffer buffer(make_budget(400.0, 40.0, 40.0));
  std::uint32_t seq = 0;
  for (auto _ : state) {
    const Millis ts = 40.0 * seq;
    for (std::uint16_t k = 0; k < 8; ++k) buffer.push(ts + 150.0, {ts, seq, k, 8, 480});
    benchmark::DoNotOptimize(buffer.pop_due(ts + 150.0));
    ++seq;
  }
}
BENCHMARK(BM_JitterBufferFrame);

void BM_SimulateTenParty(benchmark::State& state) {
  const Scenario sc =
      load_scenario(std::filesystem::path(RELAYMESH_SCENARIO_DIR) / "ten_party.json");
  sim::RunOptions o;
  o.duration_ms = 10'000.0;
  for (auto _ : state) benchmark::DoNotOptimize(sim::run(sc, o));
}
BENCHMARK(BM_SimulateTenParty)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
