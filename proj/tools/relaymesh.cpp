// Command-line front end: run scenarios, compare against unicast, measure
// the heuristic against the exhaustive optimum, validate scenario files.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "relaymesh/oracle.hpp"
#include "relaymesh/sim.hpp"

namespace {

using namespace relaymesh;
namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kScenarioError = 1, kInfeasible = 2 };

struct Flags {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration_s;
  std::string out;
  int instances = 200;
  int max_nodes = 4;
};

sim::RunOptions options_from(const Flags& f) {
  sim::RunOptions o;
  o.seed = f.seed;
  if (f.duration_s) o.duration_ms = *f.duration_s * 1000.0;
  return o;
}

void print_log(const sim::MetricsLog& log) {
  std::uint64_t generated = 0, on_time = 0, late = 0, lost = 0;
  for (const auto& [key, t] : log.frames) {
    generated += t.generated;
    on_time += t.on_time;
    late += t.late;
    lost += t.lost;
  }
  std::printf("%s [%s] seed=%llu end=%.0f ms events=%llu\n", log.scenario.c_str(),
              sim::to_string(log.mode), static_cast<unsigned long long>(log.seed),
              log.end_ms, static_cast<unsigned long long>(log.events_processed));
  std::printf("  frames: generated=%llu on_time=%llu late=%llu lost=%llu\n",
              static_cast<unsigned long long>(generated),
              static_cast<unsigned long long>(on_time), static_cast<unsigned long long>(late),
              static_cast<unsigned long long>(lost));
  std::printf("  switches=%zu timeouts=%zu mean latency variance=%.3f ms^2\n",
              log.switches.size(), log.timeouts.size(), sim::mean_latency_variance(log));
}

int cmd_run(const Flags& f) {
  const Scenario sc = load_scenario(f.scenario);
  const auto log = sim::run(sc, options_from(f));
  print_log(log);
  if (!f.out.empty()) {
    sim::export_metrics(log, f.out);
    std::printf("  csv written to %s\n", f.out.c_str());
  }
  return kOk;
}

int cmd_compare(const Flags& f) {
  const Scenario sc = load_scenario(f.scenario);
  const auto logs = sim::compare_unicast(sc, options_from(f));
  print_log(logs.overlay);
  print_log(logs.unicast);
  const auto s = sim::summarize(logs);
  const double ratio = s.unicast_latency_variance > 0.0
                           ? s.overlay_latency_variance / s.unicast_latency_variance
                           : 0.0;
  std::printf("variance ratio overlay/unicast=%.4f timeouts overlay=%llu unicast=%llu\n",
              ratio, static_cast<unsigned long long>(s.overlay_timeouts),
              static_cast<unsigned long long>(s.unicast_timeouts));
  if (!f.out.empty()) {
    sim::export_metrics(logs.overlay, fs::path(f.out) / "overlay");
    sim::export_metrics(logs.unicast, fs::path(f.out) / "unicast");
    std::printf("csv written to %s/{overlay,unicast}\n", f.out.c_str());
  }
  return kOk;
}

std::string objective_text(bool feasible, double value) {
  if (!feasible) return "infeasible";
  if (std::isinf(value)) return "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  return buf;
}

int cmd_oracle_gap(const Flags& f) {
  std::ofstream csv;
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    csv.open(fs::path(f.out) / "oracle_gap.csv");
    csv << "instance,surrogates,heuristic,oracle,gap\n";
  }
  const auto report = [&](int index, const RoutingInstance& inst, const GapReport& g) {
    if (csv.is_open()) {
      csv << index << ',' << inst.topo.surrogates().size() << ','
          << objective_text(g.heuristic_feasible, g.heuristic_objective) << ','
          << objective_text(g.oracle.feasible, g.oracle.objective) << ',' << g.gap << '\n';
    }
  };

  if (!f.scenario.empty()) {
    const Scenario sc = load_scenario(f.scenario);
    const RoutingInstance inst = sim::routing_instance(sc);
    QuiescenceOptions q;
    q.seed = f.seed.value_or(sc.seed);
    const GapReport g = heuristic_gap(inst, q);
    report(0, inst, g);
    std::printf("heuristic=%s oracle=%s gap=%.6f\n",
                objective_text(g.heuristic_feasible, g.heuristic_objective).c_str(),
                objective_text(g.oracle.feasible, g.oracle.objective).c_str(), g.gap);
    return g.oracle.feasible ? kOk : kInfeasible;
  }

  Rng rng(f.seed.value_or(1));
  RandomInstanceOptions opt;
  opt.min_surrogates = 3;
  opt.max_surrogates = std::max(3, f.max_nodes);
  int zero = 0, above = 0;
  for (int i = 0; i < f.instances; ++i) {
    const RoutingInstance inst = random_instance(rng, opt);
    QuiescenceOptions q;
    q.seed = rng.next();
    const GapReport g = heuristic_gap(inst, q);
    report(i, inst, g);
    if (g.gap == 0.0) ++zero;
    if (g.gap < 0.0) ++above;  // heuristic beat the optimum: a bug
  }
  std::printf("instances=%d zero_gap=%d (%.1f%%) heuristic_above_oracle=%d\n", f.instances,
              zero, f.instances > 0 ? 100.0 * zero / f.instances : 0.0, above);
  return above == 0 ? kOk : kScenarioError;
}

int cmd_validate(const Flags& f) {
  const Scenario sc = load_scenario(f.scenario);
  const RoutingInstance inst = sim::routing_instance(sc);
  RoutingEngine engine(inst.topo, inst.model, inst.ladder, inst.bounds);
  const auto feasible = engine.initialize();
  if (!feasible.ok()) {
    std::printf("%s: %zu pair(s) cannot meet their bound\n", f.scenario.c_str(),
                feasible.witnesses.size());
    for (const auto& w : feasible.witnesses) {
      std::printf("  flow %s at %s: shortest %.1f ms > bound %.1f ms\n",
                  to_string(w.flow).c_str(), to_string(w.receiver).c_str(),
                  w.shortest_delay, w.bound);
    }
    return kInfeasible;
  }
  std::printf("%s: ok (%zu participants, %zu events, %.0f s)\n", f.scenario.c_str(),
              sc.participants.size(), sc.events.size(), sc.duration_ms / 1000.0);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relaymesh: overlay conferencing simulator"};
  app.require_subcommand(1);
  Flags flags;

  const auto common = [&](CLI::App* sub, bool scenario_required) {
    auto* opt = sub->add_option("--scenario", flags.scenario, "scenario file (JSON)")
                    ->check(CLI::ExistingFile);
    if (scenario_required) opt->required();
    sub->add_option("--seed", flags.seed, "override the scenario seed");
    sub->add_option("--out", flags.out, "directory for CSV output");
    sub->add_option("--duration", flags.duration_s, "override the duration, seconds")
        ->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "simulate a scenario through the overlay");
  common(run, true);
  auto* compare = app.add_subcommand("compare-unicast",
                                     "overlay and direct unicast on the same traffic");
  common(compare, true);
  auto* gap = app.add_subcommand(
      "oracle-gap", "heuristic vs exhaustive optimum on a scenario or random instances");
  common(gap, false);
  gap->add_option("--instances", flags.instances, "random instances when no scenario")
      ->check(CLI::NonNegativeNumber);
  gap->add_option("--max-nodes", flags.max_nodes, "largest random instance (3-4)")
      ->check(CLI::Range(3, 4));
  auto* validate = app.add_subcommand("validate", "check a scenario file and feasibility");
  validate->add_option("--scenario", flags.scenario, "scenario file (JSON)")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kScenarioError;
  }

  try {
    if (*run) return cmd_run(flags);
    if (*compare) return cmd_compare(flags);
    if (*gap) return cmd_oracle_gap(flags);
    if (*validate) return cmd_validate(flags);
  } catch (const sim::InfeasibleSession& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInfeasible;
  } catch (const DisconnectedTopology& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInfeasible;
  } catch (const OracleRefused& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kScenarioError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kScenarioError;
  }
  return kOk;
}
