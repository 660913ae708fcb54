#include <cstdio>
#include <fstream>

#include "relaymesh/sim.hpp"

namespace relaymesh::sim {

namespace {

std::string num(double x) {
  if (x == 0.0) x = 0.0;  // drops the sign of -0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", x);
  std::string s = buf;
  if (s == "-0.000") s = "0.000";
  return s;
}

std::string id(SurrogateId s) { return std::to_string(s.value); }

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SimulationError("cannot write " + path.string());
  out << header << '\n';
  return out;
}

}  // namespace

void export_metrics(const MetricsLog& log, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw SimulationError("cannot create " + dir.string() + ": " + ec.message());

  {
    auto out = open_csv(dir / "flow_rates.csv", "time_ms,flow,receiver,rate_kbps");
    for (const auto& r : log.rates) {
      out << num(r.time_ms) << ',' << id(r.flow) << ',' << id(r.receiver) << ','
          << r.rate_kbps << '\n';
    }
  }
  {
    auto out = open_csv(dir / "buffer.csv",
                        "time_ms,flow,receiver,occupancy_ms,sigma_hat_ms,bound_L_ms");
    for (const auto& b : log.buffers) {
      out << num(b.time_ms) << ',' << id(b.flow) << ',' << id(b.receiver) << ','
          << num(b.occupancy_ms) << ',' << num(b.sigma_hat_ms) << ',' << num(b.bound_ms)
          << '\n';
    }
  }
  {
    auto out = open_csv(dir / "latency.csv", "time_ms,flow,receiver,latency_ms,frames");
    for (const auto& l : log.latencies) {
      out << num(l.time_ms) << ',' << id(l.flow) << ',' << id(l.receiver) << ','
          << num(l.latency_ms) << ',' << l.frames << '\n';
    }
  }
  {
    auto out = open_csv(dir / "switches.csv",
                        "time_ms,flow,node,kind,old_parent,new_parent,old_rate_kbps,"
                        "new_rate_kbps");
    for (const auto& s : log.switches) {
      const auto& p = s.proposal;
      out << num(s.time_ms) << ',' << id(p.flow) << ',' << id(p.node) << ','
          << to_string(p.kind) << ',' << id(p.old_parent) << ',' << id(p.new_parent) << ','
          << p.old_rate << ',' << p.new_rate << '\n';
    }
  }
  {
    auto out = open_csv(dir / "timeouts.csv",
                        "time_ms,flow,receiver,frame_seq,past_deadline_ms");
    for (const auto& t : log.timeouts) {
      out << num(t.time_ms) << ',' << id(t.flow) << ',' << id(t.receiver) << ','
          << t.frame_seq << ',' << num(t.past_deadline_ms) << '\n';
    }
  }
  {
    auto out = open_csv(dir / "session.csv", "time_ms,event,surrogate,epoch,initiator");
    for (const auto& s : log.session) {
      out << num(s.time_ms) << ',' << s.event << ',' << id(s.who) << ',' << s.epoch << ','
          << id(s.initiator) << '\n';
    }
  }
  {
    auto out = open_csv(dir / "clock.csv", "time_ms,surrogate,initiator,offset_ms");
    for (const auto& c : log.clocks) {
      out << num(c.time_ms) << ',' << id(c.member) << ',' << id(c.initiator) << ','
          << num(c.offset_ms) << '\n';
    }
  }
  {
    auto out = open_csv(dir / "frames.csv",
                        "flow,receiver,generated,on_time,late,lost,in_flight,"
                        "latency_mean_ms,latency_var_ms2");
    for (const auto& [key, t] : log.frames) {
      out << id(key.first) << ',' << id(key.second) << ',' << t.generated << ','
          << t.on_time << ',' << t.late << ',' << t.lost << ',' << t.in_flight << ','
          << num(t.latency_mean_ms) << ',' << num(t.latency_variance()) << '\n';
    }
  }
}

}  // namespace relaymesh::sim
