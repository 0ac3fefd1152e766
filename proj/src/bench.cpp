#include "shmbus/bench.hpp"

#include <sched.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "shmbus/registry.hpp"

namespace shmbus::bench {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Graphs and sweeps

std::string to_string(Graph g) {
  switch (g) {
    case Graph::kOnePubOneSub: return "1p1s";
    case Graph::kOnePubFiveSub: return "1p5s";
    case Graph::kFivePubOneSub: return "5p1s";
  }
  return "?";
}

Graph graph_from_string(const std::string& s) {
  if (s == "1p1s") return Graph::kOnePubOneSub;
  if (s == "1p5s") return Graph::kOnePubFiveSub;
  if (s == "5p1s") return Graph::kFivePubOneSub;
  throw BenchError("unknown graph: " + s + " (expected 1p1s|1p5s|5p1s)");
}

uint32_t publisher_count(Graph g) { return g == Graph::kFivePubOneSub ? 5 : 1; }
uint32_t subscriber_count(Graph g) { return g == Graph::kOnePubFiveSub ? 5 : 1; }

const std::vector<uint64_t>& default_payload_sweep() {
  static const std::vector<uint64_t> sweep = {
      128,        512,        1024,       2048,        4096,
      8192,       32 * 1024,  128 * 1024, 512 * 1024,  1024 * 1024,
      2u << 20,   4u << 20,   8u << 20,   16u << 20,
  };
  return sweep;
}

// ---------------------------------------------------------------------------
// Statistics

QuantileSummary compute_stats(std::span<const uint64_t> latencies_ns) {
  if (latencies_ns.empty()) throw BenchError("compute_stats on empty input");
  std::vector<uint64_t> sorted(latencies_ns.begin(), latencies_ns.end());
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  auto rank = [&](double q) -> uint64_t {
    size_t r = static_cast<size_t>(std::ceil(q * static_cast<double>(n)));
    if (r == 0) r = 1;
    return sorted[r - 1];
  };
  QuantileSummary out;
  out.min = sorted.front();
  out.p25 = rank(0.25);
  out.median = rank(0.50);
  out.p75 = rank(0.75);
  out.p95 = rank(0.95);
  out.p99 = rank(0.99);
  out.max = sorted.back();
  out.count = n;
  return out;
}

std::map<std::pair<uint32_t, uint32_t>, QuantileSummary> compute_stats(
    const std::vector<LatencyRecord>& records) {
  std::map<std::pair<uint32_t, uint32_t>, std::vector<uint64_t>> grouped;
  for (const auto& r : records)
    grouped[{r.publisher_id, r.subscriber_id}].push_back(r.latency_ns);
  std::map<std::pair<uint32_t, uint32_t>, QuantileSummary> out;
  for (auto& [k, v] : grouped) out[k] = compute_stats(v);
  return out;
}

uint64_t median_publish_interval_ns(const std::vector<LatencyRecord>& records,
                                    uint32_t publisher_id) {
  std::map<uint64_t, uint64_t> stamp_by_seq;
  for (const auto& r : records)
    if (r.publisher_id == publisher_id) stamp_by_seq.emplace(r.seq, r.stamp_ns);
  std::vector<uint64_t> intervals;
  uint64_t prev_seq = 0, prev_stamp = 0;
  bool have_prev = false;
  for (const auto& [seq, stamp] : stamp_by_seq) {
    if (have_prev && seq == prev_seq + 1 && stamp > prev_stamp)
      intervals.push_back(stamp - prev_stamp);
    prev_seq = seq;
    prev_stamp = stamp;
    have_prev = true;
  }
  if (intervals.empty()) throw BenchError("no consecutive publishes to measure");
  return compute_stats(intervals).median;
}

// ---------------------------------------------------------------------------
// CSV / summary / plot script

namespace {
constexpr const char* kCsvVersionLine = "# shmbus-bench-csv v1";
constexpr const char* kCsvHeader =
    "graph,transport,payload,count,rate_hz,ordered,nodelay,environment,topic,"
    "publisher,subscriber,seq,stamp_ns,recv_ns,latency_ns";
}  // namespace

void emit_csv(const RunReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw BenchError("cannot write CSV: " + path);
  out << kCsvVersionLine << "\n" << kCsvHeader << "\n";
  const auto& s = report.scenario;
  for (const auto& r : report.records) {
    out << to_string(s.graph) << ',' << to_string(s.transport) << ','
        << s.payload_size << ',' << s.message_count << ',' << s.rate_hz << ','
        << (s.ordered ? 1 : 0) << ',' << (s.nodelay ? 1 : 0) << ','
        << s.environment_label << ',' << r.topic << ',' << r.publisher_id << ','
        << r.subscriber_id << ',' << r.seq << ',' << r.stamp_ns << ','
        << r.recv_monotonic_ns << ',' << r.latency_ns << '\n';
  }
  if (!out) throw BenchError("short write to CSV: " + path);
}

std::vector<LatencyRecord> parse_csv_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw BenchError("cannot read CSV: " + path);
  std::string line;
  std::getline(in, line);
  if (line != kCsvVersionLine) throw BenchError("unrecognized CSV version in " + path);
  std::getline(in, line);  // header
  std::vector<LatencyRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 15) throw BenchError("malformed CSV row in " + path);
    LatencyRecord r;
    r.topic = cols[8];
    r.publisher_id = static_cast<uint32_t>(std::stoul(cols[9]));
    r.subscriber_id = static_cast<uint32_t>(std::stoul(cols[10]));
    r.seq = std::stoull(cols[11]);
    r.stamp_ns = std::stoull(cols[12]);
    r.recv_monotonic_ns = std::stoull(cols[13]);
    r.latency_ns = std::stoull(cols[14]);
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

std::string ns_to_human(uint64_t ns) {
  char buf[32];
  if (ns >= 1000000)
    std::snprintf(buf, sizeof(buf), "%.3f ms", ns / 1e6);
  else
    std::snprintf(buf, sizeof(buf), "%.1f us", ns / 1e3);
  return buf;
}

}  // namespace

std::string emit_summary(const RunReport& report) {
  std::ostringstream out;
  const auto& s = report.scenario;
  out << "scenario: " << to_string(s.graph) << " " << to_string(s.transport)
      << " payload=" << s.payload_size << "B count=" << s.message_count
      << " rate=" << s.rate_hz << "Hz ordered=" << (s.ordered ? "yes" : "no")
      << " nodelay=" << (s.nodelay ? "yes" : "no") << " env=" << s.environment_label
      << "\n";
  out << "pub sub delivered lost      min      p25   median      p75      p95      "
         "p99      max\n";
  for (const auto& p : report.pairs) {
    char line[256];
    std::snprintf(line, sizeof(line), "%3u %3u %9lu %4lu %8s %8s %8s %8s %8s %8s %8s\n",
                  p.publisher_id, p.subscriber_id,
                  static_cast<unsigned long>(p.delivered),
                  static_cast<unsigned long>(p.lost),
                  ns_to_human(p.latency.min).c_str(), ns_to_human(p.latency.p25).c_str(),
                  ns_to_human(p.latency.median).c_str(),
                  ns_to_human(p.latency.p75).c_str(), ns_to_human(p.latency.p95).c_str(),
                  ns_to_human(p.latency.p99).c_str(), ns_to_human(p.latency.max).c_str());
    out << line;
  }
  if (subscriber_count(s.graph) > 1)
    out << "fairness_gap: " << ns_to_human(report.fairness_gap_ns) << "\n";
  for (const auto& proc : report.processes) {
    out << "cpu " << proc.role << " (pid " << proc.pid
        << "): user=" << proc.cpu_user_ns / 1e9 << "s sys=" << proc.cpu_system_ns / 1e9
        << "s exit=" << proc.exit_code << "\n";
  }
  out << "wall: " << report.wall_ns / 1e9 << "s"
      << (report.failed ? "  FAILED: " + report.failure : "") << "\n";
  return out.str();
}

void emit_plot_script(const std::vector<std::string>& csv_paths,
                      const std::string& out_path) {
  std::ofstream out(out_path);
  if (!out) throw BenchError("cannot write plot script: " + out_path);
  out << "#!/usr/bin/env python3\n"
         "# Boxplots of delivery latency grouped by payload size and transport.\n"
         "import csv, collections\n"
         "import matplotlib\n"
         "matplotlib.use('Agg')\n"
         "import matplotlib.pyplot as plt\n\n"
         "paths = [\n";
  for (const auto& p : csv_paths) out << "    " << std::quoted(p) << ",\n";
  out << "]\n\n"
         "groups = collections.defaultdict(list)  # (transport, payload) -> [ms]\n"
         "for path in paths:\n"
         "    with open(path) as f:\n"
         "        next(f)  # version line\n"
         "        for row in csv.DictReader(f):\n"
         "            key = (row['transport'], int(row['payload']))\n"
         "            groups[key].append(int(row['latency_ns']) / 1e6)\n\n"
         "transports = sorted({t for t, _ in groups})\n"
         "payloads = sorted({p for _, p in groups})\n"
         "fig, ax = plt.subplots(figsize=(12, 6))\n"
         "width = 0.8 / max(len(transports), 1)\n"
         "for i, t in enumerate(transports):\n"
         "    data = [groups.get((t, p), [float('nan')]) for p in payloads]\n"
         "    pos = [j + i * width for j in range(len(payloads))]\n"
         "    bp = ax.boxplot(data, positions=pos, widths=width * 0.9,\n"
         "                    patch_artist=True, showfliers=False)\n"
         "    for box in bp['boxes']:\n"
         "        box.set_facecolor(f'C{i}')\n"
         "    ax.plot([], [], color=f'C{i}', label=t)\n"
         "ax.set_xticks([j + 0.4 for j in range(len(payloads))])\n"
         "ax.set_xticklabels([f'{p}B' if p < 1024 else (f'{p >> 10}KB' if p < 1 << 20 "
         "else f'{p >> 20}MB') for p in payloads], rotation=45)\n"
         "ax.set_xlabel('payload size')\n"
         "ax.set_ylabel('latency (ms)')\n"
         "ax.set_yscale('log')\n"
         "ax.legend()\n"
         "ax.grid(True, which='both', axis='y', alpha=0.3)\n"
         "fig.tight_layout()\n"
         "fig.savefig('latency_boxplot.png', dpi=150)\n"
         "print('wrote latency_boxplot.png')\n";
}

// ---------------------------------------------------------------------------
// Process utilities

int cpu_count() { return static_cast<int>(sysconf(_SC_NPROCESSORS_ONLN)); }

void pin_process(pid_t pid, int core) {
  if (core < 0 || core >= cpu_count())
    throw BenchError("invalid core id " + std::to_string(core) + " (host has " +
                     std::to_string(cpu_count()) + ")");
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(core, &set);
  if (::sched_setaffinity(pid, sizeof(set), &set) != 0)
    throw BenchError("sched_setaffinity failed: " + std::string(strerror(errno)));
}

std::vector<int> affinity_of(pid_t pid) {
  cpu_set_t set;
  CPU_ZERO(&set);
  if (::sched_getaffinity(pid, sizeof(set), &set) != 0)
    throw BenchError("sched_getaffinity failed: " + std::string(strerror(errno)));
  std::vector<int> out;
  for (int i = 0; i < CPU_SETSIZE; ++i)
    if (CPU_ISSET(i, &set)) out.push_back(i);
  return out;
}

CpuTimes measure_cpu(pid_t pid) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  if (!in) throw BenchError("process unreachable: " + std::to_string(pid));
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  // comm may contain spaces; skip past the closing paren.
  auto close_paren = content.rfind(')');
  if (close_paren == std::string::npos) throw BenchError("malformed /proc stat");
  std::stringstream ss(content.substr(close_paren + 2));
  std::string field;
  // fields after comm: state(1) ... utime is field 12, stime field 13 here
  uint64_t utime = 0, stime = 0;
  for (int i = 1; i <= 12 && ss >> field; ++i)
    if (i == 12) utime = std::stoull(field);
  if (ss >> field) stime = std::stoull(field);
  const uint64_t tick_ns = 1000000000ull / static_cast<uint64_t>(sysconf(_SC_CLK_TCK));
  return {utime * tick_ns, stime * tick_ns};
}

// ---------------------------------------------------------------------------
// Participants

namespace {

json args_to_json(const ParticipantArgs& a) {
  return json{{"topic", a.topic},
              {"transport", to_string(a.transport)},
              {"registry", a.registry_path},
              {"segment", a.segment_name},
              {"segment_size", a.segment_size},
              {"queue_capacity", a.queue_capacity},
              {"payload", a.payload_size},
              {"count", a.message_count},
              {"rate", a.rate_hz},
              {"index", a.index},
              {"n_pubs", a.n_pubs},
              {"n_subs", a.n_subs},
              {"ordered", a.ordered},
              {"nodelay", a.nodelay},
              {"fill", a.fill_payload},
              {"pin_core", a.pin_core},
              {"out", a.out_path},
              {"socket_dir", a.socket_dir},
              {"udp_drop_seq", a.udp_drop_seq},
              {"udp_drop_chunk", a.udp_drop_chunk}};
}

}  // namespace

ParticipantArgs participant_args_from_json(const std::string& blob);

ParticipantArgs participant_args_from_json(const std::string& blob) {
  json j = json::parse(blob);
  ParticipantArgs a;
  a.topic = j.at("topic");
  a.transport = transport_from_string(j.at("transport"));
  a.registry_path = j.at("registry");
  a.segment_name = j.at("segment");
  a.segment_size = j.at("segment_size");
  a.queue_capacity = j.at("queue_capacity");
  a.payload_size = j.at("payload");
  a.message_count = j.at("count");
  a.rate_hz = j.at("rate");
  a.index = j.at("index");
  a.n_pubs = j.at("n_pubs");
  a.n_subs = j.at("n_subs");
  a.ordered = j.at("ordered");
  a.nodelay = j.at("nodelay");
  a.fill_payload = j.at("fill");
  a.pin_core = j.at("pin_core");
  a.out_path = j.at("out");
  a.socket_dir = j.at("socket_dir");
  a.udp_drop_seq = j.at("udp_drop_seq");
  a.udp_drop_chunk = j.at("udp_drop_chunk");
  return a;
}

namespace {

EngineConfig engine_config_for(const ParticipantArgs& a, const std::string& role) {
  EngineConfig cfg;
  cfg.node_name = role + std::to_string(a.index) + "-" + std::to_string(::getpid());
  cfg.registry_path = a.registry_path;
  cfg.segment_name = a.segment_name;
  cfg.segment_size = a.segment_size;
  cfg.queue_capacity = a.queue_capacity;
  if (!a.socket_dir.empty()) cfg.socket_dir = a.socket_dir;
  return cfg;
}

constexpr const char* kOrderBarrier = "connect-order";

void wait_all_publishers(ShmEngine& engine, const ParticipantArgs& a) {
  auto deadline = monotonic_now() + std::chrono::seconds(30);
  for (;;) {
    if (engine.registry().lookup(a.topic).size() >= a.n_pubs) return;
    if (monotonic_now() >= deadline)
      throw BenchError("publishers never registered for " + a.topic);
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

}  // namespace

int run_publisher(const ParticipantArgs& a) {
  if (a.pin_core >= 0) pin_process(0, a.pin_core);
  ShmEngine engine(engine_config_for(a, "pub"));
  Pusher& pusher = engine.advertise(a.topic, a.transport, a.nodelay);
  if (a.udp_drop_seq != UINT64_MAX)
    pusher.inject_udp_chunk_drop(a.udp_drop_seq, a.udp_drop_chunk);

  if (!pusher.wait_for_subscribers(a.n_subs, monotonic_now() + std::chrono::seconds(60)))
    return 3;

  const uint64_t period_ns =
      a.rate_hz > 0 ? static_cast<uint64_t>(1e9 / a.rate_hz) : 0;
  auto next = monotonic_now();
  for (uint32_t m = 0; m < a.message_count; ++m) {
    if (period_ns > 0) {
      // Absolute-deadline pacing: drift does not accumulate.
      next += std::chrono::nanoseconds(period_ns);
      std::this_thread::sleep_until(next);
    }
    OutMessage msg = pusher.loan(a.payload_size);
    auto payload = msg.payload();
    if (a.fill_payload) {
      std::memset(payload.data(), static_cast<int>(0xA0 + (m % 16)), payload.size());
    } else if (!payload.empty()) {
      payload.front() = static_cast<std::byte>(m);
      payload.back() = static_cast<std::byte>(m >> 8);
    }
    pusher.publish(std::move(msg));
  }

  if (!a.out_path.empty()) {
    std::ofstream out(a.out_path);
    for (const auto& name : pusher.subscriber_names()) out << name << "\n";
  }

  // Stay alive until every subscriber said goodbye, so late consumers can
  // drain their queues/sockets.
  auto deadline = monotonic_now() + std::chrono::seconds(120);
  while (monotonic_now() < deadline) {
    if (pusher.active_subscriber_count() == 0) return 0;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return 5;  // subscribers never detached
}

int run_subscriber(const ParticipantArgs& a) {
  if (a.pin_core >= 0) pin_process(0, a.pin_core);
  ShmEngine engine(engine_config_for(a, "sub"));

  wait_all_publishers(engine, a);
  if (a.ordered &&
      !engine.registry().barrier_wait(kOrderBarrier, a.index,
                                      monotonic_now() + std::chrono::seconds(60)))
    return 4;  // barrier timeout

  Subscription sub = engine.subscribe(a.topic, a.transport,
                                      monotonic_now() + std::chrono::seconds(30),
                                      a.nodelay);
  if (a.ordered) engine.registry().barrier_advance(kOrderBarrier);

  const uint64_t expected = static_cast<uint64_t>(a.message_count) * a.n_pubs;
  std::ofstream out(a.out_path);
  if (!out) return 6;
  uint64_t got = 0;
  while (got < expected) {
    // 5 s without progress converts a wedged peer into a detectable stop.
    auto r = sub.receive(monotonic_now() + std::chrono::seconds(5));
    if (r.status == ReceiveStatus::kTimedOut) break;
    if (r.status == ReceiveStatus::kClosed) break;
    const auto& m = r.message;
    uint64_t latency = m.recv_ns >= m.stamp_ns ? m.recv_ns - m.stamp_ns : 0;
    out << m.publisher_id << ' ' << a.index << ' ' << m.seq << ' ' << m.stamp_ns
        << ' ' << m.recv_ns << ' ' << latency << '\n';
    got += 1;
  }
  out.flush();
  return out ? 0 : 6;
}

std::string participant_exe() {
  if (const char* env = std::getenv("SHMBUS_BENCH_EXE"); env && *env) return env;
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) throw BenchError("cannot resolve own executable path");
  buf[n] = '\0';
  return buf;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

pid_t spawn(const std::vector<std::string>& argv, int pin_core) {
  std::vector<char*> cargv;
  cargv.reserve(argv.size() + 1);
  for (const auto& s : argv) cargv.push_back(const_cast<char*>(s.c_str()));
  cargv.push_back(nullptr);
  pid_t pid = ::fork();
  if (pid < 0) throw BenchError("fork failed: " + std::string(strerror(errno)));
  if (pid == 0) {
    if (pin_core >= 0) {
      cpu_set_t set;
      CPU_ZERO(&set);
      CPU_SET(pin_core, &set);
      ::sched_setaffinity(0, sizeof(set), &set);
    }
    ::execv(cargv[0], cargv.data());
    ::_exit(127);
  }
  return pid;
}

int pin_core_for(const Scenario& s, const std::string& role) {
  for (const auto& p : s.pins) {
    if (p.role == role) return p.core;
    if (p.role == "pub" && role.rfind("pub", 0) == 0) return p.core;
    if (p.role == "sub" && role.rfind("sub", 0) == 0) return p.core;
  }
  return -1;
}

struct Child {
  pid_t pid;
  std::string role;
  int exit_code = -1;
  rusage usage{};
  bool reaped = false;
};

uint64_t timeval_ns(const timeval& tv) {
  return static_cast<uint64_t>(tv.tv_sec) * 1000000000ull +
         static_cast<uint64_t>(tv.tv_usec) * 1000ull;
}

std::string fresh_run_dir() {
  static std::atomic<uint32_t> counter{0};
  auto dir = fs::temp_directory_path() /
             ("shmbus-run-" + std::to_string(::getpid()) + "-" +
              std::to_string(counter.fetch_add(1)));
  fs::create_directories(dir);
  return dir.string();
}

}  // namespace

RunReport run_scenario(const Scenario& scenario) {
  RunReport report;
  report.scenario = scenario;
  const auto t0 = monotonic_now();

  const uint32_t n_pubs = publisher_count(scenario.graph);
  const uint32_t n_subs = subscriber_count(scenario.graph);

  Scenario s = scenario;
  if (s.run_dir.empty()) s.run_dir = fresh_run_dir();
  fs::create_directories(s.run_dir);
  if (s.segment_name.empty())
    s.segment_name = "bshm" + std::to_string(::getpid()) + "x" +
                     std::to_string(monotonic_now_ns() % 100000);
  if (s.segment_size == 0) {
    // Must hold every in-flight payload. Per publisher: one distinct block
    // per queue slot (fan-out clones share their block), plus the
    // subscriber-side hand-off channel, plus loans outstanding.
    uint64_t per_msg = s.payload_size + 8192;
    uint64_t need = static_cast<uint64_t>(n_pubs) *
                        (static_cast<uint64_t>(s.queue_capacity) + 16) * per_msg +
                    (64ull << 20);
    s.segment_size = std::max<uint64_t>(need, 1ull << 30);
  }
  const std::string registry_path = s.run_dir + "/reg.sock";
  const std::string exe = participant_exe();

  std::vector<Child> children;
  struct Reaper {
    std::vector<Child>& kids;
    ~Reaper() {
      for (auto& c : kids) {
        if (c.reaped) continue;
        ::kill(c.pid, SIGKILL);
        ::waitpid(c.pid, nullptr, 0);
      }
    }
  } reaper{children};
  auto spawn_role = [&](const std::string& role, const std::vector<std::string>& argv) {
    children.push_back({spawn(argv, pin_core_for(s, role)), role});
  };

  spawn_role("registry", {exe, "_registry", registry_path});

  // Hold the segment for the whole run; participants open it by name.
  Segment segment;
  const bool uses_segment = s.transport == TransportKind::kShm ||
                            s.transport == TransportKind::kHybrid;
  if (uses_segment) segment = Segment::create(s.segment_name, s.segment_size, true);

  {  // registry readiness
    RegistryClient probe(registry_path, monotonic_now() + std::chrono::seconds(5));
  }

  ParticipantArgs base;
  base.topic = "bench/t0";
  base.transport = s.transport;
  base.registry_path = registry_path;
  base.segment_name = s.segment_name;
  base.segment_size = s.segment_size;
  base.queue_capacity = s.queue_capacity;
  base.payload_size = s.payload_size;
  base.message_count = s.message_count;
  base.rate_hz = s.rate_hz;
  base.n_pubs = n_pubs;
  base.n_subs = n_subs;
  base.ordered = s.ordered;
  base.nodelay = s.nodelay;
  base.fill_payload = s.fill_payload;
  base.socket_dir = s.run_dir;
  base.udp_drop_seq = s.udp_drop_seq;
  base.udp_drop_chunk = s.udp_drop_chunk;

  for (uint32_t i = 0; i < n_pubs; ++i) {
    ParticipantArgs a = base;
    a.index = i;
    a.out_path = s.run_dir + "/pub" + std::to_string(i) + ".order";
    std::string role = "pub" + std::to_string(i);
    a.pin_core = pin_core_for(s, role);
    spawn_role(role, {exe, "_pub", args_to_json(a).dump()});
  }
  for (uint32_t k = 0; k < n_subs; ++k) {
    ParticipantArgs a = base;
    a.index = k;
    a.out_path = s.run_dir + "/sub" + std::to_string(k) + ".rec";
    std::string role = "sub" + std::to_string(k);
    a.pin_core = pin_core_for(s, role);
    spawn_role(role, {exe, "_sub", args_to_json(a).dump()});
  }

  // Global watchdog: generous ceiling covering pacing plus byte throughput.
  double expected_s = 30.0;
  if (s.rate_hz > 0) expected_s += s.message_count / s.rate_hz;
  expected_s += static_cast<double>(s.message_count) * s.payload_size *
                (n_pubs * n_subs) / (100.0 * 1024 * 1024);
  auto deadline = t0 + std::chrono::seconds(static_cast<long>(expected_s) + 30);

  size_t live = 0;
  for (auto& c : children)
    if (c.role != "registry") live += 1;
  while (live > 0) {
    bool progressed = false;
    for (auto& c : children) {
      if (c.reaped || c.role == "registry") continue;
      int status = 0;
      rusage ru{};
      pid_t r = ::wait4(c.pid, &status, WNOHANG, &ru);
      if (r == c.pid) {
        c.reaped = true;
        c.usage = ru;
        c.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
        live -= 1;
        progressed = true;
      }
    }
    if (live == 0) break;
    if (monotonic_now() > deadline) {
      for (auto& c : children)
        if (!c.reaped && c.role != "registry") ::kill(c.pid, SIGKILL);
      report.failed = true;
      report.failure = "watchdog: participants exceeded the run deadline";
      for (auto& c : children) {
        if (c.reaped || c.role == "registry") continue;
        int status = 0;
        rusage ru{};
        ::wait4(c.pid, &status, 0, &ru);
        c.reaped = true;
        c.usage = ru;
        c.exit_code = 128 + SIGKILL;
      }
      break;
    }
    if (!progressed) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  // Stop the registry.
  for (auto& c : children) {
    if (c.role != "registry") continue;
    ::kill(c.pid, SIGTERM);
    int status = 0;
    rusage ru{};
    ::wait4(c.pid, &status, 0, &ru);
    c.reaped = true;
    c.usage = ru;
    c.exit_code = 0;
  }

  for (const auto& c : children) {
    if (c.role == "registry") continue;
    report.processes.push_back({c.role, c.pid, timeval_ns(c.usage.ru_utime),
                                timeval_ns(c.usage.ru_stime), c.exit_code});
    if (c.exit_code != 0 && !report.failed) {
      report.failed = true;
      report.failure = c.role + " exited with code " + std::to_string(c.exit_code);
    }
  }

  // Collect per-subscriber records.
  for (uint32_t k = 0; k < n_subs; ++k) {
    std::ifstream in(s.run_dir + "/sub" + std::to_string(k) + ".rec");
    uint32_t pub_id, sub_id;
    uint64_t seq, stamp, recv, latency;
    while (in >> pub_id >> sub_id >> seq >> stamp >> recv >> latency) {
      LatencyRecord r;
      r.topic = base.topic;
      r.publisher_id = pub_id;
      r.subscriber_id = sub_id;
      r.seq = seq;
      r.stamp_ns = stamp;
      r.recv_monotonic_ns = recv;
      r.latency_ns = latency;
      report.records.push_back(std::move(r));
    }
  }

  // Publisher ids as assigned by the registry (registration order).
  std::vector<uint32_t> pub_ids;
  for (const auto& r : report.records)
    if (std::find(pub_ids.begin(), pub_ids.end(), r.publisher_id) == pub_ids.end())
      pub_ids.push_back(r.publisher_id);
  std::sort(pub_ids.begin(), pub_ids.end());

  const uint32_t warmup_eff =
      s.message_count > 2 * s.warmup ? s.warmup : 0;

  std::map<std::pair<uint32_t, uint32_t>, std::vector<uint64_t>> lat;
  std::map<std::pair<uint32_t, uint32_t>, uint64_t> delivered;
  for (const auto& r : report.records) {
    delivered[{r.publisher_id, r.subscriber_id}] += 1;
    if (r.seq >= warmup_eff)
      lat[{r.publisher_id, r.subscriber_id}].push_back(r.latency_ns);
  }
  for (uint32_t pi = 0; pi < std::max<size_t>(pub_ids.size(), n_pubs); ++pi) {
    uint32_t pub_id = pi < pub_ids.size() ? pub_ids[pi] : pi;
    for (uint32_t k = 0; k < n_subs; ++k) {
      PairReport pr;
      pr.publisher_id = pub_id;
      pr.subscriber_id = k;
      pr.delivered = delivered.count({pub_id, k}) ? delivered[{pub_id, k}] : 0;
      pr.lost = s.message_count >= pr.delivered ? s.message_count - pr.delivered : 0;
      auto it = lat.find({pub_id, k});
      if (it != lat.end() && !it->second.empty())
        pr.latency = compute_stats(it->second);
      report.pairs.push_back(std::move(pr));
    }
  }

  if (n_subs > 1) {
    std::vector<uint64_t> medians;
    for (const auto& p : report.pairs)
      if (p.latency.count > 0) medians.push_back(p.latency.median);
    if (!medians.empty())
      report.fairness_gap_ns = *std::max_element(medians.begin(), medians.end()) -
                               *std::min_element(medians.begin(), medians.end());
  }

  // Attachment order observed by publisher 0 ("sub<k>" names -> indices).
  {
    std::ifstream in(s.run_dir + "/pub0.order");
    std::string name;
    while (std::getline(in, name)) {
      if (name.rfind("sub", 0) == 0) {
        size_t dash = name.find('-');
        report.subscriber_order.push_back(
            static_cast<uint32_t>(std::stoul(name.substr(3, dash - 3))));
      }
    }
  }

  report.wall_ns = static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(monotonic_now() - t0)
          .count());
  report.scenario = s;
  if (!s.csv_path.empty()) emit_csv(report, s.csv_path);
  return report;
}

}  // namespace shmbus::bench
