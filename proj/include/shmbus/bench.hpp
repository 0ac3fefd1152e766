#pragma once

#include <sys/types.h>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "shmbus/transport.hpp"

namespace shmbus::bench {

enum class Graph { kOnePubOneSub, kOnePubFiveSub, kFivePubOneSub };

std::string to_string(Graph g);
Graph graph_from_string(const std::string& s);
uint32_t publisher_count(Graph g);
uint32_t subscriber_count(Graph g);

// The paper-style payload sweep, 128 B through 16 MiB.
const std::vector<uint64_t>& default_payload_sweep();

struct PinSpec {
  std::string role;  // "pub0", "sub2", or "pub"/"sub" for all of a kind
  int core = -1;
};

struct Scenario {
  Graph graph = Graph::kOnePubOneSub;
  TransportKind transport = TransportKind::kShm;
  uint64_t payload_size = 1 << 20;
  uint32_t message_count = 2000;
  double rate_hz = 30.0;  // 0 publishes as fast as possible
  bool ordered = false;   // enforce subscriber connection order via barrier
  bool nodelay = false;
  std::vector<PinSpec> pins;
  std::string environment_label = "native";
  std::string segment_name;  // empty: unique per run
  uint64_t segment_size = 0;  // 0: 1 GiB, raised if the in-flight set needs more
  uint32_t queue_capacity = ShmQueue::kDefaultCapacity;
  uint32_t warmup = 50;        // leading messages excluded from the statistics
  bool fill_payload = false;   // pattern-fill the whole payload vs touch it
  std::string csv_path;        // write combined per-delivery records here
  std::string run_dir;         // scratch directory; empty picks a fresh one
  uint64_t udp_drop_seq = UINT64_MAX;  // fault injection: drop one chunk
  uint32_t udp_drop_chunk = 0;
};

struct LatencyRecord {
  std::string topic;
  uint32_t publisher_id = 0;
  uint32_t subscriber_id = 0;
  uint64_t seq = 0;
  uint64_t stamp_ns = 0;
  uint64_t recv_monotonic_ns = 0;
  uint64_t latency_ns = 0;
};

struct QuantileSummary {
  uint64_t min = 0, p25 = 0, median = 0, p75 = 0, p95 = 0, p99 = 0, max = 0;
  size_t count = 0;
};

// Nearest-rank quantiles (rank = ceil(q*N), 1-indexed). Throws on empty input.
QuantileSummary compute_stats(std::span<const uint64_t> latencies_ns);

// Grouped per (publisher, subscriber).
std::map<std::pair<uint32_t, uint32_t>, QuantileSummary> compute_stats(
    const std::vector<LatencyRecord>& records);

struct PairReport {
  uint32_t publisher_id = 0;
  uint32_t subscriber_id = 0;
  uint64_t delivered = 0;
  uint64_t lost = 0;
  QuantileSummary latency;  // warm-up excluded
};

struct ProcessReport {
  std::string role;
  pid_t pid = 0;
  uint64_t cpu_user_ns = 0;
  uint64_t cpu_system_ns = 0;
  int exit_code = 0;
};

struct RunReport {
  Scenario scenario;
  std::vector<PairReport> pairs;
  uint64_t fairness_gap_ns = 0;  // spread of subscriber medians (multi-sub runs)
  std::vector<ProcessReport> processes;
  uint64_t wall_ns = 0;
  bool failed = false;
  std::string failure;
  std::vector<uint32_t> subscriber_order;  // attachment order seen by publisher 0
  std::vector<LatencyRecord> records;
};

// Spawns one process per publisher and subscriber (plus a registry), runs
// the scenario, and aggregates records, CPU times, and quantiles.
RunReport run_scenario(const Scenario& s);

// CSV (schema "shmbus-bench-csv v1"): scenario fields + one row per
// delivered message per subscriber.
void emit_csv(const RunReport& report, const std::string& path);
std::vector<LatencyRecord> parse_csv_records(const std::string& path);
std::string emit_summary(const RunReport& report);
void emit_plot_script(const std::vector<std::string>& csv_paths,
                      const std::string& out_path);

// Median interval between consecutive publishes of one publisher, from the
// stamps in its delivered records (rate-fidelity checks).
uint64_t median_publish_interval_ns(const std::vector<LatencyRecord>& records,
                                    uint32_t publisher_id);

// ---------------------------------------------------------------------------
// Process utilities.

int cpu_count();

// Restricts `pid` to a single core. Throws BenchError on invalid core.
void pin_process(pid_t pid, int core);
std::vector<int> affinity_of(pid_t pid);

struct CpuTimes {
  uint64_t user_ns = 0;
  uint64_t system_ns = 0;
};

// Accumulated CPU time of a live process (from /proc). For reaped children
// the orchestrator records wait4 rusage instead.
CpuTimes measure_cpu(pid_t pid);

// ---------------------------------------------------------------------------
// Participant entry points, invoked through the bench binary's internal
// _pub/_sub roles. Exposed here so the CLI stays a thin argv shim.

struct ParticipantArgs {
  std::string topic = "bench/t0";
  TransportKind transport = TransportKind::kShm;
  std::string registry_path;
  std::string segment_name;
  uint64_t segment_size = 1ull << 30;
  uint32_t queue_capacity = ShmQueue::kDefaultCapacity;
  uint64_t payload_size = 0;
  uint32_t message_count = 0;
  double rate_hz = 0;
  uint32_t index = 0;
  uint32_t n_pubs = 1;
  uint32_t n_subs = 1;
  bool ordered = false;
  bool nodelay = false;
  bool fill_payload = false;
  int pin_core = -1;
  std::string out_path;  // subscriber CSV / publisher order file
  std::string socket_dir;
  uint64_t udp_drop_seq = UINT64_MAX;  // fault injection passthrough
  uint32_t udp_drop_chunk = 0;
};

int run_publisher(const ParticipantArgs& args);
int run_subscriber(const ParticipantArgs& args);

// Path of the binary whose _pub/_sub/_registry roles the orchestrator
// spawns: $SHMBUS_BENCH_EXE if set, else this executable.
std::string participant_exe();

}  // namespace shmbus::bench
