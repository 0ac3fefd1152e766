// Benchmark harness CLI.
//
//   bench run    — one scenario (graph × transport × payload), prints a
//                  summary table and optionally writes a CSV
//   bench sweep  — the full payload sweep across transports
//   bench report — aggregate previously written CSVs
//
// The internal _pub/_sub/_registry roles are what `run` spawns, one process
// per participant; they are not meant to be invoked by hand.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "shmbus/bench.hpp"
#include "shmbus/registry.hpp"

using namespace shmbus;

namespace shmbus::bench {
ParticipantArgs participant_args_from_json(const std::string& blob);
}

namespace {

volatile std::sig_atomic_t g_stop = 0;

bench::Scenario scenario_from_cli(const std::string& graph, const std::string& transport,
                                  uint64_t payload, uint32_t count, double rate,
                                  bool ordered, bool nodelay, const std::string& pins,
                                  const std::string& segment, uint64_t segment_size,
                                  const std::string& csv, const std::string& env_label,
                                  bool fill) {
  bench::Scenario s;
  s.graph = bench::graph_from_string(graph);
  s.transport = transport_from_string(transport);
  s.payload_size = payload;
  s.message_count = count;
  s.rate_hz = rate;
  s.ordered = ordered;
  s.nodelay = nodelay;
  s.segment_name = segment;
  s.segment_size = segment_size;
  s.csv_path = csv;
  s.environment_label = env_label;
  s.fill_payload = fill;
  if (!pins.empty()) {
    std::stringstream ss(pins);
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto eq = item.find('=');
      if (eq == std::string::npos)
        throw BenchError("bad --pin entry (want role=core): " + item);
      s.pins.push_back({item.substr(0, eq), std::stoi(item.substr(eq + 1))});
    }
  }
  return s;
}

int cmd_report(const std::vector<std::string>& csvs) {
  for (const auto& path : csvs) {
    auto records = bench::parse_csv_records(path);
    if (records.empty()) {
      std::cout << path << ": no records\n";
      continue;
    }
    auto stats = bench::compute_stats(records);
    std::cout << path << " (" << records.size() << " records)\n";
    for (const auto& [key, q] : stats) {
      std::cout << "  pub " << key.first << " -> sub " << key.second
                << ": median=" << q.median / 1e6 << "ms p95=" << q.p95 / 1e6
                << "ms max=" << q.max / 1e6 << "ms n=" << q.count << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shmbus benchmark harness"};
  app.require_subcommand(1);

  // --- run ---------------------------------------------------------------
  std::string graph = "1p1s", transport = "shm", pins, segment, csv,
              env_label = "native";
  uint64_t payload = 1 << 20, segment_size = 0;
  uint32_t count = 2000;
  double rate = 30.0;
  bool ordered = false, nodelay = false, fill = false;

  auto* run = app.add_subcommand("run", "run one benchmark scenario");
  run->add_option("--graph", graph, "1p1s | 1p5s | 5p1s");
  run->add_option("--transport", transport, "shm | tcp | uds | udp | hybrid");
  run->add_option("--payload", payload, "payload bytes");
  run->add_option("--count", count, "messages per publisher");
  run->add_option("--rate", rate, "publish rate in Hz (0 = uncapped)");
  run->add_flag("--ordered", ordered, "enforce subscriber connection order");
  run->add_flag("--nodelay", nodelay, "set TCP_NODELAY on data connections");
  run->add_option("--pin", pins, "pin map, e.g. pub=2,sub0=3");
  run->add_option("--segment", segment, "shared segment name");
  run->add_option("--segment-size", segment_size, "shared segment bytes");
  run->add_option("--csv", csv, "write per-delivery records to this CSV");
  run->add_option("--env-label", env_label, "environment label recorded in the CSV");
  run->add_flag("--fill", fill, "pattern-fill each payload before publishing");

  // --- sweep --------------------------------------------------------------
  std::vector<std::string> sweep_transports = {"shm", "tcp", "uds", "udp", "hybrid"};
  std::string sweep_dir = "sweep-out";
  uint32_t sweep_count = 2000;
  double sweep_rate = 30.0;
  auto* sweep = app.add_subcommand("sweep", "run the payload sweep matrix");
  sweep->add_option("--transports", sweep_transports, "transports to include");
  sweep->add_option("--out", sweep_dir, "output directory for CSVs");
  sweep->add_option("--count", sweep_count, "messages per run");
  sweep->add_option("--rate", sweep_rate, "publish rate in Hz");
  sweep->add_option("--graph", graph, "graph for all runs");

  // --- report ---------------------------------------------------------------
  std::vector<std::string> report_csvs;
  auto* report = app.add_subcommand("report", "aggregate CSVs");
  report->add_option("csvs", report_csvs, "CSV files")->required();

  // --- internal roles -------------------------------------------------------
  std::string blob, registry_socket;
  auto* pub = app.add_subcommand("_pub");
  pub->add_option("args", blob)->required();
  auto* sub = app.add_subcommand("_sub");
  sub->add_option("args", blob)->required();
  auto* reg = app.add_subcommand("_registry");
  reg->add_option("socket", registry_socket)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      auto s = scenario_from_cli(graph, transport, payload, count, rate, ordered,
                                 nodelay, pins, segment, segment_size, csv, env_label,
                                 fill);
      auto rep = bench::run_scenario(s);
      std::cout << bench::emit_summary(rep);
      return rep.failed ? 1 : 0;
    }
    if (sweep->parsed()) {
      std::filesystem::create_directories(sweep_dir);
      std::vector<std::string> csvs;
      bool any_failed = false;
      for (const auto& t : sweep_transports) {
        for (uint64_t size : bench::default_payload_sweep()) {
          bench::Scenario s;
          s.graph = bench::graph_from_string(graph);
          s.transport = transport_from_string(t);
          s.payload_size = size;
          s.message_count = sweep_count;
          s.rate_hz = sweep_rate;
          s.csv_path = sweep_dir + "/" + t + "-" + std::to_string(size) + ".csv";
          std::cout << "== " << t << " @ " << size << " B ==\n";
          auto rep = bench::run_scenario(s);
          std::cout << bench::emit_summary(rep) << "\n";
          any_failed |= rep.failed;
          csvs.push_back(s.csv_path);
        }
      }
      bench::emit_plot_script(csvs, sweep_dir + "/plot.py");
      std::cout << "plot script: " << sweep_dir << "/plot.py\n";
      return any_failed ? 1 : 0;
    }
    if (report->parsed()) return cmd_report(report_csvs);
    if (pub->parsed()) return bench::run_publisher(bench::participant_args_from_json(blob));
    if (sub->parsed()) return bench::run_subscriber(bench::participant_args_from_json(blob));
    if (reg->parsed()) {
      RegistryServer server;
      server.start(registry_socket);
      std::signal(SIGTERM, [](int) { g_stop = 1; });
      std::signal(SIGINT, [](int) { g_stop = 1; });
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
      server.stop();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
