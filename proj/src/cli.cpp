#include "trail/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "trail/config.hpp"
#include "trail/errors.hpp"
#include "trail/fedsim.hpp"
#include "trail/hsmm.hpp"
#include "trail/io.hpp"
#include "trail/scheduler.hpp"
#include "trail/trust.hpp"

namespace trail::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct SimulateOptions {
  std::string config_path;
  std::uint64_t seed_override = 0;
  bool have_seed = false;
  std::string out_override;
  int num_seeds = 1;
  int jobs = 1;
};

nlohmann::json summary_json(const cfg::ExperimentConfig& config, const fedsim::ExperimentResult& res) {
  nlohmann::json j;
  j["final_accuracy"] = res.final_accuracy;
  j["best_accuracy"] = res.best_accuracy;
  j["final_loss"] = res.final_loss;
  j["mean_B"] = res.mean_surrogate;
  j["rounds"] = res.metrics.size();
  j["scheduler"] = config.scheduler;
  j["seed"] = config.seed;
  j["degraded_fraction"] = config.degraded_fraction;
  j["config"] = nlohmann::json::parse(cfg::config_to_json(config));
  return j;
}

void run_one_simulation(cfg::ExperimentConfig config) {
  auto res = fedsim::run_experiment(config);
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  io::atomic_write(dir / "metrics.csv", fedsim::metrics_csv(res.metrics));
  io::atomic_write(dir / "trust.csv", trust::trust_csv_string(res.trust_trace));
  io::atomic_write(dir / "summary.json", summary_json(config, res).dump(2) + "\n");
  io::atomic_write(dir / "model.json", fedsim::model_to_json(res.global_model));
  if (res.fitted_model) res.fitted_model->save(dir / "hsmm.json");
}

int cmd_simulate(const SimulateOptions& opt) {
  cfg::ExperimentConfig base = cfg::parse_config_file(opt.config_path);
  if (opt.have_seed) base.seed = opt.seed_override;
  if (!opt.out_override.empty()) base.out_dir = opt.out_override;
  base.validate();

  if (opt.num_seeds <= 1) {
    run_one_simulation(base);
    return kExitOk;
  }

  // Independent seeds, optionally in parallel; each run gets its own derived
  // seed and output subdirectory, so results do not depend on --jobs.
  std::vector<cfg::ExperimentConfig> runs;
  for (int k = 0; k < opt.num_seeds; ++k) {
    cfg::ExperimentConfig c = base;
    c.seed = base.seed + static_cast<std::uint64_t>(k);
    char sub[32];
    std::snprintf(sub, sizeof(sub), "seed_%04d", k);
    c.out_dir = (fs::path(base.out_dir) / sub).string();
    runs.push_back(std::move(c));
  }
  const int jobs = std::max(1, opt.jobs);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex err_mu;
  auto worker = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= runs.size() || failed.load()) return;
      try {
        run_one_simulation(runs[k]);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!failed.exchange(true)) first_error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < std::min<int>(jobs, opt.num_seeds); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failed.load()) throw std::runtime_error(first_error);
  return kExitOk;
}

struct ScheduleOptions {
  std::string trust_path;
  std::string sizes_path;
  double theta = 0.0;
  int capacity = 0;
  std::string solver = "greedy";
  std::string order = "desc";
  std::uint64_t seed = 1;
  std::string out_dir = "schedule_out";
};

sched::SchedulingInstance load_instance(const ScheduleOptions& opt) {
  const auto lines = io::split_lines(io::read_file(opt.trust_path));
  if (lines.empty() || lines[0] != "client,server,TL") {
    throw FormatError("trust CSV: expected header 'client,server,TL' in " + opt.trust_path);
  }
  struct Entry {
    int client, server;
    double tl;
  };
  std::vector<Entry> entries;
  int max_client = -1, max_server = -1;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (lines[k].empty()) continue;
    const auto fields = io::split_csv_line(lines[k]);
    if (fields.size() != 3) {
      throw FormatError("trust CSV line " + std::to_string(k + 1) + ": expected 3 fields");
    }
    Entry e;
    e.client = static_cast<int>(io::parse_long(fields[0], "trust CSV line " + std::to_string(k + 1)));
    e.server = static_cast<int>(io::parse_long(fields[1], "trust CSV line " + std::to_string(k + 1)));
    e.tl = io::parse_double(fields[2], "trust CSV line " + std::to_string(k + 1));
    if (e.client < 0 || e.server < 0) {
      throw FormatError("trust CSV line " + std::to_string(k + 1) + ": negative index");
    }
    entries.push_back(e);
    max_client = std::max(max_client, e.client);
    max_server = std::max(max_server, e.server);
  }
  if (entries.empty()) throw FormatError("trust CSV has no data rows: " + opt.trust_path);

  sched::SchedulingInstance inst;
  inst.num_clients = max_client + 1;
  inst.num_servers = max_server + 1;
  inst.theta = opt.theta;
  inst.trust.assign(static_cast<std::size_t>(inst.num_clients) * inst.num_servers,
                    std::numeric_limits<double>::quiet_NaN());
  for (const auto& e : entries) {
    inst.trust[static_cast<std::size_t>(e.client) * inst.num_servers + e.server] = e.tl;
  }
  for (std::size_t k = 0; k < inst.trust.size(); ++k) {
    if (std::isnan(inst.trust[k])) {
      throw FormatError("trust CSV: missing pair (client " +
                        std::to_string(k / inst.num_servers) + ", server " +
                        std::to_string(k % inst.num_servers) + ")");
    }
  }
  inst.data_size.assign(inst.num_clients, 1.0);
  if (!opt.sizes_path.empty()) {
    const auto size_lines = io::split_lines(io::read_file(opt.sizes_path));
    if (size_lines.empty() || size_lines[0] != "client,n") {
      throw FormatError("sizes CSV: expected header 'client,n' in " + opt.sizes_path);
    }
    for (std::size_t k = 1; k < size_lines.size(); ++k) {
      if (size_lines[k].empty()) continue;
      const auto fields = io::split_csv_line(size_lines[k]);
      if (fields.size() != 2) {
        throw FormatError("sizes CSV line " + std::to_string(k + 1) + ": expected 2 fields");
      }
      const int client =
          static_cast<int>(io::parse_long(fields[0], "sizes CSV line " + std::to_string(k + 1)));
      if (client < 0 || client >= inst.num_clients) {
        throw FormatError("sizes CSV line " + std::to_string(k + 1) + ": client out of range");
      }
      inst.data_size[client] = io::parse_double(fields[1], "sizes CSV line " + std::to_string(k + 1));
    }
  }
  inst.capacity = opt.capacity > 0
                      ? opt.capacity
                      : 2 * ((inst.num_clients + inst.num_servers - 1) / inst.num_servers);
  inst.validate();
  return inst;
}

int cmd_schedule(const ScheduleOptions& opt) {
  auto inst = load_instance(opt);
  sched::AssociationMatrix d = sched::AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  if (opt.solver == "greedy") {
    d = sched::greedy_schedule(inst, opt.order == "desc" ? sched::SortOrder::TrustDescending
                                                         : sched::SortOrder::TrustAscending);
  } else if (opt.solver == "random") {
    d = sched::random_schedule(inst, opt.seed);
  } else if (opt.solver == "trust-only") {
    d = sched::trust_only_schedule(inst);
  } else if (opt.solver == "exhaustive") {
    d = sched::exhaustive_schedule(inst).assignment;
  } else {
    throw InvalidInputError("schedule: unknown solver '" + opt.solver + "'");
  }

  const double b = sched::surrogate_objective(d, inst);
  nlohmann::json summary;
  summary["B"] = b;
  summary["feasible"] = sched::feasible(d, inst);
  summary["solver"] = opt.solver;
  summary["assigned"] = d.total_assigned();
  const double candidates = std::pow(inst.num_servers + 1.0, inst.num_clients);
  if (opt.solver == "exhaustive") {
    summary["gap_to_oracle"] = 0.0;
  } else if (candidates <= 1e6) {
    summary["gap_to_oracle"] = b - sched::exhaustive_schedule(inst).objective;
  }

  std::string csv = "client,server\n";
  for (int i = 0; i < d.num_clients; ++i) {
    if (d.server_of[i] >= 0) {
      csv += std::to_string(i) + "," + std::to_string(d.server_of[i]) + "\n";
    }
  }
  const fs::path dir(opt.out_dir);
  fs::create_directories(dir);
  io::atomic_write(dir / "assignment.csv", csv);
  io::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

struct HsmmFitOptions {
  std::string obs_path;
  int states = 3;
  int max_duration = 10;
  int iters = 50;
  double tol = 1e-6;
  std::string out_path = "hsmm.json";
  std::string trace_path;
};

std::vector<hsmm::ObservationSequence> load_observations(const std::string& path) {
  const auto lines = io::split_lines(io::read_file(path));
  if (lines.empty()) throw FormatError("observations CSV is empty: " + path);
  const auto header = io::split_csv_line(lines[0]);
  if (header.size() < 3 || header[0] != "sequence" || header[1] != "round") {
    throw FormatError("observations CSV line 1: expected header 'sequence,round,c0[,c1,...]'");
  }
  const int channels = static_cast<int>(header.size()) - 2;
  std::vector<hsmm::ObservationSequence> seqs;
  std::map<long, std::size_t> index;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (lines[k].empty()) continue;
    const auto fields = io::split_csv_line(lines[k]);
    if (static_cast<int>(fields.size()) != channels + 2) {
      throw FormatError("observations CSV line " + std::to_string(k + 1) + ": expected " +
                        std::to_string(channels + 2) + " fields");
    }
    const long seq_id = io::parse_long(fields[0], "observations CSV line " + std::to_string(k + 1));
    std::vector<double> row(channels);
    for (int s = 0; s < channels; ++s) {
      row[s] = io::parse_double(fields[s + 2], "observations CSV line " + std::to_string(k + 1));
    }
    auto it = index.find(seq_id);
    if (it == index.end()) {
      index[seq_id] = seqs.size();
      seqs.push_back({channels, {}});
      it = index.find(seq_id);
    }
    seqs[it->second].values.push_back(std::move(row));
  }
  if (seqs.empty()) throw FormatError("observations CSV has no data rows: " + path);
  return seqs;
}

int cmd_hsmm_fit(const HsmmFitOptions& opt) {
  auto seqs = load_observations(opt.obs_path);
  auto init = hsmm::default_init(opt.states, opt.max_duration, seqs);
  auto fit = hsmm::baum_welch_fit(init, seqs, opt.iters, opt.tol);
  fit.model.save(opt.out_path);
  if (!opt.trace_path.empty()) {
    std::string csv = "iter,loglik\n";
    for (std::size_t k = 0; k < fit.loglik_trace.size(); ++k) {
      csv += std::to_string(k) + "," + io::format_double(fit.loglik_trace[k]) + "\n";
    }
    io::atomic_write(opt.trace_path, csv);
  }
  std::cout << "fit " << seqs.size() << " sequence(s), " << fit.loglik_trace.size() - 1
            << " EM step(s), final loglik " << io::format_double(fit.loglik_trace.back()) << "\n";
  return kExitOk;
}

struct ReportOptions {
  std::vector<std::string> run_dirs;
  std::string out_path;
};

int cmd_report(const ReportOptions& opt) {
  struct Row {
    std::string scheduler;
    double fraction;
    std::uint64_t seed;
    double final_acc, best_acc, final_loss, mean_b;
  };
  std::vector<Row> rows;
  nlohmann::json first_cfg;
  for (const auto& dir : opt.run_dirs) {
    const fs::path p = fs::path(dir) / "summary.json";
    if (!fs::exists(p)) throw InvalidInputError("report: no summary.json in " + dir);
    auto j = nlohmann::json::parse(io::read_file(p));
    Row r;
    r.scheduler = j.at("scheduler").get<std::string>();
    r.fraction = j.at("degraded_fraction").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.final_acc = j.at("final_accuracy").get<double>();
    r.best_acc = j.at("best_accuracy").get<double>();
    r.final_loss = j.at("final_loss").get<double>();
    r.mean_b = j.at("mean_B").get<double>();
    rows.push_back(r);

    // Comparisons across differently-shaped experiments get a warning, not a
    // failure.
    auto cfg_echo = j.at("config");
    for (const char* key : {"experiment", "dataset", "train"}) {
      auto scrubbed = cfg_echo.at(key);
      if (key == std::string("experiment")) scrubbed.erase("seed");
      if (first_cfg.contains(key)) {
        if (first_cfg.at(key) != scrubbed) {
          std::cerr << "warning: run " << dir << " differs from the first run in [" << key
                    << "]; comparison may not be apples-to-apples\n";
        }
      } else {
        first_cfg[key] = scrubbed;
      }
    }
  }

  std::map<std::pair<std::string, double>, std::vector<const Row*>> groups;
  for (const auto& r : rows) groups[{r.scheduler, r.fraction}].push_back(&r);

  std::string csv = "scheduler,degraded_fraction,seed,final_acc,best_acc,final_loss,mean_B\n";
  for (const auto& r : rows) {
    csv += r.scheduler + "," + io::format_double(r.fraction) + "," + std::to_string(r.seed) + "," +
           io::format_double(r.final_acc) + "," + io::format_double(r.best_acc) + "," +
           io::format_double(r.final_loss) + "," + io::format_double(r.mean_b) + "\n";
  }
  csv += "scheduler,degraded_fraction,runs,mean_final_acc,std_final_acc,mean_final_loss,best\n";

  std::map<double, std::pair<std::string, double>> best_by_fraction;
  for (const auto& [key, members] : groups) {
    double mean = 0.0;
    for (const auto* r : members) mean += r->final_acc;
    mean /= members.size();
    auto it = best_by_fraction.find(key.second);
    if (it == best_by_fraction.end() || mean > it->second.second) {
      best_by_fraction[key.second] = {key.first, mean};
    }
  }

  std::printf("%-12s %-10s %5s %14s %14s %14s %5s\n", "scheduler", "fraction", "runs", "mean_acc",
              "std_acc", "mean_loss", "best");
  for (const auto& [key, members] : groups) {
    double mean_acc = 0.0, mean_loss = 0.0;
    for (const auto* r : members) {
      mean_acc += r->final_acc;
      mean_loss += r->final_loss;
    }
    mean_acc /= members.size();
    mean_loss /= members.size();
    double var = 0.0;
    for (const auto* r : members) var += (r->final_acc - mean_acc) * (r->final_acc - mean_acc);
    const double sd = members.size() > 1 ? std::sqrt(var / (members.size() - 1)) : 0.0;
    const bool best = best_by_fraction.at(key.second).first == key.first;
    csv += key.first + "," + io::format_double(key.second) + "," + std::to_string(members.size()) +
           "," + io::format_double(mean_acc) + "," + io::format_double(sd) + "," +
           io::format_double(mean_loss) + "," + (best ? "yes" : "no") + "\n";
    std::printf("%-12s %-10.2f %5zu %14.4f %14.4f %14.4f %5s\n", key.first.c_str(), key.second,
                members.size(), mean_acc, sd, mean_loss, best ? "yes" : "no");
  }
  if (!opt.out_path.empty()) io::atomic_write(opt.out_path, csv);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"trust-aware client scheduling for semi-decentralized federated learning"};
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "run one experiment from a config file");
  simulate->add_option("--config", sim.config_path, "experiment config (INI-style)")->required();
  auto* seed_opt = simulate->add_option("--seed", sim.seed_override, "override the config seed");
  simulate->add_option("--out", sim.out_override, "override the output directory");
  simulate->add_option("--seeds", sim.num_seeds, "run this many consecutive seeds")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--jobs", sim.jobs, "parallel seed runs")->check(CLI::PositiveNumber);

  ScheduleOptions sch;
  auto* schedule = app.add_subcommand("schedule", "solve one client-server association instance");
  schedule->add_option("--trust", sch.trust_path, "trust matrix CSV (client,server,TL)")->required();
  schedule->add_option("--sizes", sch.sizes_path, "data sizes CSV (client,n); default 1 per client");
  schedule->add_option("--theta", sch.theta, "trust admission threshold");
  schedule->add_option("--capacity", sch.capacity, "per-server capacity (0 = 2*ceil(U/S))");
  schedule->add_option("--solver", sch.solver, "greedy | random | trust-only | exhaustive");
  schedule->add_option("--order", sch.order, "greedy sort order: desc | asc");
  schedule->add_option("--seed", sch.seed, "seed for the random solver");
  schedule->add_option("--out", sch.out_dir, "output directory");

  HsmmFitOptions fit;
  auto* hsmm_fit = app.add_subcommand("hsmm-fit", "Baum-Welch fit on an observation CSV");
  hsmm_fit->add_option("--obs", fit.obs_path, "observations CSV (sequence,round,c0[,c1,...])")
      ->required();
  hsmm_fit->add_option("--states", fit.states, "number of quality states");
  hsmm_fit->add_option("--max-duration", fit.max_duration, "maximum dwell time");
  hsmm_fit->add_option("--iters", fit.iters, "maximum EM iterations");
  hsmm_fit->add_option("--tol", fit.tol, "loglik improvement tolerance");
  hsmm_fit->add_option("--out", fit.out_path, "fitted model output path");
  hsmm_fit->add_option("--trace", fit.trace_path, "loglik trace CSV output path");

  ReportOptions rep;
  auto* report = app.add_subcommand("report", "aggregate run summaries into a comparison table");
  report->add_option("dirs", rep.run_dirs, "run directories containing summary.json")->required();
  report->add_option("--out", rep.out_path, "comparison CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (simulate->parsed()) {
      sim.have_seed = seed_opt->count() > 0;
      return cmd_simulate(sim);
    }
    if (schedule->parsed()) return cmd_schedule(sch);
    if (hsmm_fit->parsed()) return cmd_hsmm_fit(fit);
    if (report->parsed()) return cmd_report(rep);
  } catch (const InvalidInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

int run_args(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("trail");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace trail::cli
