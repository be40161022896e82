#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace trail::cfg {

// Everything one simulation run needs. Field defaults follow the training
// configuration of the target experiment (50 clients, 5 servers, T1 = T2 =
// 100, lr 0.01, momentum 0.05, batch 32, 1000-sample shards); the shipped
// desk-scale profiles override them.
struct ExperimentConfig {
  // [experiment]
  std::uint64_t seed = 1;
  int clients = 50;
  int servers = 5;
  int capacity = 0;  // 0 = ceil(U/S) * 2
  int horizon_blocks = 40;
  int t1 = 100;  // local SGD steps per aggregation round
  int t2 = 100;  // aggregation rounds per consensus block
  bool parallel = true;

  // [dataset]
  std::string dataset_kind = "synthetic";  // synthetic | idx
  int classes = 10;
  int dim = 32;
  double spread = 1.0;
  int test_count = 2000;
  std::string idx_images, idx_labels, idx_test_images, idx_test_labels;

  // [partition]
  std::string partition_policy = "iid";  // iid | label_skew
  double concentration = 1.0;
  int shard_size = 1000;

  // [model]
  std::string model_kind = "logistic";  // logistic | mlp
  int hidden = 32;

  // [train]
  double lr = 0.01;
  double momentum = 0.05;
  int batch = 32;

  // [degradation]
  double degraded_fraction = 0.0;
  int onset = 10;
  double noise_start = 0.0, noise_end = 0.8, noise_slope = 0.02;
  std::string noise_kind = "uniform";  // uniform | shift
  double loss_start = 0.0, loss_end = 0.6, loss_slope = 0.015;

  // [ahsmm]
  int states = 3;
  int max_duration = 10;
  int fit_cadence = 10;
  int fit_iters = 8;
  double fit_tol = 1e-3;
  int min_history = 5;
  int delivery_window = 5;
  int obs_warmup = 0;  // rounds before observation collection starts

  // [trust]
  double theta = 0.0;
  double t_life = 0.0;  // 0 = horizon_blocks * t2

  // [scheduler]
  std::string scheduler = "trail";  // trail | random | trust_only | exhaustive
  std::string order = "desc";      // desc | asc
  int resched_cadence = 1;

  // [output]
  std::string out_dir = "run_out";

  int resolved_capacity() const;
  double resolved_t_life() const;
  int total_rounds() const { return horizon_blocks * t2; }

  void validate() const;  // throws InvalidInputError naming the field
};

ExperimentConfig parse_config_file(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);

std::string config_to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const std::string& json_text);

bool config_equivalent(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace trail::cfg
