#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trail/config.hpp"
#include "trail/datasets.hpp"
#include "trail/hsmm.hpp"
#include "trail/models.hpp"
#include "trail/rng.hpp"
#include "trail/scheduler.hpp"
#include "trail/trust.hpp"

namespace trail::fedsim {

// Ramped misbehavior. Before the onset round both probabilities sit at their
// start values; afterwards they climb linearly (slope per round) and saturate
// at the end values.
struct DegradationProfile {
  int onset = 1 << 30;
  double noise_start = 0.0, noise_end = 0.0, noise_slope = 0.0;
  double loss_start = 0.0, loss_end = 0.0, loss_slope = 0.0;

  double noise_at(int round) const;
  double loss_at(int round) const;
  void validate() const;
};

struct ClientState {
  int id = 0;
  std::vector<int> shard;  // indices into the training dataset
  ModelVector model;
  DegradationProfile degradation;
  hsmm::ObservationSequence history;     // channel 0 accuracy, channel 1 delivery rate
  std::vector<double> delivery_window;   // trailing delivery indicators (scheduled rounds)
  std::uint64_t stream_seed = 0;         // root of this client's RNG streams
  double tl = 0.0;
  int shard_size() const { return static_cast<int>(shard.size()); }
};

struct TrainParams {
  int steps = 1;
  double lr = 0.01;
  double momentum = 0.0;
  int batch = 32;
  double label_noise = 0.0;
  bool shift_noise = false;  // corrupt to (y+1) mod C instead of a uniform other class
  int client_id = -1;        // error context only
};

// T1 steps of mini-batch SGD with momentum from `init` on the client's shard.
// Label noise flips each drawn sample's label to a uniformly random other
// class with the given probability. Pure in (inputs, rng state); pass
// loss_trace to record the full-shard clean loss after every step.
ModelVector local_train(const data::Dataset& ds, std::span<const int> shard, const ModelVector& init,
                        const TrainParams& params, Rng& rng, std::vector<double>* loss_trace = nullptr);

// True with probability 1 - loss_prob (the upload survives).
bool apply_uplink(double loss_prob, Rng& rng);

struct Upload {
  const ModelVector* model;
  double weight;  // n_i
};

// Data-size weighted average over delivered uploads (weights renormalized
// over receipts). nullopt when nothing was delivered: the caller keeps the
// previous server model.
std::optional<ModelVector> intra_aggregate(std::span<const Upload> uploads);

// Same weighted average across server models with masses N_s; nullopt when
// every mass is zero.
std::optional<ModelVector> inter_consensus(std::span<const Upload> server_models);

// F(g) = sum_i n_i F_i(g) / sum_i n_i over the given clients' clean shards.
double global_loss(const ModelVector& g, const data::Dataset& ds,
                   std::span<const ClientState* const> clients);

// Appends this round's observation row to the client history: channel 0 is
// the post-training local accuracy, channel 1 the trailing-window delivery
// rate. Returns the emitted pair.
std::pair<double, double> emit_observation(ClientState& client, double post_train_accuracy,
                                           bool delivered, int window);

struct RoundMetrics {
  int round = 0;
  double test_acc = 0.0;
  double train_loss = 0.0;
  double surrogate = 0.0;           // B of the active assignment
  std::vector<int> per_server;      // participant counts per server
  int participants = 0;             // sum of per_server
  int dropped = 0;
};

struct ExperimentResult {
  std::vector<RoundMetrics> metrics;
  std::vector<trust::TrustRecord> trust_trace;
  ModelVector global_model;
  std::optional<hsmm::QualityHsmm> fitted_model;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  double final_loss = 0.0;
  double mean_surrogate = 0.0;
};

// The full two-tier loop: scheduling, local training, unreliable uplinks,
// intra-cluster aggregation each round, inter-cluster consensus every T2
// rounds, and AHSMM refits / trust-level updates at the configured cadence.
// Bit-identical for a fixed (config, seed) regardless of thread count.
ExperimentResult run_experiment(const cfg::ExperimentConfig& config);

std::string metrics_csv(const std::vector<RoundMetrics>& metrics);

// Model-vector serialization in the same versioned-JSON style as the HSMM.
std::string model_to_json(const ModelVector& m);
ModelVector model_from_json(const std::string& text);

}  // namespace trail::fedsim
