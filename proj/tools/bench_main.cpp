// Serial vs OpenMP timing for the two data-parallel kernels: per-client local
// training within a round, and per-sequence Baum-Welch E-steps. Both paths
// must produce bit-identical results; the benchmark fails loudly otherwise.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <vector>

#include "trail/datasets.hpp"
#include "trail/fedsim.hpp"
#include "trail/hsmm.hpp"
#include "trail/parallel.hpp"
#include "trail/rng.hpp"

using namespace trail;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

template <typename Fn>
double time_best_of(int repeats, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const double t0 = now_seconds();
    fn();
    best = std::min(best, now_seconds() - t0);
  }
  return best;
}

void die(const char* what) {
  std::fprintf(stderr, "MISMATCH: %s differs between serial and parallel paths\n", what);
  std::exit(1);
}

}  // namespace

int main(int argc, char** argv) {
  const int clients = argc > 1 ? std::atoi(argv[1]) : 64;
  const int steps = argc > 2 ? std::atoi(argv[2]) : 40;
  std::printf("threads available: %d\n", hardware_threads());
  std::printf("kernel                               serial      openmp     speedup\n");

  // Kernel 1: one simulated round of local training across `clients` shards.
  {
    auto ds = data::gen_synthetic(10, 32, clients * 200, 1.5, 7);
    data::PartitionPlan plan;
    plan.sizes.assign(clients, 200);
    plan.seed = 7;
    auto shards = data::partition(ds, plan, clients);
    auto init = fedsim::zero_model(fedsim::ModelKind::Mlp, 32, 10, 32);
    {
      Rng r(1);
      init = fedsim::init_model(fedsim::ModelKind::Mlp, 32, 10, 32, r);
    }

    std::vector<fedsim::ModelVector> out_serial(clients), out_parallel(clients);
    auto round = [&](bool parallel, std::vector<fedsim::ModelVector>& out) {
      parallel_for(static_cast<std::size_t>(clients), parallel, [&](std::size_t i) {
        fedsim::TrainParams p;
        p.steps = steps;
        p.lr = 0.05;
        p.momentum = 0.05;
        p.batch = 32;
        p.client_id = static_cast<int>(i);
        Rng rng(Rng::derive(99, {kStreamTrain, i, 0}));
        out[i] = fedsim::local_train(ds, shards[i], init, p, rng);
      });
    };
    const double ts = time_best_of(3, [&] { round(false, out_serial); });
    const double tp = time_best_of(3, [&] { round(true, out_parallel); });
    for (int i = 0; i < clients; ++i) {
      if (out_serial[i].w != out_parallel[i].w) die("local_train outputs");
    }
    std::printf("local_train round (%3d clients)   %8.3fs   %8.3fs   %6.2fx\n", clients, ts, tp,
                ts / tp);
  }

  // Kernel 2: Baum-Welch fit over many observation sequences.
  {
    hsmm::QualityHsmm gen;
    gen.num_states = 3;
    gen.max_duration = 10;
    gen.num_channels = 2;
    gen.initial_probs = {0.7, 0.2, 0.1};
    gen.transitions = {{0.0, 0.8, 0.2}, {0.3, 0.0, 0.7}, {0.6, 0.4, 0.0}};
    gen.duration_mean = {5.0, 4.0, 3.0};
    gen.duration_var = {2.0, 2.0, 2.0};
    gen.emission_mean = {{0.9, 0.95}, {0.6, 0.7}, {0.2, 0.3}};
    gen.emission_var = {{0.01, 0.01}, {0.02, 0.02}, {0.02, 0.02}};
    gen.rebuild_duration_pmfs();

    std::vector<hsmm::ObservationSequence> seqs;
    for (int k = 0; k < 2 * clients; ++k) {
      Rng rng(Rng::derive(5, {static_cast<std::uint64_t>(k)}));
      seqs.push_back(hsmm::sample_sequence(gen, 300, rng));
    }
    auto init = hsmm::default_init(3, 10, seqs);

    hsmm::FitResult serial, parallel;
    const double ts = time_best_of(2, [&] { serial = hsmm::baum_welch_fit(init, seqs, 4, 1e-12, false); });
    const double tp = time_best_of(2, [&] { parallel = hsmm::baum_welch_fit(init, seqs, 4, 1e-12, true); });
    if (serial.loglik_trace != parallel.loglik_trace) die("baum_welch loglik traces");
    if (serial.model.emission_mean != parallel.model.emission_mean) die("baum_welch emissions");
    std::printf("baum_welch fit (%3d sequences)    %8.3fs   %8.3fs   %6.2fx\n", 2 * clients, ts, tp,
                ts / tp);
  }

  std::printf("serial and openmp outputs are bit-identical\n");
  return 0;
}
