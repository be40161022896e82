#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "trail/rng.hpp"

namespace trail::hsmm {

// Explicit-duration hidden semi-Markov model over N quality states (index 0
// is the best state, index N-1 the failure state by convention). Durations
// are discretized truncated Gaussians on {1..E}; emissions are independent
// univariate Gaussians per observation channel. Self-transitions are carried
// by the duration distributions, so the transition matrix has a zero
// diagonal.
struct QualityHsmm {
  int num_states = 0;
  int max_duration = 0;
  int num_channels = 0;
  std::vector<double> initial_probs;               // N
  std::vector<std::vector<double>> transitions;    // N x N, zero diagonal
  std::vector<double> duration_mean;               // N
  std::vector<double> duration_var;                // N
  std::vector<std::vector<double>> emission_mean;  // N x S
  std::vector<std::vector<double>> emission_var;   // N x S
  std::vector<std::vector<double>> duration_pmf;   // N x E, derived from mean/var

  void rebuild_duration_pmfs();
  void validate() const;

  std::string to_json_string() const;
  static QualityHsmm from_json_string(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static QualityHsmm load(const std::filesystem::path& path);
};

// Gaussian pmf on {1..max_duration}: exp(-(e-mean)^2 / (2 var)) renormalized.
// var == 0 degenerates to a point mass at round(mean) clamped into range.
std::vector<double> discretized_duration_pmf(double mean, double var, int max_duration);

struct ObservationSequence {
  int channels = 0;
  std::vector<std::vector<double>> values;  // T rows, each with `channels` entries

  int length() const { return static_cast<int>(values.size()); }
  void validate() const;
};

// Affine per-channel adaptation of emission and duration means (the MLLR
// transforms of the parameter-estimation step). For scalar channels the
// emission transform is scale/offset.
struct MllrChannelTransform {
  double emission_scale = 1.0;   // eta
  double emission_offset = 0.0;  // xi_obs
  double duration_scale = 1.0;   // delta, must be > 0
  double duration_offset = 0.0;  // psi
};

struct MllrTransform {
  std::vector<MllrChannelTransform> channels;

  static MllrTransform identity(int num_channels);
  void validate() const;
};

// Channel selector for inference ops: a specific channel index, or all
// channels combined (per-channel densities multiplied).
using Channel = std::optional<int>;

// Forward/backward tables over the (state x duration) grid, scale-normalized
// per timestep. The e axis counts the remaining rounds of the current
// segment (e = 1 means the segment completes at this round); the final
// segment is right-censored at T, i.e. summing a row over e marginalizes the
// unfinished tail.
struct DurationLattice {
  int T = 0, N = 0, E = 0;
  std::vector<double> alpha;  // T*N*E, sums to 1 at each t
  std::vector<double> beta;   // same layout/scaling; empty until backward_pass
  std::vector<double> scale;  // per-t normalization constants c_t
  std::vector<double> log_scale;  // log c_t (kept so loglik never overflows)
  double loglik = 0.0;

  double a(int t, int i, int e) const { return alpha[(static_cast<std::size_t>(t) * N + i) * E + e]; }
  double b(int t, int i, int e) const { return beta[(static_cast<std::size_t>(t) * N + i) * E + e]; }
};

DurationLattice forward_pass(const QualityHsmm& model, const ObservationSequence& seq,
                             Channel channel = {});

// log p(z_1^T | model): the sum of the lattice's per-t log scale constants.
double sequence_likelihood(const DurationLattice& lattice);

// Fills lattice.beta, scaled consistently with alpha (beta_T = 1). The
// scale constants must come from a forward pass over the same model/sequence.
void backward_pass(const QualityHsmm& model, const ObservationSequence& seq, DurationLattice& lattice,
                   Channel channel = {});

// Likelihood recomputed from the backward boundary (test cross-check).
double likelihood_from_beta(const QualityHsmm& model, const ObservationSequence& seq,
                            const DurationLattice& lattice, Channel channel = {});

// Posterior tables in elapsed-dwell terms: gamma[t][i][e] is the posterior of
// being in state i at t with the current segment e rounds old; xi[t][i][e][j]
// is the posterior of that segment ending at t with a transition to j. The
// per-cell exit mass never exceeds gamma, so xi/gamma is an exit probability.
struct PosteriorTables {
  int T = 0, N = 0, E = 0;
  std::vector<double> gamma;  // T*N*E
  std::vector<double> xi;     // T*N*E*N, zero at t = T-1 and on the diagonal

  double g(int t, int i, int e) const { return gamma[(static_cast<std::size_t>(t) * N + i) * E + e]; }
  double x(int t, int i, int e, int j) const {
    return xi[((static_cast<std::size_t>(t) * N + i) * E + e) * static_cast<std::size_t>(N) + j];
  }
  double state_marginal(int t, int i) const;
  double exit_mass(int t, int i, int e) const;  // sum_j xi[t][i][e][j]
};

PosteriorTables posteriors(const QualityHsmm& model, const ObservationSequence& seq,
                           const DurationLattice& lattice, Channel channel = {});

struct Segment {
  int state = 0;
  int start = 0;   // 0-based round
  int length = 0;  // rounds
};

struct ViterbiResult {
  std::vector<int> states;        // per-round MAP path
  std::vector<Segment> segments;  // the same path as (state, duration) runs
  double log_prob = 0.0;          // log joint of path and observations
};

ViterbiResult viterbi_decode(const QualityHsmm& model, const ObservationSequence& seq,
                             Channel channel = {});

struct FitResult {
  QualityHsmm model;
  std::vector<double> loglik_trace;  // total loglik before/after each EM step
};

// EM training. The duration M-step is a generalized-EM ascent on the
// (mean, variance) parameters of the discretized-Gaussian family, so the
// trace is non-decreasing up to floating error. Per-sequence E-steps may run
// in parallel; accumulation order is fixed, so results are thread-agnostic.
FitResult baum_welch_fit(const QualityHsmm& init, const std::vector<ObservationSequence>& sequences,
                         int max_iters, double tol, bool parallel = false);

// Applies the transform: emission means per channel, duration means via the
// common (scale, offset) pair. Duration pmfs are re-discretized. A transform
// whose duration parts differ across channels cannot be represented in a
// single model and is rejected.
QualityHsmm mllr_adapt(const QualityHsmm& model, const MllrTransform& transform);

// Single-channel adaptation used by MAP estimation: only channel `s` of the
// emissions plus that channel's duration transform.
QualityHsmm mllr_adapt_channel(const QualityHsmm& model, const MllrChannelTransform& tr, int s);

struct MapEstimate {
  int state = 0;
  int dwell = 1;               // elapsed dwell at the maximizing cell
  std::vector<double> scores;  // per-state, normalized to sum 1
};

// MAP state at round t (0-based): argmax_i of the product over channels of
// the channel-adapted marginal posterior, ties toward the lower state index.
MapEstimate map_state_estimate(const QualityHsmm& model, const MllrTransform& transforms,
                               const ObservationSequence& seq, int t);

// Exact enumeration over every legal (state, duration) segmentation of 1..T.
// Used as the reference in tests; refuses instances above max_terms.
struct BruteForceResult {
  double loglik = 0.0;
  std::vector<double> state_marginals;    // T*N
  std::vector<double> dwell_marginals;    // T*N*E (elapsed dwell)
  std::vector<double> transition_post;    // T*N*N, P(segment of i ends at t, next j | z)
  std::vector<Segment> best_segments;
  double best_log_prob = 0.0;

  double marginal(int t, int i) const { return state_marginals[static_cast<std::size_t>(t) * num_states + i]; }
  int num_states = 0;
  int max_duration = 0;
};

BruteForceResult brute_force_likelihood(const QualityHsmm& model, const ObservationSequence& seq,
                                        Channel channel = {}, double max_terms = 1e7);

// Samples a length-T observation sequence (for tests and fixtures). The
// hidden path is censored at T exactly like the inference model assumes.
ObservationSequence sample_sequence(const QualityHsmm& model, int T, Rng& rng,
                                    std::vector<int>* hidden_states = nullptr);

// Deterministic Baum-Welch initializer: uniform pi and off-diagonal A,
// emission means from per-state quantile splits (descending, so state 0 gets
// the highest channel means), duration means at E/2.
QualityHsmm default_init(int num_states, int max_duration, const std::vector<ObservationSequence>& seqs);

// Relabels states by descending channel-`channel` emission mean so that index
// 0 is the best state. Likelihood-invariant.
QualityHsmm sort_states_by_quality(const QualityHsmm& model, int channel = 0);

}  // namespace trail::hsmm
