#include "trail/hsmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "trail/errors.hpp"
#include "trail/io.hpp"
#include "trail/parallel.hpp"

namespace trail::hsmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kUnderflowLog = -690.77552789821368;  // log(1e-300)
constexpr double kTwoPi = 6.283185307179586476925286766559;
// M-step emission variance floor. Two channels of [0,1]-ranged data at the
// worst-case offset of 1 stay above the 1e-300 density policy with room to
// spare: 2 * 1/(2*2e-3) = 500 < 690 nats.
constexpr double kEmissionVarFloor = 2e-3;

std::size_t idx3(int t, int i, int e, int N, int E) {
  return (static_cast<std::size_t>(t) * N + i) * E + e;
}

double check_prob_vector(const std::vector<double>& v, const std::string& what) {
  double sum = 0.0;
  for (double p : v) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidInputError(what + ": entries must be finite and >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw InvalidInputError(what + ": must sum to 1 within 1e-12 (got " + io::format_double(sum) + ")");
  }
  return sum;
}

}  // namespace

std::vector<double> discretized_duration_pmf(double mean, double var, int max_duration) {
  if (max_duration < 1) throw InvalidInputError("duration pmf: max_duration must be >= 1");
  if (var < 0) throw InvalidInputError("duration pmf: variance must be >= 0");
  std::vector<double> pmf(max_duration, 0.0);
  if (var == 0.0) {
    int e = static_cast<int>(std::lround(mean));
    e = std::clamp(e, 1, max_duration);
    pmf[e - 1] = 1.0;
    return pmf;
  }
  // Log-domain with a max shift so distant means cannot underflow to an
  // all-zero row.
  std::vector<double> logw(max_duration);
  double mx = kNegInf;
  for (int e = 1; e <= max_duration; ++e) {
    double d = e - mean;
    logw[e - 1] = -0.5 * d * d / var;
    mx = std::max(mx, logw[e - 1]);
  }
  double sum = 0.0;
  for (int e = 0; e < max_duration; ++e) {
    pmf[e] = std::exp(logw[e] - mx);
    sum += pmf[e];
  }
  for (double& p : pmf) p /= sum;
  return pmf;
}

void QualityHsmm::rebuild_duration_pmfs() {
  duration_pmf.assign(num_states, {});
  for (int i = 0; i < num_states; ++i) {
    duration_pmf[i] = discretized_duration_pmf(duration_mean[i], duration_var[i], max_duration);
  }
}

void QualityHsmm::validate() const {
  if (num_states < 2) throw InvalidInputError("model: num_states must be >= 2");
  if (max_duration < 1) throw InvalidInputError("model: max_duration must be >= 1");
  if (num_channels < 1) throw InvalidInputError("model: num_channels must be >= 1");
  if (static_cast<int>(initial_probs.size()) != num_states) {
    throw InvalidInputError("model: initial_probs must have num_states entries");
  }
  check_prob_vector(initial_probs, "model: initial_probs");
  if (static_cast<int>(transitions.size()) != num_states) {
    throw InvalidInputError("model: transitions must be N x N");
  }
  for (int i = 0; i < num_states; ++i) {
    if (static_cast<int>(transitions[i].size()) != num_states) {
      throw InvalidInputError("model: transitions must be N x N");
    }
    if (transitions[i][i] != 0.0) {
      throw InvalidInputError("model: transition diagonal must be zero (state " + std::to_string(i) + ")");
    }
    check_prob_vector(transitions[i], "model: transitions row " + std::to_string(i));
  }
  if (static_cast<int>(duration_mean.size()) != num_states ||
      static_cast<int>(duration_var.size()) != num_states) {
    throw InvalidInputError("model: duration parameters must have num_states entries");
  }
  for (double v : duration_var) {
    if (!(v >= 0.0)) throw InvalidInputError("model: duration variance must be >= 0");
  }
  if (static_cast<int>(emission_mean.size()) != num_states ||
      static_cast<int>(emission_var.size()) != num_states) {
    throw InvalidInputError("model: emission parameters must be N x S");
  }
  for (int i = 0; i < num_states; ++i) {
    if (static_cast<int>(emission_mean[i].size()) != num_channels ||
        static_cast<int>(emission_var[i].size()) != num_channels) {
      throw InvalidInputError("model: emission parameters must be N x S");
    }
    for (double v : emission_var[i]) {
      if (!(v > 0.0)) throw InvalidInputError("model: emission variances must be > 0");
    }
  }
  if (static_cast<int>(duration_pmf.size()) != num_states) {
    throw InvalidInputError("model: duration pmfs not built (call rebuild_duration_pmfs)");
  }
  for (int i = 0; i < num_states; ++i) {
    if (static_cast<int>(duration_pmf[i].size()) != max_duration) {
      throw InvalidInputError("model: duration pmf row has wrong length");
    }
    check_prob_vector(duration_pmf[i], "model: duration pmf row " + std::to_string(i));
  }
}

void ObservationSequence::validate() const {
  if (length() < 1) throw InvalidInputError("sequence: length must be >= 1");
  if (channels < 1) throw InvalidInputError("sequence: channels must be >= 1");
  for (const auto& row : values) {
    if (static_cast<int>(row.size()) != channels) {
      throw InvalidInputError("sequence: ragged rows (expected " + std::to_string(channels) + " channels)");
    }
    for (double v : row) {
      if (!std::isfinite(v)) throw InvalidInputError("sequence: non-finite observation");
    }
  }
}

MllrTransform MllrTransform::identity(int num_channels) {
  MllrTransform tr;
  tr.channels.assign(num_channels, MllrChannelTransform{});
  return tr;
}

void MllrTransform::validate() const {
  if (channels.empty()) throw InvalidInputError("mllr: transform needs at least one channel");
  for (const auto& c : channels) {
    if (!(c.duration_scale > 0.0)) {
      throw InvalidInputError("mllr: duration scale delta must be > 0");
    }
    if (!std::isfinite(c.emission_scale) || !std::isfinite(c.emission_offset) ||
        !std::isfinite(c.duration_scale) || !std::isfinite(c.duration_offset)) {
      throw InvalidInputError("mllr: transform entries must be finite");
    }
  }
}

namespace detail {

// Per-timestep log emission densities for the selected channel(s), plus the
// per-t max used as an exponent shift everywhere downstream.
struct EmissionCache {
  int T = 0, N = 0;
  std::vector<double> logb;   // T*N
  std::vector<double> shift;  // per-t max of logb

  double eb(int t, int i) const { return std::exp(logb[static_cast<std::size_t>(t) * N + i] - shift[t]); }
};

EmissionCache emission_cache(const QualityHsmm& model, const ObservationSequence& seq, Channel channel) {
  model.validate();
  seq.validate();
  if (seq.channels != model.num_channels) {
    throw InvalidInputError("hsmm: sequence has " + std::to_string(seq.channels) +
                            " channels but model expects " + std::to_string(model.num_channels));
  }
  if (channel && (*channel < 0 || *channel >= model.num_channels)) {
    throw InvalidInputError("hsmm: channel index out of range");
  }
  const int T = seq.length();
  const int N = model.num_states;
  EmissionCache cache;
  cache.T = T;
  cache.N = N;
  cache.logb.resize(static_cast<std::size_t>(T) * N);
  cache.shift.resize(T);
  for (int t = 0; t < T; ++t) {
    double mx = kNegInf;
    for (int i = 0; i < N; ++i) {
      double lp = 0.0;
      const int s_begin = channel ? *channel : 0;
      const int s_end = channel ? *channel + 1 : model.num_channels;
      for (int s = s_begin; s < s_end; ++s) {
        const double var = model.emission_var[i][s];
        const double d = seq.values[t][s] - model.emission_mean[i][s];
        lp += -0.5 * std::log(kTwoPi * var) - 0.5 * d * d / var;
      }
      cache.logb[static_cast<std::size_t>(t) * N + i] = lp;
      mx = std::max(mx, lp);
    }
    if (mx < kUnderflowLog) {
      throw NumericalDegeneracyError("hsmm: all emission densities underflow at timestep " +
                                     std::to_string(t));
    }
    cache.shift[t] = mx;
  }
  return cache;
}

// Survivor D(e) = sum_{d >= e} p(d), hazard p(e)/D(e) and continuation
// D(e+1)/D(e) per state, with exact telescoping (D built by suffix addition).
struct DurationTables {
  int N = 0, E = 0;
  std::vector<double> survivor;  // N*E, survivor[i][e-1] = D_i(e)
  std::vector<double> hazard;    // N*E
  std::vector<double> cont;      // N*E, cont[i][e-1] = D_i(e+1)/D_i(e)
};

DurationTables duration_tables(const QualityHsmm& model) {
  DurationTables dt;
  dt.N = model.num_states;
  dt.E = model.max_duration;
  dt.survivor.assign(static_cast<std::size_t>(dt.N) * dt.E, 0.0);
  dt.hazard.assign(static_cast<std::size_t>(dt.N) * dt.E, 0.0);
  dt.cont.assign(static_cast<std::size_t>(dt.N) * dt.E, 0.0);
  for (int i = 0; i < dt.N; ++i) {
    double acc = 0.0;
    for (int e = dt.E - 1; e >= 0; --e) {
      acc += model.duration_pmf[i][e];
      dt.survivor[static_cast<std::size_t>(i) * dt.E + e] = acc;
    }
    for (int e = 0; e < dt.E; ++e) {
      const double D = dt.survivor[static_cast<std::size_t>(i) * dt.E + e];
      const double Dnext = (e + 1 < dt.E) ? dt.survivor[static_cast<std::size_t>(i) * dt.E + e + 1] : 0.0;
      if (D > 0.0) {
        dt.hazard[static_cast<std::size_t>(i) * dt.E + e] = model.duration_pmf[i][e] / D;
        dt.cont[static_cast<std::size_t>(i) * dt.E + e] = Dnext / D;
      }
    }
  }
  return dt;
}

// Elapsed-dwell forward/backward (survivor/hazard recursion). This is the
// smoothing engine behind posteriors, MAP estimation and EM; the public
// DurationLattice keeps the remaining-duration encoding instead because that
// is the one whose t=1 column factors as pi * b * p(e).
struct ElapsedTables {
  int T = 0, N = 0, E = 0;
  std::vector<double> alpha;  // T*N*E, scaled
  std::vector<double> beta;   // T*N*E, scaled
  std::vector<double> chat;   // per-t raw normalizers (with shift applied)
  double loglik = 0.0;
};

ElapsedTables elapsed_forward_backward(const QualityHsmm& model, const EmissionCache& em,
                                       const DurationTables& dt, bool need_beta) {
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;
  ElapsedTables out;
  out.T = T;
  out.N = N;
  out.E = E;
  out.alpha.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  out.chat.assign(T, 0.0);

  std::vector<double> eb(N), exit_mass(N), entry(N);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < N; ++i) eb[i] = em.eb(t, i);
    double sum = 0.0;
    if (t == 0) {
      for (int i = 0; i < N; ++i) {
        const double v = model.initial_probs[i] * eb[i];
        out.alpha[idx3(0, i, 0, N, E)] = v;
        sum += v;
      }
    } else {
      for (int j = 0; j < N; ++j) {
        double x = 0.0;
        for (int e = 0; e < E; ++e) {
          x += out.alpha[idx3(t - 1, j, e, N, E)] * dt.hazard[static_cast<std::size_t>(j) * E + e];
        }
        exit_mass[j] = x;
      }
      for (int i = 0; i < N; ++i) {
        double x = 0.0;
        for (int j = 0; j < N; ++j) {
          if (j != i) x += exit_mass[j] * model.transitions[j][i];
        }
        entry[i] = x;
      }
      for (int i = 0; i < N; ++i) {
        double v = entry[i] * eb[i];
        out.alpha[idx3(t, i, 0, N, E)] = v;
        sum += v;
        for (int e = 1; e < E; ++e) {
          v = out.alpha[idx3(t - 1, i, e - 1, N, E)] * dt.cont[static_cast<std::size_t>(i) * E + e - 1] *
              eb[i];
          out.alpha[idx3(t, i, e, N, E)] = v;
          sum += v;
        }
      }
    }
    if (!(sum > 0.0)) {
      throw NumericalDegeneracyError("hsmm: forward mass vanished at timestep " + std::to_string(t));
    }
    out.chat[t] = sum;
    const double inv = 1.0 / sum;
    for (int i = 0; i < N; ++i) {
      for (int e = 0; e < E; ++e) out.alpha[idx3(t, i, e, N, E)] *= inv;
    }
    out.loglik += std::log(sum) + em.shift[t];
  }

  if (!need_beta) return out;

  out.beta.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  for (int i = 0; i < N; ++i) {
    for (int e = 0; e < E; ++e) out.beta[idx3(T - 1, i, e, N, E)] = 1.0;
  }
  std::vector<double> exit_next(N);
  for (int t = T - 2; t >= 0; --t) {
    for (int i = 0; i < N; ++i) eb[i] = em.eb(t + 1, i);
    const double inv = 1.0 / out.chat[t + 1];
    for (int i = 0; i < N; ++i) {
      double x = 0.0;
      for (int j = 0; j < N; ++j) {
        if (j != i) x += model.transitions[i][j] * eb[j] * out.beta[idx3(t + 1, j, 0, N, E)];
      }
      exit_next[i] = x;
    }
    for (int i = 0; i < N; ++i) {
      for (int e = 0; e < E; ++e) {
        double v = dt.hazard[static_cast<std::size_t>(i) * E + e] * exit_next[i];
        if (e + 1 < E) {
          v += dt.cont[static_cast<std::size_t>(i) * E + e] * eb[i] * out.beta[idx3(t + 1, i, e + 1, N, E)];
        }
        out.beta[idx3(t, i, e, N, E)] = v * inv;
      }
    }
  }
  return out;
}

}  // namespace detail

DurationLattice forward_pass(const QualityHsmm& model, const ObservationSequence& seq, Channel channel) {
  const auto em = detail::emission_cache(model, seq, channel);
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;

  DurationLattice lat;
  lat.T = T;
  lat.N = N;
  lat.E = E;
  lat.alpha.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  lat.scale.assign(T, 0.0);
  lat.log_scale.assign(T, 0.0);

  std::vector<double> eb(N), entry(N);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < N; ++i) eb[i] = em.eb(t, i);
    double sum = 0.0;
    if (t == 0) {
      for (int i = 0; i < N; ++i) {
        for (int e = 0; e < E; ++e) {
          const double v = model.initial_probs[i] * model.duration_pmf[i][e] * eb[i];
          lat.alpha[idx3(0, i, e, N, E)] = v;
          sum += v;
        }
      }
    } else {
      for (int i = 0; i < N; ++i) {
        double x = 0.0;
        for (int j = 0; j < N; ++j) {
          if (j != i) x += lat.alpha[idx3(t - 1, j, 0, N, E)] * model.transitions[j][i];
        }
        entry[i] = x;
      }
      for (int i = 0; i < N; ++i) {
        for (int e = 0; e < E; ++e) {
          const double carry = (e + 1 < E) ? lat.alpha[idx3(t - 1, i, e + 1, N, E)] : 0.0;
          const double v = (carry + entry[i] * model.duration_pmf[i][e]) * eb[i];
          lat.alpha[idx3(t, i, e, N, E)] = v;
          sum += v;
        }
      }
    }
    if (!(sum > 0.0)) {
      throw NumericalDegeneracyError("hsmm: forward mass vanished at timestep " + std::to_string(t));
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < N; ++i) {
      for (int e = 0; e < E; ++e) lat.alpha[idx3(t, i, e, N, E)] *= inv;
    }
    lat.log_scale[t] = std::log(sum) + em.shift[t];
    lat.scale[t] = std::exp(lat.log_scale[t]);
    lat.loglik += lat.log_scale[t];
  }
  return lat;
}

double sequence_likelihood(const DurationLattice& lattice) {
  if (lattice.T < 1 || lattice.log_scale.empty()) {
    throw InvalidInputError("sequence_likelihood: lattice not produced by forward_pass");
  }
  return lattice.loglik;
}

void backward_pass(const QualityHsmm& model, const ObservationSequence& seq, DurationLattice& lattice,
                   Channel channel) {
  const auto em = detail::emission_cache(model, seq, channel);
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;
  if (lattice.T != T || lattice.N != N || lattice.E != E || lattice.scale.empty()) {
    throw InvalidInputError("backward_pass: lattice shape does not match model/sequence");
  }
  lattice.beta.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  for (int i = 0; i < N; ++i) {
    for (int e = 0; e < E; ++e) lattice.beta[idx3(T - 1, i, e, N, E)] = 1.0;
  }
  std::vector<double> eb(N), w(N);
  for (int t = T - 2; t >= 0; --t) {
    for (int i = 0; i < N; ++i) eb[i] = em.eb(t + 1, i);
    // Raw normalizer at t+1 (scale with the exponent shift backed out).
    const double chat = std::exp(lattice.log_scale[t + 1] - em.shift[t + 1]);
    const double inv = 1.0 / chat;
    for (int j = 0; j < N; ++j) {
      double x = 0.0;
      for (int e = 0; e < E; ++e) {
        x += model.duration_pmf[j][e] * lattice.beta[idx3(t + 1, j, e, N, E)];
      }
      w[j] = eb[j] * x;
    }
    for (int i = 0; i < N; ++i) {
      double enter = 0.0;
      for (int j = 0; j < N; ++j) {
        if (j != i) enter += model.transitions[i][j] * w[j];
      }
      lattice.beta[idx3(t, i, 0, N, E)] = enter * inv;
      for (int e = 1; e < E; ++e) {
        lattice.beta[idx3(t, i, e, N, E)] = eb[i] * lattice.beta[idx3(t + 1, i, e - 1, N, E)] * inv;
      }
    }
  }
}

double likelihood_from_beta(const QualityHsmm& model, const ObservationSequence& seq,
                            const DurationLattice& lattice, Channel channel) {
  const auto em = detail::emission_cache(model, seq, channel);
  if (lattice.beta.empty()) throw InvalidInputError("likelihood_from_beta: run backward_pass first");
  const int N = em.N;
  const int E = model.max_duration;
  double s = 0.0;
  for (int i = 0; i < N; ++i) {
    for (int e = 0; e < E; ++e) {
      s += model.initial_probs[i] * model.duration_pmf[i][e] * em.eb(0, i) *
           lattice.beta[idx3(0, i, e, N, E)];
    }
  }
  double rest = 0.0;
  for (int t = 1; t < lattice.T; ++t) rest += lattice.log_scale[t];
  return std::log(s) + em.shift[0] + rest;
}

double PosteriorTables::state_marginal(int t, int i) const {
  double s = 0.0;
  for (int e = 0; e < E; ++e) s += g(t, i, e);
  return s;
}

double PosteriorTables::exit_mass(int t, int i, int e) const {
  double s = 0.0;
  for (int j = 0; j < N; ++j) s += x(t, i, e, j);
  return s;
}

PosteriorTables posteriors(const QualityHsmm& model, const ObservationSequence& seq,
                           const DurationLattice& lattice, Channel channel) {
  const auto em = detail::emission_cache(model, seq, channel);
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;
  if (lattice.T != T || lattice.N != N || lattice.E != E) {
    throw InvalidInputError("posteriors: lattice shape does not match model/sequence");
  }
  const auto dt = detail::duration_tables(model);
  const auto et = detail::elapsed_forward_backward(model, em, dt, true);

  PosteriorTables post;
  post.T = T;
  post.N = N;
  post.E = E;
  post.gamma.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  post.xi.assign(static_cast<std::size_t>(T) * N * E * N, 0.0);
  for (std::size_t k = 0; k < post.gamma.size(); ++k) {
    post.gamma[k] = et.alpha[k] * et.beta[k];
  }
  std::vector<double> eb(N);
  for (int t = 0; t + 1 < T; ++t) {
    for (int j = 0; j < N; ++j) eb[j] = em.eb(t + 1, j);
    const double inv = 1.0 / et.chat[t + 1];
    for (int i = 0; i < N; ++i) {
      for (int e = 0; e < E; ++e) {
        const double base = et.alpha[idx3(t, i, e, N, E)] * dt.hazard[static_cast<std::size_t>(i) * E + e];
        if (base == 0.0) continue;
        for (int j = 0; j < N; ++j) {
          if (j == i) continue;
          post.xi[(idx3(t, i, e, N, E)) * static_cast<std::size_t>(N) + j] =
              base * model.transitions[i][j] * eb[j] * et.beta[idx3(t + 1, j, 0, N, E)] * inv;
        }
      }
    }
  }
  return post;
}

ViterbiResult viterbi_decode(const QualityHsmm& model, const ObservationSequence& seq, Channel channel) {
  const auto em = detail::emission_cache(model, seq, channel);
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;
  const auto dt = detail::duration_tables(model);

  std::vector<double> log_hazard(static_cast<std::size_t>(N) * E, kNegInf);
  std::vector<double> log_cont(static_cast<std::size_t>(N) * E, kNegInf);
  for (int i = 0; i < N; ++i) {
    for (int e = 0; e < E; ++e) {
      const double h = dt.hazard[static_cast<std::size_t>(i) * E + e];
      const double c = dt.cont[static_cast<std::size_t>(i) * E + e];
      if (h > 0) log_hazard[static_cast<std::size_t>(i) * E + e] = std::log(h);
      if (c > 0) log_cont[static_cast<std::size_t>(i) * E + e] = std::log(c);
    }
  }

  std::vector<double> delta(static_cast<std::size_t>(T) * N * E, kNegInf);
  // Backpointer for entry cells: the (state, elapsed) the previous segment
  // ended with. Continuation cells backtrack implicitly.
  std::vector<int> bp_state(static_cast<std::size_t>(T) * N, -1);
  std::vector<int> bp_dwell(static_cast<std::size_t>(T) * N, -1);

  auto logb = [&](int t, int i) { return em.logb[static_cast<std::size_t>(t) * N + i]; };

  for (int i = 0; i < N; ++i) {
    if (model.initial_probs[i] > 0) {
      delta[idx3(0, i, 0, N, E)] = std::log(model.initial_probs[i]) + logb(0, i);
    }
  }
  std::vector<double> best_exit(N);
  std::vector<int> best_exit_e(N);
  for (int t = 1; t < T; ++t) {
    for (int j = 0; j < N; ++j) {
      double bx = kNegInf;
      int be = -1;
      for (int e = 0; e < E; ++e) {
        const double v = delta[idx3(t - 1, j, e, N, E)] + log_hazard[static_cast<std::size_t>(j) * E + e];
        if (v > bx) {
          bx = v;
          be = e;
        }
      }
      best_exit[j] = bx;
      best_exit_e[j] = be;
    }
    for (int i = 0; i < N; ++i) {
      double bv = kNegInf;
      int bj = -1;
      for (int j = 0; j < N; ++j) {
        if (j == i || model.transitions[j][i] <= 0) continue;
        const double v = best_exit[j] + std::log(model.transitions[j][i]);
        if (v > bv) {
          bv = v;
          bj = j;
        }
      }
      if (bj >= 0) {
        delta[idx3(t, i, 0, N, E)] = bv + logb(t, i);
        bp_state[static_cast<std::size_t>(t) * N + i] = bj;
        bp_dwell[static_cast<std::size_t>(t) * N + i] = best_exit_e[bj];
      }
      for (int e = 1; e < E; ++e) {
        const double prev = delta[idx3(t - 1, i, e - 1, N, E)];
        const double lc = log_cont[static_cast<std::size_t>(i) * E + e - 1];
        if (prev > kNegInf && lc > kNegInf) {
          delta[idx3(t, i, e, N, E)] = prev + lc + logb(t, i);
        }
      }
    }
  }

  int bi = 0, be = 0;
  double best = kNegInf;
  for (int i = 0; i < N; ++i) {
    for (int e = 0; e < E; ++e) {
      const double v = delta[idx3(T - 1, i, e, N, E)];
      if (v > best) {
        best = v;
        bi = i;
        be = e;
      }
    }
  }
  if (best == kNegInf) {
    throw NumericalDegeneracyError("viterbi: no segmentation has positive probability");
  }

  ViterbiResult res;
  res.log_prob = best;
  res.states.assign(T, -1);
  int t = T - 1, i = bi, e = be;
  for (;;) {
    // The cell (t, i, e) covers rounds t-e .. t in state i.
    for (int u = t - e; u <= t; ++u) res.states[u] = i;
    res.segments.push_back({i, t - e, e + 1});
    const int start = t - e;
    if (start == 0) break;
    const int pj = bp_state[static_cast<std::size_t>(start) * N + i];
    const int pe = bp_dwell[static_cast<std::size_t>(start) * N + i];
    t = start - 1;
    i = pj;
    e = pe;
  }
  std::reverse(res.segments.begin(), res.segments.end());
  return res;
}

QualityHsmm mllr_adapt_channel(const QualityHsmm& model, const MllrChannelTransform& tr, int s) {
  if (!(tr.duration_scale > 0.0)) {
    throw InvalidInputError("mllr: duration scale delta must be > 0");
  }
  if (s < 0 || s >= model.num_channels) throw InvalidInputError("mllr: channel index out of range");
  QualityHsmm out = model;
  for (int i = 0; i < model.num_states; ++i) {
    out.emission_mean[i][s] = tr.emission_scale * model.emission_mean[i][s] + tr.emission_offset;
    out.duration_mean[i] = tr.duration_scale * model.duration_mean[i] + tr.duration_offset;
  }
  out.rebuild_duration_pmfs();
  out.validate();
  return out;
}

QualityHsmm mllr_adapt(const QualityHsmm& model, const MllrTransform& transform) {
  transform.validate();
  model.validate();
  if (static_cast<int>(transform.channels.size()) != model.num_channels) {
    throw InvalidInputError("mllr: transform has " + std::to_string(transform.channels.size()) +
                            " channels but model expects " + std::to_string(model.num_channels));
  }
  for (const auto& c : transform.channels) {
    if (c.duration_scale != transform.channels[0].duration_scale ||
        c.duration_offset != transform.channels[0].duration_offset) {
      throw InvalidInputError(
          "mllr: per-channel duration transforms disagree; a single model holds one duration "
          "distribution per state (use map_state_estimate for per-channel adaptation)");
    }
  }
  QualityHsmm out = model;
  for (int i = 0; i < model.num_states; ++i) {
    for (int s = 0; s < model.num_channels; ++s) {
      out.emission_mean[i][s] =
          transform.channels[s].emission_scale * model.emission_mean[i][s] +
          transform.channels[s].emission_offset;
    }
    out.duration_mean[i] = transform.channels[0].duration_scale * model.duration_mean[i] +
                           transform.channels[0].duration_offset;
  }
  out.rebuild_duration_pmfs();
  out.validate();
  return out;
}

MapEstimate map_state_estimate(const QualityHsmm& model, const MllrTransform& transforms,
                               const ObservationSequence& seq, int t) {
  transforms.validate();
  if (static_cast<int>(transforms.channels.size()) != model.num_channels) {
    throw InvalidInputError("map_state_estimate: transform channel count mismatch");
  }
  if (t < 0 || t >= seq.length()) {
    throw InvalidInputError("map_state_estimate: round index out of range");
  }
  const int N = model.num_states;
  const int E = model.max_duration;
  std::vector<double> log_score(N, 0.0);
  std::vector<double> log_cell(static_cast<std::size_t>(N) * E, 0.0);
  for (int s = 0; s < model.num_channels; ++s) {
    const QualityHsmm adapted = mllr_adapt_channel(model, transforms.channels[s], s);
    const auto em = detail::emission_cache(adapted, seq, Channel{s});
    const auto dt = detail::duration_tables(adapted);
    const auto et = detail::elapsed_forward_backward(adapted, em, dt, true);
    for (int i = 0; i < N; ++i) {
      double m = 0.0;
      for (int e = 0; e < E; ++e) {
        const double cell = et.alpha[idx3(t, i, e, N, E)] * et.beta[idx3(t, i, e, N, E)];
        m += cell;
        log_cell[static_cast<std::size_t>(i) * E + e] += cell > 0 ? std::log(cell) : kNegInf;
      }
      log_score[i] += m > 0 ? std::log(m) : kNegInf;
    }
  }
  MapEstimate est;
  double mx = *std::max_element(log_score.begin(), log_score.end());
  if (mx == kNegInf) {
    throw NumericalDegeneracyError("map_state_estimate: all states have zero posterior");
  }
  est.scores.resize(N);
  double sum = 0.0;
  for (int i = 0; i < N; ++i) {
    est.scores[i] = std::exp(log_score[i] - mx);
    sum += est.scores[i];
  }
  for (double& v : est.scores) v /= sum;
  est.state = 0;
  for (int i = 1; i < N; ++i) {
    if (est.scores[i] > est.scores[est.state]) est.state = i;
  }
  est.dwell = 1;
  double bestc = kNegInf;
  for (int e = 0; e < E; ++e) {
    const double v = log_cell[static_cast<std::size_t>(est.state) * E + e];
    if (v > bestc) {
      bestc = v;
      est.dwell = e + 1;
    }
  }
  return est;
}

BruteForceResult brute_force_likelihood(const QualityHsmm& model, const ObservationSequence& seq,
                                        Channel channel, double max_terms) {
  const auto em = detail::emission_cache(model, seq, channel);
  const int T = em.T;
  const int N = em.N;
  const int E = model.max_duration;

  // Count segmentations before enumerating.
  {
    std::vector<double> h(T + 1, 0.0);
    h[0] = 1.0;
    for (int L = 1; L <= T; ++L) {
      for (int d = 1; d <= std::min(E, L); ++d) h[L] += (N - 1) * h[L - d];
    }
    double total = 0.0;
    for (int d = 1; d <= std::min(E, T); ++d) total += N * h[T - d];
    if (total > max_terms) {
      throw SizeLimitError("brute_force_likelihood: instance has ~" + io::format_double(total) +
                           " segmentations, above the cap of " + io::format_double(max_terms));
    }
  }

  const auto dt = detail::duration_tables(model);
  // Per-state prefix sums of shifted log densities, so a segment's emission
  // factor is one subtraction. The shift (sum of per-t maxima) cancels when
  // marginals are normalized and is added back for the loglik.
  std::vector<double> prefix(static_cast<std::size_t>(N) * (T + 1), 0.0);
  double total_shift = 0.0;
  for (int t = 0; t < T; ++t) total_shift += em.shift[t];
  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < T; ++t) {
      prefix[static_cast<std::size_t>(i) * (T + 1) + t + 1] =
          prefix[static_cast<std::size_t>(i) * (T + 1) + t] +
          (em.logb[static_cast<std::size_t>(t) * N + i] - em.shift[t]);
    }
  }

  BruteForceResult res;
  res.num_states = N;
  res.max_duration = E;
  res.state_marginals.assign(static_cast<std::size_t>(T) * N, 0.0);
  res.dwell_marginals.assign(static_cast<std::size_t>(T) * N * E, 0.0);
  res.transition_post.assign(static_cast<std::size_t>(T) * N * N, 0.0);
  res.best_log_prob = kNegInf;

  double total = 0.0;
  std::vector<Segment> stack;

  auto account = [&](double p) {
    total += p;
    for (std::size_t k = 0; k < stack.size(); ++k) {
      const Segment& sgm = stack[k];
      for (int u = 0; u < sgm.length; ++u) {
        const int t = sgm.start + u;
        res.state_marginals[static_cast<std::size_t>(t) * N + sgm.state] += p;
        res.dwell_marginals[idx3(t, sgm.state, u, N, E)] += p;
      }
      if (k + 1 < stack.size()) {
        const int t_end = sgm.start + sgm.length - 1;
        res.transition_post[(static_cast<std::size_t>(t_end) * N + sgm.state) * N + stack[k + 1].state] += p;
      }
    }
  };

  // Depth-first over segmentations; log-probability is accumulated and
  // exponentiated per complete segmentation (the shift keeps it in range).
  auto rec = [&](auto&& self, int t, int prev, double logp) -> void {
    for (int i = 0; i < N; ++i) {
      if (t > 0 && i == prev) continue;
      const double ltrans =
          (t == 0) ? (model.initial_probs[i] > 0 ? std::log(model.initial_probs[i]) : kNegInf)
                   : (model.transitions[prev][i] > 0 ? std::log(model.transitions[prev][i]) : kNegInf);
      if (ltrans == kNegInf) continue;
      for (int d = 1; d <= std::min(E, T - t); ++d) {
        const double emis = prefix[static_cast<std::size_t>(i) * (T + 1) + t + d] -
                            prefix[static_cast<std::size_t>(i) * (T + 1) + t];
        stack.push_back({i, t, d});
        if (t + d == T) {
          const double D = dt.survivor[static_cast<std::size_t>(i) * E + d - 1];
          if (D > 0) {
            const double lp = logp + ltrans + emis + std::log(D);
            account(std::exp(lp));
            if (lp > res.best_log_prob) {
              res.best_log_prob = lp;
              res.best_segments = stack;
            }
          }
        } else {
          const double pd = model.duration_pmf[i][d - 1];
          if (pd > 0) self(self, t + d, i, logp + ltrans + emis + std::log(pd));
        }
        stack.pop_back();
      }
    }
  };
  rec(rec, 0, -1, 0.0);

  if (!(total > 0.0)) {
    throw NumericalDegeneracyError("brute_force_likelihood: zero total probability");
  }
  res.loglik = std::log(total) + total_shift;
  res.best_log_prob += total_shift;
  const double inv = 1.0 / total;
  for (double& v : res.state_marginals) v *= inv;
  for (double& v : res.dwell_marginals) v *= inv;
  for (double& v : res.transition_post) v *= inv;
  return res;
}

ObservationSequence sample_sequence(const QualityHsmm& model, int T, Rng& rng,
                                    std::vector<int>* hidden_states) {
  model.validate();
  if (T < 1) throw InvalidInputError("sample_sequence: T must be >= 1");
  ObservationSequence seq;
  seq.channels = model.num_channels;
  seq.values.reserve(T);
  if (hidden_states) hidden_states->clear();

  auto draw_categorical = [&rng](const std::vector<double>& p) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      acc += p[k];
      if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(p.size()) - 1;
  };

  int state = draw_categorical(model.initial_probs);
  int remaining = draw_categorical(model.duration_pmf[state]) + 1;
  for (int t = 0; t < T; ++t) {
    if (remaining == 0) {
      state = draw_categorical(model.transitions[state]);
      remaining = draw_categorical(model.duration_pmf[state]) + 1;
    }
    std::vector<double> row(model.num_channels);
    for (int s = 0; s < model.num_channels; ++s) {
      row[s] = model.emission_mean[state][s] + std::sqrt(model.emission_var[state][s]) * rng.normal();
    }
    seq.values.push_back(std::move(row));
    if (hidden_states) hidden_states->push_back(state);
    --remaining;
  }
  return seq;
}

QualityHsmm default_init(int num_states, int max_duration,
                         const std::vector<ObservationSequence>& seqs) {
  if (seqs.empty()) throw InvalidInputError("default_init: need at least one sequence");
  const int S = seqs[0].channels;
  QualityHsmm m;
  m.num_states = num_states;
  m.max_duration = max_duration;
  m.num_channels = S;
  m.initial_probs.assign(num_states, 1.0 / num_states);
  m.transitions.assign(num_states, std::vector<double>(num_states, 0.0));
  for (int i = 0; i < num_states; ++i) {
    for (int j = 0; j < num_states; ++j) {
      if (i != j) m.transitions[i][j] = 1.0 / (num_states - 1);
    }
  }
  m.duration_mean.assign(num_states, max_duration / 2.0);
  m.duration_var.assign(num_states, std::max(1.0, max_duration * max_duration / 16.0));
  m.emission_mean.assign(num_states, std::vector<double>(S, 0.0));
  m.emission_var.assign(num_states, std::vector<double>(S, 1.0));

  for (int s = 0; s < S; ++s) {
    std::vector<double> pooled;
    for (const auto& seq : seqs) {
      seq.validate();
      if (seq.channels != S) throw InvalidInputError("default_init: sequences disagree on channels");
      for (const auto& row : seq.values) pooled.push_back(row[s]);
    }
    std::sort(pooled.begin(), pooled.end());
    double mean = std::accumulate(pooled.begin(), pooled.end(), 0.0) / pooled.size();
    double var = 0.0;
    for (double v : pooled) var += (v - mean) * (v - mean);
    var = std::max(var / pooled.size(), kEmissionVarFloor);
    for (int i = 0; i < num_states; ++i) {
      // Quantile split, descending: state 0 gets the highest channel values.
      const double q = 1.0 - (i + 0.5) / num_states;
      const std::size_t pos = static_cast<std::size_t>(q * (pooled.size() - 1));
      m.emission_mean[i][s] = pooled[pos];
      m.emission_var[i][s] = var;
    }
  }
  m.rebuild_duration_pmfs();
  m.validate();
  return m;
}

QualityHsmm sort_states_by_quality(const QualityHsmm& model, int channel) {
  model.validate();
  if (channel < 0 || channel >= model.num_channels) {
    throw InvalidInputError("sort_states_by_quality: channel out of range");
  }
  std::vector<int> order(model.num_states);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return model.emission_mean[a][channel] > model.emission_mean[b][channel];
  });
  QualityHsmm out = model;
  for (int i = 0; i < model.num_states; ++i) {
    const int src = order[i];
    out.initial_probs[i] = model.initial_probs[src];
    out.duration_mean[i] = model.duration_mean[src];
    out.duration_var[i] = model.duration_var[src];
    out.emission_mean[i] = model.emission_mean[src];
    out.emission_var[i] = model.emission_var[src];
    for (int j = 0; j < model.num_states; ++j) {
      out.transitions[i][j] = model.transitions[src][order[j]];
    }
  }
  out.rebuild_duration_pmfs();
  out.validate();
  return out;
}

namespace {

// Expected complete-data log-likelihood term for one state's duration
// parameters: completed segments weight log p(d), the censored tail weights
// log D(d).
double duration_objective(const std::vector<double>& completed, const std::vector<double>& censored,
                          double mean, double var, int E) {
  const auto pmf = discretized_duration_pmf(mean, var, E);
  std::vector<double> survivor(E, 0.0);
  double acc = 0.0;
  for (int e = E - 1; e >= 0; --e) {
    acc += pmf[e];
    survivor[e] = acc;
  }
  double q = 0.0;
  for (int e = 0; e < E; ++e) {
    if (completed[e] > 0) {
      if (pmf[e] <= 0) return kNegInf;
      q += completed[e] * std::log(pmf[e]);
    }
    if (censored[e] > 0) {
      if (survivor[e] <= 0) return kNegInf;
      q += censored[e] * std::log(survivor[e]);
    }
  }
  return q;
}

struct EStepStats {
  std::vector<double> start;                  // N
  std::vector<double> trans;                  // N*N
  std::vector<double> emis_w;                 // N
  std::vector<double> emis_wz, emis_wz2;      // N*S
  std::vector<double> dur_completed, dur_censored;  // N*E
  double loglik = 0.0;

  void init(int N, int S, int E) {
    start.assign(N, 0.0);
    trans.assign(static_cast<std::size_t>(N) * N, 0.0);
    emis_w.assign(N, 0.0);
    emis_wz.assign(static_cast<std::size_t>(N) * S, 0.0);
    emis_wz2.assign(static_cast<std::size_t>(N) * S, 0.0);
    dur_completed.assign(static_cast<std::size_t>(N) * E, 0.0);
    dur_censored.assign(static_cast<std::size_t>(N) * E, 0.0);
  }

  void accumulate(const EStepStats& o) {
    loglik += o.loglik;
    for (std::size_t k = 0; k < start.size(); ++k) start[k] += o.start[k];
    for (std::size_t k = 0; k < trans.size(); ++k) trans[k] += o.trans[k];
    for (std::size_t k = 0; k < emis_w.size(); ++k) emis_w[k] += o.emis_w[k];
    for (std::size_t k = 0; k < emis_wz.size(); ++k) emis_wz[k] += o.emis_wz[k];
    for (std::size_t k = 0; k < emis_wz2.size(); ++k) emis_wz2[k] += o.emis_wz2[k];
    for (std::size_t k = 0; k < dur_completed.size(); ++k) dur_completed[k] += o.dur_completed[k];
    for (std::size_t k = 0; k < dur_censored.size(); ++k) dur_censored[k] += o.dur_censored[k];
  }
};

EStepStats e_step(const QualityHsmm& model, const ObservationSequence& seq) {
  const auto em = detail::emission_cache(model, seq, Channel{});
  const auto dt = detail::duration_tables(model);
  const auto et = detail::elapsed_forward_backward(model, em, dt, true);
  const int T = et.T;
  const int N = et.N;
  const int E = et.E;
  const int S = model.num_channels;

  EStepStats st;
  st.init(N, S, E);
  st.loglik = et.loglik;

  for (int i = 0; i < N; ++i) {
    st.start[i] = et.alpha[idx3(0, i, 0, N, E)] * et.beta[idx3(0, i, 0, N, E)];
  }
  std::vector<double> eb(N);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < N; ++i) {
      double w = 0.0;
      for (int e = 0; e < E; ++e) w += et.alpha[idx3(t, i, e, N, E)] * et.beta[idx3(t, i, e, N, E)];
      if (w <= 0) continue;
      st.emis_w[i] += w;
      for (int s = 0; s < S; ++s) {
        const double z = seq.values[t][s];
        st.emis_wz[static_cast<std::size_t>(i) * S + s] += w * z;
        st.emis_wz2[static_cast<std::size_t>(i) * S + s] += w * z * z;
      }
    }
    if (t + 1 < T) {
      for (int j = 0; j < N; ++j) eb[j] = em.eb(t + 1, j);
      const double inv = 1.0 / et.chat[t + 1];
      for (int i = 0; i < N; ++i) {
        for (int e = 0; e < E; ++e) {
          const double base =
              et.alpha[idx3(t, i, e, N, E)] * dt.hazard[static_cast<std::size_t>(i) * E + e];
          if (base == 0.0) continue;
          double exit_total = 0.0;
          for (int j = 0; j < N; ++j) {
            if (j == i) continue;
            const double xi = base * model.transitions[i][j] * eb[j] * et.beta[idx3(t + 1, j, 0, N, E)] * inv;
            st.trans[static_cast<std::size_t>(i) * N + j] += xi;
            exit_total += xi;
          }
          st.dur_completed[static_cast<std::size_t>(i) * E + e] += exit_total;
        }
      }
    } else {
      for (int i = 0; i < N; ++i) {
        for (int e = 0; e < E; ++e) {
          st.dur_censored[static_cast<std::size_t>(i) * E + e] += et.alpha[idx3(t, i, e, N, E)];
        }
      }
    }
  }
  return st;
}

}  // namespace

FitResult baum_welch_fit(const QualityHsmm& init, const std::vector<ObservationSequence>& sequences,
                         int max_iters, double tol, bool parallel) {
  init.validate();
  if (sequences.empty()) throw InvalidInputError("baum_welch_fit: need at least one sequence");
  if (max_iters < 1) throw InvalidInputError("baum_welch_fit: max_iters must be >= 1");

  const int N = init.num_states;
  const int S = init.num_channels;
  const int E = init.max_duration;

  FitResult res;
  res.model = init;

  std::vector<EStepStats> per_seq(sequences.size());
  auto run_e_step = [&](const QualityHsmm& model) {
    parallel_for(sequences.size(), parallel, [&](std::size_t k) { per_seq[k] = e_step(model, sequences[k]); });
    EStepStats total;
    total.init(N, S, E);
    for (const auto& st : per_seq) total.accumulate(st);  // fixed order
    return total;
  };

  EStepStats stats = run_e_step(res.model);
  res.loglik_trace.push_back(stats.loglik);

  for (int iter = 0; iter < max_iters; ++iter) {
    QualityHsmm next = res.model;

    double start_sum = std::accumulate(stats.start.begin(), stats.start.end(), 0.0);
    if (start_sum > 0) {
      for (int i = 0; i < N; ++i) next.initial_probs[i] = stats.start[i] / start_sum;
    }
    for (int i = 0; i < N; ++i) {
      double row = 0.0;
      for (int j = 0; j < N; ++j) row += stats.trans[static_cast<std::size_t>(i) * N + j];
      if (row > 0) {
        for (int j = 0; j < N; ++j) {
          next.transitions[i][j] = (i == j) ? 0.0 : stats.trans[static_cast<std::size_t>(i) * N + j] / row;
        }
      }
    }
    for (int i = 0; i < N; ++i) {
      if (stats.emis_w[i] <= 1e-12) continue;  // state never visited; keep params
      for (int s = 0; s < S; ++s) {
        const double mu = stats.emis_wz[static_cast<std::size_t>(i) * S + s] / stats.emis_w[i];
        const double var =
            stats.emis_wz2[static_cast<std::size_t>(i) * S + s] / stats.emis_w[i] - mu * mu;
        next.emission_mean[i][s] = mu;
        next.emission_var[i][s] = std::max(var, kEmissionVarFloor);
      }
    }

    // Generalized-EM duration update: accept a candidate only if it improves
    // the expected complete-data term, so the outer loglik cannot decrease.
    for (int i = 0; i < N; ++i) {
      std::vector<double> completed(stats.dur_completed.begin() + static_cast<std::size_t>(i) * E,
                                    stats.dur_completed.begin() + static_cast<std::size_t>(i + 1) * E);
      std::vector<double> censored(stats.dur_censored.begin() + static_cast<std::size_t>(i) * E,
                                   stats.dur_censored.begin() + static_cast<std::size_t>(i + 1) * E);
      double wtot = 0.0, mean_acc = 0.0;
      for (int e = 0; e < E; ++e) {
        wtot += completed[e] + censored[e];
        mean_acc += (completed[e] + censored[e]) * (e + 1);
      }
      if (wtot <= 1e-12) continue;
      double best_m = res.model.duration_mean[i];
      double best_v = res.model.duration_var[i];
      double best_q = duration_objective(completed, censored, best_m, best_v, E);
      const double mm_mean = mean_acc / wtot;
      double mm_var = 0.0;
      for (int e = 0; e < E; ++e) {
        mm_var += (completed[e] + censored[e]) * (e + 1 - mm_mean) * (e + 1 - mm_mean);
      }
      mm_var = std::max(mm_var / wtot, 1e-3);
      auto consider = [&](double m, double v) {
        if (!(v >= 0) || !std::isfinite(m) || !std::isfinite(v)) return;
        const double q = duration_objective(completed, censored, m, v, E);
        if (q > best_q) {
          best_q = q;
          best_m = m;
          best_v = v;
        }
      };
      consider(mm_mean, mm_var);
      double step_m = 1.0, step_v = 2.0;
      for (int round = 0; round < 24; ++round) {
        const double m0 = best_m, v0 = best_v;
        consider(m0 + step_m, v0);
        consider(m0 - step_m, v0);
        consider(m0, v0 * step_v);
        consider(m0, std::max(v0 / step_v, 1e-4));
        if (best_m == m0 && best_v == v0) {
          step_m *= 0.5;
          step_v = 1.0 + (step_v - 1.0) * 0.5;
          if (step_m < 1e-3) break;
        }
      }
      next.duration_mean[i] = best_m;
      next.duration_var[i] = best_v;
    }

    next.rebuild_duration_pmfs();
    next.validate();

    EStepStats next_stats = run_e_step(next);
    res.model = next;
    res.loglik_trace.push_back(next_stats.loglik);
    const double gain = next_stats.loglik - stats.loglik;
    stats = std::move(next_stats);
    if (gain < tol) break;
  }
  return res;
}

std::string QualityHsmm::to_json_string() const {
  validate();
  nlohmann::json j;
  j["format_version"] = 1;
  j["num_states"] = num_states;
  j["max_duration"] = max_duration;
  j["pi"] = initial_probs;
  j["transitions"] = transitions;
  j["duration_mean"] = duration_mean;
  j["duration_var"] = duration_var;
  j["emission_mean"] = emission_mean;
  j["emission_var"] = emission_var;
  return j.dump(2) + "\n";
}

QualityHsmm QualityHsmm::from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model JSON parse error: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw FormatError("model JSON: unsupported format_version");
    }
    QualityHsmm m;
    m.num_states = j.at("num_states").get<int>();
    m.max_duration = j.at("max_duration").get<int>();
    m.initial_probs = j.at("pi").get<std::vector<double>>();
    m.transitions = j.at("transitions").get<std::vector<std::vector<double>>>();
    m.duration_mean = j.at("duration_mean").get<std::vector<double>>();
    m.duration_var = j.at("duration_var").get<std::vector<double>>();
    m.emission_mean = j.at("emission_mean").get<std::vector<std::vector<double>>>();
    m.emission_var = j.at("emission_var").get<std::vector<std::vector<double>>>();
    m.num_channels = m.emission_mean.empty() ? 0 : static_cast<int>(m.emission_mean[0].size());
    m.rebuild_duration_pmfs();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model JSON: ") + e.what());
  }
}

void QualityHsmm::save(const std::filesystem::path& path) const {
  io::atomic_write(path, to_json_string());
}

QualityHsmm QualityHsmm::load(const std::filesystem::path& path) {
  return from_json_string(io::read_file(path));
}

}  // namespace trail::hsmm
