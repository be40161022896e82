#include "trail/trust.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trail/errors.hpp"
#include "trail/io.hpp"

namespace trail::trust {

double rho(double t_life, std::span<const double> mean, std::span<const double> var) {
  if (!(t_life > 0)) throw InvalidInputError("rho: t_life must be > 0");
  if (mean.size() != var.size() || mean.empty()) {
    throw InvalidInputError("rho: mean and var must be non-empty and equal-length");
  }
  double msum = 0.0, vsum = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(mean[i] > 0)) throw InvalidInputError("rho: dwell means must be > 0");
    if (!(var[i] >= 0)) throw InvalidInputError("rho: dwell variances must be >= 0");
    msum += mean[i];
    vsum += var[i];
  }
  if (vsum == 0.0) {
    if (std::abs(t_life - msum) > 1e-9 * std::max(1.0, std::abs(t_life))) {
      throw InvalidInputError("rho: zero total variance requires t_life == sum of means");
    }
    return 0.0;
  }
  return (t_life - msum) / vsum;
}

DwellStats DwellStats::make(std::vector<double> mean, std::vector<double> var, double t_life) {
  DwellStats st;
  st.rho = ::trail::trust::rho(t_life, mean, var);
  st.mean = std::move(mean);
  st.var = std::move(var);
  st.t_life = t_life;
  return st;
}

double expected_residence(int state, const DwellStats& stats) {
  if (state < 0 || state >= stats.num_states()) {
    throw InvalidInputError("expected_residence: state out of range");
  }
  const double e = stats.mean[state] + stats.rho * stats.var[state];
  if (!(e > 0)) {
    throw InvalidInputError("expected_residence: nonpositive residence for state " +
                            std::to_string(state) + " (inconsistent stats)");
  }
  return e;
}

std::vector<double> all_residences(const DwellStats& stats) {
  std::vector<double> out(stats.num_states());
  for (int i = 0; i < stats.num_states(); ++i) out[i] = expected_residence(i, stats);
  return out;
}

RemainingResidence remaining_residence(double expected_res, double xi_val, double gamma_val) {
  if (!(gamma_val > 0)) {
    throw InvalidInputError("remaining_residence: gamma must be > 0 (state not plausible)");
  }
  if (!(xi_val >= 0)) throw InvalidInputError("remaining_residence: xi must be >= 0");
  RemainingResidence out;
  out.value = expected_res * (1.0 - xi_val / gamma_val);
  if (out.value < 0.0) {
    out.value = 0.0;
    out.clamped = true;
  }
  return out;
}

double trust_level(int state, double remaining_res, std::span<const double> residences) {
  if (state < 0 || state >= static_cast<int>(residences.size())) {
    throw InvalidInputError("trust_level: state out of range");
  }
  for (double r : residences) {
    if (!(r > 0)) throw InvalidInputError("trust_level: residences must be positive");
  }
  // Summing only the states after `state` keeps TL(N-1) == E_bar exact.
  double tail = 0.0;
  for (std::size_t j = state + 1; j < residences.size(); ++j) tail += residences[j];
  return remaining_res + tail;
}

TrustRecord trust_from_history(const hsmm::QualityHsmm& model, const hsmm::MllrTransform& transforms,
                               const hsmm::ObservationSequence& seq, const DwellStats& stats, int t,
                               int client_id) {
  if (t < 0 || t >= seq.length()) {
    throw InvalidInputError("trust_from_history: round index out of range");
  }
  if (stats.num_states() != model.num_states) {
    throw InvalidInputError("trust_from_history: stats/model state count mismatch");
  }
  const auto est = hsmm::map_state_estimate(model, transforms, seq, t);

  const hsmm::QualityHsmm joint = hsmm::mllr_adapt(model, transforms);
  const auto lattice = hsmm::forward_pass(joint, seq);
  const auto post = hsmm::posteriors(joint, seq, lattice);

  const int E = model.max_duration;
  int dwell_idx = 0;
  double best = -1.0;
  for (int e = 0; e < E; ++e) {
    const double g = post.g(t, est.state, e);
    if (g > best) {
      best = g;
      dwell_idx = e;
    }
  }
  const double gamma_val = post.g(t, est.state, dwell_idx);

  double xi_val;
  if (t + 1 < seq.length()) {
    xi_val = post.exit_mass(t, est.state, dwell_idx);
  } else {
    // No smoothed transition exists at the horizon; use the causal exit
    // posterior gamma * hazard(dwell).
    const auto pmf = joint.duration_pmf[est.state];
    double survivor = 0.0;
    for (int e = dwell_idx; e < E; ++e) survivor += pmf[e];
    const double hazard = survivor > 0 ? pmf[dwell_idx] / survivor : 1.0;
    xi_val = gamma_val * hazard;
  }

  TrustRecord rec;
  rec.client = client_id;
  rec.round = t;
  rec.state = est.state;
  rec.dwell = dwell_idx + 1;
  rec.gamma = gamma_val;
  rec.xi = xi_val;
  rec.expected_res = expected_residence(est.state, stats);
  const auto rr = remaining_residence(rec.expected_res, xi_val, gamma_val);
  rec.remaining_res = rr.value;
  rec.clamped = rr.clamped;
  rec.tl = trust_level(est.state, rr.value, all_residences(stats));
  return rec;
}

HazardCurve empirical_hazard(const std::vector<double>& failure_times, int population, double dt) {
  if (!(dt > 0)) throw InvalidInputError("empirical_hazard: dt must be > 0");
  if (population < static_cast<int>(failure_times.size())) {
    throw InvalidInputError("empirical_hazard: population smaller than failure count");
  }
  for (double ft : failure_times) {
    if (!(ft >= 0)) throw InvalidInputError("empirical_hazard: failure times must be >= 0");
  }
  HazardCurve curve;
  curve.dt = dt;
  curve.population = population;
  double horizon = 0.0;
  for (double ft : failure_times) horizon = std::max(horizon, ft);
  const int bins = failure_times.empty() ? 1 : static_cast<int>(std::floor(horizon / dt)) + 1;

  std::vector<int> per_bin(bins, 0);
  for (double ft : failure_times) {
    int b = static_cast<int>(std::floor(ft / dt));
    b = std::min(b, bins - 1);
    ++per_bin[b];
  }
  curve.f.resize(bins);
  curve.F.resize(bins);
  curve.hazard.resize(bins);
  curve.defined.resize(bins);
  curve.cumulative_failures.resize(bins);
  int k = 0;
  for (int b = 0; b < bins; ++b) {
    curve.cumulative_failures[b] = k;
    curve.F[b] = static_cast<double>(k) / population;
    curve.f[b] = per_bin[b] / (population * dt);
    const int survivors = population - k;
    if (survivors > 0) {
      curve.hazard[b] = per_bin[b] / (survivors * dt);
      curve.defined[b] = true;
    } else {
      curve.hazard[b] = 0.0;
      curve.defined[b] = false;
    }
    k += per_bin[b];
  }
  return curve;
}

std::string trust_csv_string(const std::vector<TrustRecord>& records) {
  std::string out = "round,client,state,dwell,E_i,E_bar,TL\n";
  for (const auto& r : records) {
    out += std::to_string(r.round);
    out += ',';
    out += std::to_string(r.client);
    out += ',';
    out += std::to_string(r.state);
    out += ',';
    out += std::to_string(r.dwell);
    out += ',';
    out += io::format_double(r.expected_res);
    out += ',';
    out += io::format_double(r.remaining_res);
    out += ',';
    out += io::format_double(r.tl);
    out += '\n';
  }
  return out;
}

void write_trust_csv(const std::filesystem::path& path, const std::vector<TrustRecord>& records) {
  io::atomic_write(path, trust_csv_string(records));
}

}  // namespace trail::trust
