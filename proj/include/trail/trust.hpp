#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "trail/hsmm.hpp"

namespace trail::trust {

// Per-state dwell statistics plus the lifespan-matching proportionality
// constant rho, so that sum_i (m(i) + rho * var(i)) telescopes to t_life.
struct DwellStats {
  std::vector<double> mean;  // m(i) > 0, in rounds
  std::vector<double> var;   // sigma^2(i) >= 0
  double t_life = 0.0;
  double rho = 0.0;

  static DwellStats make(std::vector<double> mean, std::vector<double> var, double t_life);
  int num_states() const { return static_cast<int>(mean.size()); }
};

// rho = (t_life - sum m(i)) / sum var(i); zero-variance stats are only valid
// when the means already account for the whole lifespan.
double rho(double t_life, std::span<const double> mean, std::span<const double> var);

// E(i) = m(i) + rho * var(i).
double expected_residence(int state, const DwellStats& stats);
std::vector<double> all_residences(const DwellStats& stats);

struct RemainingResidence {
  double value = 0.0;
  bool clamped = false;  // true when xi/gamma exceeded 1 and the result hit 0
};

// E_bar(i,e) = E_i * (1 - xi/gamma), clamped below at zero. xi_val is the
// total exit posterior sum_{j != i} xi_t^e(i, j).
RemainingResidence remaining_residence(double expected_res, double xi_val, double gamma_val);

// TL = E_bar(i,e) + sum_{j > i} E(j): remaining life in the current state
// plus the full residences of every later (worse) state.
double trust_level(int state, double remaining_res, std::span<const double> residences);

struct TrustRecord {
  int client = 0;
  int round = 0;           // 0-based observation round the estimate refers to
  int state = 0;
  int dwell = 1;           // elapsed rounds in the estimated state
  double gamma = 0.0;      // posterior weight of the (state, dwell) cell
  double xi = 0.0;         // exit posterior used
  double expected_res = 0.0;
  double remaining_res = 0.0;
  bool clamped = false;
  double tl = 0.0;
};

// Full pipeline for one client history: MAP state via the per-channel product
// rule, dwell/exit posteriors from the joint model, then the residence-time
// formulas above. At the final observed round the exit posterior is the
// filtering form gamma * hazard(dwell); earlier rounds use the smoothed
// transition posterior.
TrustRecord trust_from_history(const hsmm::QualityHsmm& model, const hsmm::MllrTransform& transforms,
                               const hsmm::ObservationSequence& seq, const DwellStats& stats, int t,
                               int client_id = 0);

// Discrete hazard estimate over bins of width dt: failures per surviving unit
// per unit time. Bins past the last survivor are reported undefined.
struct HazardCurve {
  double dt = 1.0;
  int population = 0;
  std::vector<double> f;         // failure density per bin
  std::vector<double> F;         // cdf at bin start
  std::vector<double> hazard;    // per bin; meaningful only where defined
  std::vector<bool> defined;     // false once survivors reach zero
  std::vector<int> cumulative_failures;  // k(t) at bin start
};

HazardCurve empirical_hazard(const std::vector<double>& failure_times, int population, double dt);

// CSV export, header: round,client,state,dwell,E_i,E_bar,TL
void write_trust_csv(const std::filesystem::path& path, const std::vector<TrustRecord>& records);
std::string trust_csv_string(const std::vector<TrustRecord>& records);

}  // namespace trail::trust
