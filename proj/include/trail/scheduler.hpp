#pragma once

#include <cstdint>
#include <vector>

namespace trail::sched {

// One scheduling problem: U clients, S servers, per-client data sizes, the
// trust matrix TL[i][s], the admission threshold theta and a per-server
// capacity.
struct SchedulingInstance {
  int num_clients = 0;
  int num_servers = 0;
  std::vector<double> data_size;  // n_i > 0
  std::vector<double> trust;      // U*S row-major
  double theta = 0.0;
  int capacity = 1;               // U_max

  double tl(int client, int server) const {
    return trust[static_cast<std::size_t>(client) * num_servers + server];
  }
  void validate() const;
};

// Binary client-to-server association with at most one server per client
// (enforced structurally: each client stores its server or -1).
struct AssociationMatrix {
  int num_clients = 0;
  int num_servers = 0;
  std::vector<int> server_of;  // -1 = unassigned

  static AssociationMatrix empty(int clients, int servers);
  bool assigned(int client, int server) const { return server_of[client] == server; }
  int assigned_count(int server) const;
  int total_assigned() const;
};

// All three association constraints: one server per client (structural),
// per-server capacity, and TL >= theta on every assigned pair.
bool feasible(const AssociationMatrix& d, const SchedulingInstance& inst);

// The convergence-bound error term
//   B = sum_{servers m with N_m > 0} (1/N_m) sum_i n_i d_{i,m} (D_m - 1 + 1[TL_{i,m} < theta]),
// with N_m the assigned data mass and D_m = 1/(1+S). Threshold violations are
// allowed here so baselines can be scored on the same objective.
double surrogate_objective(const AssociationMatrix& d, const SchedulingInstance& inst);

double distribution_parameter(int num_servers);  // D_m = 1/(1+S)

enum class SortOrder { TrustDescending, TrustAscending };

// Greedy pass over (client, server) pairs ordered by TL (descending by
// default; the literal ascending order is available), assigning whenever the
// client is free, the server has room and TL >= theta. Deterministic
// tie-break: lower client index, then lower server index.
AssociationMatrix greedy_schedule(const SchedulingInstance& inst,
                                  SortOrder order = SortOrder::TrustDescending);

struct OracleResult {
  AssociationMatrix assignment;
  double objective = 0.0;
};

// Exact minimizer of the surrogate objective over feasible matrices; refuses
// instances with more than max_terms candidate assignments. Ties break toward
// the lexicographically smallest flattened binary matrix.
OracleResult exhaustive_schedule(const SchedulingInstance& inst, double max_terms = 1e7);

// Uniformly random feasible assignment (per client, uniform over servers with
// remaining capacity and TL >= theta), deterministic per seed.
AssociationMatrix random_schedule(const SchedulingInstance& inst, std::uint64_t seed);

// Trust-threshold baseline: admits clients whose best TL clears theta, then
// round-robins them over servers, ignoring the objective.
AssociationMatrix trust_only_schedule(const SchedulingInstance& inst);

// Constants of the convergence bound. The learning rate is fixed at 1/L.
struct BoundParams {
  double mu = 0.0;        // strong convexity
  double smoothness = 0.0;  // L >= mu
  double omega1 = 0.0;
  double omega2 = 0.0;
  double initial_gap = 0.0;  // Delta_0
  double error_term = 0.0;   // B

  void validate() const;
};

struct Contraction {
  double value = 0.0;  // D = 1 - mu/L + 4 omega2 mu B / L
  bool contracting = false;  // D < 1
};

Contraction contraction_factor(const BoundParams& p);

// D^t * Delta_0 + (2 omega1 B / L) * (1 - D^t) / (1 - D); exact Delta_0 at
// t = 0. D == 1 is rejected (degenerate geometric series).
double convergence_bound(const BoundParams& p, long t);

}  // namespace trail::sched
