#include "trail/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trail/errors.hpp"
#include "trail/io.hpp"
#include "trail/rng.hpp"

namespace trail::sched {

void SchedulingInstance::validate() const {
  if (num_clients < 1) throw InvalidInputError("instance: need at least one client");
  if (num_servers < 1) throw InvalidInputError("instance: need at least one server");
  if (capacity < 1) throw InvalidInputError("instance: capacity must be >= 1");
  if (static_cast<int>(data_size.size()) != num_clients) {
    throw InvalidInputError("instance: data_size must have one entry per client");
  }
  for (double n : data_size) {
    if (!(n > 0)) throw InvalidInputError("instance: data sizes must be > 0");
  }
  if (trust.size() != static_cast<std::size_t>(num_clients) * num_servers) {
    throw InvalidInputError("instance: trust matrix must be U x S");
  }
  for (double v : trust) {
    if (!std::isfinite(v)) throw InvalidInputError("instance: trust entries must be finite");
  }
  if (!std::isfinite(theta) && theta > 0) {
    throw InvalidInputError("instance: theta must be finite or -inf");
  }
}

AssociationMatrix AssociationMatrix::empty(int clients, int servers) {
  AssociationMatrix d;
  d.num_clients = clients;
  d.num_servers = servers;
  d.server_of.assign(clients, -1);
  return d;
}

int AssociationMatrix::assigned_count(int server) const {
  int c = 0;
  for (int s : server_of) {
    if (s == server) ++c;
  }
  return c;
}

int AssociationMatrix::total_assigned() const {
  int c = 0;
  for (int s : server_of) {
    if (s >= 0) ++c;
  }
  return c;
}

bool feasible(const AssociationMatrix& d, const SchedulingInstance& inst) {
  if (d.num_clients != inst.num_clients || d.num_servers != inst.num_servers) return false;
  std::vector<int> load(inst.num_servers, 0);
  for (int i = 0; i < inst.num_clients; ++i) {
    const int s = d.server_of[i];
    if (s < -1 || s >= inst.num_servers) return false;
    if (s >= 0) {
      if (inst.tl(i, s) < inst.theta) return false;
      if (++load[s] > inst.capacity) return false;
    }
  }
  return true;
}

double distribution_parameter(int num_servers) { return 1.0 / (1.0 + num_servers); }

double surrogate_objective(const AssociationMatrix& d, const SchedulingInstance& inst) {
  inst.validate();
  if (d.num_clients != inst.num_clients || d.num_servers != inst.num_servers) {
    throw InvalidInputError("surrogate_objective: assignment shape mismatch");
  }
  const double dm = distribution_parameter(inst.num_servers);
  std::vector<double> mass(inst.num_servers, 0.0);
  std::vector<double> weighted(inst.num_servers, 0.0);
  for (int i = 0; i < inst.num_clients; ++i) {
    const int s = d.server_of[i];
    if (s < 0) continue;
    const double n = inst.data_size[i];
    mass[s] += n;
    const double indicator = inst.tl(i, s) < inst.theta ? 1.0 : 0.0;
    weighted[s] += n * (dm - 1.0 + indicator);
  }
  double b = 0.0;
  for (int s = 0; s < inst.num_servers; ++s) {
    if (mass[s] > 0) b += weighted[s] / mass[s];  // empty servers contribute 0
  }
  return b;
}

AssociationMatrix greedy_schedule(const SchedulingInstance& inst, SortOrder order) {
  inst.validate();
  struct Pair {
    double tl;
    int client;
    int server;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(inst.num_clients) * inst.num_servers);
  for (int i = 0; i < inst.num_clients; ++i) {
    for (int s = 0; s < inst.num_servers; ++s) pairs.push_back({inst.tl(i, s), i, s});
  }
  std::sort(pairs.begin(), pairs.end(), [order](const Pair& a, const Pair& b) {
    if (a.tl != b.tl) {
      return order == SortOrder::TrustDescending ? a.tl > b.tl : a.tl < b.tl;
    }
    if (a.client != b.client) return a.client < b.client;
    return a.server < b.server;
  });

  AssociationMatrix d = AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  std::vector<int> load(inst.num_servers, 0);
  for (const auto& p : pairs) {
    if (d.server_of[p.client] >= 0) continue;
    if (load[p.server] >= inst.capacity) continue;
    if (p.tl < inst.theta) continue;
    d.server_of[p.client] = p.server;
    ++load[p.server];
  }
  return d;
}

namespace {

// Flattened-row-major lexicographic order of the binary matrix. Per client
// row this means: unassigned < server S-1 < ... < server 0 (the row with the
// 1 in a later column compares smaller).
bool lex_smaller(const std::vector<int>& a, const std::vector<int>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    if (a[i] < 0) return true;   // all-zero row is smallest
    if (b[i] < 0) return false;
    return a[i] > b[i];
  }
  return false;
}

}  // namespace

OracleResult exhaustive_schedule(const SchedulingInstance& inst, double max_terms) {
  inst.validate();
  const double candidates = std::pow(inst.num_servers + 1.0, inst.num_clients);
  if (candidates > max_terms) {
    throw SizeLimitError("exhaustive_schedule: (S+1)^U = " + io::format_double(candidates) +
                         " exceeds the cap of " + io::format_double(max_terms));
  }

  std::vector<int> choice(inst.num_clients, -1);
  std::vector<int> load(inst.num_servers, 0);
  OracleResult best;
  best.assignment = AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  best.objective = 0.0;
  bool have_best = false;

  AssociationMatrix cur = AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  auto rec = [&](auto&& self, int client) -> void {
    if (client == inst.num_clients) {
      cur.server_of = choice;
      const double b = surrogate_objective(cur, inst);
      if (!have_best || b < best.objective ||
          (b == best.objective && lex_smaller(choice, best.assignment.server_of))) {
        best.objective = b;
        best.assignment.server_of = choice;
        have_best = true;
      }
      return;
    }
    choice[client] = -1;
    self(self, client + 1);
    for (int s = 0; s < inst.num_servers; ++s) {
      if (load[s] >= inst.capacity) continue;
      if (inst.tl(client, s) < inst.theta) continue;
      choice[client] = s;
      ++load[s];
      self(self, client + 1);
      --load[s];
      choice[client] = -1;
    }
  };
  rec(rec, 0);
  return best;
}

AssociationMatrix random_schedule(const SchedulingInstance& inst, std::uint64_t seed) {
  inst.validate();
  Rng rng(Rng::derive(seed, {kStreamScheduler}));
  std::vector<int> order(inst.num_clients);
  std::iota(order.begin(), order.end(), 0);
  for (int i = inst.num_clients - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }
  AssociationMatrix d = AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  std::vector<int> load(inst.num_servers, 0);
  std::vector<int> eligible;
  for (int i : order) {
    eligible.clear();
    for (int s = 0; s < inst.num_servers; ++s) {
      if (load[s] < inst.capacity && inst.tl(i, s) >= inst.theta) eligible.push_back(s);
    }
    if (eligible.empty()) continue;
    const int s = eligible[rng.below(eligible.size())];
    d.server_of[i] = s;
    ++load[s];
  }
  return d;
}

AssociationMatrix trust_only_schedule(const SchedulingInstance& inst) {
  inst.validate();
  AssociationMatrix d = AssociationMatrix::empty(inst.num_clients, inst.num_servers);
  std::vector<int> load(inst.num_servers, 0);
  int next = 0;
  for (int i = 0; i < inst.num_clients; ++i) {
    double best_tl = inst.tl(i, 0);
    for (int s = 1; s < inst.num_servers; ++s) best_tl = std::max(best_tl, inst.tl(i, s));
    if (best_tl < inst.theta) continue;
    // Round-robin over servers, skipping full ones and ones where this
    // client's TL misses the threshold.
    for (int probe = 0; probe < inst.num_servers; ++probe) {
      const int s = (next + probe) % inst.num_servers;
      if (load[s] < inst.capacity && inst.tl(i, s) >= inst.theta) {
        d.server_of[i] = s;
        ++load[s];
        next = (s + 1) % inst.num_servers;
        break;
      }
    }
  }
  return d;
}

void BoundParams::validate() const {
  if (!(mu > 0)) throw InvalidInputError("bound: mu must be > 0");
  if (!(smoothness >= mu)) throw InvalidInputError("bound: L must be >= mu");
  if (!(omega1 >= 0) || !(omega2 >= 0)) throw InvalidInputError("bound: omega constants must be >= 0");
  if (!(initial_gap >= 0)) throw InvalidInputError("bound: initial gap must be >= 0");
  if (!(error_term >= 0)) throw InvalidInputError("bound: error term B must be >= 0");
}

Contraction contraction_factor(const BoundParams& p) {
  p.validate();
  Contraction c;
  c.value = 1.0 - p.mu / p.smoothness + 4.0 * p.omega2 * p.mu * p.error_term / p.smoothness;
  c.contracting = c.value < 1.0;
  return c;
}

double convergence_bound(const BoundParams& p, long t) {
  if (t < 0) throw InvalidInputError("convergence_bound: t must be >= 0");
  const double d = contraction_factor(p).value;
  if (d == 1.0) throw InvalidInputError("convergence_bound: D == 1 makes the geometric series degenerate");
  const double dt = std::pow(d, static_cast<double>(t));
  return dt * p.initial_gap +
         (2.0 * p.omega1 * p.error_term / p.smoothness) * (1.0 - dt) / (1.0 - d);
}

}  // namespace trail::sched
