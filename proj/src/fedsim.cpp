#include "trail/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "trail/errors.hpp"
#include "trail/io.hpp"
#include "trail/parallel.hpp"

namespace trail::fedsim {

double DegradationProfile::noise_at(int round) const {
  if (round < onset) return noise_start;
  return std::min(noise_end, noise_start + noise_slope * (round - onset + 1));
}

double DegradationProfile::loss_at(int round) const {
  if (round < onset) return loss_start;
  return std::min(loss_end, loss_start + loss_slope * (round - onset + 1));
}

void DegradationProfile::validate() const {
  for (double p : {noise_start, noise_end, loss_start, loss_end}) {
    if (p < 0.0 || p > 1.0) throw InvalidInputError("degradation: probabilities must be in [0,1]");
  }
  if (noise_end < noise_start || loss_end < loss_start || noise_slope < 0 || loss_slope < 0) {
    throw InvalidInputError("degradation: ramps must be non-decreasing");
  }
}

ModelVector local_train(const data::Dataset& ds, std::span<const int> shard, const ModelVector& init,
                        const TrainParams& params, Rng& rng, std::vector<double>* loss_trace) {
  init.validate();
  if (shard.empty()) throw InvalidInputError("local_train: empty shard");
  if (!(params.lr > 0)) throw InvalidInputError("local_train: lr must be > 0");
  if (params.batch < 1) throw InvalidInputError("local_train: batch must be >= 1");

  ModelVector m = init;
  std::vector<double> velocity(m.w.size(), 0.0);
  std::vector<double> grad;
  std::vector<int> batch_idx, batch_labels;
  const int n = static_cast<int>(shard.size());
  const bool full_batch = params.batch >= n;

  if (loss_trace) loss_trace->push_back(mean_loss(m, ds, shard));

  for (int step = 0; step < params.steps; ++step) {
    batch_idx.clear();
    batch_labels.clear();
    if (full_batch) {
      batch_idx.assign(shard.begin(), shard.end());
    } else {
      for (int k = 0; k < params.batch; ++k) {
        batch_idx.push_back(shard[rng.below(static_cast<std::uint64_t>(n))]);
      }
    }
    for (int i : batch_idx) {
      int y = ds.labels[i];
      if (params.label_noise > 0.0 && rng.uniform() < params.label_noise) {
        if (params.shift_noise) {
          y = (y + 1) % ds.num_classes;
        } else {
          // Uniform over the other classes.
          int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.num_classes - 1)));
          if (other >= y) ++other;
          y = other;
        }
      }
      batch_labels.push_back(y);
    }
    gradient(m, ds, batch_idx, batch_labels, grad);
    for (std::size_t k = 0; k < m.w.size(); ++k) {
      velocity[k] = params.momentum * velocity[k] + grad[k];
      m.w[k] -= params.lr * velocity[k];
      if (!std::isfinite(m.w[k])) {
        throw NumericalDivergenceError("local_train: non-finite parameter for client " +
                                       std::to_string(params.client_id) + " at step " +
                                       std::to_string(step));
      }
    }
    if (loss_trace) loss_trace->push_back(mean_loss(m, ds, shard));
  }
  return m;
}

bool apply_uplink(double loss_prob, Rng& rng) {
  if (loss_prob < 0.0 || loss_prob > 1.0) {
    throw InvalidInputError("apply_uplink: loss probability must be in [0,1]");
  }
  return rng.uniform() >= loss_prob;
}

namespace {

std::optional<ModelVector> weighted_average(std::span<const Upload> parts) {
  double total = 0.0;
  for (const auto& u : parts) {
    if (u.weight < 0) throw InvalidInputError("aggregate: negative weight");
    total += u.weight;
  }
  if (!(total > 0.0) || parts.empty()) return std::nullopt;
  ModelVector out = *parts.front().model;
  std::fill(out.w.begin(), out.w.end(), 0.0);
  for (const auto& u : parts) {
    if (u.weight == 0.0) continue;
    if (u.model->w.size() != out.w.size()) {
      throw InvalidInputError("aggregate: parameter count mismatch between uploads");
    }
    const double coeff = u.weight / total;
    for (std::size_t k = 0; k < out.w.size(); ++k) out.w[k] += coeff * u.model->w[k];
  }
  return out;
}

}  // namespace

std::optional<ModelVector> intra_aggregate(std::span<const Upload> uploads) {
  return weighted_average(uploads);
}

std::optional<ModelVector> inter_consensus(std::span<const Upload> server_models) {
  return weighted_average(server_models);
}

double global_loss(const ModelVector& g, const data::Dataset& ds,
                   std::span<const ClientState* const> clients) {
  if (clients.empty()) throw InvalidInputError("global_loss: no clients");
  double num = 0.0, den = 0.0;
  for (const ClientState* c : clients) {
    const double n = static_cast<double>(c->shard.size());
    num += n * mean_loss(g, ds, c->shard);
    den += n;
  }
  return num / den;
}

std::pair<double, double> emit_observation(ClientState& client, double post_train_accuracy,
                                           bool delivered, int window) {
  if (window < 1) throw InvalidInputError("emit_observation: window must be >= 1");
  client.delivery_window.push_back(delivered ? 1.0 : 0.0);
  if (static_cast<int>(client.delivery_window.size()) > window) {
    client.delivery_window.erase(client.delivery_window.begin());
  }
  double mean = 0.0;
  for (double v : client.delivery_window) mean += v;
  mean /= static_cast<double>(client.delivery_window.size());
  client.history.channels = 2;
  client.history.values.push_back({post_train_accuracy, mean});
  return {post_train_accuracy, mean};
}

namespace {

data::Dataset slice_dataset(const data::Dataset& ds, int begin, int count) {
  data::Dataset out;
  out.dim = ds.dim;
  out.num_classes = ds.num_classes;
  out.provenance = ds.provenance;
  out.features.assign(ds.features.begin() + static_cast<std::size_t>(begin) * ds.dim,
                      ds.features.begin() + static_cast<std::size_t>(begin + count) * ds.dim);
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + begin + count);
  return out;
}

struct Corpus {
  data::Dataset train;
  data::Dataset test;
};

Corpus build_corpus(const cfg::ExperimentConfig& c) {
  Corpus corpus;
  if (c.dataset_kind == "synthetic") {
    const int train_total = c.clients * c.shard_size;
    auto full = data::gen_synthetic(c.classes, c.dim, train_total + c.test_count, c.spread, c.seed);
    corpus.train = slice_dataset(full, 0, train_total);
    corpus.test = slice_dataset(full, train_total, c.test_count);
    return corpus;
  }
  auto train = data::load_idx(c.idx_images, c.idx_labels);
  if (!c.idx_test_images.empty() && !c.idx_test_labels.empty()) {
    corpus.test = data::load_idx(c.idx_test_images, c.idx_test_labels);
    corpus.train = std::move(train);
  } else {
    const int need = c.clients * c.shard_size;
    if (train.count() < need + c.test_count) {
      throw InvalidInputError("config: dataset.images has too few samples for shards plus test split");
    }
    corpus.test = slice_dataset(train, train.count() - c.test_count, c.test_count);
    corpus.train = slice_dataset(train, 0, train.count() - c.test_count);
  }
  const int classes = std::max(corpus.train.num_classes, corpus.test.num_classes);
  corpus.train.num_classes = classes;
  corpus.test.num_classes = classes;
  return corpus;
}

sched::SchedulingInstance build_instance(const cfg::ExperimentConfig& c,
                                         const std::vector<ClientState>& clients, double theta) {
  sched::SchedulingInstance inst;
  inst.num_clients = c.clients;
  inst.num_servers = c.servers;
  inst.capacity = c.resolved_capacity();
  inst.theta = theta;
  inst.data_size.resize(c.clients);
  inst.trust.resize(static_cast<std::size_t>(c.clients) * c.servers);
  for (int i = 0; i < c.clients; ++i) {
    inst.data_size[i] = static_cast<double>(clients[i].shard.size());
    for (int s = 0; s < c.servers; ++s) {
      inst.trust[static_cast<std::size_t>(i) * c.servers + s] = clients[i].tl;
    }
  }
  return inst;
}

// Realized moments of the fitted duration pmfs; the raw (mean, var)
// parameters may sit outside {1..E} after truncation, the realized ones never
// do, which keeps the residence-time formulas well-posed.
trust::DwellStats stats_from_model(const hsmm::QualityHsmm& m, double t_life) {
  std::vector<double> mean(m.num_states), var(m.num_states);
  for (int i = 0; i < m.num_states; ++i) {
    double mu = 0.0;
    for (int e = 0; e < m.max_duration; ++e) mu += (e + 1) * m.duration_pmf[i][e];
    double v = 0.0;
    for (int e = 0; e < m.max_duration; ++e) {
      v += (e + 1 - mu) * (e + 1 - mu) * m.duration_pmf[i][e];
    }
    mean[i] = mu;
    var[i] = std::max(v, 1e-3);
  }
  return trust::DwellStats::make(std::move(mean), std::move(var), t_life);
}

}  // namespace

ExperimentResult run_experiment(const cfg::ExperimentConfig& config) {
  config.validate();
  const int U = config.clients;
  const int S = config.servers;
  const double t_life = config.resolved_t_life();
  const int total_rounds = config.total_rounds();

  Corpus corpus = build_corpus(config);
  corpus.train.validate();
  corpus.test.validate();

  data::PartitionPlan plan;
  plan.policy = config.partition_policy == "iid" ? data::PartitionPolicy::Iid
                                                 : data::PartitionPolicy::LabelSkew;
  plan.concentration = config.concentration;
  plan.sizes.assign(U, config.shard_size);
  plan.seed = config.seed;
  auto shards = data::partition(corpus.train, plan, U);

  const ModelKind kind = config.model_kind == "logistic" ? ModelKind::Logistic : ModelKind::Mlp;
  Rng init_rng(Rng::derive(config.seed, {kStreamModelInit}));
  ModelVector global =
      init_model(kind, corpus.train.dim, corpus.train.num_classes, config.hidden, init_rng);

  // Degraded cohort: round(U * fraction) clients picked by a seeded shuffle.
  std::vector<int> cohort_order(U);
  std::iota(cohort_order.begin(), cohort_order.end(), 0);
  {
    Rng rng(Rng::derive(config.seed, {kStreamDegradation}));
    for (int i = U - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(cohort_order[i], cohort_order[j]);
    }
  }
  const int degraded = static_cast<int>(std::lround(config.degraded_fraction * U));

  std::vector<ClientState> clients(U);
  for (int i = 0; i < U; ++i) {
    clients[i].id = i;
    clients[i].shard = std::move(shards[i]);
    clients[i].model = global;
    clients[i].stream_seed = Rng::derive(config.seed, {static_cast<std::uint64_t>(i)});
    clients[i].tl = t_life;
    clients[i].history.channels = 2;
  }
  for (int k = 0; k < degraded; ++k) {
    auto& profile = clients[cohort_order[k]].degradation;
    profile.onset = config.onset;
    profile.noise_start = config.noise_start;
    profile.noise_end = config.noise_end;
    profile.noise_slope = config.noise_slope;
    profile.loss_start = config.loss_start;
    profile.loss_end = config.loss_end;
    profile.loss_slope = config.loss_slope;
    profile.validate();
  }

  std::vector<ModelVector> server_model(S, global);
  std::vector<double> server_mass(S, 0.0);

  std::vector<int> test_idx(corpus.test.count());
  std::iota(test_idx.begin(), test_idx.end(), 0);

  ExperimentResult result;
  std::optional<hsmm::QualityHsmm> fitted;
  sched::AssociationMatrix assignment = sched::AssociationMatrix::empty(U, S);
  sched::SchedulingInstance report_inst = build_instance(config, clients, config.theta);

  std::vector<ModelVector> trained(U);
  std::vector<double> post_acc(U, 0.0);
  double surrogate_sum = 0.0;

  for (int round = 0; round < total_rounds; ++round) {
    if (round % config.resched_cadence == 0) {
      // The random baseline ignores trust entirely (pure random allocation);
      // every other scheduler enforces the configured threshold.
      const double theta = config.scheduler == "random"
                               ? -std::numeric_limits<double>::infinity()
                               : config.theta;
      auto inst = build_instance(config, clients, theta);
      if (config.scheduler == "trail") {
        assignment = sched::greedy_schedule(inst, config.order == "desc"
                                                      ? sched::SortOrder::TrustDescending
                                                      : sched::SortOrder::TrustAscending);
      } else if (config.scheduler == "random") {
        assignment = sched::random_schedule(
            inst, Rng::derive(config.seed, {kStreamScheduler, static_cast<std::uint64_t>(round)}));
      } else if (config.scheduler == "trust_only") {
        assignment = sched::trust_only_schedule(inst);
      } else {
        assignment = sched::exhaustive_schedule(inst).assignment;
      }
      report_inst = build_instance(config, clients, config.theta);
    }

    std::vector<int> scheduled;
    for (int i = 0; i < U; ++i) {
      if (assignment.server_of[i] >= 0) scheduled.push_back(i);
    }

    // Local training is data-parallel across clients; every result lands in
    // its own slot and all later reductions run in client-index order.
    parallel_for(scheduled.size(), config.parallel, [&](std::size_t k) {
      const int i = scheduled[k];
      TrainParams params;
      params.steps = config.t1;
      params.lr = config.lr;
      params.momentum = config.momentum;
      params.batch = config.batch;
      params.label_noise = clients[i].degradation.noise_at(round);
      params.shift_noise = config.noise_kind == "shift";
      params.client_id = i;
      Rng rng(Rng::derive(clients[i].stream_seed, {kStreamTrain, static_cast<std::uint64_t>(round)}));
      trained[i] = local_train(corpus.train, clients[i].shard, server_model[assignment.server_of[i]],
                               params, rng);
      post_acc[i] = accuracy(trained[i], corpus.train, clients[i].shard);
    });

    int dropped = 0;
    std::vector<std::vector<Upload>> uploads(S);
    for (int i : scheduled) {
      Rng rng(Rng::derive(clients[i].stream_seed, {kStreamUplink, static_cast<std::uint64_t>(round)}));
      const bool delivered = apply_uplink(clients[i].degradation.loss_at(round), rng);
      if (round >= config.obs_warmup) {
        emit_observation(clients[i], post_acc[i], delivered, config.delivery_window);
      }
      if (delivered) {
        uploads[assignment.server_of[i]].push_back({&trained[i], static_cast<double>(clients[i].shard.size())});
      } else {
        ++dropped;
      }
    }

    for (int s = 0; s < S; ++s) {
      if (auto merged = intra_aggregate(uploads[s])) {
        server_model[s] = std::move(*merged);
        double mass = 0.0;
        for (const auto& u : uploads[s]) mass += u.weight;
        server_mass[s] = mass;
      }
      // Nothing delivered: the server keeps its previous model and mass.
    }
    for (int i : scheduled) clients[i].model = server_model[assignment.server_of[i]];

    std::vector<Upload> server_parts;
    for (int s = 0; s < S; ++s) server_parts.push_back({&server_model[s], server_mass[s]});
    ModelVector consensus = global;
    if (auto merged = inter_consensus(server_parts)) consensus = std::move(*merged);

    RoundMetrics m;
    m.round = round;
    m.test_acc = accuracy(consensus, corpus.test, test_idx);
    std::vector<const ClientState*> losers;
    if (scheduled.empty()) {
      for (const auto& c : clients) losers.push_back(&c);
    } else {
      for (int i : scheduled) losers.push_back(&clients[i]);
    }
    m.train_loss = global_loss(consensus, corpus.train, losers);
    m.surrogate = sched::surrogate_objective(assignment, report_inst);
    m.per_server.assign(S, 0);
    for (int i : scheduled) ++m.per_server[assignment.server_of[i]];
    m.participants = static_cast<int>(scheduled.size());
    m.dropped = dropped;
    result.metrics.push_back(m);
    surrogate_sum += m.surrogate;

    if ((round + 1) % config.t2 == 0) {
      global = consensus;
      for (int s = 0; s < S; ++s) server_model[s] = global;
      for (int i : scheduled) clients[i].model = global;
    }

    if ((round + 1) % config.fit_cadence == 0) {
      std::vector<hsmm::ObservationSequence> pooled;
      for (const auto& c : clients) {
        if (c.history.length() >= config.min_history) pooled.push_back(c.history);
      }
      if (!pooled.empty()) {
        auto init = fitted ? *fitted : hsmm::default_init(config.states, config.max_duration, pooled);
        auto fit = hsmm::baum_welch_fit(init, pooled, config.fit_iters, config.fit_tol, config.parallel);
        fitted = hsmm::sort_states_by_quality(fit.model, 0);
        const auto stats = stats_from_model(*fitted, t_life);
        const auto identity = hsmm::MllrTransform::identity(2);
        for (auto& c : clients) {
          if (c.history.length() < 1) continue;
          auto rec =
              trust::trust_from_history(*fitted, identity, c.history, stats, c.history.length() - 1, c.id);
          rec.round = round;  // report in simulation-round terms
          c.tl = rec.tl;
          result.trust_trace.push_back(rec);
        }
      }
    }
  }

  result.global_model = global;
  result.fitted_model = fitted;
  const auto& last = result.metrics.back();
  result.final_accuracy = last.test_acc;
  result.final_loss = last.train_loss;
  result.best_accuracy = 0.0;
  for (const auto& m : result.metrics) result.best_accuracy = std::max(result.best_accuracy, m.test_acc);
  result.mean_surrogate = surrogate_sum / result.metrics.size();
  return result;
}

std::string metrics_csv(const std::vector<RoundMetrics>& metrics) {
  std::string out = "round,test_acc,train_loss,B,participants,dropped\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.round);
    out += ',';
    out += io::format_double(m.test_acc);
    out += ',';
    out += io::format_double(m.train_loss);
    out += ',';
    out += io::format_double(m.surrogate);
    out += ',';
    out += std::to_string(m.participants);
    out += ',';
    out += std::to_string(m.dropped);
    out += '\n';
  }
  return out;
}

std::string model_to_json(const ModelVector& m) {
  m.validate();
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = m.kind == ModelKind::Logistic ? "logistic" : "mlp";
  j["input_dim"] = m.input_dim;
  j["num_classes"] = m.num_classes;
  j["hidden"] = m.hidden;
  j["weights"] = m.w;
  return j.dump() + "\n";
}

ModelVector model_from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.at("format_version").get<int>() != 1) {
      throw FormatError("model vector JSON: unsupported format_version");
    }
    ModelVector m;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "logistic") {
      m.kind = ModelKind::Logistic;
    } else if (kind == "mlp") {
      m.kind = ModelKind::Mlp;
    } else {
      throw FormatError("model vector JSON: unknown kind " + kind);
    }
    m.input_dim = j.at("input_dim").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    m.hidden = j.at("hidden").get<int>();
    m.w = j.at("weights").get<std::vector<double>>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model vector JSON: ") + e.what());
  }
}

}  // namespace trail::fedsim
