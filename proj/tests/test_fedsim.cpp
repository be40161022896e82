#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "trail/errors.hpp"
#include "trail/fedsim.hpp"

using namespace trail;
using namespace trail::fedsim;

namespace {

cfg::ExperimentConfig tiny_config() {
  cfg::ExperimentConfig c;
  c.seed = 5;
  c.clients = 6;
  c.servers = 2;
  c.horizon_blocks = 4;
  c.t1 = 2;
  c.t2 = 3;
  c.classes = 3;
  c.dim = 6;
  c.spread = 0.8;
  c.test_count = 200;
  c.shard_size = 30;
  c.batch = 16;
  c.lr = 0.05;
  c.fit_cadence = 6;
  c.fit_iters = 3;
  c.min_history = 4;
  c.max_duration = 5;
  c.theta = 0.0;
  c.out_dir = "unused";
  return c;
}

// Max-norm relative agreement between analytic and central-difference
// gradients.
double gradient_check(ModelKind kind, std::uint64_t seed) {
  auto ds = data::gen_synthetic(3, 5, 12, 0.7, seed);
  Rng rng(seed);
  auto m = init_model(kind, ds.dim, ds.num_classes, 4, rng);
  for (double& w : m.w) w += 0.1 * rng.normal();  // move off zero

  std::vector<int> idx(ds.count());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> labels(ds.labels);

  std::vector<double> grad;
  gradient(m, ds, idx, labels, grad);

  double gmax = 1e-8;
  for (double g : grad) gmax = std::max(gmax, std::abs(g));
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t k = 0; k < m.w.size(); ++k) {
    auto probe = m;
    probe.w[k] += h;
    const double up = mean_loss(probe, ds, idx);
    probe.w[k] -= 2 * h;
    const double down = mean_loss(probe, ds, idx);
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad[k]) / gmax);
  }
  return worst;
}

}  // namespace

TEST_CASE("gradients match central finite differences for both model kinds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CHECK(gradient_check(ModelKind::Logistic, seed) < 1e-5);
    CHECK(gradient_check(ModelKind::Mlp, seed + 100) < 1e-5);
  }
}

TEST_CASE("uniform classifier loss on balanced classes is ln C") {
  auto ds = data::gen_synthetic(10, 4, 1000, 0.5, 3);
  auto m = zero_model(ModelKind::Logistic, 4, 10, 0);
  std::vector<int> idx(ds.count());
  std::iota(idx.begin(), idx.end(), 0);
  CHECK(std::abs(mean_loss(m, ds, idx) - std::log(10.0)) < 1e-9);
}

TEST_CASE("local_train: zero steps returns init unchanged") {
  auto ds = data::gen_synthetic(3, 4, 20, 0.5, 7);
  std::vector<int> shard(ds.count());
  std::iota(shard.begin(), shard.end(), 0);
  auto init = zero_model(ModelKind::Logistic, 4, 3, 0);
  TrainParams p;
  p.steps = 0;
  Rng rng(1);
  auto out = local_train(ds, shard, init, p, rng);
  CHECK(out.w == init.w);
}

TEST_CASE("local_train: one full-batch step without momentum is exactly w - lr * grad") {
  auto ds = data::gen_synthetic(3, 4, 10, 0.5, 8);
  std::vector<int> shard(ds.count());
  std::iota(shard.begin(), shard.end(), 0);
  auto init = zero_model(ModelKind::Logistic, 4, 3, 0);

  std::vector<double> grad;
  gradient(init, ds, shard, ds.labels, grad);

  TrainParams p;
  p.steps = 1;
  p.lr = 0.1;
  p.momentum = 0.0;
  p.batch = 10;  // full shard
  Rng rng(2);
  auto out = local_train(ds, shard, init, p, rng);
  for (std::size_t k = 0; k < out.w.size(); ++k) {
    CHECK(out.w[k] == doctest::Approx(init.w[k] - 0.1 * grad[k]).epsilon(1e-12));
  }
}

TEST_CASE("local_train: convex logistic loss trace is non-increasing after smoothing") {
  auto ds = data::gen_synthetic(3, 6, 60, 0.6, 9);
  std::vector<int> shard(ds.count());
  std::iota(shard.begin(), shard.end(), 0);
  auto init = zero_model(ModelKind::Logistic, 6, 3, 0);
  TrainParams p;
  p.steps = 200;
  p.lr = 0.05;
  p.momentum = 0.0;
  p.batch = 16;
  Rng rng(3);
  std::vector<double> trace;
  local_train(ds, shard, init, p, rng, &trace);
  REQUIRE(trace.size() == 201);
  // Window-10 smoothed trace must be non-increasing (mini-batch noise only).
  auto smooth = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t u = k; u < k + 10; ++u) s += trace[u];
    return s / 10.0;
  };
  for (std::size_t k = 20; k + 10 < trace.size(); k += 10) {
    CHECK(smooth(k) <= smooth(k - 10) + 1e-6);
  }
  CHECK(trace.back() < trace.front());
}

TEST_CASE("local_train on nearly separable data overfits to tiny loss") {
  auto ds = data::gen_synthetic(2, 4, 40, 0.01, 10);
  std::vector<int> shard(ds.count());
  std::iota(shard.begin(), shard.end(), 0);
  auto init = zero_model(ModelKind::Logistic, 4, 2, 0);
  TrainParams p;
  p.steps = 400;
  p.lr = 0.5;
  p.momentum = 0.0;
  p.batch = 40;
  Rng rng(4);
  auto out = local_train(ds, shard, init, p, rng);
  CHECK(mean_loss(out, ds, shard) < 0.01);
  CHECK(accuracy(out, ds, shard) >= 0.99);
}

TEST_CASE("apply_uplink: limit probabilities and Monte-Carlo rate") {
  Rng rng(11);
  for (int k = 0; k < 100; ++k) {
    CHECK(apply_uplink(0.0, rng));
    CHECK_FALSE(apply_uplink(1.0, rng));
  }
  int droppedCount = 0;
  const int trials = 100000;
  for (int k = 0; k < trials; ++k) {
    if (!apply_uplink(0.3, rng)) ++droppedCount;
  }
  CHECK(std::abs(droppedCount / static_cast<double>(trials) - 0.3) < 0.01);
}

TEST_CASE("intra_aggregate: fixed point, weighted mean, compensated-summation oracle") {
  auto a = zero_model(ModelKind::Logistic, 2, 2, 0);
  for (auto& w : a.w) w = 1.5;
  std::vector<Upload> same{{&a, 2.0}, {&a, 5.0}};
  auto merged = intra_aggregate(same);
  REQUIRE(merged);
  CHECK(merged->w == a.w);

  auto z = zero_model(ModelKind::Logistic, 2, 2, 0);
  auto o = z;
  for (auto& w : o.w) w = 1.0;
  std::vector<Upload> two{{&z, 1.0}, {&o, 3.0}};
  auto mix = intra_aggregate(two);
  REQUIRE(mix);
  for (double w : mix->w) CHECK(w == doctest::Approx(0.75).epsilon(1e-15));

  CHECK_FALSE(intra_aggregate({}).has_value());

  // Long-double Kahan reference on seeded vectors.
  Rng rng(12);
  std::vector<ModelVector> uploads_store;
  std::vector<double> weights;
  for (int k = 0; k < 7; ++k) {
    auto m = zero_model(ModelKind::Logistic, 8, 3, 0);
    for (auto& w : m.w) w = rng.normal();
    uploads_store.push_back(std::move(m));
    weights.push_back(0.5 + rng.uniform() * 10.0);
  }
  std::vector<Upload> ups;
  for (int k = 0; k < 7; ++k) ups.push_back({&uploads_store[k], weights[k]});
  auto got = intra_aggregate(ups);
  REQUIRE(got);
  long double wsum = 0.0L;
  for (double w : weights) wsum += w;
  for (std::size_t c = 0; c < got->w.size(); ++c) {
    long double acc = 0.0L;
    for (int k = 0; k < 7; ++k) {
      acc += static_cast<long double>(weights[k]) / wsum * uploads_store[k].w[c];
    }
    CHECK(std::abs(got->w[c] - static_cast<double>(acc)) < 1e-12);
  }
}

TEST_CASE("inter_consensus: single server, equal masses, empty masses") {
  auto a = zero_model(ModelKind::Logistic, 2, 2, 0);
  for (auto& w : a.w) w = 2.0;
  auto b = zero_model(ModelKind::Logistic, 2, 2, 0);
  for (auto& w : b.w) w = 4.0;

  std::vector<Upload> single{{&a, 10.0}};
  auto g1 = inter_consensus(single);
  REQUIRE(g1);
  CHECK(g1->w == a.w);

  std::vector<Upload> equal{{&a, 5.0}, {&b, 5.0}};
  auto g2 = inter_consensus(equal);
  REQUIRE(g2);
  for (double w : g2->w) CHECK(w == doctest::Approx(3.0).epsilon(1e-15));

  std::vector<Upload> zero_mass{{&a, 0.0}, {&b, 0.0}};
  CHECK_FALSE(inter_consensus(zero_mass).has_value());
}

TEST_CASE("global_loss: equal shard sizes reduce to the unweighted mean") {
  auto ds = data::gen_synthetic(3, 4, 60, 0.5, 13);
  std::vector<ClientState> clients(3);
  for (int c = 0; c < 3; ++c) {
    clients[c].id = c;
    for (int k = 0; k < 20; ++k) clients[c].shard.push_back(c * 20 + k);
  }
  auto g = zero_model(ModelKind::Logistic, 4, 3, 0);
  std::vector<const ClientState*> ptrs{&clients[0], &clients[1], &clients[2]};
  const double weighted = global_loss(g, ds, ptrs);
  double unweighted = 0.0;
  for (const auto* c : ptrs) unweighted += mean_loss(g, ds, c->shard) / 3.0;
  CHECK(std::abs(weighted - unweighted) < 1e-12);
}

TEST_CASE("emit_observation: window semantics") {
  ClientState c;
  auto first = emit_observation(c, 0.8, true, 3);
  CHECK(first.first == 0.8);
  CHECK(first.second == 1.0);
  emit_observation(c, 0.7, false, 3);
  auto third = emit_observation(c, 0.6, false, 3);
  CHECK(third.second == doctest::Approx(1.0 / 3.0));
  // Window slides: a fourth all-dropped round pushes the delivery out.
  auto fourth = emit_observation(c, 0.5, false, 3);
  CHECK(fourth.second == 0.0);
  CHECK(c.history.length() == 4);
  CHECK(c.history.values[2][0] == 0.6);
}

TEST_CASE("degradation profile: ramp shape and validation") {
  DegradationProfile p;
  p.onset = 5;
  p.noise_start = 0.1;
  p.noise_end = 0.5;
  p.noise_slope = 0.1;
  p.validate();
  CHECK(p.noise_at(0) == 0.1);
  CHECK(p.noise_at(4) == 0.1);
  CHECK(p.noise_at(5) == doctest::Approx(0.2));
  CHECK(p.noise_at(8) == doctest::Approx(0.5));
  CHECK(p.noise_at(100) == 0.5);  // saturates

  DegradationProfile bad;
  bad.noise_start = 1.5;
  CHECK_THROWS_AS(bad.validate(), InvalidInputError);
}

TEST_CASE("run_experiment: deterministic replay and thread-count independence") {
  auto c = tiny_config();
  auto r1 = run_experiment(c);
  auto r2 = run_experiment(c);
  CHECK(metrics_csv(r1.metrics) == metrics_csv(r2.metrics));
  CHECK(r1.global_model.w == r2.global_model.w);

  auto serial = c;
  serial.parallel = false;
  auto r3 = run_experiment(serial);
  CHECK(metrics_csv(r1.metrics) == metrics_csv(r3.metrics));
  CHECK(r1.global_model.w == r3.global_model.w);

  REQUIRE(r1.metrics.size() == static_cast<std::size_t>(c.total_rounds()));
  for (const auto& m : r1.metrics) {
    CHECK(m.test_acc >= 0.0);
    CHECK(m.test_acc <= 1.0);
    CHECK(m.train_loss >= 0.0);
  }
  CHECK_FALSE(r1.trust_trace.empty());
}

TEST_CASE("run_experiment: accuracy improves over the horizon on clean data") {
  auto c = tiny_config();
  c.horizon_blocks = 6;
  auto r = run_experiment(c);
  const double first = r.metrics.front().test_acc;
  const double last = r.metrics.back().test_acc;
  CHECK(last > first);
  CHECK(last > 0.5);  // 3-class problem, spread 0.8
}

TEST_CASE("run_experiment: idx datasets drive the same loop") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "trail_fedsim_idx";
  fs::create_directories(dir);
  // Synthesize a small corpus and write it out as IDX (4x4 "images" with
  // pixel values quantized to bytes).
  auto ds = data::gen_synthetic(3, 16, 460, 0.15, 99);
  {
    std::ofstream img(dir / "images.idx", std::ios::binary);
    std::ofstream lbl(dir / "labels.idx", std::ios::binary);
    auto be = [](std::ofstream& f, std::uint32_t v) {
      char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                   static_cast<char>(v)};
      f.write(b, 4);
    };
    be(img, 0x00000803u);
    be(img, 460);
    be(img, 4);
    be(img, 4);
    for (double f : ds.features) {
      const double unit = 1.0 / (1.0 + std::exp(-f));  // squash into [0,1]
      const unsigned char px = static_cast<unsigned char>(unit * 255.0);
      img.write(reinterpret_cast<const char*>(&px), 1);
    }
    be(lbl, 0x00000801u);
    be(lbl, 460);
    for (int y : ds.labels) {
      const unsigned char b = static_cast<unsigned char>(y);
      lbl.write(reinterpret_cast<const char*>(&b), 1);
    }
  }

  auto c = tiny_config();
  c.dataset_kind = "idx";
  c.idx_images = (dir / "images.idx").string();
  c.idx_labels = (dir / "labels.idx").string();
  c.shard_size = 40;  // 6 * 40 + 200 test = 440 <= 460
  auto r = run_experiment(c);
  REQUIRE(r.metrics.size() == static_cast<std::size_t>(c.total_rounds()));
  for (const auto& m : r.metrics) {
    CHECK(m.test_acc >= 0.0);
    CHECK(m.test_acc <= 1.0);
    int per_server_sum = 0;
    for (int p : m.per_server) per_server_sum += p;
    CHECK(per_server_sum == m.participants);
  }
  fs::remove_all(dir);
}

TEST_CASE("model vector JSON round-trip") {
  Rng rng(21);
  auto m = init_model(ModelKind::Mlp, 5, 3, 4, rng);
  auto back = model_from_json(model_to_json(m));
  CHECK(back.kind == m.kind);
  CHECK(back.w == m.w);
  CHECK_THROWS_AS(model_from_json("{\"format_version\": 2}"), FormatError);
}
