#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "trail/errors.hpp"
#include "trail/hsmm.hpp"

using namespace trail;
using namespace trail::hsmm;
using trail::testutil::alternating_model;
using trail::testutil::alternating_sequence;
using trail::testutil::random_model;
using trail::testutil::random_sequence;
using trail::testutil::rel_diff;

TEST_CASE("forward T=1 base case factors as pi * b * p(e)") {
  auto m = random_model(2, 2, 1, 7);
  ObservationSequence seq;
  seq.channels = 1;
  seq.values = {{0.3}};
  auto lat = forward_pass(m, seq);

  const double twopi = 6.283185307179586476925286766559;
  double expected_total = 0.0;
  std::vector<double> cells;
  for (int i = 0; i < 2; ++i) {
    const double var = m.emission_var[i][0];
    const double d = 0.3 - m.emission_mean[i][0];
    const double b = std::exp(-0.5 * d * d / var) / std::sqrt(twopi * var);
    for (int e = 0; e < 2; ++e) {
      cells.push_back(m.initial_probs[i] * m.duration_pmf[i][e] * b);
      expected_total += cells.back();
    }
  }
  CHECK(rel_diff(lat.loglik, std::log(expected_total)) < 1e-12);
  CHECK(rel_diff(sequence_likelihood(lat), lat.loglik) < 1e-15);
  int k = 0;
  double cell_sum = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int e = 0; e < 2; ++e) cell_sum += lat.a(0, i, e);
  }
  CHECK(cell_sum == doctest::Approx(1.0).epsilon(1e-12));
  for (int i = 0; i < 2; ++i) {
    for (int e = 0; e < 2; ++e, ++k) {
      CHECK(rel_diff(lat.a(0, i, e), cells[k] / expected_total) < 1e-12);
    }
  }
}

TEST_CASE("deterministic alternating path reproduces the emission product") {
  auto m = alternating_model();
  auto seq = alternating_sequence(6);
  auto lat = forward_pass(m, seq);
  const double twopi = 6.283185307179586476925286766559;
  // Planted path emits exactly the state mean each round.
  const double per_round = -0.5 * std::log(twopi * 1e-6);
  CHECK(std::abs(lat.loglik - 6 * per_round) < 1e-8);

  auto vit = viterbi_decode(m, seq);
  CHECK(vit.states == std::vector<int>({0, 1, 0, 1, 0, 1}));
  CHECK(vit.segments.size() == 6);
  CHECK(std::abs(vit.log_prob - lat.loglik) < 1e-8);

  auto post = posteriors(m, seq, lat);
  for (int t = 0; t < 6; ++t) {
    CHECK(post.g(t, t % 2, 0) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("scaled alpha rows sum to one at every timestep") {
  auto m = random_model(3, 4, 2, 21);
  auto seq = random_sequence(m, 25, 22);
  auto lat = forward_pass(m, seq);
  for (int t = 0; t < lat.T; ++t) {
    double s = 0.0;
    for (int i = 0; i < lat.N; ++i) {
      for (int e = 0; e < lat.E; ++e) s += lat.a(t, i, e);
    }
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
}

TEST_CASE("forward likelihood matches enumeration oracle on small instances") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    auto m = random_model(3, 3, 1, seed);
    auto seq = random_sequence(m, 6, seed + 1000);
    auto lat = forward_pass(m, seq);
    auto oracle = brute_force_likelihood(m, seq);
    CHECK(rel_diff(lat.loglik, oracle.loglik) < 1e-10);
  }
}

TEST_CASE("backward: T=1 leaves beta at one, alpha-beta contraction holds everywhere") {
  auto m = random_model(2, 3, 1, 5);
  ObservationSequence one;
  one.channels = 1;
  one.values = {{0.0}};
  auto lat1 = forward_pass(m, one);
  backward_pass(m, one, lat1);
  for (int i = 0; i < lat1.N; ++i) {
    for (int e = 0; e < lat1.E; ++e) CHECK(lat1.b(0, i, e) == 1.0);
  }

  auto m2 = random_model(3, 3, 2, 31);
  auto seq = random_sequence(m2, 12, 32);
  auto lat = forward_pass(m2, seq);
  backward_pass(m2, seq, lat);
  for (int t = 0; t < lat.T; ++t) {
    double s = 0.0;
    for (int i = 0; i < lat.N; ++i) {
      for (int e = 0; e < lat.E; ++e) s += lat.a(t, i, e) * lat.b(t, i, e);
    }
    // In the shared scaled convention the contraction recovers the (scaled)
    // likelihood exactly, i.e. 1.
    CHECK(std::abs(s - 1.0) < 1e-10);
  }

  const double from_beta = likelihood_from_beta(m2, seq, lat);
  CHECK(rel_diff(from_beta, lat.loglik) < 1e-10);
}

TEST_CASE("beta concentrates on the planted suffix for the deterministic model") {
  auto m = alternating_model();
  auto seq = alternating_sequence(4);
  auto lat = forward_pass(m, seq);
  backward_pass(m, seq, lat);
  for (int t = 0; t < 4; ++t) {
    CHECK(lat.a(t, t % 2, 0) == doctest::Approx(1.0).epsilon(1e-9));
    double contraction = 0.0;
    for (int i = 0; i < 2; ++i) {
      for (int e = 0; e < 2; ++e) contraction += lat.a(t, i, e) * lat.b(t, i, e);
    }
    CHECK(std::abs(contraction - 1.0) < 1e-10);
  }
}

TEST_CASE("posterior marginals, dwell cells and transition mass match the oracle") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto m = random_model(3, 3, 1, seed * 17);
    auto seq = random_sequence(m, 6, seed * 17 + 3);
    auto lat = forward_pass(m, seq);
    backward_pass(m, seq, lat);
    auto post = posteriors(m, seq, lat);
    auto oracle = brute_force_likelihood(m, seq);

    for (int t = 0; t < post.T; ++t) {
      double total = 0.0;
      for (int i = 0; i < post.N; ++i) {
        CHECK(std::abs(post.state_marginal(t, i) - oracle.marginal(t, i)) < 1e-9);
        for (int e = 0; e < post.E; ++e) {
          total += post.g(t, i, e);
          const double want = oracle.dwell_marginals[(static_cast<std::size_t>(t) * 3 + i) * 3 + e];
          CHECK(std::abs(post.g(t, i, e) - want) < 1e-9);
        }
      }
      CHECK(std::abs(total - 1.0) < 1e-10);
    }
    for (int t = 0; t + 1 < post.T; ++t) {
      for (int i = 0; i < post.N; ++i) {
        for (int j = 0; j < post.N; ++j) {
          double mass = 0.0;
          for (int e = 0; e < post.E; ++e) mass += post.x(t, i, e, j);
          const double want = oracle.transition_post[(static_cast<std::size_t>(t) * 3 + i) * 3 + j];
          CHECK(std::abs(mass - want) < 1e-9);
        }
        for (int e = 0; e < post.E; ++e) CHECK(post.x(t, i, e, i) == 0.0);
      }
    }
  }
}

TEST_CASE("posteriors rejects a lattice from a different model/sequence") {
  auto m = random_model(3, 3, 1, 96);
  auto seq = random_sequence(m, 8, 97);
  auto other = random_model(3, 4, 1, 98);  // different max_duration
  auto lat = forward_pass(other, random_sequence(other, 8, 99));
  CHECK_THROWS_AS(posteriors(m, seq, lat), InvalidInputError);
}

TEST_CASE("xi never exceeds gamma cell-wise (exit probability stays in [0,1])") {
  auto m = random_model(3, 4, 2, 99);
  auto seq = random_sequence(m, 20, 100);
  auto lat = forward_pass(m, seq);
  auto post = posteriors(m, seq, lat);
  for (int t = 0; t + 1 < post.T; ++t) {
    for (int i = 0; i < post.N; ++i) {
      for (int e = 0; e < post.E; ++e) {
        CHECK(post.exit_mass(t, i, e) <= post.g(t, i, e) + 1e-12);
      }
    }
  }
}

TEST_CASE("viterbi matches the oracle max and never beats the likelihood") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto m = random_model(3, 3, 1, seed * 31);
    auto seq = random_sequence(m, 6, seed * 31 + 7);
    auto vit = viterbi_decode(m, seq);
    auto oracle = brute_force_likelihood(m, seq);
    CHECK(std::abs(vit.log_prob - oracle.best_log_prob) < 1e-9);
    CHECK(vit.log_prob <= forward_pass(m, seq).loglik + 1e-9);
    int covered = 0;
    for (std::size_t k = 0; k < vit.segments.size(); ++k) {
      covered += vit.segments[k].length;
      if (k > 0) CHECK(vit.segments[k].state != vit.segments[k - 1].state);
    }
    CHECK(covered == seq.length());
  }
}

TEST_CASE("viterbi path probability bounded by loglik on 100 random instances") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto m = random_model(2 + seed % 3, 2 + seed % 4, 1, seed);
    auto seq = random_sequence(m, 4 + static_cast<int>(seed % 8), seed + 5000);
    auto vit = viterbi_decode(m, seq);
    auto lat = forward_pass(m, seq);
    CHECK(vit.log_prob <= lat.loglik + 1e-9);
  }
}

TEST_CASE("baum_welch: refitting a converged model stops immediately") {
  auto gen = random_model(2, 3, 1, 11);
  std::vector<ObservationSequence> data;
  for (int k = 0; k < 4; ++k) data.push_back(random_sequence(gen, 60, 200 + k));
  auto first = baum_welch_fit(default_init(2, 3, data), data, 200, 1e-9);
  auto refit = baum_welch_fit(first.model, data, 50, 1e-6);
  REQUIRE(refit.loglik_trace.size() >= 2);
  CHECK(refit.loglik_trace.size() == 2);  // stopped after one step
  CHECK(refit.loglik_trace[1] - refit.loglik_trace[0] < 1e-6);
}

TEST_CASE("baum_welch recovers generating emission means (2 states, T=500)") {
  hsmm::QualityHsmm gen;
  gen.num_states = 2;
  gen.max_duration = 4;
  gen.num_channels = 1;
  gen.initial_probs = {0.6, 0.4};
  gen.transitions = {{0.0, 1.0}, {1.0, 0.0}};
  gen.duration_mean = {2.0, 3.0};
  gen.duration_var = {1.0, 1.0};
  gen.emission_mean = {{1.0}, {-1.0}};
  gen.emission_var = {{0.09}, {0.09}};
  gen.rebuild_duration_pmfs();
  gen.validate();

  Rng rng(42);
  std::vector<ObservationSequence> data{sample_sequence(gen, 500, rng)};

  auto init = gen;
  init.emission_mean = {{0.7}, {-0.6}};
  init.emission_var = {{0.25}, {0.25}};
  init.duration_mean = {2.5, 2.5};
  init.rebuild_duration_pmfs();

  auto fit = baum_welch_fit(init, data, 100, 1e-8);
  CHECK(std::abs(fit.model.emission_mean[0][0] - 1.0) < 0.1);
  CHECK(std::abs(fit.model.emission_mean[1][0] + 1.0) < 0.1);
  for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) {
    CHECK(fit.loglik_trace[k] >= fit.loglik_trace[k - 1] - 1e-9);
  }
}

TEST_CASE("baum_welch loglik trace is monotone over 20 random seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto gen = random_model(3, 3, 2, seed * 13);
    std::vector<ObservationSequence> data;
    for (int k = 0; k < 3; ++k) data.push_back(random_sequence(gen, 40, seed * 13 + k + 1));
    auto init = default_init(3, 3, data);
    auto fit = baum_welch_fit(init, data, 15, 1e-12);
    for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) {
      CHECK(fit.loglik_trace[k] >= fit.loglik_trace[k - 1] - 1e-9);
    }
  }
}

TEST_CASE("baum_welch is bit-identical with serial and parallel E-steps") {
  auto gen = random_model(3, 4, 2, 77);
  std::vector<ObservationSequence> data;
  for (int k = 0; k < 6; ++k) data.push_back(random_sequence(gen, 50, 700 + k));
  auto init = default_init(3, 4, data);
  auto serial = baum_welch_fit(init, data, 5, 1e-12, false);
  auto parallel = baum_welch_fit(init, data, 5, 1e-12, true);
  REQUIRE(serial.loglik_trace.size() == parallel.loglik_trace.size());
  for (std::size_t k = 0; k < serial.loglik_trace.size(); ++k) {
    CHECK(serial.loglik_trace[k] == parallel.loglik_trace[k]);
  }
  CHECK(serial.model.emission_mean == parallel.model.emission_mean);
  CHECK(serial.model.duration_mean == parallel.model.duration_mean);
}

TEST_CASE("baum_welch rejects empty input") {
  auto m = random_model(2, 2, 1, 3);
  CHECK_THROWS_AS(baum_welch_fit(m, {}, 10, 1e-6), InvalidInputError);
}

TEST_CASE("mllr identity transform is a field-by-field no-op") {
  auto m = random_model(3, 4, 2, 55);
  auto adapted = mllr_adapt(m, MllrTransform::identity(2));
  CHECK(adapted.emission_mean == m.emission_mean);
  CHECK(adapted.emission_var == m.emission_var);
  CHECK(adapted.duration_mean == m.duration_mean);
  CHECK(adapted.duration_var == m.duration_var);
  CHECK(adapted.duration_pmf == m.duration_pmf);
  CHECK(adapted.transitions == m.transitions);
  CHECK(adapted.initial_probs == m.initial_probs);
}

TEST_CASE("mllr duration scale doubles every duration mean") {
  auto m = random_model(3, 6, 1, 56);
  MllrTransform tr = MllrTransform::identity(1);
  tr.channels[0].duration_scale = 2.0;
  auto adapted = mllr_adapt(m, tr);
  for (int i = 0; i < 3; ++i) {
    CHECK(adapted.duration_mean[i] == 2.0 * m.duration_mean[i]);
    CHECK(adapted.duration_var[i] == m.duration_var[i]);
  }
}

TEST_CASE("mllr mean shift: adapted likelihood on shifted data equals canonical on raw data") {
  auto m = random_model(3, 3, 1, 57);
  auto seq = random_sequence(m, 15, 58);
  const double shift = 2.5;
  MllrTransform tr = MllrTransform::identity(1);
  tr.channels[0].emission_offset = shift;
  auto adapted = mllr_adapt(m, tr);
  ObservationSequence shifted = seq;
  for (auto& row : shifted.values) row[0] += shift;
  const double base = forward_pass(m, seq).loglik;
  const double moved = forward_pass(adapted, shifted).loglik;
  CHECK(rel_diff(base, moved) < 1e-12);
}

TEST_CASE("mllr rejects nonpositive duration scale and channel mismatch") {
  auto m = random_model(2, 3, 2, 59);
  MllrTransform bad = MllrTransform::identity(2);
  bad.channels[1].duration_scale = 0.0;
  CHECK_THROWS_AS(mllr_adapt(m, bad), InvalidInputError);
  CHECK_THROWS_AS(mllr_adapt(m, MllrTransform::identity(3)), InvalidInputError);
  MllrTransform mixed = MllrTransform::identity(2);
  mixed.channels[1].duration_scale = 2.0;  // disagrees with channel 0
  CHECK_THROWS_AS(mllr_adapt(m, mixed), InvalidInputError);
}

TEST_CASE("map estimate: single channel reduces to the posterior argmax") {
  auto m = random_model(3, 3, 1, 61);
  auto seq = random_sequence(m, 10, 62);
  auto lat = forward_pass(m, seq);
  auto post = posteriors(m, seq, lat);
  for (int t = 0; t < seq.length(); ++t) {
    auto est = map_state_estimate(m, MllrTransform::identity(1), seq, t);
    int want = 0;
    for (int i = 1; i < 3; ++i) {
      if (post.state_marginal(t, i) > post.state_marginal(t, want)) want = i;
    }
    CHECK(est.state == want);
    double ssum = 0.0;
    for (double s : est.scores) ssum += s;
    CHECK(std::abs(ssum - 1.0) < 1e-12);
  }
}

TEST_CASE("map estimate: duplicated identical channels agree with single channel") {
  auto m1 = random_model(3, 3, 1, 63);
  auto m2 = m1;
  m2.num_channels = 2;
  for (int i = 0; i < 3; ++i) {
    m2.emission_mean[i] = {m1.emission_mean[i][0], m1.emission_mean[i][0]};
    m2.emission_var[i] = {m1.emission_var[i][0], m1.emission_var[i][0]};
  }
  m2.validate();
  auto seq1 = random_sequence(m1, 8, 64);
  ObservationSequence seq2;
  seq2.channels = 2;
  for (const auto& row : seq1.values) seq2.values.push_back({row[0], row[0]});
  for (int t = 0; t < 8; ++t) {
    auto a = map_state_estimate(m1, MllrTransform::identity(1), seq1, t);
    auto b = map_state_estimate(m2, MllrTransform::identity(2), seq2, t);
    CHECK(a.state == b.state);
  }
}

TEST_CASE("map estimate matches the per-channel oracle product on 2 channels") {
  for (std::uint64_t seed = 301; seed <= 305; ++seed) {
    auto m = random_model(3, 3, 2, seed);
    auto seq = random_sequence(m, 6, seed + 9);
    MllrTransform tr = MllrTransform::identity(2);
    tr.channels[0].emission_offset = 0.25;
    tr.channels[1].duration_scale = 1.5;
    for (int t = 0; t < 6; ++t) {
      auto est = map_state_estimate(m, tr, seq, t);
      std::vector<double> logprod(3, 0.0);
      for (int s = 0; s < 2; ++s) {
        auto adapted = mllr_adapt_channel(m, tr.channels[s], s);
        auto oracle = brute_force_likelihood(adapted, seq, Channel{s});
        for (int i = 0; i < 3; ++i) logprod[i] += std::log(oracle.marginal(t, i));
      }
      int want = 0;
      for (int i = 1; i < 3; ++i) {
        if (logprod[i] > logprod[want]) want = i;
      }
      CHECK(est.state == want);
    }
  }
}

TEST_CASE("brute force T=1 closed form and refusal on big instances") {
  auto m = random_model(2, 2, 1, 71);
  ObservationSequence seq;
  seq.channels = 1;
  seq.values = {{0.1}};
  auto oracle = brute_force_likelihood(m, seq);
  CHECK(rel_diff(oracle.loglik, forward_pass(m, seq).loglik) < 1e-12);

  auto big = random_model(3, 3, 1, 72);
  auto long_seq = random_sequence(big, 40, 73);
  CHECK_THROWS_AS(brute_force_likelihood(big, long_seq), SizeLimitError);
}

TEST_CASE("dimension mismatch and underflow produce the documented errors") {
  auto m = random_model(2, 2, 2, 81);
  ObservationSequence wrong;
  wrong.channels = 1;
  wrong.values = {{0.0}};
  CHECK_THROWS_AS(forward_pass(m, wrong), InvalidInputError);

  auto tiny = testutil::alternating_model(1e-9);
  ObservationSequence far;
  far.channels = 1;
  far.values = {{1e6}};  // hundreds of sigma away from both states
  CHECK_THROWS_AS(forward_pass(tiny, far), NumericalDegeneracyError);
}

TEST_CASE("model JSON round-trip is lossless at full precision") {
  auto m = random_model(3, 5, 2, 91);
  m.duration_mean[1] = 1.0 / 3.0;
  m.emission_mean[2][1] = 0.1 + 0.2;
  m.rebuild_duration_pmfs();
  auto text = m.to_json_string();
  auto back = QualityHsmm::from_json_string(text);
  CHECK(back.num_states == m.num_states);
  CHECK(back.max_duration == m.max_duration);
  CHECK(back.initial_probs == m.initial_probs);
  CHECK(back.transitions == m.transitions);
  CHECK(back.duration_mean == m.duration_mean);
  CHECK(back.duration_var == m.duration_var);
  CHECK(back.emission_mean == m.emission_mean);
  CHECK(back.emission_var == m.emission_var);

  const auto path = std::filesystem::temp_directory_path() / "trail_model_roundtrip.json";
  m.save(path);
  auto loaded = QualityHsmm::load(path);
  CHECK(loaded.emission_mean == m.emission_mean);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(QualityHsmm::from_json_string("{not json"), FormatError);
  CHECK_THROWS_AS(QualityHsmm::from_json_string("{\"format_version\": 1}"), FormatError);
}

TEST_CASE("model validation rejects broken invariants") {
  auto m = random_model(3, 3, 1, 95);
  auto broken = m;
  broken.initial_probs[0] += 0.1;
  CHECK_THROWS_AS(broken.validate(), InvalidInputError);
  broken = m;
  broken.transitions[1][1] = 0.5;
  CHECK_THROWS_AS(broken.validate(), InvalidInputError);
  broken = m;
  broken.emission_var[0][0] = 0.0;
  CHECK_THROWS_AS(broken.validate(), InvalidInputError);
}

TEST_CASE("deterministic: identical inputs give bit-identical lattices") {
  auto m = random_model(3, 4, 2, 101);
  auto seq = random_sequence(m, 30, 102);
  auto a = forward_pass(m, seq);
  auto b = forward_pass(m, seq);
  CHECK(a.alpha == b.alpha);
  CHECK(a.loglik == b.loglik);
}
