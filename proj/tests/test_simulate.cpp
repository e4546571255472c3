#include <doctest.h>

#include <cmath>

#include "crfrail/simulate.hpp"

using namespace crfrail;

TEST_CASE("config JSON round trip and validation") {
  SimulationConfig c;
  c.num_clusters = 500;
  c.predictor_gap = 2.5;
  c.frailty_correlation = 0.5;
  c.method = AnalysisMethod::Imputed;
  c.seed = 99;
  SimulationConfig c2 = SimulationConfig::from_json(c.to_json());
  CHECK(c2.num_clusters == 500);
  CHECK(c2.predictor_gap == 2.5);
  CHECK(c2.frailty_correlation == 0.5);
  CHECK(c2.method == AnalysisMethod::Imputed);
  CHECK(c2.seed == 99);
  CHECK(c2.beta_true == c.beta_true);

  SimulationConfig bad = c;
  bad.frailty_variance = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.censoring.target_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(analysis_method_from_string("bogus"), std::invalid_argument);
}

TEST_CASE("event times have the right scale when the hazards are flat") {
  // With beta = 0 and negligible frailty both cause-specific hazards are ~1,
  // so the latent event time is Exp(2): mean 1/2, and each cause is equally
  // likely. Censoring is switched off via a huge administrative cutoff.
  SimulationConfig c;
  c.num_clusters = 20000;
  c.beta_true = {0.0, 0.0};
  c.frailty_variance = 1e-12;
  c.frailty_correlation = 0.0;
  c.censoring.mechanism = CensoringMechanism::Administrative;
  c.censoring.tau = 1e9;
  auto rng = replicate_engine(c.seed, 0);
  ReplicateData rd = generate_replicate(c, rng, resolve_censoring_parameter(c));

  double mean_t = 0.0;
  int type1 = 0, events = 0;
  for (const auto& u : rd.main_oracle.units()) {
    mean_t += u.time;
    if (u.censor_indicator == 1) {
      ++events;
      if (*u.event_type == 1) ++type1;
    }
  }
  mean_t /= rd.main_oracle.num_units();
  CHECK(events == rd.main_oracle.num_units());  // nothing censored
  CHECK(mean_t == doctest::Approx(0.5).epsilon(0.02));
  CHECK(static_cast<double>(type1) / events == doctest::Approx(0.5).epsilon(0.02));
  CHECK(rd.censoring_fraction_main == 0.0);
}

TEST_CASE("calibrated uniform censoring hits the target fraction") {
  SimulationConfig c;
  c.num_clusters = 20000;
  double cpar = resolve_censoring_parameter(c);
  CHECK(cpar == resolve_censoring_parameter(c));  // deterministic
  CHECK(cpar > 0.0);
  auto rng = replicate_engine(c.seed, 3);
  ReplicateData rd = generate_replicate(c, rng, cpar);
  CHECK(rd.censoring_fraction_main == doctest::Approx(0.3).epsilon(0.05));
}

TEST_CASE("predictor means separate by event type as configured") {
  SimulationConfig c;
  c.num_clusters = 10000;
  c.predictor_gap = 3.0;
  c.predictor_mu0 = -1.0;
  auto rng = replicate_engine(c.seed, 1);
  ReplicateData rd = generate_replicate(c, rng, resolve_censoring_parameter(c));

  double sum[3] = {0, 0, 0};
  int cnt[3] = {0, 0, 0};
  for (const auto& u : rd.main_oracle.units()) {
    int g = u.censor_indicator == 1 ? *u.event_type : 0;
    sum[g] += (*u.predictors)[0];
    ++cnt[g];
  }
  for (int g = 0; g < 3; ++g) {
    REQUIRE(cnt[g] > 100);
    CHECK(sum[g] / cnt[g] == doctest::Approx(-1.0 + 3.0 * g).epsilon(0.05));
  }
  // The hidden copy of the main study must carry no event types at all.
  for (const auto& u : rd.main.units()) CHECK_FALSE(u.event_type.has_value());
  CHECK(rd.training.complete_types());
  CHECK(rd.training.num_units() == c.training_size);
}

TEST_CASE("replicate streams are deterministic and distinct") {
  SimulationConfig c;
  c.num_clusters = 50;
  double cpar = resolve_censoring_parameter(c);
  auto r1 = replicate_engine(c.seed, 5);
  auto r2 = replicate_engine(c.seed, 5);
  auto r3 = replicate_engine(c.seed, 6);
  ReplicateData a = generate_replicate(c, r1, cpar);
  ReplicateData b = generate_replicate(c, r2, cpar);
  ReplicateData d = generate_replicate(c, r3, cpar);
  for (int u = 0; u < a.main.num_units(); ++u) {
    CHECK(a.main.units()[u].time == b.main.units()[u].time);
    CHECK((*a.main.units()[u].predictors)[0] == (*b.main.units()[u].predictors)[0]);
  }
  bool any_diff = false;
  for (int u = 0; u < a.main.num_units(); ++u)
    if (a.main.units()[u].time != d.main.units()[u].time) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("run_study output is independent of the worker-thread count") {
  SimulationConfig c;
  c.num_clusters = 60;
  c.training_size = 40;
  c.replicates = 6;
  c.method = AnalysisMethod::Weighted;

  SimulationConfig c1 = c, c8 = c;
  c1.jobs = 1;
  c8.jobs = 8;
  MonteCarloSummary s1 = run_study(c1);
  MonteCarloSummary s8 = run_study(c8);

  REQUIRE(s1.records.size() == s8.records.size());
  CHECK(s1.converged > 0);
  for (std::size_t r = 0; r < s1.records.size(); ++r) {
    CHECK(s1.records[r].converged == s8.records[r].converged);
    REQUIRE(s1.records[r].estimate.size() == s8.records[r].estimate.size());
    for (std::size_t k = 0; k < s1.records[r].estimate.size(); ++k) {
      CHECK(s1.records[r].estimate[k] == s8.records[r].estimate[k]);  // bitwise
      CHECK(s1.records[r].se[k] == s8.records[r].se[k]);
    }
    CHECK(s1.records[r].sigma2 == s8.records[r].sigma2);
  }
  for (std::size_t p = 0; p < s1.parameters.size(); ++p) {
    CHECK(s1.parameters[p].mean_estimate == s8.parameters[p].mean_estimate);
    CHECK(s1.parameters[p].ese == s8.parameters[p].ese);
    CHECK(s1.parameters[p].coverage >= 0.0);
    CHECK(s1.parameters[p].coverage <= 1.0);
  }
}
