#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "modality/choice.hpp"
#include "modality/error.hpp"
#include "modality/forecast.hpp"
#include "modality/hmm.hpp"
#include "modality/simulation.hpp"
#include "test_support.hpp"

using namespace modality;
using testing::feedback_truth;
using testing::Oracle;
using testing::simulate_ahead;
using testing::Truth;
namespace fs = std::filesystem;

namespace {

const fs::path kFixture = fs::path(MODALITY_DATA_DIR) / "santiago_fixture";

Eigen::VectorXd simulated_mode_shares(const SimulatedPanel& sim, std::size_t M, std::size_t t) {
  Eigen::VectorXd share = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(M));
  double count = 0.0;
  for (const auto& rec : sim.dataset.individuals) {
    for (const auto& sit : rec.waves[t].situations) {
      share[static_cast<Eigen::Index>(sit.chosen_alternative().mode)] += 1.0;
      count += 1.0;
    }
  }
  return share / count;
}

Scenario scale_covariate(double factor) {
  Scenario sc;
  sc.name = "scaled";
  sc.covariate_transforms.push_back({0, TransformOp::Scale, factor, {}});
  return sc;
}

}  // namespace

TEST_CASE("horizon 0 is the mean filtered posterior at the last wave") {
  const Truth truth = feedback_truth();
  const Oracle o = simulate_ahead(truth.spec, truth.params, 200, 3, 0, 2);
  const ForecastResult f = forecast(o.observed, truth.spec, truth.params, 0, Scenario{});
  REQUIRE(f.class_shares.size() == 1);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(3);
  for (const auto& rec : o.observed.individuals) {
    const ForwardResult fr = forward_loglik(rec, truth.spec, truth.params);
    mean += fr.filtered.row(fr.filtered.rows() - 1).transpose() / 200.0;
  }
  CHECK((f.class_shares[0] - mean).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(f.average_transition.size() == 0);
}

TEST_CASE("a no-op transform is bit-identical to the baseline") {
  const Truth truth = feedback_truth();
  const Oracle o = simulate_ahead(truth.spec, truth.params, 100, 3, 0, 3);
  const ForecastResult a = forecast(o.observed, truth.spec, truth.params, 3, Scenario{});
  const ForecastResult b = forecast(o.observed, truth.spec, truth.params, 3, scale_covariate(1.0));
  for (std::size_t h = 0; h <= 3; ++h) {
    CHECK(a.class_shares[h] == b.class_shares[h]);
    CHECK(a.mode_shares[h] == b.mode_shares[h]);
  }
}

TEST_CASE("forecast agrees with forward simulation") {
  const Truth truth = feedback_truth();
  const std::size_t T = 3, H = 3;
  const Oracle o = simulate_ahead(truth.spec, truth.params, 5000, T, H, 2024);
  const ForecastResult f = forecast(o.observed, truth.spec, truth.params, static_cast<int>(H), Scenario{});
  for (std::size_t h = 1; h <= H; ++h) {
    const Eigen::VectorXd sim_classes = testing::latent_shares(o.sim, 3, T - 1 + h);
    const Eigen::VectorXd sim_modes = simulated_mode_shares(o.sim, 3, T - 1 + h);
    CHECK((f.class_shares[h] - sim_classes).cwiseAbs().maxCoeff() <= 0.02);
    CHECK((f.mode_shares[h] - sim_modes).cwiseAbs().maxCoeff() <= 0.02);
  }
}

TEST_CASE("every emitted share vector is a simplex") {
  const Truth truth = feedback_truth();
  const Oracle o = simulate_ahead(truth.spec, truth.params, 150, 4, 0, 5);
  const ForecastResult f = forecast(o.observed, truth.spec, truth.params, 4, scale_covariate(1.3));
  for (std::size_t h = 0; h <= 4; ++h) {
    CHECK(testing::is_simplex(f.class_shares[h], 1e-10));
    CHECK(testing::is_simplex(f.mode_shares[h], 1e-10));
  }
  for (const auto& ind : f.individual) {
    for (Eigen::Index h = 0; h < ind.rows(); ++h) CHECK(testing::is_simplex(ind.row(h).transpose(), 1e-10));
  }
  for (Eigen::Index r = 0; r < 3; ++r) CHECK(testing::is_simplex(f.average_transition.row(r).transpose(), 1e-10));
  for (const auto& s : estimated_class_shares(o.observed, truth.spec, truth.params)) CHECK(testing::is_simplex(s, 1e-10));
  const Eigen::MatrixXd avg = average_transition_probs(o.observed, truth.spec, truth.params);
  for (Eigen::Index r = 0; r < 3; ++r) CHECK(testing::is_simplex(avg.row(r).transpose(), 1e-10));
}

TEST_CASE("Chapman-Kolmogorov composition") {
  const Truth truth = feedback_truth();
  const Oracle o = simulate_ahead(truth.spec, truth.params, 120, 3, 0, 6);
  for (const Scenario& sc : {Scenario{}, scale_covariate(1.2)}) {
    REQUIRE(sc.wave_invariant());
    const int h = 2, k = 3;
    const ForecastResult whole = forecast(o.observed, truth.spec, truth.params, h + k, sc);
    const ForecastResult first = forecast(o.observed, truth.spec, truth.params, h, sc);
    Eigen::MatrixXd start(static_cast<Eigen::Index>(first.individual.size()), 3);
    for (std::size_t n = 0; n < first.individual.size(); ++n) start.row(static_cast<Eigen::Index>(n)) = first.individual[n].row(h);
    const ForecastResult second = forecast_from(o.observed, truth.spec, truth.params, start, k, sc, h);
    for (int j = 0; j <= k; ++j) {
      CHECK((second.class_shares[j] - whole.class_shares[h + j]).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK((second.mode_shares[j] - whole.mode_shares[h + j]).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("homogeneous population: forecast equals the propagated mean posterior") {
  const Truth truth = feedback_truth();
  GenerativeConfig config = testing::simple_config(truth.spec, truth.params, 300, 3, 2, 8);
  config.covariates[0].dist = Distribution{Distribution::Kind::Constant, 0.7, 0.0};
  config.attributes[0].base = Distribution{Distribution::Kind::Constant, 1.1, 0.0};
  const PanelDataset data = generate_panel(config).dataset;
  const int H = 4;
  const ForecastResult f = forecast(data, truth.spec, truth.params, H, Scenario{});
  const WaveObservation& env = data.individuals[0].waves.back();
  const Eigen::MatrixXd A = transition_matrix(env.covariates, class_consumer_surplus(env, truth.spec, truth.params),
                                              truth.params.trans);
  for (int h = 1; h <= H; ++h) {
    const std::vector<Eigen::MatrixXd> steps(static_cast<std::size_t>(h), A);
    const Eigen::RowVectorXd expected = propagate_marginals(f.class_shares[0].transpose(), steps);
    CHECK((f.class_shares[static_cast<std::size_t>(h)].transpose() - expected).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("estimated class shares and average transitions") {
  SUBCASE("one class") {
    Schema schema;
    schema.modes = {"a", "b"};
    ClassSpec cls;
    cls.considers = {true, true};
    const ModelSpec spec(schema, {cls}, {}, {}, false);
    const PanelDataset d = generate_panel(testing::simple_config(spec, ParameterSet::zeros(spec), 20, 3, 1, 1)).dataset;
    for (const auto& s : estimated_class_shares(d, spec, ParameterSet::zeros(spec))) CHECK(s[0] == doctest::Approx(1.0));
  }
  SUBCASE("uninformative model is uniform") {
    Schema schema;
    schema.modes = {"a", "b"};
    ClassSpec cls;
    cls.considers = {true, true};
    const ModelSpec spec(schema, {cls, cls, cls}, {}, {}, false);
    const ParameterSet zero = ParameterSet::zeros(spec);
    const PanelDataset d = generate_panel(testing::simple_config(spec, zero, 20, 3, 1, 1)).dataset;
    for (const auto& s : estimated_class_shares(d, spec, zero)) CHECK((s.array() - 1.0 / 3.0).abs().maxCoeff() <= 1e-12);
  }
  SUBCASE("two-state truth is recovered by enumeration") {
    const GenerativeConfig config = two_state_config(TwoStateTruth{}, 5000, 10, 77);
    const PanelDataset d = generate_panel(config).dataset;
    const auto shares = estimated_class_shares(d, config.spec, config.true_params);
    REQUIRE(shares.size() == 10);
    CHECK(std::abs(shares[0][0] - 0.4) <= 0.02);
    CHECK(std::abs(shares[0][1] - 0.6) <= 0.02);
    const Eigen::MatrixXd avg = average_transition_probs(d, config.spec, config.true_params);
    Eigen::Matrix2d omega;
    omega << 0.8, 0.2, 0.3, 0.7;
    CHECK((avg - omega).cwiseAbs().maxCoeff() <= 0.02);
  }
}

TEST_CASE("scenarios") {
  Schema schema;
  schema.modes = {"car", "bus", "walk"};
  schema.attributes = {"time", "cost"};
  schema.covariates = {"income"};

  SUBCASE("parsing rejects unknown names and bad factors") {
    using nlohmann::json;
    CHECK_THROWS_AS(scenario_from_json(json::parse(R"({"covariate_transforms":[{"covariate":"age","value":2}]})"), schema),
                    ValidationError);
    CHECK_THROWS_AS(scenario_from_json(json::parse(R"({"attribute_transforms":[{"attribute":"time","alternatives":["tram"],"value":2}]})"), schema),
                    ValidationError);
    CHECK_THROWS_AS(scenario_from_json(json::parse(R"({"covariate_transforms":[{"covariate":"income","value":0}]})"), schema),
                    ValidationError);
    CHECK_THROWS_AS(scenario_from_json(json::parse(R"({"covariate_transforms":[{"covariate":"income","value":1,"waves":[0]}]})"), schema),
                    ValidationError);
  }

  SUBCASE("transforms hit only their targets and steps, without compounding") {
    const auto sc = scenario_from_json(nlohmann::json::parse(R"({
      "covariate_transforms": [{"covariate": "income", "op": "scale", "value": 1.1}],
      "attribute_transforms": [{"attribute": "time", "alternatives": ["bus"], "op": "shift", "value": -5, "waves": [2]}]
    })"), schema);
    CHECK_FALSE(sc.wave_invariant());
    WaveObservation w;
    w.covariates = {10.0};
    ChoiceSituation sit;
    sit.alternatives = {{0, true, {30.0, 2.0}}, {1, true, {40.0, 1.0}}, {2, true, {50.0, 0.0}}};
    w.situations = {sit};
    const WaveObservation s1 = apply_scenario(w, sc, 1);
    const WaveObservation s2 = apply_scenario(w, sc, 2);
    const WaveObservation s3 = apply_scenario(w, sc, 3);
    CHECK(s1.covariates[0] == doctest::Approx(11.0));
    CHECK(s3.covariates[0] == doctest::Approx(11.0));
    CHECK(s1.situations[0].alternatives[1].attributes[0] == 40.0);
    CHECK(s2.situations[0].alternatives[1].attributes[0] == 35.0);
    CHECK(s2.situations[0].alternatives[0].attributes[0] == 30.0);
    CHECK(s2.situations[0].alternatives[1].attributes[1] == 1.0);
    CHECK(s3.situations[0].alternatives[1].attributes[0] == 40.0);
    CHECK(apply_scenario(w, sc, 0) == w);
  }
}

TEST_CASE("fixture scenarios run and the surplus mechanism has the right sign") {
  const Schema schema = load_schema(kFixture / "schema.json");
  const ModelSpec spec = load_model_spec(kFixture / "spec.json", schema);
  const ParameterSet params = load_params(kFixture / "params.json", spec);
  GenerativeConfig config = load_generative_config(kFixture / "simulate.json", 31);
  config.n_individuals = 120;
  const PanelDataset data = generate_panel(config).dataset;

  const ForecastResult base = forecast(data, spec, params, 3, Scenario{});
  for (const char* name : {"income_plus_10.json", "bus_time_minus_15.json", "walk_time_minus_15.json"}) {
    const Scenario sc = load_scenario(kFixture / name, schema);
    const ForecastResult f = forecast(data, spec, params, 3, sc);
    for (std::size_t h = 0; h <= 3; ++h) {
      CHECK(testing::is_simplex(f.class_shares[h], 1e-10));
      CHECK(testing::is_simplex(f.mode_shares[h], 1e-10));
    }
  }
  // Walking is considered only by class 1, and every origin loads class 1's
  // surplus positively.
  for (std::size_t r = 0; r < 4; ++r) REQUIRE(params.trans.alpha(static_cast<Eigen::Index>(r), 0) > 0.0);
  const ForecastResult walk = forecast(data, spec, params, 1, load_scenario(kFixture / "walk_time_minus_15.json", schema));
  CHECK(walk.class_shares[1][0] > base.class_shares[1][0]);
}

TEST_CASE("static latent class model") {
  SUBCASE("one class: membership is one and mode shares are the logit shares") {
    Schema schema;
    schema.modes = {"a", "b", "c"};
    schema.attributes = {"x"};
    schema.covariates = {"z"};
    ClassSpec cls;
    cls.considers = {true, true, true};
    cls.uses_attribute = {true};
    const ModelSpec spec(schema, {cls}, {true}, {true}, false);
    ParameterSet p = ParameterSet::zeros(spec);
    p.tastes[0].asc = {0.0, 0.5, -0.5};
    p.tastes[0].coeffs = {-1.0};
    const PanelDataset d = generate_panel(testing::simple_config(spec, p, 50, 2, 2, 4)).dataset;
    const LccmComparison cmp = lccm_fit_and_forecast(d, 1, spec, p, 2, Scenario{});
    for (const auto& ind : d.individuals) CHECK(lccm_membership(ind.waves.back(), spec, cmp.fit.model)[0] == doctest::Approx(1.0));
    Eigen::VectorXd mnl = Eigen::VectorXd::Zero(3);
    for (const auto& ind : d.individuals) {
      const auto& w = ind.waves.back();
      for (const auto& sit : w.situations) {
        const auto pr = class_choice_probs(sit, cls, p.tastes[0]);
        for (std::size_t k = 0; k < pr.positions.size(); ++k) {
          mnl[static_cast<Eigen::Index>(sit.alternatives[pr.positions[k]].mode)] += pr.values[k] / (50.0 * 2.0);
        }
      }
    }
    for (std::size_t h = 0; h <= 2; ++h) CHECK((cmp.forecast.mode_shares[h] - mnl).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("no transforms give a constant forecast") {
    const Truth truth = feedback_truth();
    const Oracle o = simulate_ahead(truth.spec, truth.params, 300, 3, 0, 12);
    const LccmComparison cmp = lccm_fit_and_forecast(o.observed, 1, truth.spec, truth.params, 3, Scenario{});
    CHECK(std::isfinite(cmp.fit.log_likelihood));
    CHECK((cmp.fit.model.lambda.array() >= 0.0).all());
    for (std::size_t h = 1; h <= 3; ++h) {
      CHECK((cmp.forecast.class_shares[h] - cmp.forecast.class_shares[0]).cwiseAbs().maxCoeff() == 0.0);
      CHECK(testing::is_simplex(cmp.forecast.class_shares[h], 1e-10));
    }
  }

  SUBCASE("under strong habit the static model forecasts worse than the dynamic one") {
    // Diagonal-dominant transitions from a lopsided start: the population
    // keeps drifting after the panel ends.
    const GenerativeConfig base = two_state_config(TwoStateTruth{0.9, 0.9, 0.95, 0.8, 0.3}, 1, 1, 0);
    const Oracle o = simulate_ahead(base.spec, base.true_params, 5000, 3, 3, 41);
    const ForecastResult hmm = forecast(o.observed, base.spec, base.true_params, 3, Scenario{});
    const LccmComparison lccm = lccm_fit_and_forecast(o.observed, 3, base.spec, base.true_params, 3, Scenario{});
    double hmm_err = 0.0, lccm_err = 0.0;
    for (std::size_t h = 1; h <= 3; ++h) {
      const Eigen::VectorXd truth_share = testing::latent_shares(o.sim, 2, 2 + h);
      hmm_err += (hmm.class_shares[h] - truth_share).cwiseAbs().sum();
      lccm_err += (lccm.forecast.class_shares[h] - truth_share).cwiseAbs().sum();
    }
    CHECK(lccm_err > hmm_err);
  }

  SUBCASE("single_wave keeps one renumbered wave") {
    const Truth truth = feedback_truth();
    const Oracle o = simulate_ahead(truth.spec, truth.params, 10, 3, 0, 1);
    const PanelDataset one = single_wave(o.observed, 2);
    for (std::size_t n = 0; n < one.individuals.size(); ++n) {
      REQUIRE(one.individuals[n].waves.size() == 1);
      CHECK(one.individuals[n].waves[0].wave == 1);
      CHECK(one.individuals[n].waves[0].situations == o.observed.individuals[n].waves[1].situations);
    }
  }
}
