// Acceptance run: one PASS/FAIL line per criterion. With no arguments every
// criterion runs; otherwise only the listed numbers. Exit status is 0 only
// when every requested criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "modality/choice.hpp"
#include "modality/estimation.hpp"
#include "modality/forecast.hpp"
#include "modality/hmm.hpp"
#include "modality/simulation.hpp"
#include "test_support.hpp"

using namespace modality;
namespace fs = std::filesystem;

namespace {

// Tolerances, fixed here and nowhere else.
constexpr double kTable1Tol = 0.02;
constexpr double kCensoredInitTol = 0.03;
constexpr double kTable1Seconds = 300.0;
constexpr std::uint64_t kTable1Seed = 20240601;
constexpr double kBruteForceRelTol = 1e-10;
constexpr int kBruteForceInstances = 120;
constexpr double kGradientRelTol = 1e-5;
constexpr double kGradientStep = 1e-5;
constexpr int kGradientInstances = 24;
constexpr double kMonotoneSlack = 1e-8;
constexpr double kCrossEstimatorTol = 1e-4;
constexpr double kForecastTol = 0.02;
constexpr std::uint64_t kForecastSeeds[] = {8, 9, 10};
constexpr double kChapmanKolmogorovTol = 1e-10;
constexpr double kSimplexTol = 1e-10;
// Decimal values such as 0.80 - 0.78 land a few ulps above 0.02 in binary.
constexpr double kDecimalTie = 1e-12;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      else detail.str("");
      pass = false;
      detail << what;
    }
  }
};

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

std::string fmt_sci(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", x);
  return buf;
}

std::string column(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

// ---------------------------------------------------------------------------
// 1 and 2: two-state Monte Carlo, full and left-censored fits.

struct Table1Run {
  Table1Result result;
  double seconds = 0.0;
};

std::optional<Table1Run> g_table1;

const Table1Run& table1_run() {
  auto& run = g_table1;
  if (!run) {
    const auto t0 = std::chrono::steady_clock::now();
    Table1Result r = table1_experiment(kTable1Seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run = Table1Run{std::move(r), secs};
    std::printf("  table1 seed %llu, %.1f s\n", static_cast<unsigned long long>(kTable1Seed), secs);
    std::printf("  true     %s\n", column(run->result.truth).c_str());
    std::printf("  full     %s\n", column(run->result.full).c_str());
    std::printf("  censored %s\n", column(run->result.censored).c_str());
  }
  return *run;
}

void criterion_table1(Outcome& out) {
  const Table1Run& run = table1_run();
  const auto& r = run.result;
  const std::vector<double> reported{0.39, 0.61, 0.78, 0.22, 0.29, 0.71, 0.49, 0.51, 0.71, 0.29};
  double worst = 0.0;
  std::size_t worst_row = 0;
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    const double err = std::abs(r.full[i] - r.truth[i]);
    if (err > worst) {
      worst = err;
      worst_row = i;
    }
    out.require(std::abs(reported[i] - r.truth[i]) <= kTable1Tol + kDecimalTie,
                "reported value outside band at row " + std::to_string(i + 1));
  }
  out.require(r.full_report.converged, "full fit did not converge");
  out.require(run.seconds <= kTable1Seconds, "runtime " + fmt(run.seconds, 1) + " s");
  out.require(worst <= kTable1Tol, "worst |full - true| = " + fmt(worst) + " at '" + r.labels[worst_row] +
                                       "' (tol " + fmt(kTable1Tol, 2) + ")");
  if (out.pass) out.detail << "worst |full - true| = " << fmt(worst) << ", " << fmt(run.seconds, 1) << " s";
}

void criterion_censoring(Outcome& out) {
  const auto& r = table1_run().result;
  const double init_err = std::max(std::abs(r.censored[0] - 0.59375), std::abs(r.censored[1] - 0.40625));
  double worst = 0.0;
  for (std::size_t i = 2; i < r.truth.size(); ++i) worst = std::max(worst, std::abs(r.censored[i] - r.truth[i]));
  out.require(std::abs(r.censored_init_target[0] - 0.59375) <= 1e-12, "pi6 target is not [0.59375, 0.40625]");
  out.require(r.censored_report.converged, "censored fit did not converge");
  out.require(init_err <= kCensoredInitTol, "init " + column({r.censored[0], r.censored[1]}) + " vs pi6 " +
                                                "[0.594 0.406], err " + fmt(init_err) + " (tol " +
                                                fmt(kCensoredInitTol, 2) + ")");
  out.require(worst <= kTable1Tol, "worst transition/emission error " + fmt(worst) + " (tol " +
                                       fmt(kTable1Tol, 2) + ")");
  if (out.pass) out.detail << "init err " << fmt(init_err) << ", worst other " << fmt(worst);
}

// ---------------------------------------------------------------------------
// 3: forward recursion against path enumeration.

void criterion_brute_force(Outcome& out) {
  std::mt19937_64 rng(3);
  testing::Shape shape;  // S <= 3, T <= 4
  double worst = 0.0;
  int records = 0;
  for (int i = 0; i < kBruteForceInstances; ++i) {
    const testing::Instance inst = testing::random_instance(rng, shape);
    for (const auto& rec : inst.data.individuals) {
      const double lib = forward_loglik(rec, inst.spec, inst.params).log_marginal;
      const double oracle = testing::brute_force_loglik(rec, inst.spec, inst.params);
      // Relative error of the likelihood P, not of log P.
      worst = std::max(worst, std::abs(std::expm1(lib - oracle)));
      ++records;
    }
  }
  out.require(worst <= kBruteForceRelTol, "worst relative error " + fmt_sci(worst));
  out.detail << kBruteForceInstances << " instances, " << records << " records, worst rel err " << fmt_sci(worst);
}

// ---------------------------------------------------------------------------
// 4: analytic gradient with surplus feedback against central differences.

void criterion_gradient(Outcome& out) {
  std::mt19937_64 rng(4);
  testing::Shape shape;
  shape.min_classes = 2;
  shape.alpha_low = 0.1;
  double worst = 0.0;
  std::size_t components = 0;
  for (int i = 0; i < kGradientInstances; ++i) {
    const testing::Instance inst = testing::random_instance(rng, shape);
    const Eigen::VectorXd theta = to_free(inst.spec, inst.params);
    Eigen::VectorXd grad;
    free_loglik(inst.data, inst.spec, theta, &grad);
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Eigen::VectorXd up = theta, down = theta;
      up[k] += kGradientStep;
      down[k] -= kGradientStep;
      const double fd = (free_loglik(inst.data, inst.spec, up, nullptr) -
                         free_loglik(inst.data, inst.spec, down, nullptr)) / (2.0 * kGradientStep);
      // Relative to the component's magnitude, floored at 1 for near-zero components.
      const double rel = std::abs(grad[k] - fd) / std::max({1.0, std::abs(fd), std::abs(grad[k])});
      worst = std::max(worst, rel);
      ++components;
    }
  }
  out.require(worst <= kGradientRelTol, "worst relative error " + fmt_sci(worst));
  out.detail << kGradientInstances << " instances, " << components << " components, worst " << fmt_sci(worst);
}

// ---------------------------------------------------------------------------
// 5 and 6: EM fits.

ModelSpec two_class_spec(bool cs_with_zero_alpha) {
  Schema schema;
  schema.modes = {"a", "b", "c"};
  schema.attributes = {"time"};
  schema.covariates = {"z"};
  ClassSpec cls;
  cls.considers = {true, true, true};
  cls.uses_attribute = {true};
  std::map<std::string, double> fixed;
  if (cs_with_zero_alpha) {
    for (int r = 1; r <= 2; ++r) {
      for (int s = 1; s <= 2; ++s) fixed["alpha." + std::to_string(r) + "->" + std::to_string(s)] = 0.0;
    }
  }
  return ModelSpec(schema, {cls, cls}, {true}, {true}, cs_with_zero_alpha, fixed);
}

ParameterSet two_class_truth(const ModelSpec& spec) {
  ParameterSet p = ParameterSet::zeros(spec);
  p.tastes[0].asc = {0.0, 1.0, -0.5};
  p.tastes[0].coeffs = {-1.0};
  p.tastes[1].asc = {0.0, -1.0, 1.5};
  p.tastes[1].coeffs = {-0.3};
  p.init.tau(1, 0) = 0.3;
  p.init.tau(1, 1) = 0.5;
  p.trans.gamma[0](1, 0) = -1.5;
  p.trans.gamma[0](1, 1) = 0.4;
  p.trans.gamma[1](1, 0) = 1.2;
  p.trans.gamma[1](1, 1) = -0.3;
  return p;
}

bool monotone(const FitReport& r, double& worst_drop) {
  bool ok = true;
  for (std::size_t i = 1; i < r.ll_trace.size(); ++i) {
    const double drop = r.ll_trace[i - 1] - r.ll_trace[i];
    worst_drop = std::max(worst_drop, drop);
    if (drop > kMonotoneSlack) ok = false;
  }
  return ok;
}

void criterion_monotone(Outcome& out) {
  int fits = 0;
  double worst_drop = -std::numeric_limits<double>::infinity();
  // Structured data, random starts, plain and accelerated EM.
  const ModelSpec spec = two_class_spec(false);
  for (std::uint64_t d = 0; d < 3; ++d) {
    const PanelDataset data =
        generate_panel(testing::simple_config(spec, two_class_truth(spec), 300, 4, 2, 100 + d)).dataset;
    for (std::uint64_t s = 0; s < 3; ++s) {
      for (bool accel : {false, true}) {
        EmOptions opt;
        opt.accelerate = accel;
        opt.max_iter = 500;
        const FitResult fit = em_fit(data, spec, random_start(data, spec, start_seed(d, s)), opt);
        out.require(monotone(fit.report, worst_drop), "trace decreased in fit " + std::to_string(fits));
        ++fits;
      }
    }
  }
  // Random separable specs with random data.
  std::mt19937_64 rng(5);
  testing::Shape shape;
  shape.consumer_surplus = false;
  shape.n_people = 40;
  for (int i = 0; i < 12; ++i) {
    const testing::Instance inst = testing::random_instance(rng, shape);
    EmOptions opt;
    opt.max_iter = 300;
    opt.accelerate = i % 2 == 0;
    const FitResult fit = em_fit(inst.data, inst.spec, inst.params, opt);
    out.require(monotone(fit.report, worst_drop), "trace decreased in fit " + std::to_string(fits));
    ++fits;
  }
  // The two-state fits of criterion 1 when they were run in this process.
  if (g_table1) {
    for (const FitReport* r : {&g_table1->result.full_report, &g_table1->result.censored_report}) {
      out.require(monotone(*r, worst_drop), "two-state trace decreased");
      ++fits;
    }
  }
  out.detail << fits << " fits, largest step decrease " << fmt_sci(worst_drop);
}

void criterion_cross_estimator(Outcome& out) {
  const ModelSpec spec = two_class_spec(true);
  if (!spec.separable()) {
    out.require(false, "spec with alpha fixed to zero is not separable");
    return;
  }
  double worst = 0.0;
  for (std::uint64_t d = 0; d < 4; ++d) {
    const PanelDataset data =
        generate_panel(testing::simple_config(spec, two_class_truth(spec), 400, 4, 2, 200 + d)).dataset;
    const ParameterSet start = random_start(data, spec, start_seed(d, 0));
    EmOptions eo;
    eo.tol = 1e-10;
    const FitResult em = em_fit(data, spec, start, eo);
    GradientOptions go;
    go.grad_tol = 1e-6;
    const FitResult gr = gradient_fit(data, spec, start, go);
    const double gap = std::abs(em.report.log_likelihood - gr.report.log_likelihood);
    worst = std::max(worst, gap);
    out.require(em.report.converged && gr.report.converged, "a fit did not converge on dataset " + std::to_string(d));
    out.require(gap <= kCrossEstimatorTol, "dataset " + std::to_string(d) + ": |LL_em - LL_grad| = " + fmt_sci(gap));
  }
  if (out.pass) out.detail << "4 datasets, worst |LL_em - LL_grad| = " << fmt_sci(worst);
}

// ---------------------------------------------------------------------------
// 7: forecast against forward simulation; Chapman-Kolmogorov.

void criterion_forecast(Outcome& out) {
  const testing::Truth truth = testing::feedback_truth();
  const std::size_t T = 3, H = 3, S = 3;
  // Three independent panels, each held to the band on its own.
  double worst = 0.0;
  for (std::uint64_t seed : kForecastSeeds) {
    const testing::Oracle o = testing::simulate_ahead(truth.spec, truth.params, 5000, T, H, seed);
    const ForecastResult f = forecast(o.observed, truth.spec, truth.params, static_cast<int>(H), Scenario{});
    double w = 0.0;
    for (std::size_t h = 1; h <= H; ++h) {
      const Eigen::VectorXd sim = testing::latent_shares(o.sim, S, T - 1 + h);
      w = std::max(w, (f.class_shares[h] - sim).cwiseAbs().maxCoeff());
    }
    worst = std::max(worst, w);
    out.require(w <= kForecastTol, "seed " + std::to_string(seed) + ": worst |forecast - simulated| = " + fmt(w));
  }
  const testing::Oracle o = testing::simulate_ahead(truth.spec, truth.params, 5000, T, H, kForecastSeeds[0]);

  double ck = 0.0;
  Scenario richer;
  richer.covariate_transforms.push_back({0, TransformOp::Scale, 1.2, {}});
  for (const Scenario& sc : {Scenario{}, richer}) {
    const int h = 1, k = 2;
    const ForecastResult whole = forecast(o.observed, truth.spec, truth.params, h + k, sc);
    Eigen::MatrixXd start(static_cast<Eigen::Index>(whole.individual.size()), static_cast<Eigen::Index>(S));
    for (std::size_t n = 0; n < whole.individual.size(); ++n) {
      start.row(static_cast<Eigen::Index>(n)) = whole.individual[n].row(h);
    }
    const ForecastResult rest = forecast_from(o.observed, truth.spec, truth.params, start, k, sc, h);
    for (int j = 0; j <= k; ++j) {
      ck = std::max(ck, (rest.class_shares[j] - whole.class_shares[h + j]).cwiseAbs().maxCoeff());
    }
  }
  out.require(ck <= kChapmanKolmogorovTol, "Chapman-Kolmogorov gap " + fmt_sci(ck));
  if (out.pass) out.detail << "3 panels, worst share error " << fmt(worst) << ", composition gap " << fmt_sci(ck);
}

// ---------------------------------------------------------------------------
// 8: the published-coefficient fixture.

void criterion_fixture(Outcome& out) {
  const fs::path dir = fs::path(MODALITY_DATA_DIR) / "santiago_fixture";
  const Schema schema = load_schema(dir / "schema.json");
  const ModelSpec spec = load_model_spec(dir / "spec.json", schema);
  const ParameterSet params = load_params(dir / "params.json", spec);
  GenerativeConfig config = load_generative_config(dir / "simulate.json", 8);
  const PanelDataset data = generate_panel(config).dataset;

  std::size_t checked = 0;
  bool probs_ok = true, rows_ok = true;
  for (const auto& rec : data.individuals) {
    for (const auto& w : rec.waves) {
      for (const auto& sit : w.situations) {
        for (std::size_t s = 0; s < spec.n_classes(); ++s) {
          const auto p = class_choice_probs(sit, spec.class_spec(s), params.tastes[s]);
          double sum = 0.0;
          for (double x : p.values) {
            sum += x;
            probs_ok = probs_ok && x >= 0.0;
          }
          probs_ok = probs_ok && std::abs(sum - 1.0) <= kSimplexTol;
          ++checked;
        }
      }
      const Eigen::MatrixXd A = transition_matrix(w.covariates, class_consumer_surplus(w, spec, params), params.trans);
      for (Eigen::Index r = 0; r < A.rows(); ++r) rows_ok = rows_ok && testing::is_simplex(A.row(r).transpose(), kSimplexTol);
    }
  }
  out.require(probs_ok, "a choice probability vector is not a simplex");
  out.require(rows_ok, "a transition row is not a simplex");

  const ForecastResult base = forecast(data, spec, params, 3, Scenario{});
  for (const char* name : {"income_plus_10.json", "bus_time_minus_15.json"}) {
    const Scenario sc = load_scenario(dir / name, schema);
    const ForecastResult f = forecast(data, spec, params, 3, sc);
    const LccmComparison lccm = lccm_fit_and_forecast(data, 1, spec, params, 3, sc);
    bool ok = true;
    for (std::size_t h = 0; h <= 3; ++h) {
      ok = ok && testing::is_simplex(f.class_shares[h], kSimplexTol) && testing::is_simplex(f.mode_shares[h], kSimplexTol) &&
           testing::is_simplex(lccm.forecast.class_shares[h], kSimplexTol);
    }
    out.require(ok, std::string(name) + " produced a non-simplex share");
  }

  // Walking is in class 1's consideration set only and every origin loads
  // class 1's surplus with alpha > 0: shorter walk times must not lower the
  // class 1 share at the first future wave.
  bool loadings = true;
  for (std::size_t s = 1; s < spec.n_classes(); ++s) loadings = loadings && !spec.class_spec(s).considers[schema.mode_index("Walk")];
  for (Eigen::Index r = 0; r < 4; ++r) loadings = loadings && params.trans.alpha(r, 0) > 0.0;
  out.require(loadings, "fixture does not isolate walking in class 1");
  const ForecastResult walk = forecast(data, spec, params, 1, load_scenario(dir / "walk_time_minus_15.json", schema));
  const double delta = walk.class_shares[1][0] - base.class_shares[1][0];
  out.require(delta >= 0.0, "class 1 share fell by " + fmt_sci(-delta));
  if (out.pass) {
    out.detail << checked << " class probability vectors, both scenarios ran, class 1 share +" << fmt(delta, 5)
               << " under shorter walk times";
  }
}

struct Criterion {
  int id;
  const char* name;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "table1-recovery", criterion_table1},
      {2, "censoring-bias", criterion_censoring},
      {3, "likelihood-oracle", criterion_brute_force},
      {4, "gradient-correctness", criterion_gradient},
      {5, "em-monotonicity", criterion_monotone},
      {6, "estimator-cross-check", criterion_cross_estimator},
      {7, "forecast-oracle", criterion_forecast},
      {8, "fixture-scenarios", criterion_fixture},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  if (wanted.empty()) {
    for (const auto& c : all) wanted.push_back(c.id);
  }

  bool all_pass = true;
  for (const auto& c : all) {
    if (std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    Outcome out;
    try {
      c.run(out);
    } catch (const std::exception& e) {
      out.require(false, std::string("exception: ") + e.what());
    }
    all_pass = all_pass && out.pass;
    std::printf("%s criterion %d %s: %s\n", out.pass ? "PASS" : "FAIL", c.id, c.name, out.detail.str().c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
