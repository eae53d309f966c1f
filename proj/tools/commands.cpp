#include "commands.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "manifest.hpp"
#include "modality/error.hpp"
#include "modality/estimation.hpp"
#include "modality/forecast.hpp"
#include "modality/hmm.hpp"
#include "modality/panel.hpp"
#include "modality/simulation.hpp"

namespace modality::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string out;
};

struct DataArgs {
  std::string choices;
  std::string covariates;
  std::string schema;

  void attach(CLI::App* app) {
    app->add_option("--choices", choices, "long-format choices CSV")->required();
    app->add_option("--covariates", covariates, "covariates CSV")->required();
    app->add_option("--schema", schema, "schema JSON")->required();
  }
  PanelDataset load(RunManifest& m) const {
    m.add_input("choices", choices);
    m.add_input("covariates", covariates);
    m.add_input("schema", schema);
    return load_panel(choices, covariates, fs::path(schema));
  }
};

fs::path prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_trace(const fs::path& path, const std::vector<double>& trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,log_likelihood\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << format_double(trace[i]) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::optional<std::size_t> n_individuals;
};

int cmd_simulate(const Globals& g, const SimulateArgs& a) {
  RunManifest m("simulate", g.seed);
  m.add_input("config", a.config);
  GenerativeConfig config = load_generative_config(a.config, g.seed);
  if (a.n_individuals) {
    if (*a.n_individuals < 1) throw ValidationError("--n-individuals must be at least 1");
    config.n_individuals = *a.n_individuals;
  }
  m.set_option("n_individuals", config.n_individuals);
  m.set_option("n_waves", config.n_waves);
  m.set_option("situations_per_wave", config.situations_per_wave);
  m.set_option("threads", g.threads);
  const SimulatedPanel sim = generate_panel(config, g.threads);
  const fs::path out = prepare_out(g.out);
  write_panel(sim.dataset, out / "choices.csv", out / "covariates.csv");
  write_schema(sim.dataset.schema, out / "schema.json");
  write_latent_truth(sim, out / "latent_truth.csv");
  for (const char* f : {"choices.csv", "covariates.csv", "schema.json", "latent_truth.csv"}) m.add_output(f);
  m.write(out);
  return kOk;
}

// ---------------------------------------------------------------------------

struct EstimateArgs {
  DataArgs data;
  std::string spec;
  std::string method = "auto";
  std::size_t starts = 5;
  std::string start;
  std::optional<int> max_iter;
  std::optional<double> tol;
  bool se = false;
  bool verify_gradient = false;
};

int cmd_estimate(const Globals& g, const EstimateArgs& a) {
  RunManifest m("estimate", g.seed);
  const PanelDataset data = a.data.load(m);
  m.add_input("spec", a.spec);
  const ModelSpec spec = load_model_spec(a.spec, data.schema);
  std::string method = a.method;
  if (method == "auto") method = spec.separable() ? "em" : "gradient";
  if (method == "em" && !spec.separable()) {
    throw ValidationError(
        "method em cannot fit this spec: consumer surplus enters the transition model (free or nonzero alpha), "
        "which couples the class taste parameters with the transitions so the M-step no longer separates; "
        "use --method gradient");
  }

  EmOptions em;
  em.threads = g.threads;
  if (a.max_iter) em.max_iter = *a.max_iter;
  if (a.tol) em.tol = *a.tol;
  GradientOptions go;
  go.threads = g.threads;
  go.verify_gradient = a.verify_gradient;
  if (a.max_iter) go.max_iter = *a.max_iter;
  if (a.tol) go.grad_tol = *a.tol;
  const Fitter fitter = [&](const ParameterSet& start) {
    return method == "em" ? em_fit(data, spec, start, em) : gradient_fit(data, spec, start, go);
  };

  m.set_option("method", method);
  m.set_option("threads", g.threads);
  m.set_option("tolerance", method == "em" ? em.tol : go.grad_tol);
  m.set_option("max_iterations", method == "em" ? em.max_iter : go.max_iter);
  m.set_option("standard_errors", a.se);

  FitResult best;
  json starts_json;
  std::size_t best_index = 0;
  if (!a.start.empty()) {
    m.add_input("start", a.start);
    m.set_option("starts", 1);
    best = fitter(load_params(a.start, spec));
  } else {
    m.set_option("starts", a.starts);
    MultiStartResult ms = multi_start(data, spec, a.starts, g.seed, fitter);
    best = std::move(ms.best);
    best_index = ms.best_index;
    starts_json = to_json(ms.runs);
  }

  std::optional<Eigen::VectorXd> se;
  if (a.se) se = standard_errors(data, spec, best.params, g.threads);

  const fs::path out = prepare_out(g.out);
  write_json(out / "params.json", params_to_json(spec, best.params, se));
  json report = to_json(best.report);
  report["spec"] = to_json(spec);
  if (!starts_json.is_null()) {
    report["best_start"] = best_index;
    report["starts"] = starts_json;
  }
  write_json(out / "fit_report.json", report);
  write_trace(out / "ll_trace.csv", best.report.ll_trace);
  for (const char* f : {"params.json", "fit_report.json", "ll_trace.csv"}) m.add_output(f);
  m.write(out);
  for (const auto& w : best.report.warnings) std::cerr << "warning: " << w << '\n';
  if (!best.report.converged) {
    std::cerr << "estimation did not converge: " << best.report.message << '\n';
    return kNotConverged;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ForecastArgs {
  DataArgs data;
  std::string spec;
  std::string params;
  std::string scenario;
  int horizon = 3;
  std::optional<int> lccm_wave;
};

int cmd_forecast(const Globals& g, const ForecastArgs& a) {
  RunManifest m("forecast", g.seed);
  const PanelDataset data = a.data.load(m);
  m.add_input("spec", a.spec);
  const ModelSpec spec = load_model_spec(a.spec, data.schema);
  m.add_input("params", a.params);
  const ParameterSet params = load_params(a.params, spec);
  Scenario scenario;
  if (!a.scenario.empty()) {
    m.add_input("scenario", a.scenario);
    scenario = load_scenario(a.scenario, data.schema);
  }
  if (a.horizon < 0) throw ValidationError("--horizon must be nonnegative");
  m.set_option("horizon", a.horizon);
  m.set_option("scenario", scenario.name);
  m.set_option("threads", g.threads);

  const ForecastResult fc = forecast(data, spec, params, a.horizon, scenario, g.threads);
  const auto observed = estimated_class_shares(data, spec, params, g.threads);
  const fs::path out = prepare_out(g.out);
  const int last = data.max_waves();
  write_class_shares_csv(fc.class_shares, last, out / "class_shares.csv");
  write_mode_shares_csv(fc.mode_shares, last, data.schema, out / "mode_shares.csv");
  write_class_shares_csv(observed, 1, out / "observed_class_shares.csv");
  for (const char* f : {"class_shares.csv", "mode_shares.csv", "observed_class_shares.csv"}) m.add_output(f);
  if (spec.n_classes() > 0 && last > 1) {
    write_transition_csv(average_transition_probs(data, spec, params, g.threads), out / "observed_transition.csv");
    m.add_output("observed_transition.csv");
  }
  if (fc.average_transition.size() > 0) {
    write_transition_csv(fc.average_transition, out / "forecast_transition.csv");
    m.add_output("forecast_transition.csv");
  }
  if (a.lccm_wave) {
    m.set_option("lccm_wave", *a.lccm_wave);
    const LccmComparison lc = lccm_fit_and_forecast(data, *a.lccm_wave, spec, params, a.horizon, scenario, g.threads);
    write_class_shares_csv(lc.forecast.class_shares, last, out / "lccm_class_shares.csv");
    write_mode_shares_csv(lc.forecast.mode_shares, last, data.schema, out / "lccm_mode_shares.csv");
    json delta = json::array();
    for (Eigen::Index s = 0; s < lc.fit.model.delta.rows(); ++s) {
      delta.push_back(std::vector<double>(lc.fit.model.delta.row(s).begin(), lc.fit.model.delta.row(s).end()));
    }
    write_json(out / "lccm_fit.json",
               {{"fit_wave", *a.lccm_wave},
                {"log_likelihood", lc.fit.log_likelihood},
                {"converged", lc.fit.converged},
                {"iterations", lc.fit.iterations},
                {"message", lc.fit.message},
                {"membership_coefficients", delta},
                {"consumer_surplus_loadings",
                 std::vector<double>(lc.fit.model.lambda.begin(), lc.fit.model.lambda.end())}});
    for (const char* f : {"lccm_class_shares.csv", "lccm_mode_shares.csv", "lccm_fit.json"}) m.add_output(f);
  }
  m.write(out);
  return kOk;
}

// ---------------------------------------------------------------------------

struct MetricsArgs {
  std::optional<double> ll;
  std::optional<std::size_t> k;
  std::optional<std::size_t> n;
  std::optional<double> null_ll;
  std::string choices, covariates, schema;
  std::vector<std::string> specs;
  std::vector<std::string> params;
};

json metrics_json(double ll, std::size_t k, std::size_t n, std::optional<double> null_ll) {
  // Without a null log-likelihood only the information criteria are defined.
  const FitMetrics fm = fit_metrics(ll, k, n, null_ll.value_or(-1.0));
  json j{{"log_likelihood", ll}, {"n_parameters", k}, {"n_observations", n}, {"aic", fm.aic}, {"bic", fm.bic}};
  if (null_ll) {
    j["null_log_likelihood"] = *null_ll;
    j["rho_bar_squared"] = fm.rho_bar_squared;
  }
  return j;
}

int cmd_metrics(const Globals& g, const MetricsArgs& a) {
  RunManifest m("metrics", g.seed);
  const fs::path out_dir = g.out;
  json result;
  if (a.ll) {
    if (!a.k || !a.n) throw ValidationError("--ll needs --k and --n");
    if (!a.specs.empty() || !a.params.empty()) throw ValidationError("give either --ll/--k/--n or fitted models");
    m.set_option("log_likelihood", *a.ll);
    m.set_option("n_parameters", *a.k);
    m.set_option("n_observations", *a.n);
    if (a.null_ll) m.set_option("null_log_likelihood", *a.null_ll);
    result = metrics_json(*a.ll, *a.k, *a.n, a.null_ll);
    prepare_out(g.out);
    std::ofstream csv(out_dir / "metrics.csv");
    if (!csv) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
    csv << "log_likelihood,n_parameters,n_observations,null_log_likelihood,rho_bar_squared,aic,bic\n";
    csv << format_double(*a.ll) << ',' << *a.k << ',' << *a.n << ',';
    if (a.null_ll) csv << format_double(*a.null_ll) << ',' << format_double(result["rho_bar_squared"].get<double>());
    else csv << ',';
    csv << ',' << format_double(result["aic"].get<double>()) << ',' << format_double(result["bic"].get<double>()) << '\n';
    if (!csv) throw IoError("failed writing metrics.csv");
    m.add_output("metrics.csv");
  } else {
    if (a.choices.empty() || a.covariates.empty() || a.schema.empty()) {
      throw ValidationError("metrics needs --ll/--k/--n or --choices, --covariates and --schema");
    }
    if (a.specs.empty() || a.specs.size() != a.params.size()) {
      throw ValidationError("give one --spec per --params (at least one pair)");
    }
    DataArgs data{a.choices, a.covariates, a.schema};
    const PanelDataset d = data.load(m);
    const double null_ll = null_loglik(d);
    result = json::array();
    prepare_out(g.out);
    std::ofstream csv(out_dir / "metrics.csv");
    if (!csv) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
    csv << "model,n_classes,log_likelihood,n_parameters,n_observations,null_log_likelihood,rho_bar_squared,aic,bic\n";
    for (std::size_t i = 0; i < a.specs.size(); ++i) {
      m.add_input("spec", a.specs[i]);
      m.add_input("params", a.params[i]);
      const ModelSpec spec = load_model_spec(a.specs[i], d.schema);
      const ParameterSet params = load_params(a.params[i], spec);
      const double ll = panel_loglik(d, spec, params, g.threads);
      json j = metrics_json(ll, spec.n_free(), d.n_situations(), null_ll);
      j["model"] = a.params[i];
      j["n_classes"] = spec.n_classes();
      csv << '"' << a.params[i] << "\"," << spec.n_classes() << ',' << format_double(ll) << ',' << spec.n_free() << ','
          << d.n_situations() << ',' << format_double(null_ll) << ',' << format_double(j["rho_bar_squared"].get<double>())
          << ',' << format_double(j["aic"].get<double>()) << ',' << format_double(j["bic"].get<double>()) << '\n';
      result.push_back(std::move(j));
    }
    if (!csv) throw IoError("failed writing metrics.csv");
    m.add_output("metrics.csv");
    result = {{"null_model", "equal probability over each situation's available alternatives"}, {"models", result}};
  }
  write_json(out_dir / "metrics.json", result);
  m.add_output("metrics.json");
  m.write(out_dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct Table1Args {
  std::size_t n_individuals = 5000;
  std::size_t starts = 3;
};

int cmd_table1(const Globals& g, const Table1Args& a) {
  RunManifest m("table1", g.seed);
  Table1Options opt;
  if (a.n_individuals < 1 || a.starts < 1) throw ValidationError("--n-individuals and --starts must be at least 1");
  opt.n_individuals = a.n_individuals;
  opt.starts = a.starts;
  opt.em.threads = g.threads;
  m.set_option("n_individuals", opt.n_individuals);
  m.set_option("n_waves", opt.n_waves);
  m.set_option("first_kept_wave", opt.first_kept_wave);
  m.set_option("starts", opt.starts);
  m.set_option("threads", g.threads);
  const Table1Result r = table1_experiment(g.seed, opt);
  const fs::path out = prepare_out(g.out);
  write_table1_csv(r, out / "table1.csv");
  write_json(out / "table1.json", table1_provenance(r, opt));
  m.add_output("table1.csv");
  m.add_output("table1.json");
  m.write(out);
  if (!r.full_report.converged || !r.censored_report.converged) {
    std::cerr << "an EM fit did not converge\n";
    return kNotConverged;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct CensorArgs {
  DataArgs data;
  int first_kept_wave = 1;
};

int cmd_censor(const Globals& g, const CensorArgs& a) {
  RunManifest m("censor", g.seed);
  const PanelDataset d = a.data.load(m);
  m.set_option("first_kept_wave", a.first_kept_wave);
  const PanelDataset c = censor_left(d, a.first_kept_wave);
  const fs::path out = prepare_out(g.out);
  write_panel(c, out / "choices.csv", out / "covariates.csv");
  write_schema(c.schema, out / "schema.json");
  for (const char* f : {"choices.csv", "covariates.csv", "schema.json"}) m.add_output(f);
  m.write(out);
  return kOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Hidden Markov discrete-choice models for panel data"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "seed for every random draw (required)");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic panel from a generative config");
  c_sim->add_option("--config", sim.config, "generative config JSON")->required();
  c_sim->add_option("--n-individuals", sim.n_individuals, "override the number of individuals");

  EstimateArgs est;
  auto* c_est = app.add_subcommand("estimate", "fit a model by maximum likelihood");
  est.data.attach(c_est);
  c_est->add_option("--spec", est.spec, "model spec JSON")->required();
  c_est->add_option("--method", est.method, "em, gradient or auto")
      ->check(CLI::IsMember({"em", "gradient", "auto"}));
  c_est->add_option("--starts", est.starts, "random starts")->check(CLI::PositiveNumber);
  c_est->add_option("--start", est.start, "start from this params JSON instead of random starts");
  c_est->add_option("--max-iter", est.max_iter, "iteration limit");
  c_est->add_option("--tol", est.tol, "EM log-likelihood tolerance or gradient-norm tolerance");
  c_est->add_flag("--se", est.se, "compute standard errors");
  c_est->add_flag("--verify-gradient", est.verify_gradient, "check the analytic gradient at the start");

  ForecastArgs fc;
  auto* c_fc = app.add_subcommand("forecast", "forecast class and mode shares under a scenario");
  fc.data.attach(c_fc);
  c_fc->add_option("--spec", fc.spec, "model spec JSON")->required();
  c_fc->add_option("--params", fc.params, "fitted params JSON")->required();
  c_fc->add_option("--scenario", fc.scenario, "scenario JSON (baseline when absent)");
  c_fc->add_option("--horizon", fc.horizon, "future waves");
  c_fc->add_option("--lccm-wave", fc.lccm_wave, "also fit and forecast a static latent class model on this wave");

  MetricsArgs met;
  auto* c_met = app.add_subcommand("metrics", "fit metrics from numbers or fitted models");
  c_met->add_option("--ll", met.ll, "log-likelihood");
  c_met->add_option("--k", met.k, "number of free parameters");
  c_met->add_option("--n", met.n, "number of choice situations");
  c_met->add_option("--null-ll", met.null_ll, "null log-likelihood");
  c_met->add_option("--choices", met.choices, "long-format choices CSV");
  c_met->add_option("--covariates", met.covariates, "covariates CSV");
  c_met->add_option("--schema", met.schema, "schema JSON");
  c_met->add_option("--spec", met.specs, "model spec JSON (repeatable)");
  c_met->add_option("--params", met.params, "params JSON (repeatable, paired with --spec)");

  Table1Args t1;
  auto* c_t1 = app.add_subcommand("table1", "two-state Monte Carlo recovery and left-censoring experiment");
  c_t1->add_option("--n-individuals", t1.n_individuals, "individuals");
  c_t1->add_option("--starts", t1.starts, "EM starts per fit");

  CensorArgs cen;
  auto* c_cen = app.add_subcommand("censor", "drop the waves before a given wave and renumber");
  cen.data.attach(c_cen);
  c_cen->add_option("--first-kept-wave", cen.first_kept_wave, "first wave to keep")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  if (seed_opt->count() == 0) {
    std::cerr << "error: --seed is required\n";
    return kValidation;
  }
  if (g.out.empty()) {
    std::cerr << "error: --out is required\n";
    return kValidation;
  }

  try {
    if (*c_sim) return cmd_simulate(g, sim);
    if (*c_est) return cmd_estimate(g, est);
    if (*c_fc) return cmd_forecast(g, fc);
    if (*c_met) return cmd_metrics(g, met);
    if (*c_t1) return cmd_table1(g, t1);
    if (*c_cen) return cmd_censor(g, cen);
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace modality::cli
