#include "modality/simulation.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "modality/choice.hpp"
#include "modality/error.hpp"
#include "modality/hmm.hpp"
#include "modality/parallel.hpp"
#include "modality/random.hpp"

namespace modality {

using nlohmann::json;

Distribution distribution_from_json(const json& j) {
  Distribution d;
  if (j.is_number()) {
    d.a = j.get<double>();
    return d;
  }
  const auto kind = j.at("dist").get<std::string>();
  if (kind == "constant") {
    d.a = j.at("value").get<double>();
  } else if (kind == "uniform") {
    d.kind = Distribution::Kind::Uniform;
    d.a = j.at("low").get<double>();
    d.b = j.at("high").get<double>();
    if (!(d.b >= d.a)) throw ValidationError("uniform distribution needs high >= low");
  } else if (kind == "normal") {
    d.kind = Distribution::Kind::Normal;
    d.a = j.at("mean").get<double>();
    d.b = j.at("sd").get<double>();
    if (!(d.b >= 0.0)) throw ValidationError("normal distribution needs sd >= 0");
  } else if (kind == "bernoulli") {
    d.kind = Distribution::Kind::Bernoulli;
    d.a = j.at("p").get<double>();
    if (!(d.a >= 0.0 && d.a <= 1.0)) throw ValidationError("bernoulli p must lie in [0, 1]");
  } else if (kind == "poisson") {
    d.kind = Distribution::Kind::Poisson;
    d.a = j.at("mean").get<double>();
    if (!(d.a > 0.0)) throw ValidationError("poisson mean must be positive");
  } else {
    throw ValidationError("unknown distribution '" + kind + "'");
  }
  return d;
}

json to_json(const Distribution& d) {
  switch (d.kind) {
    case Distribution::Kind::Constant: return {{"dist", "constant"}, {"value", d.a}};
    case Distribution::Kind::Uniform: return {{"dist", "uniform"}, {"low", d.a}, {"high", d.b}};
    case Distribution::Kind::Normal: return {{"dist", "normal"}, {"mean", d.a}, {"sd", d.b}};
    case Distribution::Kind::Bernoulli: return {{"dist", "bernoulli"}, {"p", d.a}};
    case Distribution::Kind::Poisson: return {{"dist", "poisson"}, {"mean", d.a}};
  }
  return {};
}

namespace {

double draw(const Distribution& d, std::mt19937_64& rng) {
  switch (d.kind) {
    case Distribution::Kind::Constant: return d.a;
    case Distribution::Kind::Uniform: return std::uniform_real_distribution<double>(d.a, d.b)(rng);
    case Distribution::Kind::Normal: return d.b == 0.0 ? d.a : std::normal_distribution<double>(d.a, d.b)(rng);
    case Distribution::Kind::Bernoulli: return std::bernoulli_distribution(d.a)(rng) ? 1.0 : 0.0;
    case Distribution::Kind::Poisson: return static_cast<double>(std::poisson_distribution<int>(d.a)(rng));
  }
  return 0.0;
}

std::size_t draw_index(const double* p, std::size_t n, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  // Rounding left u above the cumulative sum; take the last positive entry.
  for (std::size_t i = n; i-- > 0;) {
    if (p[i] > 0.0) return i;
  }
  return n - 1;
}

json resolve(const json& j, const std::filesystem::path& base) {
  if (!j.is_string()) return j;
  const std::filesystem::path p = base / j.get<std::string>();
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    json out;
    in >> out;
    return out;
  } catch (const json::exception& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

std::size_t positive_count(const json& j, const char* key) {
  const auto v = j.at(key).get<long long>();
  if (v < 1) throw ValidationError(std::string(key) + " must be at least 1");
  return static_cast<std::size_t>(v);
}

ChoiceSituation draw_situation(const GenerativeConfig& c, int id, std::mt19937_64& rng) {
  const auto& sc = c.spec.schema();
  ChoiceSituation sit;
  sit.situation_id = id;
  for (std::size_t m = 0; m < sc.modes.size(); ++m) {
    Alternative alt;
    alt.mode = m;
    alt.available = c.availability[m] >= 1.0 || std::bernoulli_distribution(c.availability[m])(rng);
    alt.attributes.resize(sc.attributes.size());
    for (std::size_t a = 0; a < sc.attributes.size(); ++a) {
      const auto& g = c.attributes[a];
      const auto it = g.by_mode.find(m);
      alt.attributes[a] = draw(it == g.by_mode.end() ? g.base : it->second, rng);
    }
    sit.alternatives.push_back(std::move(alt));
  }
  // Every class needs a non-empty effective set; reopen its reference mode.
  for (const auto& cls : c.spec.classes()) {
    bool any = false;
    for (const auto& alt : sit.alternatives) any = any || (alt.available && cls.considers[alt.mode]);
    if (!any) sit.alternatives[cls.reference_mode].available = true;
  }
  return sit;
}

IndividualRecord simulate_person(const GenerativeConfig& c, std::size_t n, std::vector<std::size_t>& path) {
  std::mt19937_64 rng(substream_seed(c.seed, n, 0x51));
  const auto& spec = c.spec;
  const auto& params = c.true_params;
  IndividualRecord rec;
  rec.person_id = std::to_string(n + 1);
  std::vector<double> z(spec.schema().covariates.size());
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = draw(c.covariates[k].dist, rng);
  std::vector<ChoiceSituation> fixed_situations;
  if (c.repeat_situations) {
    for (std::size_t k = 0; k < c.situations_per_wave; ++k) {
      fixed_situations.push_back(draw_situation(c, static_cast<int>(k + 1), rng));
    }
  }
  path.clear();
  for (std::size_t t = 0; t < c.n_waves; ++t) {
    WaveObservation w;
    w.wave = static_cast<int>(t + 1);
    if (t > 0) {
      for (std::size_t k = 0; k < z.size(); ++k) {
        if (c.covariates[k].time_varying) z[k] = draw(c.covariates[k].dist, rng);
      }
    }
    w.covariates = z;
    if (c.repeat_situations) {
      w.situations = fixed_situations;
    } else {
      for (std::size_t k = 0; k < c.situations_per_wave; ++k) {
        w.situations.push_back(draw_situation(c, static_cast<int>(k + 1), rng));
      }
    }
    std::size_t s = 0;
    if (t == 0) {
      const Eigen::VectorXd pi = initialization_probs(z, params.init);
      s = draw_index(pi.data(), static_cast<std::size_t>(pi.size()), rng);
    } else {
      const Eigen::VectorXd cs = class_consumer_surplus(w, spec, params);
      const Eigen::MatrixXd A = transition_matrix(z, cs, params.trans);
      const Eigen::RowVectorXd row = A.row(static_cast<Eigen::Index>(path.back()));
      s = draw_index(row.data(), static_cast<std::size_t>(row.size()), rng);
    }
    path.push_back(s);
    for (auto& sit : w.situations) {
      const EffectiveUtilities p = class_choice_probs(sit, spec.class_spec(s), params.tastes[s]);
      sit.chosen = p.positions[draw_index(p.values.data(), p.values.size(), rng)];
    }
    rec.waves.push_back(std::move(w));
  }
  return rec;
}

}  // namespace

GenerativeConfig generative_config_from_json(const json& j, const std::filesystem::path& base_dir,
                                             std::uint64_t seed) {
  try {
    const Schema schema = schema_from_json(resolve(j.at("schema"), base_dir));
    ModelSpec spec = model_spec_from_json(resolve(j.at("spec"), base_dir), schema);
    ParameterSet params = params_from_json(spec, resolve(j.at("params"), base_dir));
    GenerativeConfig c{std::move(spec), std::move(params)};
    c.seed = seed;
    c.n_individuals = positive_count(j, "n_individuals");
    c.n_waves = positive_count(j, "n_waves");
    c.situations_per_wave = j.contains("situations_per_wave") ? positive_count(j, "situations_per_wave") : 1;
    c.repeat_situations = j.value("repeat_situations", false);
    c.covariates.assign(schema.covariates.size(), {});
    c.attributes.assign(schema.attributes.size(), {});
    c.availability.assign(schema.modes.size(), 1.0);
    if (j.contains("covariates")) {
      for (const auto& [name, g] : j.at("covariates").items()) {
        auto& cg = c.covariates[schema.covariate_index(name)];
        cg.dist = distribution_from_json(g);
        cg.time_varying = g.is_object() && g.value("time_varying", false);
      }
    }
    if (j.contains("attributes")) {
      for (const auto& [name, g] : j.at("attributes").items()) {
        auto& ag = c.attributes[schema.attribute_index(name)];
        if (g.is_number() || g.contains("dist")) ag.base = distribution_from_json(g);
        if (g.is_object() && g.contains("by_mode")) {
          for (const auto& [mode, dj] : g.at("by_mode").items()) {
            ag.by_mode[schema.mode_index(mode)] = distribution_from_json(dj);
          }
        }
      }
    }
    if (j.contains("availability")) {
      for (const auto& [mode, p] : j.at("availability").items()) {
        const double v = p.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("availability of " + mode + " must lie in [0, 1]");
        c.availability[schema.mode_index(mode)] = v;
      }
    }
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generative config: ") + e.what());
  }
}

GenerativeConfig load_generative_config(const std::filesystem::path& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return generative_config_from_json(j, path.parent_path(), seed);
}

SimulatedPanel generate_panel(const GenerativeConfig& config, unsigned threads) {
  if (config.n_individuals < 1 || config.n_waves < 1 || config.situations_per_wave < 1) {
    throw ValidationError("generative config counts must be at least 1");
  }
  SimulatedPanel out;
  out.dataset.schema = config.spec.schema();
  out.dataset.individuals.resize(config.n_individuals);
  out.latent.resize(config.n_individuals);
  parallel_for(config.n_individuals, threads, [&](std::size_t n) {
    out.dataset.individuals[n] = simulate_person(config, n, out.latent[n]);
  });
  return out;
}

void write_latent_truth(const SimulatedPanel& sim, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "person_id,wave,class\n";
  for (std::size_t n = 0; n < sim.latent.size(); ++n) {
    for (std::size_t t = 0; t < sim.latent[n].size(); ++t) {
      out << sim.dataset.individuals[n].person_id << ',' << t + 1 << ',' << sim.latent[n][t] + 1 << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

namespace {

ModelSpec two_state_spec() {
  Schema schema;
  schema.modes = {"1", "2"};
  ClassSpec cls;
  cls.considers = {true, true};
  cls.reference_mode = 0;
  std::vector<ClassSpec> classes{cls, cls};
  classes[0].name = "state 1";
  classes[1].name = "state 2";
  return ModelSpec(schema, classes, {}, {}, false);
}

double logit(double p_alt, double p_ref) { return std::log(p_alt / p_ref); }

ChoiceSituation two_outcome_situation() {
  ChoiceSituation sit;
  sit.alternatives = {Alternative{0, true, {}}, Alternative{1, true, {}}};
  return sit;
}

}  // namespace

GenerativeConfig two_state_config(const TwoStateTruth& truth, std::size_t n_individuals, std::size_t n_waves,
                                  std::uint64_t seed) {
  ModelSpec spec = two_state_spec();
  ParameterSet p = ParameterSet::zeros(spec);
  p.tastes[0].asc[1] = logit(1.0 - truth.outcome1_class1, truth.outcome1_class1);
  p.tastes[1].asc[1] = logit(1.0 - truth.outcome1_class2, truth.outcome1_class2);
  p.init.tau(1, 0) = logit(1.0 - truth.init1, truth.init1);
  p.trans.gamma[0](1, 0) = logit(1.0 - truth.stay1, truth.stay1);
  p.trans.gamma[1](1, 0) = logit(truth.stay2, 1.0 - truth.stay2);
  GenerativeConfig c{std::move(spec), std::move(p)};
  c.n_individuals = n_individuals;
  c.n_waves = n_waves;
  c.situations_per_wave = 1;
  c.availability = {1.0, 1.0};
  c.seed = seed;
  return c;
}

const std::vector<std::string>& two_state_row_labels() {
  static const std::vector<std::string> labels{
      "Initialization Probability (class 1)",   "Initialization Probability (class 2)",
      "Transition Probability (class 1 -> class 1)", "Transition Probability (class 1 -> class 2)",
      "Transition Probability (class 2 -> class 1)", "Transition Probability (class 2 -> class 2)",
      "Probability (outcome 1 | class 1)",      "Probability (outcome 2 | class 1)",
      "Probability (outcome 1 | class 2)",      "Probability (outcome 2 | class 2)"};
  return labels;
}

std::vector<double> two_state_probabilities(const TwoStateTruth& t) {
  // Design values are short decimals; snap complements so 1 - 0.8 prints as 0.2.
  const auto c = [](double p) { return std::round((1.0 - p) * 1e12) / 1e12; };
  return {t.init1,           c(t.init1),  t.stay1,           c(t.stay1),
          c(t.stay2),        t.stay2,     t.outcome1_class1, c(t.outcome1_class1),
          t.outcome1_class2, c(t.outcome1_class2)};
}

std::vector<double> two_state_probabilities(const ModelSpec& spec, const ParameterSet& params) {
  if (spec.n_classes() != 2 || spec.schema().modes.size() != 2) {
    throw ValidationError("two-state probabilities need two classes and two outcomes");
  }
  const Eigen::VectorXd pi = initialization_probs({}, params.init);
  const Eigen::MatrixXd A = transition_matrix({}, Eigen::VectorXd::Zero(2), params.trans);
  const ChoiceSituation sit = two_outcome_situation();
  std::vector<double> out{pi[0], pi[1], A(0, 0), A(0, 1), A(1, 0), A(1, 1)};
  for (std::size_t s = 0; s < 2; ++s) {
    const EffectiveUtilities p = class_choice_probs(sit, spec.class_spec(s), params.tastes[s]);
    out.push_back(p.values[0]);
    out.push_back(p.values[1]);
  }
  return out;
}

ParameterSet align_two_state(const ModelSpec& spec, const ParameterSet& fitted, const std::vector<double>& reference) {
  ParameterSet best = fitted;
  double best_d = std::numeric_limits<double>::infinity();
  for (const std::vector<std::size_t>& perm : {std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{1, 0}}) {
    ParameterSet cand = permute_classes(spec, fitted, perm);
    const auto probs = two_state_probabilities(spec, cand);
    double d = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) d += (probs[i] - reference[i]) * (probs[i] - reference[i]);
    if (d < best_d) {
      best_d = d;
      best = std::move(cand);
    }
  }
  return best;
}

Table1Result table1_experiment(std::uint64_t seed, const Table1Options& options) {
  const TwoStateTruth truth;
  const GenerativeConfig config = two_state_config(truth, options.n_individuals, options.n_waves, seed);
  const SimulatedPanel sim = generate_panel(config, options.em.threads);
  const ModelSpec& spec = config.spec;

  Table1Result r;
  r.seed = seed;
  r.labels = two_state_row_labels();
  r.truth = two_state_probabilities(truth);

  const Fitter em = [&](const ParameterSet& start) { return em_fit(sim.dataset, spec, start, options.em); };
  MultiStartResult full = multi_start(sim.dataset, spec, options.starts, substream_seed(seed, 1, 0x71), em);
  r.full = two_state_probabilities(spec, align_two_state(spec, full.best.params, r.truth));
  r.full_report = full.best.report;
  r.full_runs = full.runs;

  const PanelDataset censored = censor_left(sim.dataset, options.first_kept_wave);
  const Fitter em_censored = [&](const ParameterSet& start) { return em_fit(censored, spec, start, options.em); };
  MultiStartResult cens = multi_start(censored, spec, options.starts, substream_seed(seed, 2, 0x71), em_censored);
  // Transitions and emissions are unbiased under censoring, so they decide
  // the labels; the initialization cells are the biased ones.
  std::vector<double> reference = r.truth;
  const Eigen::Matrix2d omega{{truth.stay1, 1.0 - truth.stay1}, {1.0 - truth.stay2, truth.stay2}};
  std::vector<Eigen::MatrixXd> chain(static_cast<std::size_t>(options.first_kept_wave - 1), omega);
  const Eigen::RowVectorXd target =
      propagate_marginals(Eigen::RowVector2d(truth.init1, 1.0 - truth.init1), chain);
  r.censored_init_target = {target[0], target[1]};
  reference[0] = target[0];
  reference[1] = target[1];
  r.censored = two_state_probabilities(spec, align_two_state(spec, cens.best.params, reference));
  r.censored_report = cens.best.report;
  r.censored_runs = cens.runs;
  return r;
}

void write_table1_csv(const Table1Result& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variable,true,full,censored\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    out << '"' << r.labels[i] << "\"," << format_double(r.truth[i]) << ',' << format_double(r.full[i]) << ','
        << format_double(r.censored[i]) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

json table1_provenance(const Table1Result& r, const Table1Options& o) {
  return {{"seed", r.seed},
          {"n_individuals", o.n_individuals},
          {"n_waves", o.n_waves},
          {"first_kept_wave", o.first_kept_wave},
          {"situations_per_wave", 1},
          {"starts", o.starts},
          {"em_tolerance", o.em.tol},
          {"em_max_iterations", o.em.max_iter},
          {"newton_gradient_tolerance", o.em.newton.grad_tol},
          {"censored_initialization_target", r.censored_init_target},
          {"full", {{"log_likelihood", r.full_report.log_likelihood},
                    {"iterations", r.full_report.iterations},
                    {"converged", r.full_report.converged},
                    {"starts", to_json(r.full_runs)}}},
          {"censored", {{"log_likelihood", r.censored_report.log_likelihood},
                        {"iterations", r.censored_report.iterations},
                        {"converged", r.censored_report.converged},
                        {"starts", to_json(r.censored_runs)}}}};
}

}  // namespace modality
