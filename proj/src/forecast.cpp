#include "modality/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "modality/choice.hpp"
#include "modality/error.hpp"
#include "modality/hmm.hpp"
#include "modality/optimize.hpp"
#include "modality/parallel.hpp"

namespace modality {

using nlohmann::json;

namespace {

bool applies(const std::vector<int>& steps, int step) {
  return step >= 1 && (steps.empty() || std::find(steps.begin(), steps.end(), step) != steps.end());
}

double transform(double x, TransformOp op, double value) { return op == TransformOp::Scale ? x * value : x + value; }

TransformOp parse_op(const json& j, double value) {
  const auto op = j.value("op", std::string("scale"));
  if (op == "scale") {
    if (!(value > 0.0)) throw ValidationError("scale factors must be positive");
    return TransformOp::Scale;
  }
  if (op == "shift") return TransformOp::Shift;
  throw ValidationError("unknown transform op '" + op + "' (expected scale or shift)");
}

std::vector<int> parse_steps(const json& j) {
  std::vector<int> steps = j.value("waves", std::vector<int>{});
  for (int s : steps) {
    if (s < 1) throw ValidationError("scenario waves count future steps from 1");
  }
  return steps;
}

}  // namespace

bool Scenario::wave_invariant() const {
  return std::all_of(covariate_transforms.begin(), covariate_transforms.end(),
                     [](const CovariateTransform& t) { return t.steps.empty(); }) &&
         std::all_of(attribute_transforms.begin(), attribute_transforms.end(),
                     [](const AttributeTransform& t) { return t.steps.empty(); });
}

Scenario scenario_from_json(const json& j, const Schema& schema) {
  Scenario sc;
  try {
    sc.name = j.value("name", std::string("scenario"));
    for (const auto& t : j.value("covariate_transforms", json::array())) {
      CovariateTransform ct;
      ct.covariate = schema.covariate_index(t.at("covariate").get<std::string>());
      ct.value = t.at("value").get<double>();
      ct.op = parse_op(t, ct.value);
      ct.steps = parse_steps(t);
      sc.covariate_transforms.push_back(std::move(ct));
    }
    for (const auto& t : j.value("attribute_transforms", json::array())) {
      AttributeTransform at;
      at.attribute = schema.attribute_index(t.at("attribute").get<std::string>());
      for (const auto& m : t.value("alternatives", std::vector<std::string>{})) at.modes.push_back(schema.mode_index(m));
      at.value = t.at("value").get<double>();
      at.op = parse_op(t, at.value);
      at.steps = parse_steps(t);
      sc.attribute_transforms.push_back(std::move(at));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("scenario: ") + e.what());
  }
  return sc;
}

Scenario load_scenario(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return scenario_from_json(j, schema);
}

WaveObservation apply_scenario(const WaveObservation& wave, const Scenario& scenario, int step) {
  WaveObservation out = wave;
  for (const auto& t : scenario.covariate_transforms) {
    if (applies(t.steps, step)) out.covariates[t.covariate] = transform(out.covariates[t.covariate], t.op, t.value);
  }
  for (const auto& t : scenario.attribute_transforms) {
    if (!applies(t.steps, step)) continue;
    for (auto& sit : out.situations) {
      for (auto& alt : sit.alternatives) {
        if (t.modes.empty() || std::find(t.modes.begin(), t.modes.end(), alt.mode) != t.modes.end()) {
          alt.attributes[t.attribute] = transform(alt.attributes[t.attribute], t.op, t.value);
        }
      }
    }
  }
  return out;
}

namespace {

using ClassProbs = std::vector<std::vector<double>>;  // [class][mode], averaged over situations

// Expected mode shares per class in one environment; an empty vector marks a
// class with no alternative in some situation.
ClassProbs class_mode_probs(const WaveObservation& env, const ModelSpec& spec,
                            const std::vector<ClassTasteParams>& tastes) {
  const std::size_t M = spec.schema().modes.size();
  const double inv_k = 1.0 / static_cast<double>(env.situations.size());
  ClassProbs out(spec.n_classes());
  for (std::size_t s = 0; s < spec.n_classes(); ++s) {
    std::vector<double> probs(M, 0.0);
    bool ok = true;
    for (const auto& sit : env.situations) {
      const EffectiveUtilities p = class_choice_probs(sit, spec.class_spec(s), tastes[s]);
      if (p.empty()) {
        ok = false;
        break;
      }
      for (std::size_t k = 0; k < p.positions.size(); ++k) {
        probs[sit.alternatives[p.positions[k]].mode] += p.values[k] * inv_k;
      }
    }
    if (ok) out[s] = std::move(probs);
  }
  return out;
}

Eigen::VectorXd mix_modes(const Eigen::RowVectorXd& dist, const ClassProbs& probs, std::size_t n_modes,
                          const std::string& person_id, int step) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_modes));
  for (std::size_t s = 0; s < probs.size(); ++s) {
    const double w = dist[static_cast<Eigen::Index>(s)];
    if (w == 0.0) continue;
    if (probs[s].empty()) {
      throw ModelError("person '" + person_id + "', forecast step " + std::to_string(step) + ": class " +
                       std::to_string(s + 1) + " has no available alternative");
    }
    for (std::size_t m = 0; m < n_modes; ++m) out[static_cast<Eigen::Index>(m)] += w * probs[s][m];
  }
  return out;
}

struct PersonPath {
  Eigen::MatrixXd dist;                 // (H+1) x S
  Eigen::MatrixXd modes;                // (H+1) x M
  Eigen::MatrixXd trans_num;            // S x S, sum_h p_{h-1}(r) A_h(r, s)
  Eigen::VectorXd trans_den;            // S
};

ForecastResult reduce(std::vector<PersonPath>& paths, int horizon, Eigen::Index S, Eigen::Index M,
                      bool dynamic) {
  ForecastResult res;
  const auto H1 = static_cast<std::size_t>(horizon + 1);
  res.class_shares.assign(H1, Eigen::VectorXd::Zero(S));
  res.mode_shares.assign(H1, Eigen::VectorXd::Zero(M));
  Eigen::MatrixXd num = Eigen::MatrixXd::Zero(S, S);
  Eigen::VectorXd den = Eigen::VectorXd::Zero(S);
  const double inv_n = paths.empty() ? 0.0 : 1.0 / static_cast<double>(paths.size());
  for (auto& p : paths) {
    for (std::size_t h = 0; h < H1; ++h) {
      res.class_shares[h] += p.dist.row(static_cast<Eigen::Index>(h)).transpose() * inv_n;
      res.mode_shares[h] += p.modes.row(static_cast<Eigen::Index>(h)).transpose() * inv_n;
    }
    if (dynamic && horizon > 0) {
      num += p.trans_num;
      den += p.trans_den;
    }
    res.individual.push_back(std::move(p.dist));
  }
  if (dynamic && horizon > 0) {
    res.average_transition = num;
    for (Eigen::Index r = 0; r < S; ++r) {
      if (den[r] > 0.0) res.average_transition.row(r) /= den[r];
      else res.average_transition.row(r).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return res;
}

}  // namespace

ForecastResult forecast_from(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                             const Eigen::MatrixXd& start, int horizon, const Scenario& scenario, int step_offset,
                             unsigned threads) {
  if (horizon < 0) throw ValidationError("forecast horizon must be nonnegative");
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  const std::size_t M = spec.schema().modes.size();
  if (start.rows() != static_cast<Eigen::Index>(dataset.individuals.size()) || start.cols() != S) {
    throw ValidationError("start distributions must have one row per person and one column per class");
  }
  std::vector<PersonPath> paths(dataset.individuals.size());
  parallel_for(dataset.individuals.size(), threads, [&](std::size_t n) {
    const auto& rec = dataset.individuals[n];
    const WaveObservation& last = rec.waves.back();
    PersonPath& p = paths[n];
    p.dist.resize(horizon + 1, S);
    p.modes.resize(horizon + 1, static_cast<Eigen::Index>(M));
    p.trans_num = Eigen::MatrixXd::Zero(S, S);
    p.trans_den = Eigen::VectorXd::Zero(S);
    Eigen::RowVectorXd dist = start.row(static_cast<Eigen::Index>(n));
    for (int h = 0; h <= horizon; ++h) {
      const int step = step_offset + h;
      const WaveObservation env = step > 0 ? apply_scenario(last, scenario, step) : last;
      if (h > 0) {
        const Eigen::VectorXd cs = class_consumer_surplus(env, spec, params);
        const Eigen::MatrixXd A = transition_matrix(env.covariates, cs, params.trans);
        p.trans_num += dist.transpose().asDiagonal() * A;
        p.trans_den += dist.transpose();
        dist = dist * A;
      }
      p.dist.row(h) = dist;
      p.modes.row(h) = mix_modes(dist, class_mode_probs(env, spec, params.tastes), M, rec.person_id, step).transpose();
    }
  });
  return reduce(paths, horizon, S, static_cast<Eigen::Index>(M), true);
}

ForecastResult forecast(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params, int horizon,
                        const Scenario& scenario, unsigned threads) {
  if (horizon < 0) throw ValidationError("forecast horizon must be nonnegative");
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  Eigen::MatrixXd start(static_cast<Eigen::Index>(dataset.individuals.size()), S);
  parallel_for(dataset.individuals.size(), threads, [&](std::size_t n) {
    const auto& rec = dataset.individuals[n];
    const ForwardResult fw = forward_loglik(rec, spec, params);
    start.row(static_cast<Eigen::Index>(n)) = fw.filtered.row(fw.filtered.rows() - 1);
  });
  return forecast_from(dataset, spec, params, start, horizon, scenario, 0, threads);
}

std::vector<Eigen::VectorXd> estimated_class_shares(const PanelDataset& dataset, const ModelSpec& spec,
                                                    const ParameterSet& params, unsigned threads) {
  const std::size_t N = dataset.individuals.size();
  std::vector<StatePosterior> post(N);
  parallel_for(N, threads, [&](std::size_t n) { post[n] = smoothed_posteriors(dataset.individuals[n], spec, params); });
  const auto T = static_cast<std::size_t>(std::max(0, dataset.max_waves()));
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  std::vector<Eigen::VectorXd> shares(T, Eigen::VectorXd::Zero(S));
  std::vector<double> counts(T, 0.0);
  for (const auto& p : post) {
    for (Eigen::Index t = 0; t < p.smoothed.rows(); ++t) {
      shares[static_cast<std::size_t>(t)] += p.smoothed.row(t).transpose();
      counts[static_cast<std::size_t>(t)] += 1.0;
    }
  }
  for (std::size_t t = 0; t < T; ++t) shares[t] /= counts[t];
  return shares;
}

Eigen::MatrixXd average_transition_probs(const PanelDataset& dataset, const ModelSpec& spec,
                                         const ParameterSet& params, unsigned threads) {
  const std::size_t N = dataset.individuals.size();
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  std::vector<Eigen::MatrixXd> num(N, Eigen::MatrixXd::Zero(S, S));
  std::vector<Eigen::VectorXd> den(N, Eigen::VectorXd::Zero(S));
  parallel_for(N, threads, [&](std::size_t n) {
    const auto& rec = dataset.individuals[n];
    const IndividualTerms terms = compute_terms(rec, spec, params);
    const StatePosterior post = posterior_from_terms(terms, rec.person_id);
    for (std::size_t t = 1; t < rec.waves.size(); ++t) {
      const Eigen::VectorXd w = post.smoothed.row(static_cast<Eigen::Index>(t - 1)).transpose();
      num[n] += w.asDiagonal() * Eigen::MatrixXd(terms.log_trans[t].array().exp());
      den[n] += w;
    }
  });
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(S, S);
  Eigen::VectorXd weight = Eigen::VectorXd::Zero(S);
  for (std::size_t n = 0; n < N; ++n) {
    total += num[n];
    weight += den[n];
  }
  for (Eigen::Index r = 0; r < S; ++r) {
    if (weight[r] > 0.0) total.row(r) /= weight[r];
    else total.row(r).setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return total;
}

// ---------------------------------------------------------------------------
// Static latent class model

namespace {

Eigen::VectorXd lccm_cs(const WaveObservation& wave, const ModelSpec& spec, const std::vector<ClassTasteParams>& tastes) {
  Eigen::VectorXd cs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.n_classes()));
  if (!spec.consumer_surplus()) return cs;
  for (std::size_t s = 0; s < spec.n_classes(); ++s) {
    cs[static_cast<Eigen::Index>(s)] = consumer_surplus(wave, spec.class_spec(s), tastes[s]);
  }
  return cs;
}

Eigen::VectorXd lccm_design(const WaveObservation& wave) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(wave.covariates.size() + 1));
  x[0] = 1.0;
  for (std::size_t k = 0; k < wave.covariates.size(); ++k) x[static_cast<Eigen::Index>(k + 1)] = wave.covariates[k];
  return x;
}

Eigen::VectorXd lccm_log_membership(const Eigen::VectorXd& x, const Eigen::VectorXd& cs, const LccmModel& m) {
  Eigen::VectorXd eta = m.delta * x + m.lambda.cwiseProduct(cs);
  eta.array() -= log_sum_exp(eta.data(), static_cast<std::size_t>(eta.size()));
  return eta;
}

// Free coordinates: delta rows 1..S-1 over the constant and the selected
// covariates, then softplus pre-images of lambda when consumer surplus is on.
struct LccmLayout {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> delta_cells;
  bool cs = false;
  Eigen::Index S = 0;

  LccmLayout(const ModelSpec& spec) : cs(spec.consumer_surplus()), S(static_cast<Eigen::Index>(spec.n_classes())) {
    for (Eigen::Index s = 1; s < S; ++s) {
      delta_cells.emplace_back(s, 0);
      for (std::size_t k = 0; k < spec.init_covariates().size(); ++k) {
        if (spec.init_covariates()[k]) delta_cells.emplace_back(s, static_cast<Eigen::Index>(k + 1));
      }
    }
  }
  Eigen::Index size() const { return static_cast<Eigen::Index>(delta_cells.size()) + (cs ? S : 0); }

  void unpack(const Eigen::VectorXd& theta, LccmModel& m) const {
    m.delta.setZero();
    m.lambda.setZero();
    Eigen::Index i = 0;
    for (const auto& [r, c] : delta_cells) m.delta(r, c) = theta[i++];
    if (cs) {
      for (Eigen::Index s = 0; s < S; ++s) m.lambda[s] = softplus(theta[i++]);
    }
  }
};

}  // namespace

Eigen::VectorXd lccm_membership(const WaveObservation& wave, const ModelSpec& spec, const LccmModel& model) {
  return lccm_log_membership(lccm_design(wave), lccm_cs(wave, spec, model.tastes), model).array().exp();
}

PanelDataset single_wave(const PanelDataset& dataset, int wave) {
  PanelDataset out;
  out.schema = dataset.schema;
  for (const auto& rec : dataset.individuals) {
    for (const auto& w : rec.waves) {
      if (w.wave != wave) continue;
      IndividualRecord r{rec.person_id, {w}};
      r.waves[0].wave = 1;
      out.individuals.push_back(std::move(r));
    }
  }
  if (out.individuals.empty()) throw ValidationError("no person has wave " + std::to_string(wave));
  return out;
}

LccmFit lccm_fit(const PanelDataset& one_wave, const ModelSpec& spec, const std::vector<ClassTasteParams>& tastes) {
  const LccmLayout layout(spec);
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  const auto C = static_cast<Eigen::Index>(spec.schema().covariates.size() + 1);
  const std::size_t N = one_wave.individuals.size();
  std::vector<Eigen::VectorXd> x(N), cs(N), emis(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto& rec = one_wave.individuals[n];
    if (rec.waves.size() != 1) throw ValidationError("the static model is fitted on one wave per person");
    const auto& w = rec.waves[0];
    x[n] = lccm_design(w);
    cs[n] = lccm_cs(w, spec, tastes);
    emis[n].resize(S);
    for (Eigen::Index s = 0; s < S; ++s) {
      emis[n][s] = class_emission_logprob(w, spec.class_spec(static_cast<std::size_t>(s)), tastes[static_cast<std::size_t>(s)]);
    }
  }
  LccmModel model{tastes, Eigen::MatrixXd::Zero(S, C), Eigen::VectorXd::Zero(S)};

  const Objective objective = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    LccmModel m = model;
    layout.unpack(theta, m);
    Eigen::MatrixXd gd = Eigen::MatrixXd::Zero(S, C);
    Eigen::VectorXd gl = Eigen::VectorXd::Zero(S);
    double ll = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const Eigen::VectorXd logpi = lccm_log_membership(x[n], cs[n], m);
      Eigen::VectorXd joint = logpi + emis[n];
      const double l = log_sum_exp(joint.data(), static_cast<std::size_t>(S));
      if (!std::isfinite(l)) return -std::numeric_limits<double>::infinity();
      ll += l;
      if (!grad) continue;
      const Eigen::VectorXd d = (joint.array() - l).exp().matrix() - logpi.array().exp().matrix();
      gd += d * x[n].transpose();
      gl += d.cwiseProduct(cs[n]);
    }
    if (grad) {
      grad->resize(layout.size());
      Eigen::Index i = 0;
      for (const auto& [r, c] : layout.delta_cells) (*grad)[i++] = gd(r, c);
      if (layout.cs) {
        for (Eigen::Index s = 0; s < S; ++s, ++i) (*grad)[i] = gl[s] / (1.0 + std::exp(-theta[i]));
      }
    }
    return ll;
  };

  Eigen::VectorXd theta0 = Eigen::VectorXd::Zero(layout.size());
  if (layout.cs) theta0.tail(S).setConstant(softplus_inverse(0.1));
  BfgsResult br = maximize_bfgs(objective, theta0, {});
  LccmFit fit;
  fit.model = model;
  layout.unpack(br.x, fit.model);
  fit.log_likelihood = br.value;
  fit.converged = br.converged;
  fit.iterations = br.iterations;
  fit.message = br.converged ? "gradient norm below tolerance" : br.message;
  return fit;
}

ForecastResult lccm_forecast(const PanelDataset& dataset, const ModelSpec& spec, const LccmModel& model, int horizon,
                             const Scenario& scenario, unsigned threads) {
  if (horizon < 0) throw ValidationError("forecast horizon must be nonnegative");
  const auto S = static_cast<Eigen::Index>(spec.n_classes());
  const std::size_t M = spec.schema().modes.size();
  std::vector<PersonPath> paths(dataset.individuals.size());
  parallel_for(dataset.individuals.size(), threads, [&](std::size_t n) {
    const auto& rec = dataset.individuals[n];
    PersonPath& p = paths[n];
    p.dist.resize(horizon + 1, S);
    p.modes.resize(horizon + 1, static_cast<Eigen::Index>(M));
    for (int h = 0; h <= horizon; ++h) {
      const WaveObservation env = h > 0 ? apply_scenario(rec.waves.back(), scenario, h) : rec.waves.back();
      const Eigen::RowVectorXd dist = lccm_membership(env, spec, model).transpose();
      p.dist.row(h) = dist;
      p.modes.row(h) = mix_modes(dist, class_mode_probs(env, spec, model.tastes), M, rec.person_id, h).transpose();
    }
  });
  return reduce(paths, horizon, S, static_cast<Eigen::Index>(M), false);
}

LccmComparison lccm_fit_and_forecast(const PanelDataset& dataset, int fit_wave, const ModelSpec& spec,
                                     const ParameterSet& params, int horizon, const Scenario& scenario,
                                     unsigned threads) {
  LccmComparison out;
  out.fit = lccm_fit(single_wave(dataset, fit_wave), spec, params.tastes);
  out.forecast = lccm_forecast(dataset, spec, out.fit.model, horizon, scenario, threads);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << header << '\n';
  return out;
}

}  // namespace

void write_class_shares_csv(const std::vector<Eigen::VectorXd>& shares, int first_wave,
                            const std::filesystem::path& path) {
  auto out = open_csv(path, "wave,class,share");
  for (std::size_t h = 0; h < shares.size(); ++h) {
    for (Eigen::Index s = 0; s < shares[h].size(); ++s) {
      out << first_wave + static_cast<int>(h) << ',' << s + 1 << ',' << format_double(shares[h][s]) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_mode_shares_csv(const std::vector<Eigen::VectorXd>& shares, int first_wave, const Schema& schema,
                           const std::filesystem::path& path) {
  auto out = open_csv(path, "wave,mode,share");
  for (std::size_t h = 0; h < shares.size(); ++h) {
    for (Eigen::Index m = 0; m < shares[h].size(); ++m) {
      out << first_wave + static_cast<int>(h) << ',' << schema.modes[static_cast<std::size_t>(m)] << ','
          << format_double(shares[h][m]) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_transition_csv(const Eigen::MatrixXd& matrix, const std::filesystem::path& path) {
  auto out = open_csv(path, "origin,destination,probability");
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    for (Eigen::Index s = 0; s < matrix.cols(); ++s) {
      out << r + 1 << ',' << s + 1 << ',' << format_double(matrix(r, s)) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace modality
