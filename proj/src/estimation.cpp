#include "modality/estimation.hpp"

#include <algorithm>
#include <map>
#include <cmath>
#include <numeric>
#include <random>

#include "modality/choice.hpp"
#include "modality/error.hpp"
#include "modality/hmm.hpp"
#include "modality/parallel.hpp"
#include "modality/random.hpp"

namespace modality {

using nlohmann::json;

FitMetrics fit_metrics(double log_likelihood, std::size_t n_parameters, std::size_t n_observations,
                       double null_log_likelihood) {
  if (n_observations < 1) throw ValidationError("fit metrics need at least one observation");
  if (null_log_likelihood == 0.0) throw ValidationError("null log-likelihood is zero; rho-bar-squared undefined");
  const double k = static_cast<double>(n_parameters);
  FitMetrics m;
  m.aic = 2.0 * k - 2.0 * log_likelihood;
  m.bic = k * std::log(static_cast<double>(n_observations)) - 2.0 * log_likelihood;
  m.rho_bar_squared = 1.0 - (log_likelihood - k) / null_log_likelihood;
  return m;
}

double null_loglik(const PanelDataset& dataset) {
  double total = 0.0;
  for (const auto& ind : dataset.individuals) {
    for (const auto& w : ind.waves) {
      for (const auto& sit : w.situations) {
        const auto n = std::count_if(sit.alternatives.begin(), sit.alternatives.end(),
                                     [](const Alternative& a) { return a.available; });
        total -= std::log(static_cast<double>(n));
      }
    }
  }
  return total;
}

json to_json(const FitReport& r) {
  return {{"method", r.method},
          {"log_likelihood", r.log_likelihood},
          {"null_log_likelihood", r.null_log_likelihood},
          {"null_model", "equal probability over each situation's available alternatives"},
          {"n_parameters", r.n_parameters},
          {"n_observations", r.n_observations},
          {"rho_bar_squared", r.metrics.rho_bar_squared},
          {"aic", r.metrics.aic},
          {"bic", r.metrics.bic},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"message", r.message},
          {"warnings", r.warnings}};
}

namespace {

void finish_report(const PanelDataset& dataset, const ModelSpec& spec, FitReport& report) {
  report.n_parameters = spec.n_free();
  report.n_observations = dataset.n_situations();
  report.null_log_likelihood = null_loglik(dataset);
  report.metrics = fit_metrics(report.log_likelihood, report.n_parameters, report.n_observations,
                               report.null_log_likelihood);
}

std::vector<double> with_constant(const std::vector<double>& z) {
  std::vector<double> out;
  out.reserve(z.size() + 1);
  out.push_back(1.0);
  out.insert(out.end(), z.begin(), z.end());
  return out;
}

// ---------------------------------------------------------------------------
// EM machinery

struct EStep {
  double log_likelihood = 0.0;
  std::vector<StatePosterior> posteriors;
};

EStep run_estep(const PanelDataset& d, const ModelSpec& spec, const ParameterSet& params, unsigned threads) {
  EStep e;
  e.posteriors.resize(d.individuals.size());
  parallel_for(d.individuals.size(), threads, [&](std::size_t n) {
    const auto& rec = d.individuals[n];
    e.posteriors[n] = posterior_from_terms(compute_terms(rec, spec, params), rec.person_id);
  });
  for (const auto& p : e.posteriors) e.log_likelihood += p.log_marginal;
  return e;
}

// Where the soft target of a design row comes from.
struct RowTarget {
  enum Kind : std::uint8_t { kZero, kSmoothed, kPairwise } kind = kZero;
  std::uint32_t n = 0, t = 0, r = 0, s = 0;
};

// One M-step subproblem: a weighted MNL over a subset of the free cells.
struct Subproblem {
  std::vector<std::size_t> cells;  // free cell per design column
  std::vector<RowTarget> rows;     // per original row
  std::vector<Eigen::Index> row_map;  // original row -> row of the merged design
  std::optional<WeightedMnl> mnl;

  Eigen::VectorXd targets(const EStep& e) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(mnl->n_rows());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& rt = rows[i];
      const auto& post = e.posteriors[rt.n];
      double v = 0.0;
      switch (rt.kind) {
        case RowTarget::kZero: break;
        case RowTarget::kSmoothed: v = post.smoothed(rt.t, rt.s); break;
        case RowTarget::kPairwise: v = post.pairwise[rt.t](rt.r, rt.s); break;
      }
      out[row_map[i]] += v;
    }
    return out;
  }
};

// Accumulates rows of a design whose columns are a chosen subset of cells.
class DesignBuilder {
 public:
  DesignBuilder(const ModelSpec& spec, const Eigen::VectorXd& cell_values, std::vector<std::size_t> cells)
      : spec_(spec), values_(cell_values), cells_(std::move(cells)), column_(spec.n_cells(), -1) {
    for (std::size_t c = 0; c < cells_.size(); ++c) column_[cells_[c]] = static_cast<int>(c);
    set_begin_.push_back(0);
  }

  // Adds `x` times cell `cell` to the current row.
  void add(std::size_t cell, double x) {
    if (column_[cell] >= 0) {
      row_[static_cast<std::size_t>(column_[cell])] += x;
    } else {
      offset_ += values_[cell] * x;
    }
  }
  void add_offset(double x) { offset_ += x; }

  void begin_row() {
    row_.assign(cells_.size(), 0.0);
    offset_ = 0.0;
  }
  void end_row(RowTarget target) {
    data_.insert(data_.end(), row_.begin(), row_.end());
    offsets_.push_back(offset_);
    targets_.push_back(target);
  }
  void end_set() { set_begin_.push_back(static_cast<Eigen::Index>(offsets_.size())); }

  // Sets with identical rows and offsets are merged; their targets add up.
  Subproblem finish() {
    Subproblem sp;
    sp.cells = cells_;
    sp.rows = std::move(targets_);
    const std::size_t P = cells_.size();
    std::map<std::vector<double>, Eigen::Index> seen;
    std::vector<double> data, offsets;
    std::vector<Eigen::Index> begin{0};
    sp.row_map.resize(offsets_.size());
    for (std::size_t k = 0; k + 1 < set_begin_.size(); ++k) {
      const auto b = static_cast<std::size_t>(set_begin_[k]), e = static_cast<std::size_t>(set_begin_[k + 1]);
      std::vector<double> key(data_.begin() + static_cast<std::ptrdiff_t>(b * P),
                              data_.begin() + static_cast<std::ptrdiff_t>(e * P));
      key.insert(key.end(), offsets_.begin() + static_cast<std::ptrdiff_t>(b),
                 offsets_.begin() + static_cast<std::ptrdiff_t>(e));
      key.push_back(static_cast<double>(e - b));
      auto [it, fresh] = seen.emplace(std::move(key), static_cast<Eigen::Index>(offsets.size()));
      if (fresh) {
        data.insert(data.end(), data_.begin() + static_cast<std::ptrdiff_t>(b * P),
                    data_.begin() + static_cast<std::ptrdiff_t>(e * P));
        offsets.insert(offsets.end(), offsets_.begin() + static_cast<std::ptrdiff_t>(b),
                       offsets_.begin() + static_cast<std::ptrdiff_t>(e));
        begin.push_back(static_cast<Eigen::Index>(offsets.size()));
      }
      for (std::size_t i = b; i < e; ++i) sp.row_map[i] = it->second + static_cast<Eigen::Index>(i - b);
    }
    const auto R = static_cast<Eigen::Index>(offsets.size());
    Eigen::MatrixXd X(R, static_cast<Eigen::Index>(P));
    for (Eigen::Index i = 0; i < R; ++i)
      for (std::size_t j = 0; j < P; ++j) X(i, static_cast<Eigen::Index>(j)) = data[static_cast<std::size_t>(i) * P + j];
    sp.mnl.emplace(std::move(X), Eigen::Map<Eigen::VectorXd>(offsets.data(), R), std::move(begin));
    return sp;
  }

 private:
  const ModelSpec& spec_;
  const Eigen::VectorXd& values_;
  std::vector<std::size_t> cells_;
  std::vector<int> column_;
  std::vector<double> row_;
  double offset_ = 0.0;
  std::vector<double> data_;
  std::vector<double> offsets_;
  std::vector<Eigen::Index> set_begin_;
  std::vector<RowTarget> targets_;
};

std::vector<std::size_t> free_cells_where(const ModelSpec& spec, const std::function<bool(const ParameterCell&)>& pred) {
  std::vector<std::size_t> out;
  for (std::size_t i : spec.free_cells()) {
    if (pred(spec.cell(i))) out.push_back(i);
  }
  return out;
}

Subproblem emission_subproblem(const PanelDataset& d, const ModelSpec& spec, const Eigen::VectorXd& values,
                               std::size_t s) {
  DesignBuilder b(spec, values, free_cells_where(spec, [s](const ParameterCell& c) {
                    return (c.kind == CellKind::Asc || c.kind == CellKind::Coefficient) && c.cls == s;
                  }));
  const ClassSpec& cs = spec.class_spec(s);
  for (std::size_t n = 0; n < d.individuals.size(); ++n) {
    const auto& rec = d.individuals[n];
    for (std::size_t t = 0; t < rec.waves.size(); ++t) {
      for (const auto& sit : rec.waves[t].situations) {
        std::vector<std::size_t> eff;
        for (std::size_t j = 0; j < sit.alternatives.size(); ++j) {
          const auto& alt = sit.alternatives[j];
          if (alt.available && cs.considers[alt.mode]) eff.push_back(j);
        }
        if (eff.size() < 2 || std::find(eff.begin(), eff.end(), sit.chosen) == eff.end()) continue;
        for (std::size_t j : eff) {
          const auto& alt = sit.alternatives[j];
          b.begin_row();
          b.add(spec.asc_cell(s, alt.mode), 1.0);
          for (std::size_t a = 0; a < alt.attributes.size(); ++a) b.add(spec.coef_cell(s, a), alt.attributes[a]);
          RowTarget rt;
          if (j == sit.chosen) {
            rt.kind = RowTarget::kSmoothed;
            rt.n = static_cast<std::uint32_t>(n);
            rt.t = static_cast<std::uint32_t>(t);
            rt.s = static_cast<std::uint32_t>(s);
          }
          b.end_row(rt);
        }
        b.end_set();
      }
    }
  }
  return b.finish();
}

Subproblem init_subproblem(const PanelDataset& d, const ModelSpec& spec, const Eigen::VectorXd& values) {
  DesignBuilder b(spec, values, free_cells_where(spec, [](const ParameterCell& c) {
                    return c.kind == CellKind::InitConstant || c.kind == CellKind::InitCovariate;
                  }));
  const std::size_t S = spec.n_classes();
  for (std::size_t n = 0; n < d.individuals.size(); ++n) {
    const auto z = with_constant(d.individuals[n].waves[0].covariates);
    for (std::size_t s = 0; s < S; ++s) {
      b.begin_row();
      for (std::size_t c = 0; c < z.size(); ++c) b.add(spec.init_cell(s, c), z[c]);
      b.end_row({RowTarget::kSmoothed, static_cast<std::uint32_t>(n), 0, 0, static_cast<std::uint32_t>(s)});
    }
    b.end_set();
  }
  return b.finish();
}

Subproblem transition_subproblem(const PanelDataset& d, const ModelSpec& spec, const Eigen::VectorXd& values,
                                 std::size_t r) {
  DesignBuilder b(spec, values, free_cells_where(spec, [r](const ParameterCell& c) {
                    return (c.kind == CellKind::TransConstant || c.kind == CellKind::TransCovariate) &&
                           c.origin == r;
                  }));
  const std::size_t S = spec.n_classes();
  for (std::size_t n = 0; n < d.individuals.size(); ++n) {
    const auto& rec = d.individuals[n];
    for (std::size_t t = 1; t < rec.waves.size(); ++t) {
      const auto z = with_constant(rec.waves[t].covariates);
      for (std::size_t s = 0; s < S; ++s) {
        b.begin_row();
        for (std::size_t c = 0; c < z.size(); ++c) b.add(spec.trans_cell(r, s, c), z[c]);
        b.end_row({RowTarget::kPairwise, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(t),
                   static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(s)});
      }
      b.end_set();
    }
  }
  return b.finish();
}

// ---------------------------------------------------------------------------
// Analytic gradient

double individual_gradient(const IndividualRecord& rec, const ModelSpec& spec, const ParameterSet& params,
                           Eigen::Ref<Eigen::VectorXd> g) {
  const IndividualTerms terms = compute_terms(rec, spec, params);
  const StatePosterior post = posterior_from_terms(terms, rec.person_id);
  const std::size_t S = spec.n_classes();
  const std::size_t T = rec.waves.size();
  const auto Si = static_cast<Eigen::Index>(S);

  {
    const auto z = with_constant(rec.waves[0].covariates);
    for (std::size_t s = 0; s < S; ++s) {
      const double d = post.smoothed(0, static_cast<Eigen::Index>(s)) - std::exp(terms.log_init[static_cast<Eigen::Index>(s)]);
      for (std::size_t c = 0; c < z.size(); ++c) g[static_cast<Eigen::Index>(spec.init_cell(s, c))] += z[c] * d;
    }
  }

  Eigen::MatrixXd cs_weight = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(T), Si);
  for (std::size_t t = 1; t < T; ++t) {
    const auto z = with_constant(rec.waves[t].covariates);
    const Eigen::MatrixXd A = terms.log_trans[t].array().exp();
    const Eigen::MatrixXd& xi = post.pairwise[t];
    for (Eigen::Index r = 0; r < Si; ++r) {
      const double from = xi.row(r).sum();
      for (Eigen::Index s = 0; s < Si; ++s) {
        const double d = xi(r, s) - A(r, s) * from;
        const auto ru = static_cast<std::size_t>(r), su = static_cast<std::size_t>(s);
        for (std::size_t c = 0; c < z.size(); ++c) g[static_cast<Eigen::Index>(spec.trans_cell(ru, su, c))] += z[c] * d;
        g[static_cast<Eigen::Index>(spec.alpha_cell(ru, su))] += terms.cs(static_cast<Eigen::Index>(t), s) * d;
        cs_weight(static_cast<Eigen::Index>(t), s) += params.trans.alpha(r, s) * d;
      }
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    const auto& wave = rec.waves[t];
    const double inv_k = 1.0 / static_cast<double>(wave.situations.size());
    for (std::size_t s = 0; s < S; ++s) {
      const double w = post.smoothed(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s));
      const double cw = cs_weight(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) * inv_k;
      if (w == 0.0 && cw == 0.0) continue;
      const ClassSpec& cspec = spec.class_spec(s);
      for (const auto& sit : wave.situations) {
        const EffectiveUtilities p = class_choice_probs(sit, cspec, params.tastes[s]);
        for (std::size_t k = 0; k < p.positions.size(); ++k) {
          const std::size_t j = p.positions[k];
          const double coef = w * ((j == sit.chosen ? 1.0 : 0.0) - p.values[k]) + cw * p.values[k];
          const auto& alt = sit.alternatives[j];
          g[static_cast<Eigen::Index>(spec.asc_cell(s, alt.mode))] += coef;
          for (std::size_t a = 0; a < alt.attributes.size(); ++a) {
            g[static_cast<Eigen::Index>(spec.coef_cell(s, a))] += coef * alt.attributes[a];
          }
        }
      }
    }
  }
  return post.log_marginal;
}

}  // namespace

Eigen::VectorXd cell_gradient(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                              double* log_likelihood, unsigned threads) {
  const std::size_t N = dataset.individuals.size();
  const auto C = static_cast<Eigen::Index>(spec.n_cells());
  Eigen::MatrixXd per = Eigen::MatrixXd::Zero(C, static_cast<Eigen::Index>(N));
  std::vector<double> ll(N);
  parallel_for(N, threads, [&](std::size_t n) {
    ll[n] = individual_gradient(dataset.individuals[n], spec, params, per.col(static_cast<Eigen::Index>(n)));
  });
  Eigen::VectorXd g = Eigen::VectorXd::Zero(C);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    g += per.col(static_cast<Eigen::Index>(n));
    total += ll[n];
  }
  if (log_likelihood) *log_likelihood = total;
  return g;
}

double free_loglik(const PanelDataset& dataset, const ModelSpec& spec, const Eigen::VectorXd& theta,
                   Eigen::VectorXd* grad, unsigned threads) {
  const ParameterSet params = from_free(spec, theta);
  if (!grad) return panel_loglik(dataset, spec, params, threads);
  double ll = 0.0;
  const Eigen::VectorXd g = cell_gradient(dataset, spec, params, &ll, threads);
  const Eigen::VectorXd jac = free_jacobian(spec, theta);
  grad->resize(theta.size());
  for (std::size_t k = 0; k < spec.n_free(); ++k) {
    (*grad)[static_cast<Eigen::Index>(k)] = g[static_cast<Eigen::Index>(spec.free_cells()[k])] * jac[static_cast<Eigen::Index>(k)];
  }
  return ll;
}

Eigen::VectorXd finite_difference_gradient(const PanelDataset& dataset, const ModelSpec& spec,
                                           const Eigen::VectorXd& theta, double step, unsigned threads) {
  Eigen::VectorXd g(theta.size());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd up = theta, down = theta;
    up[k] += step;
    down[k] -= step;
    g[k] = (free_loglik(dataset, spec, up, nullptr, threads) - free_loglik(dataset, spec, down, nullptr, threads)) /
           (2.0 * step);
  }
  return g;
}

FitResult em_fit(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& start,
                 const EmOptions& options) {
  if (!spec.separable()) {
    throw ValidationError(
        "EM requires a separable model: consumer surplus enters the transition model, which couples the "
        "class taste parameters into the transitions; use the gradient method instead");
  }
  ParameterSet params = start;
  apply_constraints(spec, params);
  Eigen::VectorXd values = flatten(spec, params);

  std::vector<Subproblem> subs;
  for (std::size_t s = 0; s < spec.n_classes(); ++s) subs.push_back(emission_subproblem(dataset, spec, values, s));
  subs.push_back(init_subproblem(dataset, spec, values));
  for (std::size_t r = 0; r < spec.n_classes(); ++r) subs.push_back(transition_subproblem(dataset, spec, values, r));

  const auto m_step = [&](const EStep& e, Eigen::VectorXd v) {
    for (const auto& sp : subs) {
      if (sp.cells.empty()) continue;
      Eigen::VectorXd theta(static_cast<Eigen::Index>(sp.cells.size()));
      for (std::size_t c = 0; c < sp.cells.size(); ++c) theta[static_cast<Eigen::Index>(c)] = v[static_cast<Eigen::Index>(sp.cells[c])];
      const NewtonResult nr = maximize_newton(*sp.mnl, sp.targets(e), theta, options.newton);
      for (std::size_t c = 0; c < sp.cells.size(); ++c) v[static_cast<Eigen::Index>(sp.cells[c])] = nr.theta[static_cast<Eigen::Index>(c)];
    }
    return v;
  };
  const auto e_step = [&](const Eigen::VectorXd& v) { return run_estep(dataset, spec, unflatten(spec, v), options.threads); };

  FitResult res;
  res.report.method = options.accelerate ? "em (squarem)" : "em";
  auto& trace = res.report.ll_trace;
  EStep e = run_estep(dataset, spec, params, options.threads);
  trace.push_back(e.log_likelihood);
  int steps = 0;
  const auto record = [&](double ll) {
    if (ll < trace.back() - 1e-8) {
      res.report.warnings.push_back("log-likelihood decreased at iteration " + std::to_string(trace.size()));
    }
    trace.push_back(ll);
  };

  bool warned_degenerate = false;
  while (steps < options.max_iter) {
    if (!warned_degenerate) {
      for (std::size_t s = 0; s < spec.n_classes(); ++s) {
        double mass = 0.0;
        for (const auto& p : e.posteriors) mass += p.smoothed.col(static_cast<Eigen::Index>(s)).sum();
        if (mass < 1e-8) {
          res.report.warnings.push_back("class " + std::to_string(s + 1) +
                                        " has zero posterior weight; restart from different starting values");
          warned_degenerate = true;
        }
      }
    }
    const double ll_start = e.log_likelihood;
    const Eigen::VectorXd v0 = values;
    values = m_step(e, values);
    e = e_step(values);
    record(e.log_likelihood);
    ++steps;
    if (options.accelerate && steps + 2 <= options.max_iter && e.log_likelihood - ll_start >= options.tol) {
      // SQUAREM: extrapolate along two EM steps, then stabilise with a third.
      const Eigen::VectorXd v1 = values;
      const Eigen::VectorXd v2 = m_step(e, v1);
      EStep e2 = e_step(v2);
      record(e2.log_likelihood);
      ++steps;
      const Eigen::VectorXd r = v1 - v0;
      const Eigen::VectorXd w = v2 - v1 - r;
      values = v2;
      e = std::move(e2);
      if (w.norm() > 0.0) {
        const double a = std::min(-1.0, -r.norm() / w.norm());
        const Eigen::VectorXd vx = v0 - 2.0 * a * r + a * a * w;
        try {
          const Eigen::VectorXd v3 = m_step(e_step(vx), vx);
          EStep e3 = e_step(v3);
          ++steps;
          if (e3.log_likelihood >= e.log_likelihood) {
            values = v3;
            e = std::move(e3);
            record(e.log_likelihood);
          }
        } catch (const ModelError&) {
          // Extrapolated point outside the data's support; keep the EM step.
        }
      }
    }
    res.report.iterations = steps;
    if (e.log_likelihood - ll_start < options.tol) {
      res.report.converged = true;
      break;
    }
  }
  params = unflatten(spec, values);
  res.report.message = res.report.converged ? "log-likelihood improvement below tolerance" : "iteration limit reached";
  res.report.log_likelihood = e.log_likelihood;
  res.params = std::move(params);
  finish_report(dataset, spec, res.report);
  return res;
}

FitResult gradient_fit(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& start,
                       const GradientOptions& options) {
  ParameterSet init = start;
  apply_constraints(spec, init);
  const Eigen::VectorXd theta0 = to_free(spec, init);
  Objective objective = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    try {
      return free_loglik(dataset, spec, theta, grad, options.threads);
    } catch (const ModelError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  FitResult res;
  res.report.method = "gradient";
  {
    Eigen::VectorXd g0;
    const double ll0 = objective(theta0, &g0);
    if (!std::isfinite(ll0)) throw ModelError("log-likelihood is not finite at the starting values");
    if (options.verify_gradient) {
      const Eigen::VectorXd fd = finite_difference_gradient(dataset, spec, theta0, options.fd_step, options.threads);
      double worst = 0.0;
      for (Eigen::Index k = 0; k < fd.size(); ++k) {
        worst = std::max(worst, std::abs(g0[k] - fd[k]) / std::max({std::abs(g0[k]), std::abs(fd[k]), 1e-2}));
      }
      if (worst > 1e-4) {
        res.report.warnings.push_back("gradient check: max relative error " + format_double(worst));
      }
    }
  }
  BfgsOptions bo;
  bo.grad_tol = options.grad_tol;
  bo.max_iter = options.max_iter;
  BfgsResult br = maximize_bfgs(objective, theta0, bo);
  res.params = from_free(spec, br.x);
  res.report.log_likelihood = br.value;
  res.report.iterations = br.iterations;
  res.report.converged = br.converged;
  res.report.message = br.converged ? "gradient norm below tolerance" : br.message;
  res.report.ll_trace = std::move(br.trace);
  finish_report(dataset, spec, res.report);
  return res;
}

Eigen::VectorXd standard_errors(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                                unsigned threads) {
  constexpr double kOnBound = 1e-6;
  const Eigen::VectorXd cells = flatten(spec, params);
  // Interior free cells only. An alpha sitting on zero has no curvature in
  // the softplus coordinate, so it is held at the bound.
  std::vector<std::size_t> active;
  for (std::size_t i : spec.free_cells()) {
    if (spec.cell(i).kind == CellKind::Alpha && cells[static_cast<Eigen::Index>(i)] < kOnBound) continue;
    active.push_back(i);
  }
  const auto P = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd H(P, P);
  for (Eigen::Index k = 0; k < P; ++k) {
    const auto ck = static_cast<Eigen::Index>(active[static_cast<std::size_t>(k)]);
    const double h = 1e-4 * std::max(1.0, std::abs(cells[ck]));
    Eigen::VectorXd up = cells, down = cells;
    up[ck] += h;
    down[ck] -= h;
    const Eigen::VectorXd gu = cell_gradient(dataset, spec, unflatten(spec, up), nullptr, threads);
    const Eigen::VectorXd gd = cell_gradient(dataset, spec, unflatten(spec, down), nullptr, threads);
    for (Eigen::Index j = 0; j < P; ++j) {
      const auto cj = static_cast<Eigen::Index>(active[static_cast<std::size_t>(j)]);
      H(j, k) = (gu[cj] - gd[cj]) / (2.0 * h);
    }
  }
  H = 0.5 * (H + H.transpose()).eval();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd se = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.n_cells()));
  for (std::size_t i : spec.free_cells()) se[static_cast<Eigen::Index>(i)] = nan;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(-H);
  const bool ok = P == 0 || (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
                             (ldlt.vectorD().array() > 1e-10 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff())).all());
  if (!ok) return se;
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(P, P));
  for (Eigen::Index k = 0; k < P; ++k) {
    se[static_cast<Eigen::Index>(active[static_cast<std::size_t>(k)])] = std::sqrt(std::max(0.0, cov(k, k)));
  }
  return se;
}

std::uint64_t start_seed(std::uint64_t seed, std::size_t start) { return substream_seed(seed, start, 0x5747); }

ParameterSet random_start(const PanelDataset& dataset, const ModelSpec& spec, std::uint64_t seed) {
  const auto& sc = spec.schema();
  std::vector<double> attr_scale(sc.attributes.size(), 0.0), cov_scale(sc.covariates.size(), 0.0);
  std::size_t n_alt = 0, n_wave = 0;
  for (const auto& ind : dataset.individuals) {
    for (const auto& w : ind.waves) {
      ++n_wave;
      for (std::size_t k = 0; k < w.covariates.size(); ++k) cov_scale[k] += std::abs(w.covariates[k]);
      for (const auto& sit : w.situations) {
        for (const auto& alt : sit.alternatives) {
          ++n_alt;
          for (std::size_t a = 0; a < alt.attributes.size(); ++a) attr_scale[a] += std::abs(alt.attributes[a]);
        }
      }
    }
  }
  for (auto& v : attr_scale) v = std::max(1.0, n_alt ? v / static_cast<double>(n_alt) : 1.0);
  for (auto& v : cov_scale) v = std::max(1.0, n_wave ? v / static_cast<double>(n_wave) : 1.0);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> loading(0.05, 0.5);
  ParameterSet p = ParameterSet::zeros(spec);
  Eigen::VectorXd cells = flatten(spec, p);
  for (std::size_t i : spec.free_cells()) {
    const auto& c = spec.cell(i);
    double v = 0.0;
    switch (c.kind) {
      case CellKind::Asc:
      case CellKind::InitConstant:
      case CellKind::TransConstant: v = unit(rng); break;
      case CellKind::Coefficient: v = 0.5 * unit(rng) / attr_scale[c.index]; break;
      case CellKind::InitCovariate:
      case CellKind::TransCovariate: v = 0.5 * unit(rng) / cov_scale[c.index]; break;
      case CellKind::Alpha: v = loading(rng); break;
    }
    cells[static_cast<Eigen::Index>(i)] = v;
  }
  return unflatten(spec, cells);
}

Eigen::VectorXd initial_class_shares(const PanelDataset& dataset, const ParameterSet& params) {
  Eigen::VectorXd share = Eigen::VectorXd::Zero(params.init.tau.rows());
  for (const auto& ind : dataset.individuals) share += initialization_probs(ind.waves[0].covariates, params.init);
  if (!dataset.individuals.empty()) share /= static_cast<double>(dataset.individuals.size());
  return share;
}

ParameterSet canonical_labels(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params) {
  if (!spec.exchangeable_classes() || spec.n_classes() < 2) return params;
  const Eigen::VectorXd share = initial_class_shares(dataset, params);
  std::vector<std::size_t> perm(spec.n_classes());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    return share[static_cast<Eigen::Index>(a)] > share[static_cast<Eigen::Index>(b)];
  });
  return permute_classes(spec, params, perm);
}

MultiStartResult multi_start(const PanelDataset& dataset, const ModelSpec& spec, std::size_t n_starts,
                             std::uint64_t seed, const Fitter& fitter) {
  if (n_starts < 1) throw ValidationError("at least one start is required");
  MultiStartResult out;
  bool have_best = false;
  std::string errors;
  for (std::size_t i = 0; i < n_starts; ++i) {
    StartSummary summary;
    summary.index = i;
    summary.seed = start_seed(seed, i);
    try {
      FitResult fit = fitter(random_start(dataset, spec, summary.seed));
      summary.ok = true;
      summary.log_likelihood = fit.report.log_likelihood;
      summary.converged = fit.report.converged;
      summary.iterations = fit.report.iterations;
      if (!have_best || fit.report.log_likelihood > out.best.report.log_likelihood) {
        out.best = std::move(fit);
        out.best_index = i;
        have_best = true;
      }
    } catch (const Error& e) {
      summary.error = e.what();
      errors += "\n  start " + std::to_string(i) + ": " + e.what();
    }
    out.runs.push_back(std::move(summary));
  }
  if (!have_best) throw ModelError("all " + std::to_string(n_starts) + " starts failed:" + errors);
  out.best.params = canonical_labels(dataset, spec, out.best.params);
  return out;
}

json to_json(const std::vector<StartSummary>& runs) {
  json out = json::array();
  for (const auto& r : runs) {
    json j{{"start", r.index}, {"seed", r.seed}, {"ok", r.ok}};
    if (r.ok) {
      j["log_likelihood"] = r.log_likelihood;
      j["converged"] = r.converged;
      j["iterations"] = r.iterations;
    } else {
      j["error"] = r.error;
    }
    out.push_back(j);
  }
  return out;
}

}  // namespace modality
