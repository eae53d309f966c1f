#include "modality/hmm.hpp"

#include <cmath>

#include "modality/choice.hpp"
#include "modality/error.hpp"
#include "modality/parallel.hpp"

namespace modality {

namespace {

Eigen::VectorXd linear_index(const Eigen::MatrixXd& coef, const std::vector<double>& z) {
  if (static_cast<Eigen::Index>(z.size()) + 1 != coef.cols()) {
    throw ValidationError("covariate vector does not match the coefficient layout");
  }
  const Eigen::Map<const Eigen::VectorXd> zv(z.data(), static_cast<Eigen::Index>(z.size()));
  return coef.col(0) + coef.rightCols(coef.cols() - 1) * zv;
}

// In-place log-softmax of a vector; -inf entries stay -inf.
void log_normalize(Eigen::Ref<Eigen::VectorXd> v) {
  const double lse = log_sum_exp(v.data(), static_cast<std::size_t>(v.size()));
  v.array() -= lse;
}

}  // namespace

Eigen::VectorXd initialization_probs(const std::vector<double>& covariates, const InitParams& params) {
  Eigen::VectorXd v = linear_index(params.tau, covariates);
  log_normalize(v);
  return v.array().exp();
}

Eigen::MatrixXd log_transition_matrix(const std::vector<double>& covariates, const Eigen::VectorXd& cs,
                                      const TransParams& params) {
  const Eigen::Index S = params.alpha.rows();
  if ((params.alpha.array() < 0.0).any()) {
    throw ValidationError("consumer-surplus loadings must be nonnegative");
  }
  if (cs.size() != S) throw ValidationError("consumer-surplus vector must have one entry per class");
  Eigen::MatrixXd out(S, S);
  for (Eigen::Index r = 0; r < S; ++r) {
    Eigen::VectorXd u = linear_index(params.gamma[static_cast<std::size_t>(r)], covariates);
    u += params.alpha.row(r).transpose().cwiseProduct(cs);
    log_normalize(u);
    out.row(r) = u.transpose();
  }
  return out;
}

Eigen::MatrixXd transition_matrix(const std::vector<double>& covariates, const Eigen::VectorXd& cs,
                                  const TransParams& params) {
  return log_transition_matrix(covariates, cs, params).array().exp();
}

Eigen::VectorXd class_consumer_surplus(const WaveObservation& wave, const ModelSpec& spec,
                                       const ParameterSet& params) {
  const std::size_t S = spec.n_classes();
  Eigen::VectorXd cs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(S));
  for (std::size_t s = 0; s < S; ++s) {
    if (spec.destination_uses_cs(s)) {
      cs[static_cast<Eigen::Index>(s)] = consumer_surplus(wave, spec.class_spec(s), params.tastes[s]);
    }
  }
  return cs;
}

IndividualTerms compute_terms(const IndividualRecord& record, const ModelSpec& spec,
                              const ParameterSet& params) {
  const std::size_t S = spec.n_classes();
  const std::size_t T = record.waves.size();
  if (T == 0) throw ValidationError("person '" + record.person_id + "' has no waves");
  IndividualTerms terms;
  terms.log_emission.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(S));
  terms.cs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(S));
  terms.log_trans.resize(T);
  {
    Eigen::VectorXd v = linear_index(params.init.tau, record.waves[0].covariates);
    log_normalize(v);
    terms.log_init = v;
  }
  for (std::size_t t = 0; t < T; ++t) {
    const auto& w = record.waves[t];
    for (std::size_t s = 0; s < S; ++s) {
      terms.log_emission(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) =
          class_emission_logprob(w, spec.class_spec(s), params.tastes[s]);
    }
    if (t > 0) {
      const Eigen::VectorXd cs = class_consumer_surplus(w, spec, params);
      terms.cs.row(static_cast<Eigen::Index>(t)) = cs.transpose();
      terms.log_trans[t] = log_transition_matrix(w.covariates, cs, params.trans);
    }
  }
  return terms;
}

ForwardResult forward_pass(const IndividualTerms& terms, const std::string& person_id) {
  const Eigen::Index T = terms.log_emission.rows();
  const Eigen::Index S = terms.log_emission.cols();
  ForwardResult out;
  out.log_alpha.resize(T, S);
  out.filtered.resize(T, S);
  std::vector<double> buf(static_cast<std::size_t>(S));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index s = 0; s < S; ++s) {
      double prior;
      if (t == 0) {
        prior = terms.log_init[s];
      } else {
        for (Eigen::Index r = 0; r < S; ++r) {
          buf[static_cast<std::size_t>(r)] =
              out.log_alpha(t - 1, r) + terms.log_trans[static_cast<std::size_t>(t)](r, s);
        }
        prior = log_sum_exp(buf);
      }
      const double e = terms.log_emission(t, s);
      out.log_alpha(t, s) = (prior == kLogZero || e == kLogZero) ? kLogZero : prior + e;
    }
    Eigen::VectorXd row = out.log_alpha.row(t).transpose();
    const double lse = log_sum_exp(row.data(), static_cast<std::size_t>(S));
    if (lse == kLogZero || !std::isfinite(lse)) {
      throw ModelError("no class can explain wave " + std::to_string(t + 1) +
                       (person_id.empty() ? std::string() : " of person '" + person_id + "'"));
    }
    out.filtered.row(t) = (row.array() - lse).exp().transpose();
    if (t == T - 1) out.log_marginal = lse;
  }
  return out;
}

ForwardResult forward_loglik(const IndividualRecord& record, const ModelSpec& spec,
                             const ParameterSet& params) {
  return forward_pass(compute_terms(record, spec, params), record.person_id);
}

StatePosterior posterior_from_terms(const IndividualTerms& terms, const std::string& person_id) {
  ForwardResult fwd = forward_pass(terms, person_id);
  const Eigen::Index T = terms.log_emission.rows();
  const Eigen::Index S = terms.log_emission.cols();
  Eigen::MatrixXd log_beta = Eigen::MatrixXd::Zero(T, S);
  std::vector<double> buf(static_cast<std::size_t>(S));
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto& lt = terms.log_trans[static_cast<std::size_t>(t + 1)];
    for (Eigen::Index r = 0; r < S; ++r) {
      for (Eigen::Index s = 0; s < S; ++s) {
        const double e = terms.log_emission(t + 1, s);
        buf[static_cast<std::size_t>(s)] =
            (e == kLogZero || log_beta(t + 1, s) == kLogZero) ? kLogZero : lt(r, s) + e + log_beta(t + 1, s);
      }
      log_beta(t, r) = log_sum_exp(buf);
    }
  }

  StatePosterior post;
  post.log_marginal = fwd.log_marginal;
  post.filtered = std::move(fwd.filtered);
  post.smoothed.resize(T, S);
  post.pairwise.resize(static_cast<std::size_t>(T));
  const double ll = post.log_marginal;
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index s = 0; s < S; ++s) {
      const double a = fwd.log_alpha(t, s), b = log_beta(t, s);
      post.smoothed(t, s) = (a == kLogZero || b == kLogZero) ? 0.0 : std::exp(a + b - ll);
    }
    // Renormalize away rounding drift; rows are simplexes by construction.
    post.smoothed.row(t) /= post.smoothed.row(t).sum();
    if (t == 0) continue;
    Eigen::MatrixXd xi(S, S);
    const auto& lt = terms.log_trans[static_cast<std::size_t>(t)];
    for (Eigen::Index r = 0; r < S; ++r) {
      for (Eigen::Index s = 0; s < S; ++s) {
        const double a = fwd.log_alpha(t - 1, r), e = terms.log_emission(t, s), b = log_beta(t, s);
        xi(r, s) = (a == kLogZero || e == kLogZero || b == kLogZero) ? 0.0 : std::exp(a + lt(r, s) + e + b - ll);
      }
    }
    xi /= xi.sum();
    post.pairwise[static_cast<std::size_t>(t)] = std::move(xi);
  }
  return post;
}

StatePosterior smoothed_posteriors(const IndividualRecord& record, const ModelSpec& spec,
                                   const ParameterSet& params) {
  return posterior_from_terms(compute_terms(record, spec, params), record.person_id);
}

Eigen::RowVectorXd propagate_marginals(const Eigen::RowVectorXd& pi1,
                                       std::span<const Eigen::MatrixXd> transitions) {
  Eigen::RowVectorXd pi = pi1;
  for (const auto& omega : transitions) {
    if (omega.rows() != pi.size() || omega.cols() != pi.size()) {
      throw ValidationError("transition matrix does not match the state dimension");
    }
    pi = pi * omega;
  }
  return pi;
}

double panel_loglik(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                    unsigned threads) {
  std::vector<double> per(dataset.individuals.size());
  parallel_for(per.size(), threads, [&](std::size_t n) {
    per[n] = forward_loglik(dataset.individuals[n], spec, params).log_marginal;
  });
  double total = 0.0;
  for (double v : per) total += v;
  return total;
}

}  // namespace modality
