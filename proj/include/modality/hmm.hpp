#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "modality/model_spec.hpp"
#include "modality/panel.hpp"
#include "modality/params.hpp"

namespace modality {

// Softmax over classes of tau_s0 + z'tau_s.
Eigen::VectorXd initialization_probs(const std::vector<double>& covariates, const InitParams& params);

// Row r is the softmax over destinations s of gamma_rs0 + z'gamma_rs + cs_s * alpha_rs.
// Throws ValidationError if any alpha is negative.
Eigen::MatrixXd transition_matrix(const std::vector<double>& covariates, const Eigen::VectorXd& cs,
                                  const TransParams& params);
Eigen::MatrixXd log_transition_matrix(const std::vector<double>& covariates, const Eigen::VectorXd& cs,
                                      const TransParams& params);

// Consumer surplus of every class in a wave; zero for classes whose surplus
// never enters a transition (ModelSpec::destination_uses_cs false).
Eigen::VectorXd class_consumer_surplus(const WaveObservation& wave, const ModelSpec& spec,
                                       const ParameterSet& params);

// Everything the recursions need for one individual with T waves.
struct IndividualTerms {
  Eigen::VectorXd log_init;                // S
  std::vector<Eigen::MatrixXd> log_trans;  // T entries; [t] moves wave t-1 -> t, [0] is empty
  Eigen::MatrixXd log_emission;            // T x S, -inf where a class cannot explain a wave
  Eigen::MatrixXd cs;                      // T x S
};

IndividualTerms compute_terms(const IndividualRecord& record, const ModelSpec& spec,
                              const ParameterSet& params);

struct ForwardResult {
  double log_marginal = 0.0;
  Eigen::MatrixXd filtered;   // T x S, row t = P(state_t | y_1..t)
  Eigen::MatrixXd log_alpha;  // T x S, log P(y_1..t, state_t)
};

// Throws ModelError naming the person and wave when no class can explain a wave.
ForwardResult forward_pass(const IndividualTerms& terms, const std::string& person_id = {});
ForwardResult forward_loglik(const IndividualRecord& record, const ModelSpec& spec,
                             const ParameterSet& params);

struct StatePosterior {
  double log_marginal = 0.0;
  Eigen::MatrixXd filtered;              // T x S
  Eigen::MatrixXd smoothed;              // T x S, row t = P(state_t | y_1..T)
  std::vector<Eigen::MatrixXd> pairwise;  // T entries; [t](r, s) = P(state_{t-1}=r, state_t=s | y), [0] empty
};

StatePosterior posterior_from_terms(const IndividualTerms& terms, const std::string& person_id = {});
StatePosterior smoothed_posteriors(const IndividualRecord& record, const ModelSpec& spec,
                                   const ParameterSet& params);

// pi1 * Omega_1 * Omega_2 * ...
Eigen::RowVectorXd propagate_marginals(const Eigen::RowVectorXd& pi1,
                                       std::span<const Eigen::MatrixXd> transitions);

// Sum of log P(y_n) over the panel. Per-person terms are reduced in person
// order so the result does not depend on `threads`.
double panel_loglik(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                    unsigned threads = 1);

}  // namespace modality
