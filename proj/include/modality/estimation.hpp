#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "modality/model_spec.hpp"
#include "modality/optimize.hpp"
#include "modality/panel.hpp"
#include "modality/params.hpp"

namespace modality {

struct FitMetrics {
  double aic = 0.0;
  double bic = 0.0;
  double rho_bar_squared = 0.0;
};

// AIC = 2K - 2LL, BIC = K ln(n) - 2LL, rho-bar^2 = 1 - (LL - K) / LL0.
FitMetrics fit_metrics(double log_likelihood, std::size_t n_parameters, std::size_t n_observations,
                       double null_log_likelihood);

// Log-likelihood of the model that picks uniformly among each situation's
// available alternatives.
double null_loglik(const PanelDataset& dataset);

struct FitReport {
  std::string method;
  double log_likelihood = 0.0;
  double null_log_likelihood = 0.0;
  std::size_t n_parameters = 0;    // free cells
  std::size_t n_observations = 0;  // choice situations
  FitMetrics metrics;
  int iterations = 0;
  bool converged = false;
  std::string message;
  std::vector<std::string> warnings;
  std::vector<double> ll_trace;
};

nlohmann::json to_json(const FitReport& report);

struct FitResult {
  ParameterSet params;
  FitReport report;
};

struct EmOptions {
  double tol = 1e-6;  // absolute log-likelihood improvement
  int max_iter = 2000;  // M-steps
  // SQUAREM extrapolation between EM steps. An extrapolated update is kept
  // only when it does not lower the log-likelihood.
  bool accelerate = true;
  unsigned threads = 1;
  NewtonOptions newton;
};

// Baum-Welch style EM. The M-step maximizes the class choice models, the
// initialization model and each origin's transition model separately, which
// is valid only when consumer surplus does not enter the transitions.
// Throws ValidationError for specs with any non-zero or free alpha.
FitResult em_fit(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& start,
                 const EmOptions& options = {});

struct GradientOptions {
  double grad_tol = 1e-5;  // infinity-norm of the gradient in free coordinates
  int max_iter = 1000;
  unsigned threads = 1;
  bool verify_gradient = false;  // compare against central differences at the start
  double fd_step = 1e-5;
};

// Quasi-Newton maximum likelihood over the free coordinates (alpha through
// softplus). Works for every spec, including consumer-surplus feedback.
FitResult gradient_fit(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& start,
                       const GradientOptions& options = {});

// Gradient of the panel log-likelihood with respect to every cell value.
Eigen::VectorXd cell_gradient(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                              double* log_likelihood = nullptr, unsigned threads = 1);

// Log-likelihood and gradient in free (optimizer) coordinates.
double free_loglik(const PanelDataset& dataset, const ModelSpec& spec, const Eigen::VectorXd& theta,
                   Eigen::VectorXd* grad, unsigned threads = 1);

// Central finite differences of free_loglik.
Eigen::VectorXd finite_difference_gradient(const PanelDataset& dataset, const ModelSpec& spec,
                                           const Eigen::VectorXd& theta, double step = 1e-5,
                                           unsigned threads = 1);

// Observed-information standard errors per cell (0 for fixed cells). The
// Hessian is taken by central differences of the analytic gradient in cell
// coordinates over the interior free cells. A free alpha on its zero bound
// gets NaN, as does every free cell when the information matrix is singular.
Eigen::VectorXd standard_errors(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                                unsigned threads = 1);

// Random starting values; coefficients are scaled by the typical magnitude
// of their attribute or covariate in the data.
ParameterSet random_start(const PanelDataset& dataset, const ModelSpec& spec, std::uint64_t seed);

// Seed of start i derived from the run seed.
std::uint64_t start_seed(std::uint64_t seed, std::size_t start);

// Mean initialization probability per class over the panel's first waves.
Eigen::VectorXd initial_class_shares(const PanelDataset& dataset, const ParameterSet& params);

// Sorts exchangeable classes by descending initial share; other specs are
// returned unchanged.
ParameterSet canonical_labels(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params);

using Fitter = std::function<FitResult(const ParameterSet& start)>;

struct StartSummary {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  double log_likelihood = 0.0;
  bool converged = false;
  int iterations = 0;
  std::string error;
};

struct MultiStartResult {
  FitResult best;
  std::size_t best_index = 0;
  std::vector<StartSummary> runs;
};

MultiStartResult multi_start(const PanelDataset& dataset, const ModelSpec& spec, std::size_t n_starts,
                             std::uint64_t seed, const Fitter& fitter);

nlohmann::json to_json(const std::vector<StartSummary>& runs);

}  // namespace modality
