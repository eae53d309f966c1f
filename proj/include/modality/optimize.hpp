#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace modality {

// Multinomial logit with soft (weighted) targets over ragged choice sets.
// Row i of `features` describes one alternative; set k spans rows
// [set_begin[k], set_begin[k + 1]). Utility of row i is features.row(i) *
// theta + offsets[i]. The objective is sum_i target_i * log p_i.
class WeightedMnl {
 public:
  WeightedMnl(Eigen::MatrixXd features, Eigen::VectorXd offsets, std::vector<Eigen::Index> set_begin);

  Eigen::Index n_params() const { return features_.cols(); }
  Eigen::Index n_rows() const { return features_.rows(); }
  std::size_t n_sets() const { return set_begin_.size() - 1; }

  double evaluate(const Eigen::VectorXd& theta, const Eigen::VectorXd& targets, Eigen::VectorXd* grad,
                  Eigen::MatrixXd* hess) const;

 private:
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> features_;
  Eigen::VectorXd offsets_;
  std::vector<Eigen::Index> set_begin_;
  // Scratch space reused across evaluations; not thread-safe.
  mutable Eigen::VectorXd util_, prob_, mean_;
};

struct NewtonOptions {
  double grad_tol = 1e-8;
  int max_iter = 100;
};

struct NewtonResult {
  Eigen::VectorXd theta;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Newton ascent with analytic Hessian and step halving. Every accepted step
// does not decrease the objective, which keeps EM monotone.
NewtonResult maximize_newton(const WeightedMnl& model, const Eigen::VectorXd& targets,
                             Eigen::VectorXd start, const NewtonOptions& options = {});

// f(x, grad) returns the objective and, when grad is non-null, its gradient.
// Non-finite values mark points outside the domain.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct BfgsOptions {
  double grad_tol = 1e-5;
  int max_iter = 1000;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trace;  // objective after each iteration, starting point first
};

// Quasi-Newton (BFGS) ascent with a backtracking Armijo line search.
// Converges when the gradient infinity-norm drops below grad_tol. A failed
// line search returns the best point so far with converged = false.
BfgsResult maximize_bfgs(const Objective& f, Eigen::VectorXd x0, const BfgsOptions& options = {});

}  // namespace modality
