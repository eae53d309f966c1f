#include "modality/optimize.hpp"

#include <cmath>
#include <limits>

#include "modality/error.hpp"

namespace modality {

WeightedMnl::WeightedMnl(Eigen::MatrixXd features, Eigen::VectorXd offsets,
                         std::vector<Eigen::Index> set_begin)
    : features_(std::move(features)), offsets_(std::move(offsets)), set_begin_(std::move(set_begin)) {
  if (set_begin_.empty()) set_begin_.push_back(0);
  if (offsets_.size() != features_.rows() || set_begin_.back() != features_.rows()) {
    throw ValidationError("inconsistent weighted-MNL design");
  }
}

double WeightedMnl::evaluate(const Eigen::VectorXd& theta, const Eigen::VectorXd& targets,
                             Eigen::VectorXd* grad, Eigen::MatrixXd* hess) const {
  const Eigen::Index P = n_params();
  util_.noalias() = features_ * theta;
  util_ += offsets_;
  if (grad) grad->setZero(P);
  if (hess) hess->setZero(P, P);
  double total = 0.0;
  mean_.resize(P);
  prob_.resize(util_.size());
  for (std::size_t k = 0; k + 1 < set_begin_.size(); ++k) {
    const Eigen::Index b = set_begin_[k], e = set_begin_[k + 1];
    double w = 0.0;
    for (Eigen::Index i = b; i < e; ++i) w += targets[i];
    if (w == 0.0) continue;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = b; i < e; ++i) m = std::max(m, util_[i]);
    double sum = 0.0;
    for (Eigen::Index i = b; i < e; ++i) {
      prob_[i] = std::exp(util_[i] - m);
      sum += prob_[i];
    }
    const double lse = m + std::log(sum);
    for (Eigen::Index i = b; i < e; ++i) {
      prob_[i] /= sum;
      if (targets[i] != 0.0) total += targets[i] * (util_[i] - lse);
    }
    if (!grad && !hess) continue;
    mean_.setZero();
    for (Eigen::Index i = b; i < e; ++i) mean_.noalias() += prob_[i] * features_.row(i).transpose();
    if (grad) {
      for (Eigen::Index i = b; i < e; ++i) {
        if (targets[i] != 0.0) grad->noalias() += targets[i] * features_.row(i).transpose();
      }
      *grad -= w * mean_;
    }
    if (hess) {
      for (Eigen::Index i = b; i < e; ++i) {
        hess->noalias() -= (w * prob_[i]) * (features_.row(i).transpose() * features_.row(i));
      }
      hess->noalias() += w * (mean_ * mean_.transpose());
    }
  }
  return total;
}

NewtonResult maximize_newton(const WeightedMnl& model, const Eigen::VectorXd& targets,
                             Eigen::VectorXd start, const NewtonOptions& options) {
  NewtonResult res;
  res.theta = std::move(start);
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  res.objective = model.evaluate(res.theta, targets, &g, &H);
  if (model.n_params() == 0) {
    res.converged = true;
    return res;
  }
  const Eigen::Index P = model.n_params();
  for (res.iterations = 0; res.iterations < options.max_iter; ++res.iterations) {
    if (g.lpNorm<Eigen::Infinity>() < options.grad_tol) {
      res.converged = true;
      break;
    }
    // Solve (-H + ridge) d = g; the ridge handles flat directions such as
    // coefficients that no weighted observation informs.
    Eigen::MatrixXd negH = -H;
    Eigen::VectorXd d;
    double ridge = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(negH + ridge * Eigen::MatrixXd::Identity(P, P));
      if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 1e-12).all()) {
        d = ldlt.solve(g);
        if (d.allFinite()) break;
      }
      d.resize(0);
      ridge = ridge == 0.0 ? 1e-8 * std::max(1.0, negH.diagonal().cwiseAbs().maxCoeff()) : ridge * 10.0;
    }
    if (d.size() == 0) d = g / std::max(1.0, g.norm());
    // Newton decrement: the predicted gain of a full step. Once it is below
    // the objective's rounding level no step can register an improvement.
    const double decrement = g.dot(d);
    if (decrement <= 1e-15 * (1.0 + std::abs(res.objective))) {
      res.converged = true;
      break;
    }
    double step = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving) {
      const Eigen::VectorXd trial = res.theta + step * d;
      Eigen::VectorXd tg;
      Eigen::MatrixXd tH;
      const double f = model.evaluate(trial, targets, &tg, &tH);
      if (std::isfinite(f) && f >= res.objective) {
        res.theta = trial;
        res.objective = f;
        g = std::move(tg);
        H = std::move(tH);
        accepted = true;
        break;
      }
      step *= 0.5;
      if (step * decrement <= 1e-15 * (1.0 + std::abs(res.objective))) break;
    }
    if (!accepted) {
      // The remaining gain is below rounding level.
      res.converged = true;
      break;
    }
  }
  if (!res.converged && g.lpNorm<Eigen::Infinity>() < options.grad_tol) res.converged = true;
  return res;
}

BfgsResult maximize_bfgs(const Objective& f, Eigen::VectorXd x0, const BfgsOptions& options) {
  // Minimizes -f internally.
  const Eigen::Index n = x0.size();
  BfgsResult res;
  res.x = std::move(x0);
  Eigen::VectorXd g(n);
  double fx = f(res.x, &g);
  if (!std::isfinite(fx) || !g.allFinite()) {
    throw ModelError("objective is not finite at the starting point");
  }
  res.trace.push_back(fx);
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  int resets = 0;
  constexpr double c1 = 1e-4;

  for (res.iterations = 0; res.iterations < options.max_iter; ++res.iterations) {
    if (n == 0 || g.lpNorm<Eigen::Infinity>() < options.grad_tol) {
      res.converged = true;
      break;
    }
    // Ascent direction on f.
    Eigen::VectorXd d = Hinv * g;
    double slope = g.dot(d);
    if (!(slope > 0.0)) {
      Hinv.setIdentity();
      scaled = false;
      d = g;
      slope = g.squaredNorm();
    }
    double step = scaled ? 1.0 : std::min(1.0, 1.0 / std::max(1e-12, g.lpNorm<Eigen::Infinity>()));
    Eigen::VectorXd x_new, g_new(n);
    double f_new = -std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = res.x + step * d;
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && g_new.allFinite()) {
        if (f_new >= fx + c1 * step * slope) {
          accepted = true;
          break;
        }
        // Near the optimum the predicted gain falls below the rounding noise
        // of f. Then trust the directional derivative instead: f may not drop
        // beyond roundoff and the slope along d must have shrunk enough.
        const double noise = 1e-12 * std::max(1.0, std::abs(fx));
        const double dslope = g_new.dot(d);
        if (c1 * step * slope < noise && f_new >= fx - noise && dslope <= 0.9 * slope && dslope >= -0.8 * slope) {
          accepted = true;
          break;
        }
      }
      // Quadratic interpolation of the 1-D model, safeguarded to [0.1, 0.5].
      double next = 0.5 * step;
      if (std::isfinite(f_new)) {
        const double denom = 2.0 * (fx + slope * step - f_new);
        if (denom > 0.0) next = std::clamp(slope * step * step / denom, 0.1 * step, 0.5 * step);
      }
      step = next;
    }
    if (!accepted) {
      if (resets++ < 2) {
        Hinv.setIdentity();
        scaled = false;
        continue;
      }
      res.message = "line search failed";
      break;
    }
    const Eigen::VectorXd s = x_new - res.x;
    // y is the change in the gradient of -f.
    const Eigen::VectorXd y = g - g_new;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        Hinv = Eigen::MatrixXd::Identity(n, n) * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = Hinv * y;
      Hinv += rho * ((1.0 + rho * y.dot(Hy)) * (s * s.transpose()) - Hy * s.transpose() - s * Hy.transpose());
    }
    res.x = std::move(x_new);
    fx = f_new;
    g = g_new;
    res.trace.push_back(fx);
  }
  if (!res.converged && n > 0 && g.lpNorm<Eigen::Infinity>() < options.grad_tol) res.converged = true;
  if (!res.converged && res.message.empty()) res.message = "iteration limit reached";
  res.value = fx;
  res.grad = g;
  return res;
}

}  // namespace modality
