#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "modality/model_spec.hpp"

namespace modality {

// Taste parameters of one class. `asc` is indexed by mode over the whole
// universe; entries for modes outside the consideration set are unused.
struct ClassTasteParams {
  std::vector<double> asc;
  std::vector<double> coeffs;
};

// Initialization logit: row s = (constant, covariate coefficients) of class s.
struct InitParams {
  Eigen::MatrixXd tau;
};

// Transition logit: gamma[r] row s = (constant, covariate coefficients) for
// origin r and destination s; alpha(r, s) loads the destination's consumer
// surplus.
struct TransParams {
  std::vector<Eigen::MatrixXd> gamma;
  Eigen::MatrixXd alpha;
};

struct ParameterSet {
  std::vector<ClassTasteParams> tastes;
  InitParams init;
  TransParams trans;

  // All-zero parameters with fixed cells at their fixed values.
  static ParameterSet zeros(const ModelSpec& spec);
};

// Full parameter vector, one entry per ModelSpec cell.
Eigen::VectorXd flatten(const ModelSpec& spec, const ParameterSet& params);
ParameterSet unflatten(const ModelSpec& spec, const Eigen::VectorXd& cells);

// Overwrites every fixed cell with its fixed value.
void apply_constraints(const ModelSpec& spec, ParameterSet& params);

// Unconstrained optimizer coordinates over the free cells. Free alpha cells
// are mapped through softplus so that alpha >= 0 by construction; alpha
// values below kAlphaFloor are lifted to it before inversion.
inline constexpr double kAlphaFloor = 1e-2;
Eigen::VectorXd to_free(const ModelSpec& spec, const ParameterSet& params, double alpha_floor = kAlphaFloor);
ParameterSet from_free(const ModelSpec& spec, const Eigen::VectorXd& theta);
// d(cell value)/d(theta) for each free coordinate.
Eigen::VectorXd free_jacobian(const ModelSpec& spec, const Eigen::VectorXd& theta);

double softplus(double x);
double softplus_inverse(double y);

// JSON layout: a taste block per class plus the initialization model, then
// one block per origin class of the transition model. Fixed cells are listed under "fixed". Optional standard errors are
// written next to the estimates as {"estimate", "se", "t"} objects.
nlohmann::json params_to_json(const ModelSpec& spec, const ParameterSet& params,
                              const std::optional<Eigen::VectorXd>& cell_se = std::nullopt);
ParameterSet params_from_json(const ModelSpec& spec, const nlohmann::json& j);
ParameterSet load_params(const std::filesystem::path& path, const ModelSpec& spec);

// Relabels classes: new class k is old class perm[k]. Initialization and
// transition utilities are re-normalized against the new class 1, so the
// likelihood is unchanged. Requires ModelSpec::exchangeable_classes().
ParameterSet permute_classes(const ModelSpec& spec, const ParameterSet& params,
                             const std::vector<std::size_t>& perm);

}  // namespace modality
