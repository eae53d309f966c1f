#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "modality/panel.hpp"

namespace modality {

inline constexpr std::size_t kNoCell = std::numeric_limits<std::size_t>::max();

// One latent class (modality style): the modes it considers and which taste
// coefficients it estimates. The constant of `reference_mode` is pinned to 0.
struct ClassSpec {
  std::string name;
  std::vector<bool> considers;       // per mode in Schema::modes
  std::size_t reference_mode = 0;
  std::vector<bool> uses_attribute;  // per attribute; unused ones are fixed at 0

  bool operator==(const ClassSpec&) const = default;
};

enum class CellKind { Asc, Coefficient, InitConstant, InitCovariate, TransConstant, TransCovariate, Alpha };

// A scalar model parameter. `cls` is the class for taste and initialization
// cells and the destination class for transition cells.
struct ParameterCell {
  CellKind kind = CellKind::Asc;
  std::size_t cls = 0;
  std::size_t origin = 0;
  std::size_t index = 0;  // mode, attribute or covariate index
  std::string name;
  bool free = true;
  double fixed_value = 0.0;
};

// Structure of the hidden Markov choice model bound to a panel schema.
//
// Cell naming (classes are 1-based):
//   class<s>.asc.<mode>           class<s>.coef.<attribute>
//   init.class<s>.const           init.class<s>.<covariate>
//   trans.<r>-><s>.const          trans.<r>-><s>.<covariate>
//   alpha.<r>-><s>
// Class 1 is the reference class of the initialization model and the
// reference destination of every transition row.
class ModelSpec {
 public:
  ModelSpec(Schema schema, std::vector<ClassSpec> classes, std::vector<bool> init_covariates,
            std::vector<bool> transition_covariates, bool consumer_surplus,
            std::map<std::string, double> fixed = {});

  const Schema& schema() const { return schema_; }
  std::size_t n_classes() const { return classes_.size(); }
  const std::vector<ClassSpec>& classes() const { return classes_; }
  const ClassSpec& class_spec(std::size_t s) const { return classes_[s]; }
  const std::vector<bool>& init_covariates() const { return init_covariates_; }
  const std::vector<bool>& transition_covariates() const { return transition_covariates_; }
  bool consumer_surplus() const { return consumer_surplus_; }
  const std::map<std::string, double>& user_fixed() const { return user_fixed_; }

  std::size_t n_cells() const { return cells_.size(); }
  const ParameterCell& cell(std::size_t i) const { return cells_[i]; }
  const std::vector<ParameterCell>& cells() const { return cells_; }
  const std::vector<std::size_t>& free_cells() const { return free_cells_; }
  std::size_t n_free() const { return free_cells_.size(); }
  std::size_t find_cell(const std::string& name) const;  // kNoCell when absent

  std::size_t asc_cell(std::size_t s, std::size_t mode) const { return asc_cells_[s][mode]; }
  std::size_t coef_cell(std::size_t s, std::size_t attr) const { return taste_base_[s] + n_asc_[s] + attr; }
  // c == 0 is the constant, c == k + 1 is covariate k.
  std::size_t init_cell(std::size_t s, std::size_t c) const { return init_base_ + s * width() + c; }
  std::size_t trans_cell(std::size_t r, std::size_t s, std::size_t c) const {
    return trans_base_ + (r * n_classes() + s) * width() + c;
  }
  std::size_t alpha_cell(std::size_t r, std::size_t s) const { return alpha_base_ + r * n_classes() + s; }
  std::size_t width() const { return schema_.covariates.size() + 1; }

  // True when some alpha into destination s is free or fixed to a nonzero
  // value, i.e. the class's consumer surplus enters the likelihood.
  bool destination_uses_cs(std::size_t s) const { return uses_cs_[s]; }
  // True when every alpha is fixed at zero: the M-step splits into
  // independent choice, initialization and transition problems.
  bool separable() const;
  // True when all classes share one ClassSpec and no cell is user-fixed, so
  // class labels are interchangeable.
  bool exchangeable_classes() const;

 private:
  void build_cells(const std::map<std::string, double>& fixed);

  Schema schema_;
  std::vector<ClassSpec> classes_;
  std::vector<bool> init_covariates_;
  std::vector<bool> transition_covariates_;
  bool consumer_surplus_ = false;
  std::map<std::string, double> user_fixed_;

  std::vector<ParameterCell> cells_;
  std::vector<std::size_t> free_cells_;
  std::vector<std::vector<std::size_t>> asc_cells_;
  std::vector<std::size_t> taste_base_;
  std::vector<std::size_t> n_asc_;
  std::size_t init_base_ = 0;
  std::size_t trans_base_ = 0;
  std::size_t alpha_base_ = 0;
  std::vector<bool> uses_cs_;
};

// JSON form:
// {
//   "classes": [{"name": "...", "consideration": [modes], "reference": mode,
//                "attributes": [attribute names]}],
//   "init_covariates": [...], "transition_covariates": [...],
//   "consumer_surplus": bool, "fixed": {"alpha.1->2": 1.0}
// }
// "attributes" defaults to every schema attribute, the covariate lists to
// every schema covariate, "reference" to the first considered mode.
ModelSpec model_spec_from_json(const nlohmann::json& j, const Schema& schema);
ModelSpec load_model_spec(const std::filesystem::path& path, const Schema& schema);
nlohmann::json to_json(const ModelSpec& spec);

}  // namespace modality
