#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "modality/model_spec.hpp"
#include "modality/panel.hpp"
#include "modality/params.hpp"

namespace modality {

enum class TransformOp { Scale, Shift };

struct CovariateTransform {
  std::size_t covariate = 0;
  TransformOp op = TransformOp::Scale;
  double value = 1.0;
  std::vector<int> steps;  // future steps (1 = first wave after the panel); empty means every step
};

struct AttributeTransform {
  std::size_t attribute = 0;
  std::vector<std::size_t> modes;  // empty means every mode
  TransformOp op = TransformOp::Scale;
  double value = 1.0;
  std::vector<int> steps;
};

// Transforms act on the last observed values at each future step; they do
// not compound across steps.
struct Scenario {
  std::string name = "baseline";
  std::vector<CovariateTransform> covariate_transforms;
  std::vector<AttributeTransform> attribute_transforms;

  bool wave_invariant() const;
};

// JSON: {"name": ..., "covariate_transforms": [{"covariate", "op": "scale" |
// "shift", "value", "waves": [steps]}], "attribute_transforms":
// [{"attribute", "alternatives": [modes], "op", "value", "waves"}]}.
// Unknown names and non-positive scale factors are rejected.
Scenario scenario_from_json(const nlohmann::json& j, const Schema& schema);
Scenario load_scenario(const std::filesystem::path& path, const Schema& schema);

// The environment (covariates and situations) of `wave` under the scenario
// at future step `step`.
WaveObservation apply_scenario(const WaveObservation& wave, const Scenario& scenario, int step);

struct ForecastResult {
  std::vector<Eigen::VectorXd> class_shares;  // steps 0..H
  std::vector<Eigen::VectorXd> mode_shares;   // steps 0..H, over Schema::modes
  std::vector<Eigen::MatrixXd> individual;    // per person, (H+1) x S class distributions
  // Share-weighted mean of the transition matrices applied over steps 1..H;
  // empty when H = 0 or the model is static.
  Eigen::MatrixXd average_transition;
};

// Sample enumeration from each person's filtered distribution at the last
// observed wave. Step 0 is that wave; steps 1..horizon are future waves whose
// environment is the last observed one, transformed by the scenario.
ForecastResult forecast(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                        int horizon, const Scenario& scenario, unsigned threads = 1);

// Same propagation from given per-person class distributions (rows of
// `start`). `step_offset` shifts the scenario's step numbering.
ForecastResult forecast_from(const PanelDataset& dataset, const ModelSpec& spec, const ParameterSet& params,
                             const Eigen::MatrixXd& start, int horizon, const Scenario& scenario,
                             int step_offset = 0, unsigned threads = 1);

// Mean smoothed class distribution per observed wave (1..max_waves).
std::vector<Eigen::VectorXd> estimated_class_shares(const PanelDataset& dataset, const ModelSpec& spec,
                                                    const ParameterSet& params, unsigned threads = 1);

// Row r: transition matrices A_nt(r, .) averaged over persons and successive
// waves with weights P(state_{t-1} = r | y_n).
Eigen::MatrixXd average_transition_probs(const PanelDataset& dataset, const ModelSpec& spec,
                                         const ParameterSet& params, unsigned threads = 1);

// Static latent class model: class membership is a logit of the
// initialization covariates and, when the spec has consumer surplus, of each
// class's consumer surplus with a loading lambda_s >= 0. Class tastes are
// held fixed.
struct LccmModel {
  std::vector<ClassTasteParams> tastes;
  Eigen::MatrixXd delta;   // S x (C+1), row 0 is the reference
  Eigen::VectorXd lambda;  // S
};

struct LccmFit {
  LccmModel model;
  double log_likelihood = 0.0;
  bool converged = false;
  int iterations = 0;
  std::string message;
};

// Membership probabilities of one wave.
Eigen::VectorXd lccm_membership(const WaveObservation& wave, const ModelSpec& spec, const LccmModel& model);

// Keeps only wave `wave` (1-based) of every person that has it, renumbered 1.
PanelDataset single_wave(const PanelDataset& dataset, int wave);

LccmFit lccm_fit(const PanelDataset& one_wave, const ModelSpec& spec, const std::vector<ClassTasteParams>& tastes);

// Static forecast: membership is re-evaluated on each person's last observed
// environment under the scenario at every step.
ForecastResult lccm_forecast(const PanelDataset& dataset, const ModelSpec& spec, const LccmModel& model,
                             int horizon, const Scenario& scenario, unsigned threads = 1);

struct LccmComparison {
  LccmFit fit;
  ForecastResult forecast;
};

// Fits the static model on wave `fit_wave` with the dynamic model's tastes,
// then forecasts from each person's last observed wave.
LccmComparison lccm_fit_and_forecast(const PanelDataset& dataset, int fit_wave, const ModelSpec& spec,
                                     const ParameterSet& params, int horizon, const Scenario& scenario,
                                     unsigned threads = 1);

// Tidy CSVs; the wave column is first_wave + step.
void write_class_shares_csv(const std::vector<Eigen::VectorXd>& shares, int first_wave,
                            const std::filesystem::path& path);
void write_mode_shares_csv(const std::vector<Eigen::VectorXd>& shares, int first_wave, const Schema& schema,
                           const std::filesystem::path& path);
void write_transition_csv(const Eigen::MatrixXd& matrix, const std::filesystem::path& path);

}  // namespace modality
