#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modality/estimation.hpp"
#include "modality/model_spec.hpp"
#include "modality/panel.hpp"
#include "modality/params.hpp"

namespace modality {

// A scalar distribution. JSON: {"dist": "uniform", "low": a, "high": b},
// {"dist": "normal", "mean": m, "sd": s}, {"dist": "constant", "value": v},
// {"dist": "bernoulli", "p": p} or {"dist": "poisson", "mean": m}.
struct Distribution {
  enum class Kind { Constant, Uniform, Normal, Bernoulli, Poisson };
  Kind kind = Kind::Constant;
  double a = 0.0;
  double b = 0.0;
};

Distribution distribution_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Distribution& d);

struct CovariateGenerator {
  Distribution dist;
  bool time_varying = false;  // redrawn every wave when true
};

struct AttributeGenerator {
  Distribution base;
  std::map<std::size_t, Distribution> by_mode;  // overrides for specific modes
};

struct GenerativeConfig {
  GenerativeConfig(ModelSpec s, ParameterSet p) : spec(std::move(s)), true_params(std::move(p)) {}

  ModelSpec spec;
  ParameterSet true_params;
  std::size_t n_individuals = 1;
  std::size_t n_waves = 1;
  std::size_t situations_per_wave = 1;
  std::vector<CovariateGenerator> covariates;  // one per schema covariate
  std::vector<AttributeGenerator> attributes;  // one per schema attribute
  std::vector<double> availability;            // per mode probability of being available
  // Draw each person's situations once and reuse them in every wave.
  bool repeat_situations = false;
  std::uint64_t seed = 0;
};

// JSON form:
// {
//   "schema": {...} | "schema.json", "spec": {...} | "spec.json",
//   "params": {...} | "params.json",
//   "n_individuals": N, "n_waves": T, "situations_per_wave": K,
//   "covariates": {"income": {"dist": "normal", ..., "time_varying": false}},
//   "attributes": {"travel_time": {"dist": ..., "by_mode": {"Walk": {...}}}},
//   "availability": {"Auto": 0.8}, "repeat_situations": false
// }
// Relative paths resolve against `base_dir`. Missing generators default to
// the constant 0 and missing availability entries to 1.
GenerativeConfig generative_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                             std::uint64_t seed);
GenerativeConfig load_generative_config(const std::filesystem::path& path, std::uint64_t seed);

struct SimulatedPanel {
  PanelDataset dataset;
  std::vector<std::vector<std::size_t>> latent;  // [person][wave] 0-based class
};

// Person n draws from its own substream of config.seed, so output does not
// depend on `threads`.
SimulatedPanel generate_panel(const GenerativeConfig& config, unsigned threads = 1);

// person_id, wave, class (1-based).
void write_latent_truth(const SimulatedPanel& sim, const std::filesystem::path& path);

// The two-state, two-outcome generative model with no covariates or
// attributes: pi1 = [0.4, 0.6], Omega = [[0.8, 0.2], [0.3, 0.7]], outcome
// probabilities [0.5, 0.5] in state 1 and [0.7, 0.3] in state 2.
struct TwoStateTruth {
  double init1 = 0.4;
  double stay1 = 0.8;  // P(1 -> 1)
  double stay2 = 0.7;  // P(2 -> 2)
  double outcome1_class1 = 0.5;
  double outcome1_class2 = 0.7;
};

GenerativeConfig two_state_config(const TwoStateTruth& truth, std::size_t n_individuals, std::size_t n_waves,
                                  std::uint64_t seed);

// The ten probabilities of the comparison table, in row order: init 1, init
// 2, P(1->1), P(1->2), P(2->1), P(2->2), P(o1|1), P(o2|1), P(o1|2), P(o2|2).
std::vector<double> two_state_probabilities(const ModelSpec& spec, const ParameterSet& params);
std::vector<double> two_state_probabilities(const TwoStateTruth& truth);
const std::vector<std::string>& two_state_row_labels();

// Relabels a two-state fit to the permutation closest (sum of squared
// probability differences) to `reference`.
ParameterSet align_two_state(const ModelSpec& spec, const ParameterSet& fitted,
                             const std::vector<double>& reference);

struct Table1Options {
  std::size_t n_individuals = 5000;
  std::size_t n_waves = 10;
  int first_kept_wave = 6;
  std::size_t starts = 3;
  EmOptions em;
};

struct Table1Result {
  std::vector<std::string> labels;
  std::vector<double> truth;
  std::vector<double> full;
  std::vector<double> censored;
  std::vector<double> censored_init_target;  // pi at the first kept wave
  FitReport full_report;
  FitReport censored_report;
  std::vector<StartSummary> full_runs;
  std::vector<StartSummary> censored_runs;
  std::uint64_t seed = 0;
};

// Simulates the two-state panel, fits it in full and after left-censoring
// with EM (multi-start), and converts both fits to probabilities.
Table1Result table1_experiment(std::uint64_t seed, const Table1Options& options = {});

void write_table1_csv(const Table1Result& result, const std::filesystem::path& path);
nlohmann::json table1_provenance(const Table1Result& result, const Table1Options& options);

}  // namespace modality
