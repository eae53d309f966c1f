#pragma once

#include <limits>
#include <vector>

#include "modality/model_spec.hpp"
#include "modality/panel.hpp"
#include "modality/params.hpp"

namespace modality {

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();
// Log-probabilities below this are treated as exact zeros.
inline constexpr double kLogFloor = -700.0;

// Systematic utilities over the effective choice set of a class: the
// alternatives that are available in the situation and in the class's
// consideration set. `positions` index into ChoiceSituation::alternatives.
struct EffectiveUtilities {
  std::vector<std::size_t> positions;
  std::vector<double> values;

  bool empty() const { return positions.empty(); }
};

EffectiveUtilities class_utilities(const ChoiceSituation& situation, const ClassSpec& spec,
                                   const ClassTasteParams& params);

// Softmax over the effective set, same ordering as class_utilities.
// Returns an empty result when the effective set is empty.
EffectiveUtilities class_choice_probs(const ChoiceSituation& situation, const ClassSpec& spec,
                                      const ClassTasteParams& params);

// Sum over situations of the log-probability of the chosen alternative.
// kLogZero when the class cannot produce some observed choice.
double class_emission_logprob(const WaveObservation& wave, const ClassSpec& spec,
                              const ClassTasteParams& params);

// Average logsum over the wave's situations. Throws ModelError when some
// situation leaves the class with no alternative.
double consumer_surplus(const WaveObservation& wave, const ClassSpec& spec,
                        const ClassTasteParams& params);

// log(sum(exp(v))) with max-subtraction; kLogZero for an empty range or all
// -inf inputs.
double log_sum_exp(const double* v, std::size_t n);
inline double log_sum_exp(const std::vector<double>& v) { return log_sum_exp(v.data(), v.size()); }

}  // namespace modality
