#include "modality/choice.hpp"

#include <algorithm>
#include <cmath>

#include "modality/error.hpp"

namespace modality {

double log_sum_exp(const double* v, std::size_t n) {
  if (n == 0) return kLogZero;
  const double m = *std::max_element(v, v + n);
  if (m == kLogZero) return kLogZero;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(v[i] - m);
  return m + std::log(sum);
}

EffectiveUtilities class_utilities(const ChoiceSituation& situation, const ClassSpec& spec,
                                   const ClassTasteParams& params) {
  EffectiveUtilities out;
  out.positions.reserve(situation.alternatives.size());
  out.values.reserve(situation.alternatives.size());
  for (std::size_t j = 0; j < situation.alternatives.size(); ++j) {
    const auto& alt = situation.alternatives[j];
    if (!alt.available || !spec.considers[alt.mode]) continue;
    double v = params.asc[alt.mode];
    for (std::size_t a = 0; a < alt.attributes.size(); ++a) {
      if (spec.uses_attribute[a]) v += alt.attributes[a] * params.coeffs[a];
    }
    out.positions.push_back(j);
    out.values.push_back(v);
  }
  return out;
}

EffectiveUtilities class_choice_probs(const ChoiceSituation& situation, const ClassSpec& spec,
                                      const ClassTasteParams& params) {
  EffectiveUtilities u = class_utilities(situation, spec, params);
  if (u.empty()) return u;
  const double m = *std::max_element(u.values.begin(), u.values.end());
  double sum = 0.0;
  for (double& v : u.values) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : u.values) v /= sum;
  return u;
}

double class_emission_logprob(const WaveObservation& wave, const ClassSpec& spec,
                              const ClassTasteParams& params) {
  double total = 0.0;
  for (const auto& sit : wave.situations) {
    const EffectiveUtilities u = class_utilities(sit, spec, params);
    auto it = std::find(u.positions.begin(), u.positions.end(), sit.chosen);
    if (it == u.positions.end()) return kLogZero;
    const double chosen_v = u.values[static_cast<std::size_t>(it - u.positions.begin())];
    total += chosen_v - log_sum_exp(u.values);
  }
  return total < kLogFloor ? kLogZero : total;
}

double consumer_surplus(const WaveObservation& wave, const ClassSpec& spec,
                        const ClassTasteParams& params) {
  if (wave.situations.empty()) throw ModelError("consumer surplus of a wave without situations");
  double total = 0.0;
  for (const auto& sit : wave.situations) {
    const EffectiveUtilities u = class_utilities(sit, spec, params);
    if (u.empty()) {
      throw ModelError("consumer surplus undefined: class '" + spec.name +
                       "' has no available alternative in situation " +
                       std::to_string(sit.situation_id) + " of wave " + std::to_string(wave.wave));
    }
    total += log_sum_exp(u.values);
  }
  return total / static_cast<double>(wave.situations.size());
}

}  // namespace modality
