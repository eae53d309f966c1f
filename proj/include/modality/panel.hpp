#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace modality {

// Names of the attribute columns, covariate columns and the full set of
// modes that may appear in a panel.
struct Schema {
  std::vector<std::string> attributes;
  std::vector<std::string> covariates;
  std::vector<std::string> modes;

  std::size_t mode_index(const std::string& alt_id) const;  // throws ValidationError
  std::size_t attribute_index(const std::string& name) const;
  std::size_t covariate_index(const std::string& name) const;

  bool operator==(const Schema&) const = default;
};

struct Alternative {
  std::size_t mode = 0;  // index into Schema::modes
  bool available = true;
  std::vector<double> attributes;

  bool operator==(const Alternative&) const = default;
};

struct ChoiceSituation {
  int situation_id = 1;
  std::vector<Alternative> alternatives;
  std::size_t chosen = 0;  // position in `alternatives`

  const Alternative& chosen_alternative() const { return alternatives[chosen]; }
  bool operator==(const ChoiceSituation&) const = default;
};

struct WaveObservation {
  int wave = 1;
  std::vector<ChoiceSituation> situations;
  std::vector<double> covariates;

  bool operator==(const WaveObservation&) const = default;
};

struct IndividualRecord {
  std::string person_id;
  std::vector<WaveObservation> waves;

  bool operator==(const IndividualRecord&) const = default;
};

struct PanelDataset {
  Schema schema;
  std::vector<IndividualRecord> individuals;

  std::size_t n_situations() const;
  int max_waves() const;
  bool operator==(const PanelDataset&) const = default;
};

// Checks every structural invariant of a dataset; throws ValidationError
// describing the first violation.
void validate(const PanelDataset& dataset);

Schema schema_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Schema& schema);
Schema load_schema(const std::filesystem::path& path);
void write_schema(const Schema& schema, const std::filesystem::path& path);

// Reads the long-format choices CSV and the covariates CSV. Errors carry the
// file name and line number of the offending row.
PanelDataset load_panel(const std::filesystem::path& choices_csv,
                        const std::filesystem::path& covariates_csv,
                        const Schema& schema);
PanelDataset load_panel(const std::filesystem::path& choices_csv,
                        const std::filesystem::path& covariates_csv,
                        const std::filesystem::path& schema_json);

// Writes both CSVs; floats use shortest round-trip formatting so that
// load_panel(write_panel(d)) == d exactly.
void write_panel(const PanelDataset& dataset,
                 const std::filesystem::path& choices_csv,
                 const std::filesystem::path& covariates_csv);

// Drops every wave before `first_kept_wave` and renumbers the remaining
// waves from 1.
PanelDataset censor_left(const PanelDataset& dataset, int first_kept_wave);

// Shortest decimal representation that parses back to the same double.
std::string format_double(double value);

}  // namespace modality
