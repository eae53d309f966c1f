#include "modality/panel.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "modality/error.hpp"

namespace modality {

namespace {

using nlohmann::json;

std::size_t find_name(const std::vector<std::string>& names, const std::string& name,
                      const char* what) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    throw ValidationError(std::string("unknown ") + what + " '" + name + "'");
  }
  return static_cast<std::size_t>(it - names.begin());
}

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

class CsvFile {
 public:
  explicit CsvFile(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) {
        line.erase(0, 3);
      }
      if (trim(line).empty()) continue;
      auto fields = split_line(line);
      for (auto& f : fields) f = trim(f);
      if (!have_header) {
        header_ = std::move(fields);
        have_header = true;
        continue;
      }
      if (fields.size() != header_.size()) {
        throw ValidationError(where(lineno) + ": expected " + std::to_string(header_.size()) +
                              " fields, found " + std::to_string(fields.size()));
      }
      rows_.push_back({lineno, std::move(fields)});
    }
    if (!have_header) throw ValidationError(path.string() + ": missing header row");
  }

  std::size_t column(const std::string& name) const {
    auto it = std::find(header_.begin(), header_.end(), name);
    if (it == header_.end()) {
      throw ValidationError(path_.string() + ": missing column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header_.begin());
  }

  std::string name() const { return path_.filename().string(); }

  std::string where(std::size_t line) const {
    return path_.filename().string() + ":" + std::to_string(line);
  }

  double number(const CsvRow& row, std::size_t col) const {
    const std::string& s = row.fields[col];
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
      throw ValidationError(where(row.line) + ": non-numeric value '" + s + "' in column '" +
                            header_[col] + "'");
    }
    return value;
  }

  int integer(const CsvRow& row, std::size_t col) const {
    const std::string& s = row.fields[col];
    int value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
      throw ValidationError(where(row.line) + ": expected an integer in column '" +
                            header_[col] + "', found '" + s + "'");
    }
    return value;
  }

  bool flag(const CsvRow& row, std::size_t col) const {
    int v = integer(row, col);
    if (v != 0 && v != 1) {
      throw ValidationError(where(row.line) + ": column '" + header_[col] + "' must be 0 or 1");
    }
    return v == 1;
  }

  const std::vector<CsvRow>& rows() const { return rows_; }

 private:
  std::filesystem::path path_;
  std::vector<std::string> header_;
  std::vector<CsvRow> rows_;
};

void check_identifier(const std::string& id, const char* what) {
  if (id.empty() || id.find_first_of(",\r\n") != std::string::npos ||
      trim(id) != id) {
    throw ValidationError(std::string(what) + " '" + id +
                          "' cannot be written to CSV (empty, comma, newline or padding)");
  }
}

}  // namespace

std::size_t Schema::mode_index(const std::string& alt_id) const {
  return find_name(modes, alt_id, "mode");
}
std::size_t Schema::attribute_index(const std::string& name) const {
  return find_name(attributes, name, "attribute");
}
std::size_t Schema::covariate_index(const std::string& name) const {
  return find_name(covariates, name, "covariate");
}

std::size_t PanelDataset::n_situations() const {
  std::size_t n = 0;
  for (const auto& ind : individuals)
    for (const auto& w : ind.waves) n += w.situations.size();
  return n;
}

int PanelDataset::max_waves() const {
  int t = 0;
  for (const auto& ind : individuals) t = std::max(t, static_cast<int>(ind.waves.size()));
  return t;
}

void validate(const PanelDataset& d) {
  const auto& sc = d.schema;
  if (sc.modes.empty()) throw ValidationError("schema has no modes");
  std::set<std::string> seen_names;
  for (const auto& m : sc.modes) {
    if (!seen_names.insert("mode:" + m).second) throw ValidationError("duplicate mode " + m);
  }
  std::set<std::string> persons;
  for (const auto& ind : d.individuals) {
    const std::string who = "person '" + ind.person_id + "'";
    if (!persons.insert(ind.person_id).second) throw ValidationError("duplicate " + who);
    if (ind.waves.empty()) throw ValidationError(who + " has no waves");
    for (std::size_t t = 0; t < ind.waves.size(); ++t) {
      const auto& w = ind.waves[t];
      const std::string at = who + " wave " + std::to_string(w.wave);
      if (w.wave != static_cast<int>(t) + 1) {
        throw ValidationError(at + ": waves must be consecutive starting at 1 (gap waves unsupported)");
      }
      if (w.situations.empty()) throw ValidationError(at + " has no choice situations");
      if (w.covariates.size() != sc.covariates.size()) {
        throw ValidationError(at + ": covariate vector length mismatch");
      }
      for (const auto& sit : w.situations) {
        const std::string where = at + " situation " + std::to_string(sit.situation_id);
        if (sit.alternatives.empty()) throw ValidationError(where + " has no alternatives");
        if (sit.chosen >= sit.alternatives.size()) throw ValidationError(where + ": no chosen alternative");
        if (!sit.chosen_alternative().available) {
          throw ValidationError(where + ": chosen alternative is unavailable");
        }
        std::vector<bool> used(sc.modes.size(), false);
        for (const auto& alt : sit.alternatives) {
          if (alt.mode >= sc.modes.size()) throw ValidationError(where + ": mode index out of range");
          if (used[alt.mode]) throw ValidationError(where + ": duplicate alternative " + sc.modes[alt.mode]);
          used[alt.mode] = true;
          if (alt.attributes.size() != sc.attributes.size()) {
            throw ValidationError(where + ": attribute vector length mismatch");
          }
        }
      }
    }
  }
}

Schema schema_from_json(const json& j) {
  Schema s;
  s.attributes = j.value("attributes", std::vector<std::string>{});
  s.covariates = j.value("covariates", std::vector<std::string>{});
  s.modes = j.at("modes").get<std::vector<std::string>>();
  return s;
}

json to_json(const Schema& schema) {
  return {{"attributes", schema.attributes}, {"covariates", schema.covariates}, {"modes", schema.modes}};
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    json j;
    in >> j;
    return schema_from_json(j);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_schema(const Schema& schema, const std::filesystem::path& path) {
  const json j = to_json(schema);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

PanelDataset load_panel(const std::filesystem::path& choices_csv,
                        const std::filesystem::path& covariates_csv,
                        const std::filesystem::path& schema_json) {
  return load_panel(choices_csv, covariates_csv, load_schema(schema_json));
}

PanelDataset load_panel(const std::filesystem::path& choices_csv,
                        const std::filesystem::path& covariates_csv, const Schema& schema) {
  CsvFile choices(choices_csv);
  const std::size_t c_person = choices.column("person_id");
  const std::size_t c_wave = choices.column("wave");
  const std::size_t c_sit = choices.column("situation");
  const std::size_t c_alt = choices.column("alt_id");
  const std::size_t c_avail = choices.column("available");
  const std::size_t c_chosen = choices.column("chosen");
  std::vector<std::size_t> c_attr;
  for (const auto& a : schema.attributes) c_attr.push_back(choices.column(a));

  struct SituationBuild {
    ChoiceSituation situation;
    std::size_t first_line = 0;
    int n_chosen = 0;
    std::size_t chosen_line = 0;
  };
  using WaveMap = std::map<int, std::map<int, SituationBuild>>;
  std::vector<std::string> person_order;
  std::unordered_map<std::string, WaveMap> people;

  for (const auto& row : choices.rows()) {
    const std::string& person = row.fields[c_person];
    if (person.empty()) throw ValidationError(choices.where(row.line) + ": empty person_id");
    const int wave = choices.integer(row, c_wave);
    const int sit_id = choices.integer(row, c_sit);
    if (wave < 1) throw ValidationError(choices.where(row.line) + ": wave index must be >= 1");
    Alternative alt;
    const std::string& alt_id = row.fields[c_alt];
    try {
      alt.mode = schema.mode_index(alt_id);
    } catch (const ValidationError& e) {
      throw ValidationError(choices.where(row.line) + ": " + e.what());
    }
    alt.available = choices.flag(row, c_avail);
    const bool chosen = choices.flag(row, c_chosen);
    alt.attributes.reserve(c_attr.size());
    for (auto c : c_attr) alt.attributes.push_back(choices.number(row, c));

    auto [pit, inserted] = people.try_emplace(person);
    if (inserted) person_order.push_back(person);
    auto& sb = pit->second[wave][sit_id];
    if (sb.situation.alternatives.empty()) {
      sb.situation.situation_id = sit_id;
      sb.first_line = row.line;
    }
    for (const auto& existing : sb.situation.alternatives) {
      if (existing.mode == alt.mode) {
        throw ValidationError(choices.where(row.line) + ": duplicate alternative '" + alt_id +
                              "' in situation");
      }
    }
    if (chosen) {
      if (!alt.available) {
        throw ValidationError(choices.where(row.line) + ": chosen alternative '" + alt_id +
                              "' is marked unavailable");
      }
      ++sb.n_chosen;
      sb.chosen_line = row.line;
      sb.situation.chosen = sb.situation.alternatives.size();
    }
    sb.situation.alternatives.push_back(std::move(alt));
  }

  CsvFile covs(covariates_csv);
  const std::size_t v_person = covs.column("person_id");
  const std::size_t v_wave = covs.column("wave");
  std::vector<std::size_t> c_cov;
  for (const auto& c : schema.covariates) c_cov.push_back(covs.column(c));
  std::map<std::pair<std::string, int>, std::pair<std::vector<double>, std::size_t>> cov_rows;
  for (const auto& row : covs.rows()) {
    std::vector<double> z;
    for (auto c : c_cov) z.push_back(covs.number(row, c));
    auto key = std::make_pair(row.fields[v_person], covs.integer(row, v_wave));
    if (!cov_rows.emplace(key, std::make_pair(std::move(z), row.line)).second) {
      throw ValidationError(covs.where(row.line) + ": duplicate covariate row for person '" +
                            key.first + "' wave " + std::to_string(key.second));
    }
  }

  PanelDataset d;
  d.schema = schema;
  std::size_t covs_used = 0;
  for (const auto& person : person_order) {
    IndividualRecord rec;
    rec.person_id = person;
    int expected = 1;
    for (auto& [wave, sits] : people.at(person)) {
      if (wave != expected) {
        throw ValidationError(choices.where(sits.begin()->second.first_line) + ": person '" +
                              person + "' jumps to wave " + std::to_string(wave) +
                              " (waves must be consecutive starting at 1)");
      }
      ++expected;
      WaveObservation w;
      w.wave = wave;
      for (auto& [sid, sb] : sits) {
        if (sb.n_chosen == 0) {
          throw ValidationError(choices.where(sb.first_line) + ": situation " + std::to_string(sid) +
                                " of person '" + person + "' wave " + std::to_string(wave) +
                                " has no chosen alternative");
        }
        if (sb.n_chosen > 1) {
          throw ValidationError(choices.where(sb.chosen_line) + ": situation " +
                                std::to_string(sid) + " of person '" + person + "' wave " +
                                std::to_string(wave) + " has more than one chosen alternative");
        }
        w.situations.push_back(std::move(sb.situation));
      }
      auto cit = cov_rows.find({person, wave});
      if (cit == cov_rows.end()) {
        throw ValidationError(covs.name() + ": no covariate row for person '" + person +
                              "' wave " + std::to_string(wave));
      }
      w.covariates = cit->second.first;
      ++covs_used;
      rec.waves.push_back(std::move(w));
    }
    d.individuals.push_back(std::move(rec));
  }
  if (covs_used != cov_rows.size()) {
    for (const auto& [key, val] : cov_rows) {
      auto pit = people.find(key.first);
      if (pit == people.end() || !pit->second.count(key.second)) {
        throw ValidationError(covs.where(val.second) + ": covariate row for person '" + key.first +
                              "' wave " + std::to_string(key.second) + " has no choices");
      }
    }
  }
  validate(d);
  return d;
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  (void)ec;
  return std::string(buf, ptr);
}

void write_panel(const PanelDataset& d, const std::filesystem::path& choices_csv,
                 const std::filesystem::path& covariates_csv) {
  validate(d);
  for (const auto& a : d.schema.attributes) check_identifier(a, "attribute");
  for (const auto& c : d.schema.covariates) check_identifier(c, "covariate");
  for (const auto& m : d.schema.modes) check_identifier(m, "mode");

  std::ofstream ch(choices_csv);
  if (!ch) throw IoError("cannot write " + choices_csv.string());
  ch << "person_id,wave,situation,alt_id,available,chosen";
  for (const auto& a : d.schema.attributes) ch << ',' << a;
  ch << '\n';
  std::ofstream cv(covariates_csv);
  if (!cv) throw IoError("cannot write " + covariates_csv.string());
  cv << "person_id,wave";
  for (const auto& c : d.schema.covariates) cv << ',' << c;
  cv << '\n';

  for (const auto& ind : d.individuals) {
    check_identifier(ind.person_id, "person_id");
    for (const auto& w : ind.waves) {
      for (const auto& sit : w.situations) {
        for (std::size_t j = 0; j < sit.alternatives.size(); ++j) {
          const auto& alt = sit.alternatives[j];
          ch << ind.person_id << ',' << w.wave << ',' << sit.situation_id << ','
             << d.schema.modes[alt.mode] << ',' << (alt.available ? 1 : 0) << ','
             << (j == sit.chosen ? 1 : 0);
          for (double x : alt.attributes) ch << ',' << format_double(x);
          ch << '\n';
        }
      }
      cv << ind.person_id << ',' << w.wave;
      for (double z : w.covariates) cv << ',' << format_double(z);
      cv << '\n';
    }
  }
  if (!ch || !cv) throw IoError("write failed for " + choices_csv.string());
}

PanelDataset censor_left(const PanelDataset& d, int first_kept_wave) {
  if (first_kept_wave < 1) throw ValidationError("first kept wave must be >= 1");
  std::vector<std::string> emptied;
  PanelDataset out;
  out.schema = d.schema;
  out.individuals.reserve(d.individuals.size());
  for (const auto& ind : d.individuals) {
    IndividualRecord rec;
    rec.person_id = ind.person_id;
    for (const auto& w : ind.waves) {
      if (w.wave < first_kept_wave) continue;
      WaveObservation kept = w;
      kept.wave = w.wave - first_kept_wave + 1;
      rec.waves.push_back(std::move(kept));
    }
    if (rec.waves.empty()) {
      emptied.push_back(ind.person_id);
      continue;
    }
    out.individuals.push_back(std::move(rec));
  }
  if (!emptied.empty()) {
    std::string msg = "censoring at wave " + std::to_string(first_kept_wave) +
                      " removes every wave of: ";
    for (std::size_t i = 0; i < emptied.size(); ++i) {
      if (i) msg += ", ";
      msg += emptied[i];
    }
    throw ValidationError(msg);
  }
  return out;
}

}  // namespace modality
