#include "modality/params.hpp"

#include <cmath>
#include <fstream>

#include "modality/error.hpp"

namespace modality {

using nlohmann::json;

ParameterSet ParameterSet::zeros(const ModelSpec& spec) {
  const std::size_t S = spec.n_classes();
  const auto& sc = spec.schema();
  ParameterSet p;
  p.tastes.assign(S, ClassTasteParams{std::vector<double>(sc.modes.size(), 0.0),
                                      std::vector<double>(sc.attributes.size(), 0.0)});
  p.init.tau = Eigen::MatrixXd::Zero(S, spec.width());
  p.trans.gamma.assign(S, Eigen::MatrixXd::Zero(S, spec.width()));
  p.trans.alpha = Eigen::MatrixXd::Zero(S, S);
  apply_constraints(spec, p);
  return p;
}

namespace {

// Calls fn(cell_index, reference-to-value) for every cell.
template <typename Params, typename Fn>
void for_each_cell(const ModelSpec& spec, Params& p, Fn&& fn) {
  for (std::size_t i = 0; i < spec.n_cells(); ++i) {
    const auto& c = spec.cell(i);
    switch (c.kind) {
      case CellKind::Asc: fn(i, p.tastes[c.cls].asc[c.index]); break;
      case CellKind::Coefficient: fn(i, p.tastes[c.cls].coeffs[c.index]); break;
      case CellKind::InitConstant: fn(i, p.init.tau(c.cls, 0)); break;
      case CellKind::InitCovariate: fn(i, p.init.tau(c.cls, c.index + 1)); break;
      case CellKind::TransConstant: fn(i, p.trans.gamma[c.origin](c.cls, 0)); break;
      case CellKind::TransCovariate: fn(i, p.trans.gamma[c.origin](c.cls, c.index + 1)); break;
      case CellKind::Alpha: fn(i, p.trans.alpha(c.origin, c.cls)); break;
    }
  }
}

void check_shape(const ModelSpec& spec, const ParameterSet& p) {
  const std::size_t S = spec.n_classes();
  bool ok = p.tastes.size() == S && p.init.tau.rows() == static_cast<Eigen::Index>(S) &&
            p.init.tau.cols() == static_cast<Eigen::Index>(spec.width()) &&
            p.trans.gamma.size() == S && p.trans.alpha.rows() == static_cast<Eigen::Index>(S) &&
            p.trans.alpha.cols() == static_cast<Eigen::Index>(S);
  for (const auto& t : p.tastes) {
    ok = ok && t.asc.size() == spec.schema().modes.size() &&
         t.coeffs.size() == spec.schema().attributes.size();
  }
  for (const auto& g : p.trans.gamma) {
    ok = ok && g.rows() == static_cast<Eigen::Index>(S) && g.cols() == static_cast<Eigen::Index>(spec.width());
  }
  if (!ok) throw ValidationError("parameter set does not match the model spec");
}

}  // namespace

Eigen::VectorXd flatten(const ModelSpec& spec, const ParameterSet& params) {
  check_shape(spec, params);
  Eigen::VectorXd out(spec.n_cells());
  for_each_cell(spec, params, [&](std::size_t i, const double& v) { out[i] = v; });
  return out;
}

ParameterSet unflatten(const ModelSpec& spec, const Eigen::VectorXd& cells) {
  ParameterSet p = ParameterSet::zeros(spec);
  for_each_cell(spec, p, [&](std::size_t i, double& v) { v = cells[i]; });
  return p;
}

void apply_constraints(const ModelSpec& spec, ParameterSet& params) {
  for_each_cell(spec, params, [&](std::size_t i, double& v) {
    const auto& c = spec.cell(i);
    if (!c.free) v = c.fixed_value;
  });
}

double softplus(double x) {
  return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

Eigen::VectorXd to_free(const ModelSpec& spec, const ParameterSet& params, double alpha_floor) {
  const Eigen::VectorXd cells = flatten(spec, params);
  Eigen::VectorXd theta(spec.n_free());
  for (std::size_t k = 0; k < spec.n_free(); ++k) {
    const std::size_t i = spec.free_cells()[k];
    if (spec.cell(i).kind == CellKind::Alpha) {
      theta[k] = softplus_inverse(std::max(cells[i], alpha_floor));
    } else {
      theta[k] = cells[i];
    }
  }
  return theta;
}

ParameterSet from_free(const ModelSpec& spec, const Eigen::VectorXd& theta) {
  if (theta.size() != static_cast<Eigen::Index>(spec.n_free())) {
    throw ValidationError("free parameter vector has the wrong length");
  }
  ParameterSet p = ParameterSet::zeros(spec);
  Eigen::VectorXd cells = flatten(spec, p);
  for (std::size_t k = 0; k < spec.n_free(); ++k) {
    const std::size_t i = spec.free_cells()[k];
    cells[i] = spec.cell(i).kind == CellKind::Alpha ? softplus(theta[k]) : theta[k];
  }
  return unflatten(spec, cells);
}

Eigen::VectorXd free_jacobian(const ModelSpec& spec, const Eigen::VectorXd& theta) {
  Eigen::VectorXd d = Eigen::VectorXd::Ones(theta.size());
  for (std::size_t k = 0; k < spec.n_free(); ++k) {
    if (spec.cell(spec.free_cells()[k]).kind == CellKind::Alpha) {
      d[k] = 1.0 / (1.0 + std::exp(-theta[k]));
    }
  }
  return d;
}

json params_to_json(const ModelSpec& spec, const ParameterSet& params,
                    const std::optional<Eigen::VectorXd>& cell_se) {
  check_shape(spec, params);
  const auto& sc = spec.schema();
  const std::size_t S = spec.n_classes();
  auto value = [&](std::size_t cell, double v) -> json {
    if (!cell_se || !spec.cell(cell).free) return v;
    const double se = (*cell_se)[cell];
    return {{"estimate", v}, {"se", se}, {"t", se > 0.0 ? v / se : 0.0}};
  };

  json classes = json::array();
  for (std::size_t s = 0; s < S; ++s) {
    json asc = json::object(), coef = json::object();
    for (std::size_t m = 0; m < sc.modes.size(); ++m) {
      if (spec.asc_cell(s, m) != kNoCell) asc[sc.modes[m]] = value(spec.asc_cell(s, m), params.tastes[s].asc[m]);
    }
    for (std::size_t a = 0; a < sc.attributes.size(); ++a) {
      coef[sc.attributes[a]] = value(spec.coef_cell(s, a), params.tastes[s].coeffs[a]);
    }
    classes.push_back({{"class", s + 1},
                       {"name", spec.class_spec(s).name},
                       {"asc", asc},
                       {"coefficients", coef}});
  }

  auto covariate_block = [&](auto cell_of, const Eigen::MatrixXd& m, std::size_t row) {
    json covs = json::object();
    for (std::size_t k = 0; k < sc.covariates.size(); ++k) {
      covs[sc.covariates[k]] = value(cell_of(k + 1), m(row, k + 1));
    }
    return covs;
  };

  json init = json::array();
  for (std::size_t s = 0; s < S; ++s) {
    auto cell_of = [&](std::size_t c) { return spec.init_cell(s, c); };
    init.push_back({{"class", s + 1},
                    {"const", value(cell_of(0), params.init.tau(s, 0))},
                    {"covariates", covariate_block(cell_of, params.init.tau, s)}});
  }

  json trans = json::array();
  for (std::size_t r = 0; r < S; ++r) {
    json dests = json::array();
    for (std::size_t s = 0; s < S; ++s) {
      auto cell_of = [&](std::size_t c) { return spec.trans_cell(r, s, c); };
      dests.push_back({{"class", s + 1},
                       {"const", value(cell_of(0), params.trans.gamma[r](s, 0))},
                       {"covariates", covariate_block(cell_of, params.trans.gamma[r], s)},
                       {"consumer_surplus", value(spec.alpha_cell(r, s), params.trans.alpha(r, s))}});
    }
    trans.push_back({{"origin", r + 1}, {"destinations", dests}});
  }

  json fixed = json::object();
  for (const auto& c : spec.cells()) {
    if (!c.free) fixed[c.name] = c.fixed_value;
  }
  return {{"classes", classes}, {"initialization", init}, {"transition", trans}, {"fixed", fixed}};
}

namespace {

double read_value(const json& j) {
  if (j.is_object()) return j.at("estimate").get<double>();
  return j.get<double>();
}

void read_if(const json& obj, const std::string& key, double& dst) {
  if (obj.contains(key)) dst = read_value(obj.at(key));
}

}  // namespace

ParameterSet params_from_json(const ModelSpec& spec, const json& j) {
  const auto& sc = spec.schema();
  const std::size_t S = spec.n_classes();
  ParameterSet p = ParameterSet::zeros(spec);
  try {
    const auto& classes = j.at("classes");
    if (classes.size() != S) throw ValidationError("parameter file has the wrong number of classes");
    for (std::size_t s = 0; s < S; ++s) {
      const auto& jc = classes.at(s);
      if (jc.contains("asc")) {
        for (const auto& [mode, v] : jc.at("asc").items()) {
          const std::size_t m = sc.mode_index(mode);
          if (spec.asc_cell(s, m) == kNoCell) {
            throw ValidationError("class " + std::to_string(s + 1) + " does not consider mode " + mode);
          }
          p.tastes[s].asc[m] = read_value(v);
        }
      }
      if (jc.contains("coefficients")) {
        for (const auto& [name, v] : jc.at("coefficients").items()) {
          p.tastes[s].coeffs[sc.attribute_index(name)] = read_value(v);
        }
      }
    }
    auto read_covs = [&](const json& obj, Eigen::MatrixXd& m, std::size_t row) {
      read_if(obj, "const", m(row, 0));
      if (!obj.contains("covariates")) return;
      for (const auto& [name, v] : obj.at("covariates").items()) {
        m(row, sc.covariate_index(name) + 1) = read_value(v);
      }
    };
    if (j.contains("initialization")) {
      const auto& init = j.at("initialization");
      if (init.size() != S) throw ValidationError("initialization block has the wrong number of classes");
      for (std::size_t s = 0; s < S; ++s) read_covs(init.at(s), p.init.tau, s);
    }
    if (j.contains("transition")) {
      const auto& trans = j.at("transition");
      if (trans.size() != S) throw ValidationError("transition block has the wrong number of origins");
      for (std::size_t r = 0; r < S; ++r) {
        const auto& dests = trans.at(r).at("destinations");
        if (dests.size() != S) throw ValidationError("transition row has the wrong number of destinations");
        for (std::size_t s = 0; s < S; ++s) {
          read_covs(dests.at(s), p.trans.gamma[r], s);
          read_if(dests.at(s), "consumer_surplus", p.trans.alpha(r, s));
        }
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("parameter file: ") + e.what());
  }
  // Fixed cells in the file must agree with the spec.
  const Eigen::VectorXd cells = flatten(spec, p);
  for (std::size_t i = 0; i < spec.n_cells(); ++i) {
    const auto& c = spec.cell(i);
    if (!c.free && cells[i] != c.fixed_value) {
      throw ValidationError("parameter '" + c.name + "' is fixed at " + std::to_string(c.fixed_value) +
                            " by the model spec but the file gives " + std::to_string(cells[i]));
    }
    if (c.kind == CellKind::Alpha && cells[i] < 0.0) {
      throw ValidationError("consumer-surplus loading '" + c.name + "' is negative");
    }
  }
  return p;
}

ParameterSet load_params(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return params_from_json(spec, j);
}

ParameterSet permute_classes(const ModelSpec& spec, const ParameterSet& p,
                             const std::vector<std::size_t>& perm) {
  const std::size_t S = spec.n_classes();
  if (perm.size() != S) throw ValidationError("permutation has the wrong size");
  ParameterSet out = p;
  for (std::size_t k = 0; k < S; ++k) {
    out.tastes[k] = p.tastes[perm[k]];
    out.init.tau.row(k) = p.init.tau.row(perm[k]) - p.init.tau.row(perm[0]);
    for (std::size_t j = 0; j < S; ++j) {
      out.trans.gamma[k].row(j) = p.trans.gamma[perm[k]].row(perm[j]) - p.trans.gamma[perm[k]].row(perm[0]);
      out.trans.alpha(k, j) = p.trans.alpha(perm[k], perm[j]);
    }
  }
  return out;
}

}  // namespace modality
