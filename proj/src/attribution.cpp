#include "gradval/attribution.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "gradval/field_io.hpp"

namespace gradval {

std::string to_string(Method m) {
  switch (m) {
    case Method::ig: return "IG";
    case Method::gti: return "GTI";
    case Method::vg: return "VG";
  }
  return "?";
}

std::string to_string(BaselineKind b) {
  switch (b) {
    case BaselineKind::climatology: return "climatology";
    case BaselineKind::zero: return "zero";
    case BaselineKind::persistence: return "persistence";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "IG" || s == "ig") return Method::ig;
  if (s == "GTI" || s == "gti") return Method::gti;
  if (s == "VG" || s == "vg") return Method::vg;
  throw std::invalid_argument("unknown attribution method: " + s);
}

BaselineKind baseline_from_string(const std::string& s) {
  if (s == "climatology") return BaselineKind::climatology;
  if (s == "zero") return BaselineKind::zero;
  if (s == "persistence") return BaselineKind::persistence;
  throw std::invalid_argument("unknown baseline: " + s);
}

namespace {

Provenance make_provenance(const ForecastModel& model, const FieldTensor& x, Method m, int steps,
                           int evals) {
  Provenance p;
  p.method = m;
  p.steps = steps;
  p.timestamp = x.timestamp();
  p.model_id = model.id();
  p.seed = model.config().seed;
  p.gradient_evals = evals;
  return p;
}

}  // namespace

namespace {

FieldTensor path_point(const FieldTensor& x, const FieldTensor& baseline, int k, int steps) {
  FieldTensor point(x.grid_ptr(), x.timestamp());
  if (k == steps) {
    std::copy(x.values().begin(), x.values().end(), point.values().begin());
    return point;
  }
  const double alpha = static_cast<double>(k) / steps;
  auto xv = x.values();
  auto bv = baseline.values();
  auto pv = point.values();
  for (std::size_t n = 0; n < pv.size(); ++n) pv[n] = bv[n] + alpha * (xv[n] - bv[n]);
  return point;
}

AttributionMap finish_ig(const ForecastModel& model, const FieldTensor& x, const FieldTensor& baseline,
                         const std::vector<double>& acc, int steps, int evals) {
  AttributionMap out{FieldTensor(x.grid_ptr(), x.timestamp()), make_provenance(model, x, Method::ig, steps, evals)};
  auto xv = x.values();
  auto bv = baseline.values();
  auto ov = out.scores.values();
  for (std::size_t n = 0; n < ov.size(); ++n) ov[n] = (xv[n] - bv[n]) * (acc[n] / steps);
  return out;
}

}  // namespace

AttributionMap integrated_gradients(const ForecastModel& model, const FieldTensor& x,
                                    const FieldTensor& baseline, int steps) {
  if (steps < 1) throw std::invalid_argument("IG needs K >= 1");
  require_same_shape(x, baseline);
  require_same_shape(x, FieldTensor(model.grid_ptr()));
  std::vector<double> acc(x.size(), 0.0);
  for (int k = 0; k <= steps; ++k) {
    const double w = (k == 0 || k == steps) ? 0.5 : 1.0;
    const FieldTensor g = model.gradient(path_point(x, baseline, k, steps));
    auto gv = g.values();
    for (std::size_t n = 0; n < acc.size(); ++n) acc[n] += w * gv[n];
  }
  return finish_ig(model, x, baseline, acc, steps, steps + 1);
}

std::vector<AttributionMap> integrated_gradients_multi(const ForecastModel& model, const FieldTensor& x,
                                                       const FieldTensor& baseline, std::span<const int> steps,
                                                       FieldTensor* gradient_at_input) {
  require_same_shape(x, baseline);
  require_same_shape(x, FieldTensor(model.grid_ptr()));
  for (int s : steps) {
    if (s < 1) throw std::invalid_argument("IG needs K >= 1");
  }
  std::vector<std::pair<double, FieldTensor>> cache;
  auto grad_at = [&](int k, int K) -> const FieldTensor& {
    const double alpha = static_cast<double>(k) / K;
    for (const auto& [a, g] : cache) {
      if (a == alpha) return g;
    }
    cache.emplace_back(alpha, model.gradient(path_point(x, baseline, k, K)));
    return cache.back().second;
  };
  std::vector<AttributionMap> out;
  for (int K : steps) {
    std::vector<double> acc(x.size(), 0.0);
    for (int k = 0; k <= K; ++k) {
      const double w = (k == 0 || k == K) ? 0.5 : 1.0;
      auto gv = grad_at(k, K).values();
      for (std::size_t n = 0; n < acc.size(); ++n) acc[n] += w * gv[n];
    }
    out.push_back(finish_ig(model, x, baseline, acc, K, K + 1));
  }
  if (gradient_at_input) *gradient_at_input = grad_at(1, 1);
  return out;
}

AttributionMap gradient_times_input(const ForecastModel& model, const FieldTensor& x,
                                    const FieldTensor& baseline, double* value) {
  require_same_shape(x, baseline);
  FieldTensor g = model.gradient(x, value);
  auto gv = g.values();
  auto xv = x.values();
  auto bv = baseline.values();
  for (std::size_t n = 0; n < gv.size(); ++n) gv[n] *= xv[n] - bv[n];
  return {std::move(g), make_provenance(model, x, Method::gti, 0, 1)};
}

AttributionMap vanilla_gradient(const ForecastModel& model, const FieldTensor& x, double* value) {
  return {model.gradient(x, value), make_provenance(model, x, Method::vg, 0, 1)};
}

AttributionMap attribute(const ForecastModel& model, const FieldTensor& x, const FieldTensor& baseline,
                         const AttributionConfig& config) {
  AttributionMap out;
  switch (config.method) {
    case Method::ig: out = integrated_gradients(model, x, baseline, config.steps); break;
    case Method::gti: out = gradient_times_input(model, x, baseline); break;
    case Method::vg: out = vanilla_gradient(model, x); break;
  }
  out.provenance.baseline = config.baseline;
  return out;
}

FieldTensor persistence_baseline(std::span<const FieldTensor> fields, std::size_t t) {
  if (t == 0) throw std::invalid_argument("persistence baseline needs t >= 1");
  if (t >= fields.size()) throw std::out_of_range("timestamp index out of range");
  return fields[t - 1];
}

FieldTensor zero_baseline(const GridPtr& grid) { return FieldTensor(grid); }

FieldTensor make_baseline(BaselineKind kind, std::span<const FieldTensor> fields, std::size_t t,
                          const Climatology& clim) {
  switch (kind) {
    case BaselineKind::climatology: return clim.mean();
    case BaselineKind::zero: return zero_baseline(fields[t].grid_ptr());
    case BaselineKind::persistence: return persistence_baseline(fields, t);
  }
  throw std::invalid_argument("unknown baseline");
}

std::vector<double> variable_importance(const FieldTensor& scores) {
  std::vector<double> out(static_cast<std::size_t>(scores.grid().n_vars()), 0.0);
  for (int v = 0; v < scores.grid().n_vars(); ++v) {
    double s = 0.0;
    for (double a : scores.variable(v)) s += std::abs(a);
    out[static_cast<std::size_t>(v)] = s;
  }
  return out;
}

std::vector<double> variable_importance(const AttributionMap& attr) {
  return variable_importance(attr.scores);
}

std::vector<double> spatial_importance(const FieldTensor& scores, const StationGrid& stations) {
  std::vector<double> out(stations.size(), 0.0);
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const auto& s = stations[k];
    for (int v = 0; v < scores.grid().n_vars(); ++v) out[k] += std::abs(scores.at(v, s.lat_index, s.lon_index));
  }
  return out;
}

std::vector<double> spatial_importance(const AttributionMap& attr, const StationGrid& stations) {
  return spatial_importance(attr.scores, stations);
}

std::vector<double> spatial_signed(const FieldTensor& scores, const StationGrid& stations) {
  std::vector<double> out(stations.size(), 0.0);
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const auto& s = stations[k];
    for (int v = 0; v < scores.grid().n_vars(); ++v) out[k] += scores.at(v, s.lat_index, s.lon_index);
  }
  return out;
}

std::vector<double> time_average(std::span<const std::vector<double>> maps) {
  if (maps.empty()) throw std::invalid_argument("time_average of an empty list");
  std::vector<double> out(maps.front().size(), 0.0);
  for (const auto& m : maps) {
    if (m.size() != out.size()) throw std::invalid_argument("time_average: length mismatch");
    for (std::size_t n = 0; n < out.size(); ++n) out[n] += m[n];
  }
  for (double& v : out) v /= static_cast<double>(maps.size());
  return out;
}

void write_attribution(const std::filesystem::path& path, const AttributionMap& attr) {
  write_fields(path, std::span<const FieldTensor>(&attr.scores, 1));
  const auto& p = attr.provenance;
  nlohmann::json j{{"method", to_string(p.method)}, {"baseline", to_string(p.baseline)},
                   {"steps", p.steps},             {"seed", p.seed},
                   {"timestamp", p.timestamp},     {"model_id", p.model_id},
                   {"gradient_evals", p.gradient_evals}};
  std::ofstream out(path.string() + ".json");
  if (!out) throw std::runtime_error("cannot write " + path.string() + ".json");
  out << j.dump(2) << '\n';
}

}  // namespace gradval
