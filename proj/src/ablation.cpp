#include "gradval/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "gradval/rng.hpp"

namespace gradval {

std::string to_string(PerturbMode m) {
  switch (m) {
    case PerturbMode::mean_replace: return "mean_replace";
    case PerturbMode::scale_bias: return "scale_bias";
    case PerturbMode::additive_noise: return "additive_noise";
  }
  return "?";
}

PerturbMode perturb_mode_from_string(const std::string& s) {
  if (s == "mean_replace") return PerturbMode::mean_replace;
  if (s == "scale_bias") return PerturbMode::scale_bias;
  if (s == "additive_noise") return PerturbMode::additive_noise;
  throw std::invalid_argument("unknown perturbation mode: " + s);
}

GlobalUtilityVector global_ablation(const ForecastModel& model, const FieldTensor& x, double y_star,
                                    const Climatology& clim) {
  require_same_shape(x, clim.mean());
  GlobalUtilityVector out;
  out.timestamp = x.timestamp();
  const double base = std::abs(model.forward(x) - y_star);
  const int n_vars = x.grid().n_vars();
  out.utility.resize(static_cast<std::size_t>(n_vars));
  for (int v = 0; v < n_vars; ++v) {
    FieldTensor ablated = x;
    auto src = clim.mean().variable(v);
    std::copy(src.begin(), src.end(), ablated.variable(v).begin());
    out.utility[static_cast<std::size_t>(v)] = std::abs(model.forward(ablated) - y_star) - base;
  }
  return out;
}

void validate(const PerturbationSpec& spec, const GridSpec& grid) {
  if (spec.patch < 1 || spec.patch % 2 == 0) throw std::invalid_argument("patch size must be odd and >= 1");
  if (spec.mode != PerturbMode::mean_replace && !(spec.magnitude >= 0.0)) {
    throw std::invalid_argument("perturbation magnitude must be >= 0");
  }
  if (spec.mode == PerturbMode::additive_noise &&
      spec.noise_std.size() != static_cast<std::size_t>(grid.n_vars())) {
    throw std::invalid_argument("additive_noise needs one noise std per variable");
  }
}

CellBox patch_box(const GridSpec& grid, const Station& station, int patch) {
  if (!grid.contains(station.lat_index, station.lon_index)) throw std::invalid_argument("invalid station");
  const int h = patch / 2;
  return CellBox{station.lat_index, station.lat_index + 1, station.lon_index, station.lon_index + 1}
      .dilate(h)
      .intersect({0, grid.n_lat(), 0, grid.n_lon()});
}

FieldTensor perturb_boxes(const FieldTensor& x, std::span<const CellBox> boxes,
                          const PerturbationSpec& spec, const Climatology& clim) {
  require_same_shape(x, clim.mean());
  validate(spec, x.grid());
  const GridSpec& grid = x.grid();
  FieldTensor out = x;
  CellBox hull{};
  for (const auto& b : boxes) hull = hull.hull(b);
  for (int i = hull.i0; i < hull.i1; ++i) {
    for (int j = hull.j0; j < hull.j1; ++j) {
      bool inside = false;
      for (const auto& b : boxes) inside = inside || b.contains(i, j);
      if (!inside) continue;
      for (int v = 0; v < grid.n_vars(); ++v) {
        const double xv = x.at(v, i, j);
        const double c = clim.mean().at(v, i, j);
        double& dst = out.at(v, i, j);
        switch (spec.mode) {
          case PerturbMode::mean_replace: dst = c; break;
          case PerturbMode::scale_bias: dst = xv + spec.magnitude * (xv - c); break;
          case PerturbMode::additive_noise: {
            // Keyed per cell so a cell's noise is the same in single and joint patches.
            const std::uint64_t key = derive_seed(
                spec.seed, {static_cast<std::uint64_t>(x.timestamp()), static_cast<std::uint64_t>(v),
                            grid.cell(i, j)});
            dst = xv + spec.magnitude * spec.noise_std[static_cast<std::size_t>(v)] * hashed_normal(key);
            break;
          }
        }
      }
    }
  }
  return out;
}

FieldTensor perturb_patch(const FieldTensor& x, const Station& station, const PerturbationSpec& spec,
                          const Climatology& clim) {
  const CellBox box = patch_box(x.grid(), station, spec.patch);
  return perturb_boxes(x, std::span<const CellBox>(&box, 1), spec, clim);
}

SpatialUtilityMap spatial_utility(const ForecastModel& model, const FieldTensor& x, double y_star,
                                  const StationGrid& stations, const PerturbationSpec& spec,
                                  const Climatology& clim) {
  validate(spec, x.grid());
  SpatialUtilityMap out;
  out.spec = spec;
  out.timestamp = x.timestamp();
  const ForwardState state = model.forward_state(x);
  const double base = std::abs(state.prediction - y_star);
  out.signed_utility.resize(stations.size());
  out.abs_utility.resize(stations.size());
  out.cells_perturbed.resize(stations.size());
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const CellBox box = patch_box(x.grid(), stations[k], spec.patch);
    const FieldTensor perturbed = perturb_boxes(x, std::span<const CellBox>(&box, 1), spec, clim);
    const double u = std::abs(model.forward_patched(state, perturbed, std::span<const CellBox>(&box, 1)) - y_star) - base;
    out.signed_utility[k] = u;
    out.abs_utility[k] = std::abs(u);
    out.cells_perturbed[k] = (box.i1 - box.i0) * (box.j1 - box.j0);
  }
  return out;
}

JointAblation joint_ablation(const ForecastModel& model, const FieldTensor& x, double y_star,
                             const StationGrid& stations, std::span<const std::size_t> subset,
                             const PerturbationSpec& spec, const Climatology& clim) {
  if (subset.empty()) throw std::invalid_argument("joint ablation needs a non-empty set");
  const ForwardState state = model.forward_state(x);
  const double base = std::abs(state.prediction - y_star);
  JointAblation out;
  std::vector<CellBox> boxes;
  for (std::size_t k : subset) {
    if (k >= stations.size()) throw std::invalid_argument("invalid station");
    const CellBox box = patch_box(x.grid(), stations[k], spec.patch);
    boxes.push_back(box);
    const FieldTensor p = perturb_boxes(x, std::span<const CellBox>(&box, 1), spec, clim);
    const double u = std::abs(model.forward_patched(state, p, std::span<const CellBox>(&box, 1)) - y_star) - base;
    out.individual.push_back(u);
    out.individual_sum += u;
  }
  const FieldTensor joint = perturb_boxes(x, boxes, spec, clim);
  out.joint = std::abs(model.forward_patched(state, joint, boxes) - y_star) - base;
  if (std::abs(out.individual_sum) >= 1e-12) out.ratio = out.joint / out.individual_sum;
  return out;
}

std::vector<double> per_variable_std(std::span<const FieldTensor> fields) {
  if (fields.empty()) throw std::invalid_argument("per_variable_std of no fields");
  const int n_vars = fields.front().grid().n_vars();
  std::vector<double> out(static_cast<std::size_t>(n_vars), 0.0);
  for (int v = 0; v < n_vars; ++v) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& f : fields) {
      for (double x : f.variable(v)) sum += x;
      n += f.grid().n_cells();
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& f : fields) {
      for (double x : f.variable(v)) ss += (x - mean) * (x - mean);
    }
    out[static_cast<std::size_t>(v)] = std::sqrt(ss / static_cast<double>(n));
  }
  return out;
}

void write_spatial_utility_csv(const std::filesystem::path& path, std::span<const SpatialUtilityMap> maps,
                               const StationGrid& stations) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "timestamp,station_id,lat,lon,U_signed,U_abs,mode,patch,magnitude,cells\n";
  char buf[256];
  for (const auto& m : maps) {
    for (std::size_t k = 0; k < stations.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%lld,%d,%.4f,%.4f,%.10g,%.10g,%s,%d,%.4g,%d\n",
                    static_cast<long long>(m.timestamp), stations[k].id, stations.lat(k), stations.lon(k),
                    m.signed_utility[k], m.abs_utility[k], to_string(m.spec.mode).c_str(), m.spec.patch,
                    m.spec.magnitude, m.cells_perturbed[k]);
      out << buf;
    }
  }
}

}  // namespace gradval
