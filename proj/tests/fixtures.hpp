#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gradval/grid.hpp"
#include "gradval/model.hpp"
#include "gradval/synth.hpp"

namespace fixture {

inline gradval::GridPtr small_grid(int n_lat = 16, int n_lon = 20,
                                   std::vector<std::string> vars = {"t2m", "u10m", "msl"}) {
  gradval::GridConfig c;
  c.n_lat = n_lat;
  c.n_lon = n_lon;
  c.lat_min = 40.0;
  c.lat_max = 55.0;
  c.lon_min = 0.0;
  c.lon_max = 19.0;
  c.variables = std::move(vars);
  return gradval::make_grid(c);
}

inline gradval::GridPtr desk_grid() { return gradval::make_grid(gradval::GridConfig{}); }

inline gradval::TargetSpec centre_target(const gradval::GridSpec& g, const std::string& var = "t2m") {
  const double lat = 0.5 * (g.config().lat_min + g.config().lat_max);
  const double lon = 0.5 * (g.config().lon_min + g.config().lon_max);
  return gradval::make_target(g, "centre", lat, lon, var);
}

inline gradval::TargetSpec zurich(const gradval::GridSpec& g, const std::string& var = "t2m") {
  return gradval::make_target(g, "Zurich", 47.4, 8.6, var);
}

struct Data {
  std::vector<gradval::FieldTensor> fields;
  gradval::Climatology clim;
};

inline Data data(const gradval::GridPtr& grid, int n, std::uint64_t seed = 11, int draws = 200) {
  gradval::SynthOptions o;
  o.climatology_draws = draws;
  auto r = gradval::synth_fields(seed, grid, n, o);
  return {std::move(r.fields), std::move(r.climatology)};
}

struct FdReport {
  int checked = 0;
  int relative_ok = 0;  // relative error <= rel_tol
  int ok = 0;           // relative_ok, or absolute error <= abs_tol
  double worst_relative = 0.0;
};

/// Central finite differences with h = 1e-4 * variable scale at `n` random
/// coordinates, compared against the reverse-mode gradient.
inline FdReport finite_difference_check(const gradval::ForecastModel& model, const gradval::FieldTensor& x, int n,
                                        std::uint64_t seed, double rel_tol = 1e-5, double abs_tol = 1e-9) {
  const auto grad = model.gradient(x);
  const auto& g = model.grid();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pv(0, g.n_vars() - 1), pi(0, g.n_lat() - 1), pj(0, g.n_lon() - 1);
  FdReport r;
  for (int s = 0; s < n; ++s) {
    const int v = pv(rng), i = pi(rng), j = pj(rng);
    const double h = 1e-4 * gradval::variable_info(g.variable(v)).scale;
    auto xp = x, xm = x;
    xp.at(v, i, j) += h;
    xm.at(v, i, j) -= h;
    const double fd = (model.forward_anomaly(xp) - model.forward_anomaly(xm)) / (2 * h);
    const double an = grad.at(v, i, j);
    const double err = std::abs(fd - an);
    const double rel = err / std::max(std::abs(fd), std::abs(an));
    ++r.checked;
    const bool rel_ok = err == 0.0 || rel <= rel_tol;
    r.relative_ok += rel_ok;
    r.ok += rel_ok || err <= abs_tol;
    if (err > abs_tol) r.worst_relative = std::max(r.worst_relative, rel);
  }
  return r;
}

}  // namespace fixture
