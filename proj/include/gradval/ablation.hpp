#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradval/grid.hpp"
#include "gradval/model.hpp"

namespace gradval {

/// U_v = |F(x with v <- clim_v) - y*| - |F(x) - y*| for every variable.
struct GlobalUtilityVector {
  std::vector<double> utility;
  std::int64_t timestamp = 0;
};

GlobalUtilityVector global_ablation(const ForecastModel& model, const FieldTensor& x, double y_star,
                                    const Climatology& clim);

enum class PerturbMode { mean_replace, scale_bias, additive_noise };

std::string to_string(PerturbMode m);
PerturbMode perturb_mode_from_string(const std::string& s);

struct PerturbationSpec {
  PerturbMode mode = PerturbMode::mean_replace;
  int patch = 1;  // odd edge length in cells
  double magnitude = 0.10;
  std::uint64_t seed = 0;
  // Per-variable std of the evaluation fields; required by additive_noise.
  std::vector<double> noise_std;
};

void validate(const PerturbationSpec& spec, const GridSpec& grid);

/// Patch of `patch` x `patch` cells centred on the station, clipped to the grid.
CellBox patch_box(const GridSpec& grid, const Station& station, int patch);

/// Applies the perturbation to every variable inside each box. Cells covered by
/// several boxes are perturbed once.
FieldTensor perturb_boxes(const FieldTensor& x, std::span<const CellBox> boxes,
                          const PerturbationSpec& spec, const Climatology& clim);
FieldTensor perturb_patch(const FieldTensor& x, const Station& station, const PerturbationSpec& spec,
                          const Climatology& clim);

struct SpatialUtilityMap {
  std::vector<double> signed_utility;
  std::vector<double> abs_utility;
  std::vector<int> cells_perturbed;  // fewer than patch^2 at the grid edge
  PerturbationSpec spec;
  std::int64_t timestamp = 0;
};

SpatialUtilityMap spatial_utility(const ForecastModel& model, const FieldTensor& x, double y_star,
                                  const StationGrid& stations, const PerturbationSpec& spec,
                                  const Climatology& clim);

struct JointAblation {
  double joint = 0.0;               // U_S with all patches perturbed together
  std::vector<double> individual;   // signed U_g for g in S
  double individual_sum = 0.0;
  std::optional<double> ratio;      // empty when |sum| < 1e-12
};

JointAblation joint_ablation(const ForecastModel& model, const FieldTensor& x, double y_star,
                             const StationGrid& stations, std::span<const std::size_t> subset,
                             const PerturbationSpec& spec, const Climatology& clim);

/// Population std of each variable over all cells and fields.
std::vector<double> per_variable_std(std::span<const FieldTensor> fields);

/// Rows: timestamp,station_id,lat,lon,U_signed,U_abs,mode,patch,magnitude,cells
void write_spatial_utility_csv(const std::filesystem::path& path, std::span<const SpatialUtilityMap> maps,
                               const StationGrid& stations);

}  // namespace gradval
