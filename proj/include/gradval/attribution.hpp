#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gradval/grid.hpp"
#include "gradval/model.hpp"

namespace gradval {

enum class Method { ig, gti, vg };
enum class BaselineKind { climatology, zero, persistence };

std::string to_string(Method m);
std::string to_string(BaselineKind b);
Method method_from_string(const std::string& s);
BaselineKind baseline_from_string(const std::string& s);

struct AttributionConfig {
  Method method = Method::ig;
  BaselineKind baseline = BaselineKind::climatology;
  int steps = 50;  // IG only
};

struct Provenance {
  Method method = Method::ig;
  BaselineKind baseline = BaselineKind::climatology;
  int steps = 0;
  std::int64_t timestamp = 0;
  std::string model_id;
  std::uint64_t seed = 0;
  int gradient_evals = 0;
};

/// Signed per-(variable, cell) scores. Absolute values are taken only by the
/// importance aggregations below.
struct AttributionMap {
  FieldTensor scores;
  Provenance provenance;
};

/// Trapezoid rule over K+1 nodes from `baseline` to `x`.
AttributionMap integrated_gradients(const ForecastModel& model, const FieldTensor& x,
                                    const FieldTensor& baseline, int steps);
/// IG for several step counts at once; gradients at shared nodes (k/K equal
/// as doubles) are evaluated once. Each map equals integrated_gradients() for
/// its K bit for bit. `gradient_at_input`, if given, receives dF/dx at x.
std::vector<AttributionMap> integrated_gradients_multi(const ForecastModel& model, const FieldTensor& x,
                                                       const FieldTensor& baseline, std::span<const int> steps,
                                                       FieldTensor* gradient_at_input = nullptr);

/// (x - baseline) * dF/dx evaluated at x. `value` receives F(x) if given.
AttributionMap gradient_times_input(const ForecastModel& model, const FieldTensor& x,
                                    const FieldTensor& baseline, double* value = nullptr);
AttributionMap vanilla_gradient(const ForecastModel& model, const FieldTensor& x, double* value = nullptr);

AttributionMap attribute(const ForecastModel& model, const FieldTensor& x, const FieldTensor& baseline,
                         const AttributionConfig& config);

FieldTensor persistence_baseline(std::span<const FieldTensor> fields, std::size_t t);
FieldTensor zero_baseline(const GridPtr& grid);
/// Baseline for fields[t] of the given kind; persistence requires t >= 1.
FieldTensor make_baseline(BaselineKind kind, std::span<const FieldTensor> fields, std::size_t t,
                          const Climatology& clim);

/// I_v = sum over cells of |A_{v,l}|.
std::vector<double> variable_importance(const FieldTensor& scores);
std::vector<double> variable_importance(const AttributionMap& attr);
/// S_g = sum over variables of |A_{v,g}| at each station cell.
std::vector<double> spatial_importance(const FieldTensor& scores, const StationGrid& stations);
std::vector<double> spatial_importance(const AttributionMap& attr, const StationGrid& stations);
/// Signed per-station sum over variables.
std::vector<double> spatial_signed(const FieldTensor& scores, const StationGrid& stations);

std::vector<double> time_average(std::span<const std::vector<double>> maps);

/// Scores in the field binary layout plus `<path>.json` with the provenance.
void write_attribution(const std::filesystem::path& path, const AttributionMap& attr);

}  // namespace gradval
