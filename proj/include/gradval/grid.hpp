#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gradval {

inline constexpr double kEarthRadiusKm = 6371.0;

/// Offset and spread used to synthesise a variable and to normalise it inside
/// the surrogate models. Unknown names map to (0, 1).
struct VariableInfo {
  std::string name;
  double offset = 0.0;
  double scale = 1.0;
};

VariableInfo variable_info(std::string_view name);

std::vector<std::string> default_variables();

struct GridConfig {
  int n_lat = 36;
  int n_lon = 50;
  double lat_min = 35.0;
  double lat_max = 70.0;
  double lon_min = -10.0;
  double lon_max = 40.0;
  std::vector<std::string> variables = default_variables();
};

/// Regular latitude/longitude grid carrying an ordered variable list.
/// Cell (i, j) sits at lat_min + i * dlat, lon_min + j * dlon.
class GridSpec {
 public:
  explicit GridSpec(const GridConfig& config);

  int n_lat() const { return config_.n_lat; }
  int n_lon() const { return config_.n_lon; }
  int n_vars() const { return static_cast<int>(config_.variables.size()); }
  std::size_t n_cells() const { return static_cast<std::size_t>(n_lat()) * n_lon(); }
  std::size_t size() const { return n_cells() * static_cast<std::size_t>(n_vars()); }

  double lat(int i) const { return config_.lat_min + i * dlat_; }
  double lon(int j) const { return config_.lon_min + j * dlon_; }
  double dlat() const { return dlat_; }
  double dlon() const { return dlon_; }

  const std::vector<std::string>& variables() const { return config_.variables; }
  const std::string& variable(int v) const { return config_.variables.at(static_cast<std::size_t>(v)); }
  int variable_index(std::string_view name) const;
  bool has_variable(std::string_view name) const;

  std::size_t cell(int i, int j) const { return static_cast<std::size_t>(i) * n_lon() + j; }
  bool contains(int i, int j) const { return i >= 0 && i < n_lat() && j >= 0 && j < n_lon(); }
  std::pair<int, int> nearest_cell(double lat, double lon) const;

  const GridConfig& config() const { return config_; }

  bool operator==(const GridSpec& other) const;

 private:
  GridConfig config_;
  double dlat_;
  double dlon_;
};

using GridPtr = std::shared_ptr<const GridSpec>;

/// Validates the configuration and builds a shared grid. Throws
/// std::invalid_argument("invalid dimension") for n_lat or n_lon below 4.
GridPtr make_grid(const GridConfig& config);

/// Gridded multi-variable state, laid out variable-major then row-major.
class FieldTensor {
 public:
  FieldTensor() = default;
  FieldTensor(GridPtr grid, std::int64_t timestamp = 0);
  FieldTensor(GridPtr grid, std::vector<double> values, std::int64_t timestamp = 0);

  const GridSpec& grid() const { return *grid_; }
  const GridPtr& grid_ptr() const { return grid_; }
  std::int64_t timestamp() const { return timestamp_; }
  void set_timestamp(std::int64_t t) { timestamp_ = t; }

  std::size_t size() const { return values_.size(); }
  double& at(int v, int i, int j) { return values_[index(v, i, j)]; }
  double at(int v, int i, int j) const { return values_[index(v, i, j)]; }
  std::size_t index(int v, int i, int j) const {
    return static_cast<std::size_t>(v) * grid_->n_cells() + grid_->cell(i, j);
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> variable(int v);
  std::span<const double> variable(int v) const;

  bool same_shape(const FieldTensor& other) const;
  bool all_finite() const;

  bool operator==(const FieldTensor& other) const {
    return timestamp_ == other.timestamp_ && values_ == other.values_ &&
           (grid_ == other.grid_ || (grid_ && other.grid_ && *grid_ == *other.grid_));
  }

 private:
  GridPtr grid_;
  std::vector<double> values_;
  std::int64_t timestamp_ = 0;
};

/// Throws std::invalid_argument("shape mismatch") unless a and b share a shape.
void require_same_shape(const FieldTensor& a, const FieldTensor& b);

/// Per-variable long-term mean field.
class Climatology {
 public:
  Climatology() = default;
  explicit Climatology(FieldTensor mean);
  const FieldTensor& mean() const { return mean_; }
  const GridSpec& grid() const { return mean_.grid(); }

 private:
  FieldTensor mean_;
};

struct Station {
  int id = 0;
  int lat_index = 0;
  int lon_index = 0;
  // Position within the station lattice; used for spatial blocking.
  int row = 0;
  int col = 0;
};

class StationGrid {
 public:
  StationGrid(GridPtr grid, std::vector<Station> stations, int stride);

  std::size_t size() const { return stations_.size(); }
  const Station& operator[](std::size_t k) const { return stations_[k]; }
  const std::vector<Station>& stations() const { return stations_; }
  const GridSpec& grid() const { return *grid_; }
  int stride() const { return stride_; }
  int lattice_rows() const { return rows_; }
  int lattice_cols() const { return cols_; }

  double lat(std::size_t k) const;
  double lon(std::size_t k) const;
  double distance_km(std::size_t a, std::size_t b) const;
  double distance_km(std::size_t k, double lat, double lon) const;

  /// Station index at a grid cell, or -1.
  int station_at(int lat_index, int lon_index) const;

  /// Partition into 2x2 neighbourhoods of the station lattice.
  std::vector<std::vector<std::size_t>> blocks(int block_rows = 2, int block_cols = 2) const;

 private:
  GridPtr grid_;
  std::vector<Station> stations_;
  std::vector<int> cell_to_station_;
  int stride_ = 1;
  int rows_ = 0;
  int cols_ = 0;
};

/// Stations on every `stride`-th cell along both axes, ids in row-major order.
StationGrid make_station_grid(GridPtr grid, int stride);

struct TargetSpec {
  std::string name;
  double lat = 0.0;
  double lon = 0.0;
  std::string variable;
  int lat_index = 0;
  int lon_index = 0;
  int variable_index = 0;
};

/// Snaps (lat, lon) to the nearest cell. Throws if the point lies outside the
/// grid box or the variable is unknown.
TargetSpec make_target(const GridSpec& grid, std::string name, double lat, double lon,
                       std::string variable);

/// Great-circle distance in km on a sphere of radius 6371 km.
double haversine(double lat1, double lon1, double lat2, double lon2);

}  // namespace gradval
