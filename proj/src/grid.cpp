#include "gradval/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace gradval {

VariableInfo variable_info(std::string_view name) {
  static const VariableInfo kCatalogue[] = {
      {"t2m", 283.0, 6.0},     {"u10m", 0.0, 4.0},   {"v10m", 0.0, 4.0},
      {"msl", 101300.0, 900.0}, {"tcwv", 18.0, 6.0}, {"sp", 97000.0, 1100.0},
  };
  for (const auto& info : kCatalogue) {
    if (info.name == name) return info;
  }
  return {std::string(name), 0.0, 1.0};
}

std::vector<std::string> default_variables() { return {"t2m", "u10m", "v10m", "msl", "tcwv", "sp"}; }

GridSpec::GridSpec(const GridConfig& config) : config_(config) {
  if (config.n_lat < 4 || config.n_lon < 4) throw std::invalid_argument("invalid dimension");
  if (!(config.lat_max > config.lat_min) || !(config.lon_max > config.lon_min)) {
    throw std::invalid_argument("invalid grid bounds");
  }
  if (config.variables.empty()) throw std::invalid_argument("grid needs at least one variable");
  std::unordered_set<std::string> seen;
  for (const auto& v : config.variables) {
    if (!seen.insert(v).second) throw std::invalid_argument("duplicate variable: " + v);
  }
  dlat_ = (config.lat_max - config.lat_min) / (config.n_lat - 1);
  dlon_ = (config.lon_max - config.lon_min) / (config.n_lon - 1);
}

int GridSpec::variable_index(std::string_view name) const {
  const auto& vars = config_.variables;
  auto it = std::find(vars.begin(), vars.end(), name);
  if (it == vars.end()) throw std::invalid_argument("unknown variable: " + std::string(name));
  return static_cast<int>(it - vars.begin());
}

bool GridSpec::has_variable(std::string_view name) const {
  const auto& vars = config_.variables;
  return std::find(vars.begin(), vars.end(), name) != vars.end();
}

std::pair<int, int> GridSpec::nearest_cell(double lat, double lon) const {
  int i = static_cast<int>(std::lround((lat - config_.lat_min) / dlat_));
  int j = static_cast<int>(std::lround((lon - config_.lon_min) / dlon_));
  return {i, j};
}

bool GridSpec::operator==(const GridSpec& other) const {
  const auto& a = config_;
  const auto& b = other.config_;
  return a.n_lat == b.n_lat && a.n_lon == b.n_lon && a.lat_min == b.lat_min &&
         a.lat_max == b.lat_max && a.lon_min == b.lon_min && a.lon_max == b.lon_max &&
         a.variables == b.variables;
}

GridPtr make_grid(const GridConfig& config) { return std::make_shared<const GridSpec>(config); }

FieldTensor::FieldTensor(GridPtr grid, std::int64_t timestamp)
    : grid_(std::move(grid)), timestamp_(timestamp) {
  if (!grid_) throw std::invalid_argument("field needs a grid");
  values_.assign(grid_->size(), 0.0);
}

FieldTensor::FieldTensor(GridPtr grid, std::vector<double> values, std::int64_t timestamp)
    : grid_(std::move(grid)), values_(std::move(values)), timestamp_(timestamp) {
  if (!grid_) throw std::invalid_argument("field needs a grid");
  if (values_.size() != grid_->size()) throw std::invalid_argument("shape mismatch");
}

std::span<double> FieldTensor::variable(int v) {
  return std::span<double>(values_).subspan(static_cast<std::size_t>(v) * grid_->n_cells(),
                                            grid_->n_cells());
}

std::span<const double> FieldTensor::variable(int v) const {
  return std::span<const double>(values_).subspan(static_cast<std::size_t>(v) * grid_->n_cells(),
                                                  grid_->n_cells());
}

bool FieldTensor::same_shape(const FieldTensor& other) const {
  if (!grid_ || !other.grid_) return false;
  const auto& a = *grid_;
  const auto& b = *other.grid_;
  return a.n_lat() == b.n_lat() && a.n_lon() == b.n_lon() && a.n_vars() == b.n_vars() &&
         values_.size() == other.values_.size();
}

bool FieldTensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

void require_same_shape(const FieldTensor& a, const FieldTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("shape mismatch");
}

Climatology::Climatology(FieldTensor mean) : mean_(std::move(mean)) {
  if (!mean_.all_finite()) throw std::invalid_argument("climatology must be finite");
}

StationGrid::StationGrid(GridPtr grid, std::vector<Station> stations, int stride)
    : grid_(std::move(grid)), stations_(std::move(stations)), stride_(stride) {
  cell_to_station_.assign(grid_->n_cells(), -1);
  std::unordered_set<int> ids;
  for (std::size_t k = 0; k < stations_.size(); ++k) {
    const auto& s = stations_[k];
    if (!grid_->contains(s.lat_index, s.lon_index)) throw std::invalid_argument("station outside grid");
    if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate station id");
    auto& slot = cell_to_station_[grid_->cell(s.lat_index, s.lon_index)];
    if (slot != -1) throw std::invalid_argument("two stations share a cell");
    slot = static_cast<int>(k);
    rows_ = std::max(rows_, s.row + 1);
    cols_ = std::max(cols_, s.col + 1);
  }
}

double StationGrid::lat(std::size_t k) const { return grid_->lat(stations_[k].lat_index); }
double StationGrid::lon(std::size_t k) const { return grid_->lon(stations_[k].lon_index); }

double StationGrid::distance_km(std::size_t a, std::size_t b) const {
  return haversine(lat(a), lon(a), lat(b), lon(b));
}

double StationGrid::distance_km(std::size_t k, double lat_deg, double lon_deg) const {
  return haversine(lat(k), lon(k), lat_deg, lon_deg);
}

int StationGrid::station_at(int lat_index, int lon_index) const {
  if (!grid_->contains(lat_index, lon_index)) return -1;
  return cell_to_station_[grid_->cell(lat_index, lon_index)];
}

std::vector<std::vector<std::size_t>> StationGrid::blocks(int block_rows, int block_cols) const {
  if (block_rows < 1 || block_cols < 1) throw std::invalid_argument("block size must be positive");
  const int brows = (rows_ + block_rows - 1) / block_rows;
  const int bcols = (cols_ + block_cols - 1) / block_cols;
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(brows) * bcols);
  for (std::size_t k = 0; k < stations_.size(); ++k) {
    const auto& s = stations_[k];
    out[static_cast<std::size_t>(s.row / block_rows) * bcols + s.col / block_cols].push_back(k);
  }
  std::erase_if(out, [](const auto& b) { return b.empty(); });
  return out;
}

StationGrid make_station_grid(GridPtr grid, int stride) {
  if (!grid) throw std::invalid_argument("station grid needs a grid");
  if (stride < 1) throw std::invalid_argument("station stride must be >= 1");
  if (stride > grid->n_lat() || stride > grid->n_lon()) {
    throw std::invalid_argument("station stride larger than grid");
  }
  std::vector<Station> stations;
  int id = 0;
  int row = 0;
  for (int i = 0; i < grid->n_lat(); i += stride, ++row) {
    int col = 0;
    for (int j = 0; j < grid->n_lon(); j += stride, ++col) {
      stations.push_back({id++, i, j, row, col});
    }
  }
  return StationGrid(std::move(grid), std::move(stations), stride);
}

TargetSpec make_target(const GridSpec& grid, std::string name, double lat, double lon,
                       std::string variable) {
  TargetSpec t;
  t.name = std::move(name);
  t.lat = lat;
  t.lon = lon;
  auto [i, j] = grid.nearest_cell(lat, lon);
  if (!grid.contains(i, j)) throw std::invalid_argument("target outside grid: " + t.name);
  t.lat_index = i;
  t.lon_index = j;
  t.variable_index = grid.variable_index(variable);
  t.variable = std::move(variable);
  return t;
}

double haversine(double lat1, double lon1, double lat2, double lon2) {
  constexpr double deg = std::numbers::pi / 180.0;
  const double phi1 = lat1 * deg;
  const double phi2 = lat2 * deg;
  const double dphi = (lat2 - lat1) * deg;
  const double dlambda = (lon2 - lon1) * deg;
  const double s1 = std::sin(dphi / 2);
  const double s2 = std::sin(dlambda / 2);
  const double a = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
}

}  // namespace gradval
