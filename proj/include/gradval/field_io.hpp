#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "gradval/grid.hpp"

namespace gradval {

// Binary layout (little-endian):
//   magic "GVFIELD1", u32 n_vars, u32 n_lat, u32 n_lon, u32 n_fields,
//   f64 lat_min, lat_max, lon_min, lon_max,
//   n_vars x (u32 length, bytes) variable names,
//   n_fields x (i64 timestamp, n_vars*n_lat*n_lon f64 variable-major row-major).
void write_fields(const std::filesystem::path& path, std::span<const FieldTensor> fields);
std::vector<FieldTensor> read_fields(const std::filesystem::path& path);

/// CSV rows: timestamp,variable,lat_index,lon_index,lat,lon,value
void write_fields_csv(const std::filesystem::path& path, std::span<const FieldTensor> fields);

void write_stations_csv(const std::filesystem::path& path, const StationGrid& stations);

}  // namespace gradval
