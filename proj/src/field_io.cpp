#include "gradval/field_io.hpp"

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace gradval {
namespace {

constexpr std::array<char, 8> kMagic = {'G', 'V', 'F', 'I', 'E', 'L', 'D', '1'};

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("truncated field file");
  return value;
}

}  // namespace

void write_fields(const std::filesystem::path& path, std::span<const FieldTensor> fields) {
  if (fields.empty()) throw std::invalid_argument("no fields to write");
  const GridSpec& grid = fields.front().grid();
  for (const auto& f : fields) require_same_shape(f, fields.front());

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(grid.n_vars()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(grid.n_lat()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(grid.n_lon()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(fields.size()));
  const auto& cfg = grid.config();
  put<double>(os, cfg.lat_min);
  put<double>(os, cfg.lat_max);
  put<double>(os, cfg.lon_min);
  put<double>(os, cfg.lon_max);
  for (const auto& name : grid.variables()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (const auto& f : fields) {
    put<std::int64_t>(os, f.timestamp());
    auto vals = f.values();
    os.write(reinterpret_cast<const char*>(vals.data()),
             static_cast<std::streamsize>(vals.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<FieldTensor> read_fields(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("not a field file: " + path.string());
  GridConfig cfg;
  const auto n_vars = get<std::uint32_t>(is);
  cfg.n_lat = static_cast<int>(get<std::uint32_t>(is));
  cfg.n_lon = static_cast<int>(get<std::uint32_t>(is));
  const auto n_fields = get<std::uint32_t>(is);
  cfg.lat_min = get<double>(is);
  cfg.lat_max = get<double>(is);
  cfg.lon_min = get<double>(is);
  cfg.lon_max = get<double>(is);
  cfg.variables.clear();
  for (std::uint32_t v = 0; v < n_vars; ++v) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    cfg.variables.push_back(std::move(name));
  }
  auto grid = make_grid(cfg);
  std::vector<FieldTensor> out;
  out.reserve(n_fields);
  for (std::uint32_t n = 0; n < n_fields; ++n) {
    const auto ts = get<std::int64_t>(is);
    std::vector<double> values(grid->size());
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated field file");
    out.emplace_back(grid, std::move(values), ts);
  }
  return out;
}

void write_fields_csv(const std::filesystem::path& path, std::span<const FieldTensor> fields) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "timestamp,variable,lat_index,lon_index,lat,lon,value\n";
  char buf[64];
  for (const auto& f : fields) {
    const auto& g = f.grid();
    for (int v = 0; v < g.n_vars(); ++v) {
      for (int i = 0; i < g.n_lat(); ++i) {
        for (int j = 0; j < g.n_lon(); ++j) {
          std::snprintf(buf, sizeof buf, "%.17g", f.at(v, i, j));
          os << f.timestamp() << ',' << g.variable(v) << ',' << i << ',' << j << ',' << g.lat(i)
             << ',' << g.lon(j) << ',' << buf << '\n';
        }
      }
    }
  }
}

void write_stations_csv(const std::filesystem::path& path, const StationGrid& stations) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "station_id,lat_index,lon_index,lat,lon\n";
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const auto& s = stations[k];
    os << s.id << ',' << s.lat_index << ',' << s.lon_index << ',' << stations.lat(k) << ','
       << stations.lon(k) << '\n';
  }
}

}  // namespace gradval
