#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "fixtures.hpp"
#include "gradval/field_io.hpp"
#include "gradval/grid.hpp"
#include "gradval/synth.hpp"
#include "oracles.hpp"

using namespace gradval;

TEST_CASE("make_grid shapes and errors") {
  auto g = make_grid(GridConfig{});
  CHECK(g->n_cells() == 36u * 50u);
  CHECK(g->n_vars() == 6);
  CHECK(g->dlat() == doctest::Approx(1.0));
  CHECK(g->dlon() == doctest::Approx(50.0 / 49.0));

  GridConfig tiny;
  tiny.n_lat = 4;
  tiny.n_lon = 4;
  tiny.variables = {"t2m"};
  CHECK(make_grid(tiny)->size() == 16u);

  GridConfig bad;
  bad.n_lat = 0;
  bad.n_lon = 10;
  bad.variables = {"a", "b", "c"};
  CHECK_THROWS_WITH_AS(make_grid(bad), "invalid dimension", std::invalid_argument);

  GridConfig dup;
  dup.variables = {"t2m", "t2m"};
  CHECK_THROWS(make_grid(dup));
  GridConfig flipped;
  flipped.lat_max = flipped.lat_min;
  CHECK_THROWS(make_grid(flipped));
}

TEST_CASE("station grid counts match enumeration") {
  auto g = fixture::desk_grid();
  auto s = make_station_grid(g, 4);
  int expected = 0;
  for (int i = 0; i < 36; ++i) {
    for (int j = 0; j < 50; ++j) expected += (i % 4 == 0 && j % 4 == 0);
  }
  CHECK(s.size() == static_cast<std::size_t>(expected));
  CHECK(s.size() == 117u);

  std::set<std::pair<int, int>> cells;
  for (std::size_t k = 0; k < s.size(); ++k) {
    CHECK(s[k].id == static_cast<int>(k));
    CHECK(cells.insert({s[k].lat_index, s[k].lon_index}).second);
    CHECK(s.station_at(s[k].lat_index, s[k].lon_index) == static_cast<int>(k));
  }
  CHECK(s.station_at(1, 1) == -1);

  CHECK(make_station_grid(g, 1).size() == g->n_cells());

  GridConfig tiny;
  tiny.n_lat = 4;
  tiny.n_lon = 4;
  CHECK_THROWS(make_station_grid(make_grid(tiny), 8));
  CHECK_THROWS(make_station_grid(g, 0));
}

TEST_CASE("station blocks partition the lattice") {
  auto s = make_station_grid(fixture::desk_grid(), 4);
  auto blocks = s.blocks();
  std::vector<int> seen(s.size(), 0);
  for (const auto& b : blocks) {
    CHECK(!b.empty());
    CHECK(b.size() <= 4u);
    for (auto k : b) ++seen[k];
  }
  for (int c : seen) CHECK(c == 1);
  CHECK(blocks.size() == 5u * 7u);
}

TEST_CASE("haversine") {
  CHECK(haversine(47.4, 8.6, 47.4, 8.6) == 0.0);
  CHECK(haversine(0, 0, 0, 180) == doctest::Approx(std::numbers::pi * 6371.0).epsilon(1e-12));
  const double h = haversine(47.4, 8.6, 51.5, -0.1);
  CHECK(std::abs(h - oracle::great_circle_km(47.4, 8.6, 51.5, -0.1)) < 1.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lat(-80, 80), lon(-180, 180);
  for (int i = 0; i < 200; ++i) {
    const double a = lat(rng), b = lon(rng), c = lat(rng), d = lon(rng);
    CHECK(std::abs(haversine(a, b, c, d) - oracle::great_circle_km(a, b, c, d)) < 1e-3);
    CHECK(haversine(a, b, c, d) == doctest::Approx(haversine(c, d, a, b)).epsilon(1e-12));
  }
}

TEST_CASE("targets snap to the nearest cell") {
  auto g = fixture::desk_grid();
  auto t = make_target(*g, "Zurich", 47.4, 8.6, "t2m");
  CHECK(t.lat_index == 12);
  CHECK(std::abs(g->lon(t.lon_index) - 8.6) <= g->dlon() / 2);
  CHECK(t.variable_index == 0);
  CHECK_THROWS(make_target(*g, "x", 10.0, 8.6, "t2m"));
  CHECK_THROWS(make_target(*g, "x", 47.4, 8.6, "nope"));
}

TEST_CASE("synthetic fields are deterministic and finite") {
  auto g = fixture::small_grid();
  auto a = fixture::data(g, 6, 7, 50);
  auto b = fixture::data(g, 6, 7, 50);
  REQUIRE(a.fields.size() == 6u);
  for (std::size_t t = 0; t < a.fields.size(); ++t) {
    CHECK(a.fields[t] == b.fields[t]);
    CHECK(a.fields[t].all_finite());
    CHECK(a.fields[t].timestamp() == static_cast<std::int64_t>(t));
  }
  CHECK(a.clim.mean() == b.clim.mean());
  auto c = fixture::data(g, 6, 8, 50);
  CHECK(!(c.fields[0] == a.fields[0]));
  CHECK_THROWS(synth_fields(1, g, 0));
}

namespace {

// Sample autocorrelation along longitude at a lag, pooled over rows and fields.
double lon_autocorrelation(const std::vector<FieldTensor>& fields, int v, int lag) {
  double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0, n = 0;
  for (const auto& f : fields) {
    const auto& g = f.grid();
    for (int i = 0; i < g.n_lat(); ++i) {
      for (int j = 0; j + lag < g.n_lon(); ++j) {
        const double x = f.at(v, i, j), y = f.at(v, i, j + lag);
        sx += x;
        sy += y;
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
        n += 1;
      }
    }
  }
  const double cov = sxy / n - sx / n * sy / n;
  return cov / std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
}

}  // namespace

TEST_CASE("synthetic fields are spatially smooth") {
  auto g = fixture::desk_grid();
  auto d = fixture::data(g, 20, 7, 20);
  for (int v = 0; v < g->n_vars(); ++v) {
    const double near = lon_autocorrelation(d.fields, v, 1);
    const double far = lon_autocorrelation(d.fields, v, 10);
    CHECK(near > far);
    CHECK(near > 0.5);
  }
}

TEST_CASE("climatology matches an independent Monte-Carlo mean") {
  auto g = fixture::small_grid(8, 8);
  SynthOptions o;
  o.climatology_draws = 1000;
  auto clim = estimate_climatology(5, g, o.climatology_stream, 1000, o);
  const int draws = 1000;
  std::vector<double> sum(g->size(), 0.0), sq(g->size(), 0.0);
  for (int d = 0; d < draws; ++d) {
    auto f = synth_field(5, g, 0xabcdef, static_cast<std::uint64_t>(d), o);
    for (std::size_t n = 0; n < f.size(); ++n) {
      sum[n] += f.values()[n];
      sq[n] += f.values()[n] * f.values()[n];
    }
  }
  // Both sides are 1000-draw means, so the difference has variance 2 sd^2 / draws.
  std::vector<double> z(sum.size());
  for (std::size_t n = 0; n < sum.size(); ++n) {
    const double m = sum[n] / draws;
    const double sd = std::sqrt(sq[n] / draws - m * m);
    z[n] = (clim.mean().values()[n] - m) / (sd * std::sqrt(2.0 / draws));
  }
  for (int v = 0; v < g->n_vars(); ++v) CHECK(std::abs(z[clim.mean().index(v, 4, 4)]) <= 3.0);
  double within = 0, z2 = 0;
  for (double x : z) {
    within += std::abs(x) <= 3.0;
    z2 += x * x;
  }
  CHECK(within / static_cast<double>(z.size()) >= 0.98);
  // Cells are correlated, so the mean square only loosely tracks 1.
  CHECK(z2 / static_cast<double>(z.size()) == doctest::Approx(1.0).epsilon(0.5));
}

TEST_CASE("field files round-trip") {
  auto g = fixture::small_grid(6, 7);
  auto d = fixture::data(g, 3, 2, 10);
  const auto dir = std::filesystem::temp_directory_path() / "gradval_test_io";
  std::filesystem::create_directories(dir);
  write_fields(dir / "f.gvf", d.fields);
  auto back = read_fields(dir / "f.gvf");
  REQUIRE(back.size() == 3u);
  for (std::size_t t = 0; t < 3; ++t) CHECK(back[t] == d.fields[t]);
  CHECK(back[0].grid() == *g);

  write_fields_csv(dir / "f.csv", d.fields);
  std::ifstream in(dir / "f.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 1 + 3 * g->size());
  std::filesystem::remove_all(dir);
}
