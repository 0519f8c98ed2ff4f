#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "gradval/ablation.hpp"
#include "gradval/metrics.hpp"
#include "gradval/rng.hpp"

using namespace gradval;

namespace {

// Straightforward patch perturbation with a full forward pass per station.
double naive_utility(const ForecastModel& m, const FieldTensor& x, double y, const Station& s,
                     const PerturbationSpec& spec, const Climatology& clim) {
  const auto& g = x.grid();
  FieldTensor p = x;
  const int h = spec.patch / 2;
  for (int i = s.lat_index - h; i <= s.lat_index + h; ++i) {
    for (int j = s.lon_index - h; j <= s.lon_index + h; ++j) {
      if (!g.contains(i, j)) continue;
      for (int v = 0; v < g.n_vars(); ++v) {
        const double xv = x.at(v, i, j), c = clim.mean().at(v, i, j);
        if (spec.mode == PerturbMode::mean_replace) p.at(v, i, j) = c;
        if (spec.mode == PerturbMode::scale_bias) p.at(v, i, j) = c + (1 + spec.magnitude) * (xv - c);
        if (spec.mode == PerturbMode::additive_noise) {
          const auto key = derive_seed(spec.seed, {static_cast<std::uint64_t>(x.timestamp()),
                                                   static_cast<std::uint64_t>(v), g.cell(i, j)});
          p.at(v, i, j) = xv + spec.magnitude * spec.noise_std[static_cast<std::size_t>(v)] * hashed_normal(key);
        }
      }
    }
  }
  return std::abs(m.forward(p) - y) - std::abs(m.forward(x) - y);
}

int changed_values(const FieldTensor& a, const FieldTensor& b) {
  int n = 0;
  for (std::size_t k = 0; k < a.size(); ++k) n += a.values()[k] != b.values()[k];
  return n;
}

}  // namespace

TEST_CASE("global ablation") {
  auto g = fixture::small_grid();
  auto d = fixture::data(g, 3);
  auto t = fixture::centre_target(*g);
  auto desk = make_desk_model(1, g, t, 3);

  auto at_clim = global_ablation(desk, d.clim.mean(), 1.0, d.clim);
  for (double u : at_clim.utility) CHECK(u == 0.0);

  auto lin = make_linear_model(1, g, t);
  auto w = lin.gradient(d.fields[0]);
  const double y = lin.forward(d.fields[0]) + 0.37;
  auto u = global_ablation(lin, d.fields[0], y, d.clim);
  for (int v = 0; v < g->n_vars(); ++v) {
    long double full = 0, ablated = 0;
    for (int var = 0; var < g->n_vars(); ++var) {
      for (int i = 0; i < g->n_lat(); ++i) {
        for (int j = 0; j < g->n_lon(); ++j) {
          const double wi = w.at(var, i, j);
          full += static_cast<long double>(wi) * d.fields[0].at(var, i, j);
          ablated += static_cast<long double>(wi) * (var == v ? d.clim.mean().at(var, i, j) : d.fields[0].at(var, i, j));
        }
      }
    }
    const double expect = std::abs(static_cast<double>(ablated) - y) - std::abs(static_cast<double>(full) - y);
    CHECK(u.utility[static_cast<std::size_t>(v)] == doctest::Approx(expect).epsilon(1e-12).scale(1e-12));
  }

  ModelConfig masked;
  masked.masked_variables = {"u10m"};
  auto mm = make_desk_model(1, g, t, 3, masked);
  auto um = global_ablation(mm, d.fields[1], mm.forward(d.fields[1]) - 0.5, d.clim);
  CHECK(um.utility[1] == 0.0);
  CHECK(um.utility[0] != 0.0);
}

TEST_CASE("patch perturbations") {
  auto g = fixture::small_grid();
  auto d = fixture::data(g, 2);
  auto stations = make_station_grid(g, 4);
  const Station& s = stations[6];
  PerturbationSpec mean;
  auto unchanged = perturb_patch(d.clim.mean(), s, mean, d.clim);
  CHECK(changed_values(unchanged, d.clim.mean()) == 0);

  PerturbationSpec scale{PerturbMode::scale_bias, 3, 0.0};
  CHECK(changed_values(perturb_patch(d.fields[0], s, scale, d.clim), d.fields[0]) == 0);

  auto p1 = perturb_patch(d.fields[0], s, mean, d.clim);
  CHECK(changed_values(p1, d.fields[0]) == g->n_vars());
  for (int v = 0; v < g->n_vars(); ++v) {
    CHECK(p1.at(v, s.lat_index, s.lon_index) == d.clim.mean().at(v, s.lat_index, s.lon_index));
  }

  PerturbationSpec p3{PerturbMode::mean_replace, 3};
  CHECK(changed_values(perturb_patch(d.fields[0], s, p3, d.clim), d.fields[0]) == 9 * g->n_vars());
  // corner station: clipped to 2x2
  CHECK(changed_values(perturb_patch(d.fields[0], stations[0], p3, d.clim), d.fields[0]) == 4 * g->n_vars());

  PerturbationSpec even{PerturbMode::mean_replace, 2};
  CHECK_THROWS(perturb_patch(d.fields[0], s, even, d.clim));
  PerturbationSpec noise{PerturbMode::additive_noise, 1, 0.1, 3};
  CHECK_THROWS(perturb_patch(d.fields[0], s, noise, d.clim));
  Station outside{99, 40, 40};
  CHECK_THROWS(perturb_patch(d.fields[0], outside, mean, d.clim));
}

TEST_CASE("spatial utility matches a naive per-station oracle") {
  auto g = fixture::desk_grid();
  auto d = fixture::data(g, 3);
  auto stations = make_station_grid(g, 4);
  auto noise_std = per_variable_std(d.fields);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> pick(0, stations.size() - 1);
  for (int depth : {1, 3}) {
    auto m = make_desk_model(static_cast<std::uint64_t>(depth), g, fixture::zurich(*g), depth);
    for (auto mode : {PerturbMode::mean_replace, PerturbMode::scale_bias, PerturbMode::additive_noise}) {
      for (int patch : {1, 3, 5}) {
        PerturbationSpec spec{mode, patch, 0.1, 77, noise_std};
        const auto& x = d.fields[static_cast<std::size_t>(patch / 2)];
        const double y = m.forward(x) + 0.2;
        auto map = spatial_utility(m, x, y, stations, spec, d.clim);
        for (int r = 0; r < 10; ++r) {
          const std::size_t k = pick(rng);
          // both sides difference two ~|F| magnitudes
          const double naive = naive_utility(m, x, y, stations[k], spec, d.clim);
          CHECK(std::abs(map.signed_utility[k] - naive) <= 1e-12 * std::abs(y));
        }
        for (std::size_t k = 0; k < stations.size(); ++k) {
          CHECK(map.abs_utility[k] == std::abs(map.signed_utility[k]));
          CHECK(std::isfinite(map.signed_utility[k]));
        }
      }
    }
  }
}

TEST_CASE("zero perturbations and locality") {
  auto g = fixture::desk_grid();
  auto d = fixture::data(g, 1);
  auto stations = make_station_grid(g, 4);
  auto t = fixture::zurich(*g);
  ModelConfig local;
  local.readout_radius = 2;
  auto m = make_desk_model(3, g, t, 3, local);
  const int reach = m.receptive_radius();
  REQUIRE(reach > 0);

  auto noise_std = per_variable_std(d.fields);
  const double y = m.forward(d.fields[0]) - 1.0;
  for (auto spec : {PerturbationSpec{PerturbMode::scale_bias, 3, 0.0},
                    PerturbationSpec{PerturbMode::additive_noise, 3, 0.0, 5, noise_std}}) {
    auto map = spatial_utility(m, d.fields[0], y, stations, spec, d.clim);
    for (double u : map.signed_utility) CHECK(u == 0.0);
  }
  auto at_clim = spatial_utility(m, d.clim.mean(), y, stations, PerturbationSpec{}, d.clim);
  for (double u : at_clim.signed_utility) CHECK(u == 0.0);

  auto map = spatial_utility(m, d.fields[0], y, stations, PerturbationSpec{}, d.clim);
  int far = 0, near_nonzero = 0;
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const int dist = std::max(std::abs(stations[k].lat_index - t.lat_index), std::abs(stations[k].lon_index - t.lon_index));
    if (dist > reach) {
      ++far;
      CHECK(map.signed_utility[k] == 0.0);
    } else {
      near_nonzero += map.signed_utility[k] != 0.0;
    }
  }
  CHECK(far > 50);
  CHECK(near_nonzero > 0);
}

TEST_CASE("joint ablation and subadditivity") {
  auto g = fixture::desk_grid();
  auto d = fixture::data(g, 1);
  auto stations = make_station_grid(g, 4);
  auto t = fixture::zurich(*g);
  auto lin = make_linear_model(5, g, t);
  const auto& x = d.fields[0];
  // y* far below every prediction: |F - y*| = F - y*, so the utility is linear
  const double y = lin.forward(x) - 1e4;
  const std::size_t set[] = {10, 30, 50, 70, 90};
  auto j = joint_ablation(lin, x, y, stations, set, PerturbationSpec{PerturbMode::mean_replace, 3}, d.clim);
  REQUIRE(j.ratio.has_value());
  CHECK(std::abs(*j.ratio - 1.0) <= 1e-9);

  const std::size_t one[] = {40};
  auto single = joint_ablation(lin, x, y, stations, one, PerturbationSpec{}, d.clim);
  REQUIRE(single.ratio.has_value());
  CHECK(*single.ratio == 1.0);

  auto desk = make_desk_model(5, g, t, 3);
  const int s0 = stations.station_at(t.lat_index - t.lat_index % 4, t.lon_index - t.lon_index % 4);
  REQUIRE(s0 >= 0);
  const std::size_t overlap[] = {static_cast<std::size_t>(s0), static_cast<std::size_t>(s0 + 1)};
  const double yd = desk.forward(x) + 0.05;
  auto jo = joint_ablation(desk, x, yd, stations, overlap, PerturbationSpec{PerturbMode::mean_replace, 5}, d.clim);
  CHECK(std::isfinite(jo.joint));
  CHECK(std::abs(jo.joint - jo.individual_sum) > 1e-9);

  // guarded denominator
  auto zero = joint_ablation(desk, d.clim.mean(), yd, stations, overlap, PerturbationSpec{}, d.clim);
  CHECK(!zero.ratio.has_value());
  CHECK_THROWS(joint_ablation(desk, x, yd, stations, std::span<const std::size_t>{}, PerturbationSpec{}, d.clim));
}

TEST_CASE("noise utilities are less rank-stable than scale utilities") {
  auto g = fixture::desk_grid();
  auto d = fixture::data(g, 1);
  auto stations = make_station_grid(g, 4);
  auto m = make_desk_model(2, g, fixture::zurich(*g), 1);
  auto noise_std = per_variable_std(d.fields);
  const double y = m.forward(d.fields[0]) + 0.1;
  auto seed_maps = [&](PerturbMode mode) {
    std::vector<std::vector<double>> maps;
    for (std::uint64_t s = 0; s < 20; ++s) {
      maps.push_back(spatial_utility(m, d.fields[0], y, stations, PerturbationSpec{mode, 3, 0.1, s, noise_std}, d.clim).abs_utility);
    }
    return maps;
  };
  auto stability = [](const std::vector<std::vector<double>>& maps) {
    double s = 0;
    int n = 0;
    for (std::size_t a = 0; a < maps.size(); ++a) {
      for (std::size_t b = a + 1; b < maps.size(); ++b, ++n) s += spearman(maps[a], maps[b]).rho;
    }
    return s / n;
  };
  const double noise = stability(seed_maps(PerturbMode::additive_noise));
  const double scale = stability(seed_maps(PerturbMode::scale_bias));
  CHECK(noise < scale);
}

TEST_CASE("utility CSV export") {
  auto g = fixture::small_grid();
  auto d = fixture::data(g, 2);
  auto stations = make_station_grid(g, 4);
  auto m = make_desk_model(2, g, fixture::centre_target(*g), 1);
  std::vector<SpatialUtilityMap> maps;
  for (const auto& x : d.fields) maps.push_back(spatial_utility(m, x, m.forward(x), stations, PerturbationSpec{}, d.clim));
  const auto path = std::filesystem::temp_directory_path() / "gradval_util.csv";
  write_spatial_utility_csv(path, maps, stations);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "timestamp,station_id,lat,lon,U_signed,U_abs,mode,patch,magnitude,cells");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2 * stations.size());
  std::filesystem::remove(path);
}
