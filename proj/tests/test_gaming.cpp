#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <map>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "gradval/gaming.hpp"
#include "oracles.hpp"

using namespace gradval;

namespace {

int changed_values(const FieldTensor& a, const FieldTensor& b) {
  int n = 0;
  for (std::size_t k = 0; k < a.size(); ++k) n += a.values()[k] != b.values()[k];
  return n;
}

// Rank 1 = highest, ties by lower index, by counting.
std::vector<double> naive_descending_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double above = 0;
    for (std::size_t j = 0; j < v.size(); ++j) above += v[j] > v[i] || (v[j] == v[i] && j < i);
    r[i] = above + 1;
  }
  return r;
}

struct Setup {
  GridPtr grid = fixture::desk_grid();
  StationGrid stations = make_station_grid(grid, 4);
  TargetSpec target = fixture::zurich(*grid);
  fixture::Data data = fixture::data(grid, 10, 21, 100);
  ForecastModel model = make_desk_model(1, grid, target, 1);
  TruthModel truth = make_truth(model, 3, 0.01);
  GamingContext ctx() const {
    GamingContext c;
    c.model = &model;
    c.truth = &truth;
    c.fields = data.fields;
    c.clim = &data.clim;
    c.stations = &stations;
    return c;
  }
};

}  // namespace

TEST_CASE("attacks touch only attacker cells and scoped variables") {
  auto g = fixture::small_grid();
  auto d = fixture::data(g, 1);
  auto s = make_station_grid(g, 4);
  const auto& x = d.fields[0];
  AttackScenario sc{"t", AttackKind::inflate, {3}, 0.0, AttackScope::all_surface};
  CHECK(changed_values(apply_attack(x, sc, d.clim, s, 0), x) == 0);

  AttackScenario spoof{"s", AttackKind::spoof, {1, 4}, 0.0, AttackScope::all_surface};
  CHECK(changed_values(apply_attack(d.clim.mean(), spoof, d.clim, s, 0), d.clim.mean()) == 0);
  auto sp = apply_attack(x, spoof, d.clim, s, 0);
  CHECK(changed_values(sp, x) == 2 * g->n_vars());
  for (int v = 0; v < g->n_vars(); ++v) {
    CHECK(sp.at(v, s[1].lat_index, s[1].lon_index) == d.clim.mean().at(v, s[1].lat_index, s[1].lon_index));
  }

  AttackScenario one{"o", AttackKind::inflate, {5}, 50.0, AttackScope::single_target_var};
  auto a = apply_attack(x, one, d.clim, s, 2);
  CHECK(changed_values(a, x) == 1);
  const int i = s[5].lat_index, j = s[5].lon_index;
  const double old_anom = x.at(2, i, j) - d.clim.mean().at(2, i, j);
  CHECK(a.at(2, i, j) - d.clim.mean().at(2, i, j) == doctest::Approx(1.5 * old_anom).epsilon(1e-12));

  AttackScenario other{"o", AttackKind::inflate, {5, 7}, 30.0, AttackScope::single_other_var};
  auto b = apply_attack(x, other, d.clim, s, 0);
  CHECK(changed_values(b, x) == 2);
  CHECK(b.at(1, i, j) != x.at(1, i, j));
  CHECK(scope_variables(AttackScope::single_other_var, *g, 1) == std::vector<int>{0});

  AttackScenario all{"a", AttackKind::inflate, {0, 5, 9}, 200.0, AttackScope::all_surface};
  auto c = apply_attack(x, all, d.clim, s, 0);
  for (int v = 0; v < g->n_vars(); ++v) {
    for (int ii = 0; ii < g->n_lat(); ++ii) {
      for (int jj = 0; jj < g->n_lon(); ++jj) {
        const int st = s.station_at(ii, jj);
        const bool attacked = st == 0 || st == 5 || st == 9;
        if (!attacked) CHECK(c.at(v, ii, jj) == x.at(v, ii, jj));
      }
    }
  }
  CHECK_THROWS(attack_scope_from_string("everything"));
}

TEST_CASE("attacker placement") {
  Setup s;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto u = draw_attackers(s.stations, s.target, Placement::uniform, 5, seed);
    CHECK(std::set<std::size_t>(u.begin(), u.end()).size() == 5u);
    for (auto k : draw_attackers(s.stations, s.target, Placement::close, 3, seed)) {
      CHECK(s.stations.distance_km(k, s.target.lat, s.target.lon) < kCloseKm);
    }
    for (auto k : draw_attackers(s.stations, s.target, Placement::mid, 3, seed)) {
      const double d = s.stations.distance_km(k, s.target.lat, s.target.lon);
      CHECK(d >= kCloseKm);
      CHECK(d <= kMidKm);
    }
    auto m = draw_attackers(s.stations, s.target, Placement::mixed, 4, seed);
    int close = 0;
    for (auto k : m) close += s.stations.distance_km(k, s.target.lat, s.target.lon) < kCloseKm;
    CHECK(close == 2);
  }
  CHECK(draw_attackers(s.stations, s.target, Placement::uniform, 3, 9) ==
        draw_attackers(s.stations, s.target, Placement::uniform, 3, 9));
  auto scenarios = make_scenarios(ScenarioGrid{}, s.stations, s.target, 1, "x");
  CHECK(scenarios.size() == 90u);
  std::set<std::string> ids;
  for (const auto& sc : scenarios) ids.insert(sc.id);
  CHECK(ids.size() == 90u);
}

TEST_CASE("D4 and D3") {
  std::vector<double> b{1, 2, 3, 4};
  for (double v : detector_d4(b, b)) CHECK(v == 0.0);
  for (double v : detector_d3(b, b)) CHECK(v == 0.0);
  std::vector<double> a{1, 4, 3, 4};
  auto d4 = detector_d4(b, a);
  CHECK(d4[1] == doctest::Approx(std::log(2.0)));
  CHECK(d4[0] == 0.0);
  CHECK(d4[2] == 0.0);

  std::vector<double> base(60), att(60);
  for (std::size_t i = 0; i < 60; ++i) base[i] = att[i] = 100.0 - static_cast<double>(i);
  att[49] = 1000.0;  // rank 50 -> rank 1
  CHECK(detector_d3(base, att)[49] == 49.0);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = oracle::random_vector(rng, 30, trial % 2 ? 6 : 0);
    auto y = oracle::random_vector(rng, 30, trial % 2 ? 6 : 0);
    auto rb = naive_descending_ranks(x), ra = naive_descending_ranks(y);
    auto d3 = detector_d3(x, y);
    for (std::size_t i = 0; i < 30; ++i) CHECK(d3[i] == rb[i] - ra[i]);
  }
}

TEST_CASE("D5 spatial residual") {
  Setup s;
  std::vector<double> flat(s.stations.size(), 2.0);
  for (double v : detector_d5(flat, s.stations)) CHECK(v == doctest::Approx(0.0));

  std::vector<double> smooth(s.stations.size());
  for (std::size_t k = 0; k < smooth.size(); ++k) {
    smooth[k] = std::exp(-s.stations.distance_km(k, s.target.lat, s.target.lon) / 3000.0);
  }
  auto d5 = detector_d5(smooth, s.stations);
  std::vector<double> sorted(d5);
  std::ranges::sort(sorted);
  CHECK(sorted[sorted.size() / 2] < 0.05);

  auto spoofed = smooth;
  spoofed[40] = 0.0;
  auto ds = detector_d5(spoofed, s.stations);
  CHECK(std::ranges::max_element(ds) - ds.begin() == 40);

  auto table = nearest_neighbours(s.stations);
  CHECK(detector_d5(spoofed, table) == ds);
  CHECK(table[0].size() == 8u);
}

TEST_CASE("U1 baseline-free detector") {
  CHECK(!detector_u1(std::vector<double>(10, 1.0)).has_value());
  std::vector<double> v{1, 1.1, 0.9, 1.05, 0.95, 5, 1.02};
  auto u = detector_u1(v);
  REQUIRE(u.has_value());
  CHECK(std::ranges::max_element(*u) - u->begin() == 5);
}

TEST_CASE("detectors are permutation equivariant") {
  auto g = fixture::small_grid(12, 12);
  auto s = make_station_grid(g, 2);
  std::mt19937_64 rng(2);
  std::vector<std::size_t> perm(s.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Station> permuted;
  for (auto p : perm) permuted.push_back(s[p]);
  StationGrid sp(g, permuted, s.stride());
  auto b = oracle::random_vector(rng, s.size());
  auto a = oracle::random_vector(rng, s.size());
  for (double& x : b) x = std::exp(x);
  for (double& x : a) x = std::exp(x);
  std::vector<double> bp, ap;
  for (auto p : perm) {
    bp.push_back(b[p]);
    ap.push_back(a[p]);
  }
  auto d3 = detector_d3(b, a), d3p = detector_d3(bp, ap);
  auto d4 = detector_d4(b, a), d4p = detector_d4(bp, ap);
  auto d5 = detector_d5(a, s), d5p = detector_d5(ap, sp);
  auto u1 = *detector_u1(a), u1p = *detector_u1(ap);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(d3p[i] == d3[perm[i]]);
    CHECK(d4p[i] == d4[perm[i]]);
    CHECK(d5p[i] == doctest::Approx(d5[perm[i]]).epsilon(1e-12));
    CHECK(u1p[i] == u1[perm[i]]);
  }
}

TEST_CASE("gaming experiment on a desk model") {
  Setup s;
  auto ctx = s.ctx();
  ScenarioGrid sg;
  sg.pcts = {0, 10, 30, 50, 100, 200};
  sg.seeds = 4;
  auto scenarios = make_scenarios(sg, s.stations, s.target, 5, "d");
  ScenarioGrid spoof_grid;
  spoof_grid.kind = AttackKind::spoof;
  spoof_grid.seeds = 4;
  auto spoofs = make_scenarios(spoof_grid, s.stations, s.target, 5, "d");
  scenarios.insert(scenarios.end(), spoofs.begin(), spoofs.end());
  auto outcomes = run_gaming_experiment(ctx, scenarios, 1);
  REQUIRE(outcomes.size() == scenarios.size());
  auto again = run_gaming_experiment(ctx, std::span(scenarios).first(6), 2);
  for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].attack.unsigned_mean == outcomes[i].attack.unsigned_mean);

  std::map<double, std::vector<double>> d4_by_pct, ratio_by_pct;
  std::vector<DetectionCase> cases50;
  std::vector<double> spoof_d4;
  std::vector<DetectionCase> spoof_d5;
  double honest = 0, attacker = 0;
  double u1_auc = 0, d4_auc = 0;
  int n_inflate = 0;
  for (const auto& o : outcomes) {
    auto det = run_detectors(o, s.stations);
    REQUIRE(det.size() == 4u);
    const auto& d4 = det[1].scores;
    if (o.scenario.kind == AttackKind::spoof) {
      for (auto a : o.scenario.attackers) spoof_d4.push_back(d4[a]);
      spoof_d5.push_back({det[2].scores, o.scenario.attackers});
      continue;
    }
    if (o.scenario.pct == 0) {
      CHECK(std::abs(o.inflation_ratio - 1.0) <= 1e-12);
      CHECK(o.mae_change == 0.0);
      continue;
    }
    double m = 0;
    for (auto a : o.scenario.attackers) m += d4[a];
    d4_by_pct[o.scenario.pct].push_back(m / static_cast<double>(o.scenario.attackers.size()));
    ratio_by_pct[o.scenario.pct].push_back(o.inflation_ratio);
    if (o.scenario.pct == 50) cases50.push_back({d4, o.scenario.attackers});
    honest += std::abs(o.honest_share_change_pp);
    attacker += std::abs(o.attacker_share_change_pp);
    if (o.scenario.pct <= 50 && !det[3].scores.empty()) {
      std::vector<bool> labels(s.stations.size(), false);
      for (auto a : o.scenario.attackers) labels[a] = true;
      u1_auc += pr_auc(det[3].scores, labels);
      d4_auc += pr_auc(d4, labels);
      ++n_inflate;
    }
  }
  auto mean_of = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  double prev_d4 = -1e9, prev_ratio = 0;
  for (const auto& [pct, v] : d4_by_pct) {
    CAPTURE(pct);
    CHECK(mean_of(v) >= prev_d4);
    CHECK(mean_of(ratio_by_pct[pct]) >= prev_ratio);
    prev_d4 = mean_of(v);
    prev_ratio = mean_of(ratio_by_pct[pct]);
  }
  CHECK(topk_hit_rate(cases50, 5) >= 0.8);
  CHECK(mean_of(spoof_d4) <= 0.0);
  CHECK(topk_hit_rate(spoof_d5, 5) >= 0.5);
  CHECK(honest < attacker);
  CHECK(u1_auc / n_inflate < 0.5 * d4_auc / n_inflate);
}

TEST_CASE("evaluate_detection aggregates per scenario") {
  Setup s;
  const std::size_t n = s.stations.size();
  std::vector<GamingOutcome> outcomes;
  std::vector<std::vector<double>> perfect, random;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    GamingOutcome o;
    o.scenario.attackers = draw_attackers(s.stations, s.target, Placement::uniform, 1 + i % 5, static_cast<std::uint64_t>(i));
    std::vector<double> p(n, 0.0);
    for (auto a : o.scenario.attackers) p[a] = 1.0;
    perfect.push_back(p);
    random.push_back(oracle::random_vector(rng, n));
    outcomes.push_back(o);
  }
  auto best = evaluate_detection("P", "c", outcomes, perfect, n);
  CHECK(best.pr_auc == 1.0);
  CHECK(best.hit1 == 1.0);
  CHECK(best.hit5 == 1.0);
  CHECK(best.scenarios == 200u);
  auto chance = evaluate_detection("R", "c", outcomes, random, n);
  CHECK(std::abs(chance.pr_auc - chance.prevalence) <= 0.05);

  double auc = 0, prev = 0, hit = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    std::vector<bool> l(n, false);
    for (auto a : outcomes[i].scenario.attackers) l[a] = true;
    auc += oracle::pr_auc(random[i], l);
    prev += static_cast<double>(outcomes[i].scenario.attackers.size()) / static_cast<double>(n);
    auto top = oracle::topk(random[i], 5);
    bool h = false;
    for (auto a : outcomes[i].scenario.attackers) h = h || top.count(a);
    hit += h;
  }
  CHECK(chance.pr_auc == doctest::Approx(auc / 200).epsilon(1e-12));
  CHECK(chance.prevalence == doctest::Approx(prev / 200).epsilon(1e-12));
  CHECK(chance.hit5 == doctest::Approx(hit / 200).epsilon(1e-12));
}

TEST_CASE("supervised D7") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  auto config = [&](bool separable) {
    std::vector<StationFeatures> out;
    for (int sc = 0; sc < 6; ++sc) {
      StationFeatures f;
      for (int i = 0; i < 50; ++i) {
        const bool attacker = i % 10 == sc % 10;
        std::vector<double> row(5);
        for (double& x : row) x = g(rng);
        if (separable) row[1] += attacker ? 8.0 : 0.0;
        f.rows.push_back(row);
        f.labels.push_back(attacker);
      }
      out.push_back(f);
    }
    return out;
  };
  std::vector<std::vector<StationFeatures>> sep{config(true), config(true), config(true)};
  for (double auc : detector_d7_loco(sep)) CHECK(auc == doctest::Approx(1.0));
  CHECK(detector_d7_loco(sep) == detector_d7_loco(sep));

  std::vector<std::vector<StationFeatures>> noise;
  for (int c = 0; c < 8; ++c) noise.push_back(config(false));
  double mean = 0;
  for (double auc : detector_d7_loco(noise)) mean += auc / 8;
  CHECK(std::abs(mean - 5.0 / 50.0) <= 0.05);
  CHECK_THROWS(detector_d7_loco({config(true)}));
}
