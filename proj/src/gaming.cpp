#include "gradval/gaming.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gradval/parallel.hpp"
#include "gradval/rng.hpp"

namespace gradval {

std::string to_string(AttackKind k) { return k == AttackKind::inflate ? "inflate" : "spoof"; }

std::string to_string(AttackScope s) {
  switch (s) {
    case AttackScope::single_target_var: return "single_target_var";
    case AttackScope::single_other_var: return "single_other_var";
    case AttackScope::all_surface: return "all_surface";
  }
  return "?";
}

std::string to_string(Placement p) {
  switch (p) {
    case Placement::uniform: return "uniform";
    case Placement::close: return "close";
    case Placement::mid: return "mid";
    case Placement::mixed: return "mixed";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "inflate") return AttackKind::inflate;
  if (s == "spoof") return AttackKind::spoof;
  throw std::invalid_argument("unknown attack kind: " + s);
}

AttackScope attack_scope_from_string(const std::string& s) {
  for (AttackScope a : {AttackScope::single_target_var, AttackScope::single_other_var, AttackScope::all_surface}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("invalid scope: " + s);
}

Placement placement_from_string(const std::string& s) {
  for (Placement p : {Placement::uniform, Placement::close, Placement::mid, Placement::mixed}) {
    if (to_string(p) == s) return p;
  }
  throw std::invalid_argument("unknown placement: " + s);
}

std::vector<int> scope_variables(AttackScope scope, const GridSpec& grid, int target_variable) {
  if (target_variable < 0 || target_variable >= grid.n_vars()) throw std::invalid_argument("invalid scope: bad target variable");
  switch (scope) {
    case AttackScope::single_target_var: return {target_variable};
    case AttackScope::single_other_var:
      for (int v = 0; v < grid.n_vars(); ++v) {
        if (v != target_variable) return {v};
      }
      throw std::invalid_argument("invalid scope: grid has no other variable");
    case AttackScope::all_surface: {
      std::vector<int> all(static_cast<std::size_t>(grid.n_vars()));
      std::iota(all.begin(), all.end(), 0);
      return all;
    }
  }
  throw std::invalid_argument("invalid scope");
}

FieldTensor apply_attack(const FieldTensor& x, const AttackScenario& scenario, const Climatology& clim,
                         const StationGrid& stations, int target_variable) {
  require_same_shape(x, clim.mean());
  if (scenario.kind == AttackKind::inflate && !(scenario.pct >= 0.0)) {
    throw std::invalid_argument("inflation pct must be >= 0");
  }
  const auto vars = scope_variables(scenario.scope, x.grid(), target_variable);
  FieldTensor out = x;
  const double f = scenario.pct / 100.0;
  for (std::size_t a : scenario.attackers) {
    if (a >= stations.size()) throw std::invalid_argument("attacker is not a station");
    const Station& s = stations[a];
    for (int v : vars) {
      const double xv = x.at(v, s.lat_index, s.lon_index);
      const double c = clim.mean().at(v, s.lat_index, s.lon_index);
      out.at(v, s.lat_index, s.lon_index) = scenario.kind == AttackKind::inflate ? xv + f * (xv - c) : c;
    }
  }
  return out;
}

std::vector<std::size_t> draw_attackers(const StationGrid& stations, const TargetSpec& target, Placement placement,
                                        std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> close, mid, all(stations.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const double d = stations.distance_km(k, target.lat, target.lon);
    if (d < kCloseKm) close.push_back(k);
    else if (d <= kMidKm) mid.push_back(k);
  }
  Rng rng = make_rng(seed, {0xa77ac4});
  auto take = [&](std::vector<std::size_t>& pool, std::vector<std::size_t>& out) {
    if (pool.empty()) throw std::invalid_argument("not enough stations for placement " + to_string(placement));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t i = pick(rng);
    out.push_back(pool[i]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
  };
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < count; ++n) {
    switch (placement) {
      case Placement::uniform: take(all, out); break;
      case Placement::close: take(close, out); break;
      case Placement::mid: take(mid, out); break;
      case Placement::mixed: take(n % 2 == 0 ? close : mid, out); break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<AttackScenario> make_scenarios(const ScenarioGrid& grid, const StationGrid& stations,
                                           const TargetSpec& target, std::uint64_t seed, const std::string& prefix) {
  std::vector<AttackScenario> out;
  const std::vector<double> pcts = grid.kind == AttackKind::spoof ? std::vector<double>{0.0} : grid.pcts;
  for (int n : grid.attacker_counts) {
    for (double pct : pcts) {
      for (int s = 0; s < grid.seeds; ++s) {
        AttackScenario sc;
        sc.kind = grid.kind;
        sc.pct = pct;
        sc.scope = grid.scope;
        sc.placement = grid.placement;
        sc.seed = derive_seed(seed, {static_cast<std::uint64_t>(grid.kind), static_cast<std::uint64_t>(grid.placement),
                                     static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(std::llround(pct * 1000)),
                                     static_cast<std::uint64_t>(s)});
        sc.attackers = draw_attackers(stations, target, grid.placement, static_cast<std::size_t>(n), sc.seed);
        sc.id = prefix + "-" + to_string(grid.kind) + "-" + to_string(grid.placement) + "-n" + std::to_string(n) +
                (grid.kind == AttackKind::inflate ? "-p" + std::to_string(std::llround(pct)) : "") + "-s" +
                std::to_string(s);
        out.push_back(std::move(sc));
      }
    }
  }
  return out;
}

namespace {

PeriodScores period_scores_impl(const GamingContext& ctx, const AttackScenario* scenario,
                                const std::vector<double>* verification) {
  const auto& fields = ctx.fields;
  if (fields.empty()) throw std::invalid_argument("gaming needs at least one timestamp");
  const std::size_t n = ctx.stations->size();
  PeriodScores out;
  out.unsigned_mean.assign(n, 0.0);
  out.signed_mean.assign(n, 0.0);
  const std::size_t first = ctx.attribution.baseline == BaselineKind::persistence ? 1 : 0;
  std::size_t used = 0;
  for (std::size_t t = first; t < fields.size(); ++t) {
    const FieldTensor x = scenario ? apply_attack(fields[t], *scenario, *ctx.clim, *ctx.stations,
                                                  ctx.model->target().variable_index)
                                   : fields[t];
    const FieldTensor base = make_baseline(ctx.attribution.baseline, fields, t, *ctx.clim);
    double prediction = 0.0;
    AttributionMap attr;
    switch (ctx.attribution.method) {
      case Method::gti: attr = gradient_times_input(*ctx.model, x, base, &prediction); break;
      case Method::vg: attr = vanilla_gradient(*ctx.model, x, &prediction); break;
      case Method::ig:
        attr = integrated_gradients(*ctx.model, x, base, ctx.attribution.steps);
        prediction = ctx.model->forward(x);
        break;
    }
    auto u = spatial_importance(attr, *ctx.stations);
    const auto s = spatial_signed(attr.scores, *ctx.stations);
    for (std::size_t g = 0; g < n; ++g) {
      out.unsigned_mean[g] += u[g];
      out.signed_mean[g] += s[g];
    }
    if (ctx.truth) {
      const double y = verification ? (*verification)[t] : ctx.truth->verification(fields[t]);
      out.mae += std::abs(prediction - y);
    }
    out.unsigned_per_timestamp.push_back(std::move(u));
    ++used;
  }
  for (std::size_t g = 0; g < n; ++g) {
    out.unsigned_mean[g] /= static_cast<double>(used);
    out.signed_mean[g] /= static_cast<double>(used);
  }
  out.mae /= static_cast<double>(used);
  return out;
}

}  // namespace

PeriodScores period_scores(const GamingContext& ctx, const AttackScenario* scenario) {
  return period_scores_impl(ctx, scenario, nullptr);
}

namespace {

std::vector<double> shares_of(std::span<const double> s) {
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  std::vector<double> out(s.size(), 0.0);
  if (total > 0.0) {
    for (std::size_t g = 0; g < s.size(); ++g) out[g] = s[g] / total;
  }
  return out;
}

}  // namespace

GamingOutcome gaming_outcome(const AttackScenario& scenario, const PeriodScores& baseline, PeriodScores attack) {
  GamingOutcome o;
  o.scenario = scenario;
  o.baseline = baseline;
  o.attack = std::move(attack);
  const std::size_t n = baseline.unsigned_mean.size();
  std::vector<bool> is_attacker(n, false);
  for (std::size_t a : scenario.attackers) is_attacker[a] = true;
  double ratio = 0.0;
  for (std::size_t a : scenario.attackers) {
    ratio += std::max(o.attack.unsigned_mean[a], kScoreFloor) / std::max(baseline.unsigned_mean[a], kScoreFloor);
  }
  o.inflation_ratio = scenario.attackers.empty() ? 1.0 : ratio / static_cast<double>(scenario.attackers.size());
  o.mae_change = o.attack.mae - baseline.mae;
  const auto sb = shares_of(baseline.unsigned_mean);
  const auto sa = shares_of(o.attack.unsigned_mean);
  double honest = 0.0, attackers = 0.0;
  std::size_t n_honest = 0;
  for (std::size_t g = 0; g < n; ++g) {
    const double d = 100.0 * (sa[g] - sb[g]);
    if (is_attacker[g]) {
      attackers += d;
    } else {
      honest += d;
      ++n_honest;
    }
  }
  o.honest_share_change_pp = n_honest ? honest / static_cast<double>(n_honest) : 0.0;
  o.attacker_share_change_pp = scenario.attackers.empty() ? 0.0 : attackers / static_cast<double>(scenario.attackers.size());
  return o;
}

std::vector<GamingOutcome> run_gaming_experiment(const GamingContext& ctx, std::span<const AttackScenario> scenarios,
                                                 unsigned workers) {
  const PeriodScores baseline = period_scores(ctx);
  // Verification depends only on the clean fields.
  std::vector<double> verification;
  if (ctx.truth) {
    for (const auto& f : ctx.fields) verification.push_back(ctx.truth->verification(f));
  }
  std::vector<GamingOutcome> out(scenarios.size());
  parallel_for(
      scenarios.size(),
      [&](std::size_t i) {
        out[i] = gaming_outcome(scenarios[i], baseline, period_scores_impl(ctx, &scenarios[i], &verification));
      },
      workers);
  return out;
}

std::vector<double> detector_d4(std::span<const double> baseline, std::span<const double> attack) {
  if (baseline.size() != attack.size()) throw std::invalid_argument("D4: length mismatch");
  std::vector<double> out(baseline.size());
  for (std::size_t g = 0; g < out.size(); ++g) {
    out[g] = std::log(std::max(attack[g], kScoreFloor) / std::max(baseline[g], kScoreFloor));
  }
  return out;
}

std::vector<double> detector_d4_per_timestamp(const std::vector<std::vector<double>>& baseline,
                                              const std::vector<std::vector<double>>& attack) {
  if (baseline.size() != attack.size() || baseline.empty()) throw std::invalid_argument("D4: period mismatch");
  std::vector<double> out(baseline.front().size(), 0.0);
  for (std::size_t t = 0; t < baseline.size(); ++t) {
    const auto d = detector_d4(baseline[t], attack[t]);
    for (std::size_t g = 0; g < out.size(); ++g) out[g] += d[g];
  }
  for (double& v : out) v /= static_cast<double>(baseline.size());
  return out;
}

namespace {

std::vector<double> descending_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<double>(r + 1);
  return rank;
}

}  // namespace

std::vector<double> detector_d3(std::span<const double> baseline, std::span<const double> attack) {
  if (baseline.size() != attack.size()) throw std::invalid_argument("D3: length mismatch");
  const auto rb = descending_ranks(baseline);
  const auto ra = descending_ranks(attack);
  std::vector<double> out(rb.size());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = rb[g] - ra[g];
  return out;
}

NeighbourTable nearest_neighbours(const StationGrid& stations, std::size_t k) {
  if (stations.size() < 6 || k < 5) throw std::invalid_argument("D5: isolated station (fewer than 5 neighbours)");
  const std::size_t n = stations.size();
  const std::size_t kk = std::min(k, n - 1);
  NeighbourTable out(n);
  // Lattice distances tie often; break ties on coordinates (not ids) so the
  // result does not depend on station order.
  struct Candidate {
    double rounded;
    int lat_index, lon_index;
    double km;
    std::size_t h;
    auto key() const { return std::tie(rounded, lat_index, lon_index); }
  };
  std::vector<Candidate> dist(n - 1);
  for (std::size_t g = 0; g < n; ++g) {
    std::size_t m = 0;
    for (std::size_t h = 0; h < n; ++h) {
      if (h == g) continue;
      const double km = stations.distance_km(g, h);
      dist[m++] = {std::round(km * 1e6) / 1e6, stations[h].lat_index, stations[h].lon_index, km, h};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end(),
                      [](const Candidate& a, const Candidate& b) { return a.key() < b.key(); });
    for (std::size_t i = 0; i < kk; ++i) out[g].emplace_back(dist[i].h, dist[i].km);
  }
  return out;
}

std::vector<double> detector_d5(std::span<const double> scores, const NeighbourTable& neighbours) {
  if (scores.size() != neighbours.size()) throw std::invalid_argument("D5: one score per station required");
  std::vector<double> out(scores.size());
  for (std::size_t g = 0; g < scores.size(); ++g) {
    double num = 0.0, den = 0.0;
    for (const auto& [h, d] : neighbours[g]) {
      const double w = 1.0 / std::max(d, 1e-9);
      num += w * scores[h];
      den += w;
    }
    const double pred = num / den;
    out[g] = std::abs(scores[g] - pred) / (pred + kScoreFloor);
  }
  return out;
}

std::vector<double> detector_d5(std::span<const double> scores, const StationGrid& stations, std::size_t k) {
  if (scores.size() != stations.size()) throw std::invalid_argument("D5: one score per station required");
  return detector_d5(scores, nearest_neighbours(stations, k));
}

std::optional<std::vector<double>> detector_u1(std::span<const double> scores) {
  if (scores.empty()) return std::nullopt;
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  const double med = quantile_sorted(s, 0.5);
  std::vector<double> dev(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) dev[i] = std::abs(s[i] - med);
  std::sort(dev.begin(), dev.end());
  const double mad = quantile_sorted(dev, 0.5);
  if (!(mad > 0.0)) return std::nullopt;
  std::vector<double> out(scores.size());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = std::abs(scores[g] - med) / (1.4826 * mad);
  return out;
}

StationFeatures detection_features(const GamingOutcome& outcome, const StationGrid& stations,
                                   const TargetSpec& target, const NeighbourTable* neighbours) {
  const auto& b = outcome.baseline.unsigned_mean;
  const auto& a = outcome.attack.unsigned_mean;
  const auto d3 = detector_d3(b, a);
  const auto d4 = detector_d4(b, a);
  const auto d5 = neighbours ? detector_d5(a, *neighbours) : detector_d5(a, stations);
  const auto share = shares_of(b);
  StationFeatures f;
  f.labels.assign(stations.size(), false);
  for (std::size_t g : outcome.scenario.attackers) f.labels[g] = true;
  for (std::size_t g = 0; g < stations.size(); ++g) {
    f.rows.push_back({d3[g], d4[g], d5[g], share[g], stations.distance_km(g, target.lat, target.lon)});
  }
  return f;
}

std::vector<double> LogisticModel::predict(const std::vector<std::vector<double>>& rows) const {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double z = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * (rows[i][j] - mean[j]) / scale[j];
    out[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return out;
}

LogisticModel fit_logistic(const std::vector<std::vector<double>>& rows, const std::vector<bool>& labels,
                           int iterations, double learning_rate, double l2) {
  if (rows.empty() || rows.size() != labels.size()) throw std::invalid_argument("logistic: bad training data");
  const std::size_t positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0 || positives == labels.size()) throw std::invalid_argument("logistic: degenerate labels");
  const std::size_t d = rows.front().size();
  const double n = static_cast<double>(rows.size());
  LogisticModel m;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 0.0);
  m.weights.assign(d, 0.0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += r[j] / n;
  }
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) m.scale[j] += (r[j] - m.mean[j]) * (r[j] - m.mean[j]) / n;
  }
  for (double& s : m.scale) s = s > 0.0 ? std::sqrt(s) : 1.0;
  std::vector<std::vector<double>> z(rows.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (rows[i][j] - m.mean[j]) / m.scale[j];
  }
  std::vector<double> grad(d);
  for (int it = 0; it < iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      double s = m.bias;
      for (std::size_t j = 0; j < d; ++j) s += m.weights[j] * z[i][j];
      const double err = 1.0 / (1.0 + std::exp(-s)) - (labels[i] ? 1.0 : 0.0);
      for (std::size_t j = 0; j < d; ++j) grad[j] += err * z[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) m.weights[j] -= learning_rate * (grad[j] / n + l2 * m.weights[j]);
    m.bias -= learning_rate * gb / n;
  }
  return m;
}

std::vector<double> detector_d7_loco(const std::vector<std::vector<StationFeatures>>& configurations) {
  if (configurations.size() < 2) throw std::invalid_argument("D7 needs at least 2 configurations");
  std::vector<double> out;
  for (std::size_t held = 0; held < configurations.size(); ++held) {
    std::vector<std::vector<double>> rows;
    std::vector<bool> labels;
    for (std::size_t c = 0; c < configurations.size(); ++c) {
      if (c == held) continue;
      for (const auto& sc : configurations[c]) {
        rows.insert(rows.end(), sc.rows.begin(), sc.rows.end());
        labels.insert(labels.end(), sc.labels.begin(), sc.labels.end());
      }
    }
    const LogisticModel model = fit_logistic(rows, labels);
    double auc = 0.0;
    for (const auto& sc : configurations[held]) auc += pr_auc(model.predict(sc.rows), sc.labels);
    out.push_back(configurations[held].empty() ? std::numeric_limits<double>::quiet_NaN()
                                               : auc / static_cast<double>(configurations[held].size()));
  }
  return out;
}

std::vector<DetectorScores> run_detectors(const GamingOutcome& outcome, const StationGrid& stations,
                                          bool d4_per_timestamp, const NeighbourTable* neighbours) {
  const auto& b = outcome.baseline;
  const auto& a = outcome.attack;
  std::vector<DetectorScores> out;
  out.push_back({"D3", detector_d3(b.unsigned_mean, a.unsigned_mean)});
  out.push_back({"D4", d4_per_timestamp ? detector_d4_per_timestamp(b.unsigned_per_timestamp, a.unsigned_per_timestamp)
                                        : detector_d4(b.unsigned_mean, a.unsigned_mean)});
  out.push_back({"D5", neighbours ? detector_d5(a.unsigned_mean, *neighbours) : detector_d5(a.unsigned_mean, stations)});
  auto u1 = detector_u1(a.unsigned_mean);
  out.push_back({"U1", u1 ? std::move(*u1) : std::vector<double>{}});
  return out;
}

DetectionSummary evaluate_detection(const std::string& detector, const std::string& configuration,
                                    std::span<const GamingOutcome> outcomes,
                                    std::span<const std::vector<double>> scores, std::size_t n_stations) {
  if (outcomes.size() != scores.size()) throw std::invalid_argument("evaluate_detection: length mismatch");
  DetectionSummary s;
  s.detector = detector;
  s.configuration = configuration;
  s.kind = outcomes.empty() ? "" : to_string(outcomes.front().scenario.kind);
  std::vector<DetectionCase> cases;
  double auc = 0.0, prev = 0.0, att = 0.0;
  std::size_t att_n = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& sc = outcomes[i].scenario;
    if (scores[i].empty() || sc.attackers.empty()) continue;
    std::vector<bool> labels(n_stations, false);
    for (std::size_t a : sc.attackers) {
      labels[a] = true;
      att += scores[i][a];
      ++att_n;
    }
    auc += pr_auc(scores[i], labels);
    prev += static_cast<double>(sc.attackers.size()) / static_cast<double>(n_stations);
    cases.push_back({scores[i], sc.attackers});
  }
  s.scenarios = cases.size();
  if (cases.empty()) {
    s.pr_auc = s.prevalence = s.hit1 = s.hit5 = s.mean_attacker_score = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  const double m = static_cast<double>(cases.size());
  s.pr_auc = auc / m;
  s.prevalence = prev / m;
  s.hit1 = topk_hit_rate(cases, 1);
  s.hit5 = topk_hit_rate(cases, std::min<std::size_t>(5, n_stations));
  s.mean_attacker_score = att / static_cast<double>(att_n);
  return s;
}

}  // namespace gradval
