#include "gradval/incentive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gradval/rng.hpp"

namespace gradval {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::ig: return "IG";
    case Strategy::gti: return "GTI";
    case Strategy::vg: return "VG";
    case Strategy::distance: return "distance";
    case Strategy::uniform: return "uniform";
    case Strategy::oracle: return "oracle";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  for (Strategy st : {Strategy::ig, Strategy::gti, Strategy::vg, Strategy::distance, Strategy::uniform,
                      Strategy::oracle}) {
    if (to_string(st) == s) return st;
  }
  throw std::invalid_argument("unknown strategy: " + s);
}

std::vector<double> distance_scores(const StationGrid& stations, const TargetSpec& target) {
  const GridSpec& grid = stations.grid();
  const double tlat = grid.lat(target.lat_index);
  const double tlon = grid.lon(target.lon_index);
  std::vector<double> out(stations.size(), 0.0);
  double best = 0.0;
  std::vector<std::size_t> on_target;
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const double d = stations.distance_km(k, tlat, tlon);
    if (d > 0.0) {
      out[k] = 1.0 / d;
      best = std::max(best, out[k]);
    } else {
      on_target.push_back(k);
    }
  }
  for (std::size_t k : on_target) out[k] = best > 0.0 ? 2.0 * best : 1.0;
  return out;
}

double captured_utility(std::span<const std::size_t> selected, std::span<const double> utilities) {
  double total = 0.0;
  for (double u : utilities) total += std::abs(u);
  if (!(total > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (std::size_t g : selected) {
    if (g >= utilities.size()) throw std::invalid_argument("selected station out of range");
    s += std::abs(utilities[g]);
  }
  return s / total;
}

std::vector<std::size_t> select_uniform(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw std::invalid_argument("K larger than station count");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, {0x5e1ec7});
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

SelectionResult select(Strategy strategy, const SelectionInputs& inputs, std::size_t k) {
  const std::size_t n = inputs.utilities.size();
  if (n == 0) throw std::invalid_argument("selection needs utilities");
  if (k == 0 || k > n) throw std::invalid_argument("K must be in [1, N]");
  std::vector<double> abs_u(n);
  for (std::size_t g = 0; g < n; ++g) abs_u[g] = std::abs(inputs.utilities[g]);
  SelectionResult out;
  out.strategy = strategy;
  out.k = k;
  switch (strategy) {
    case Strategy::oracle: out.selected = topk_indices(abs_u, k); break;
    case Strategy::uniform: out.selected = select_uniform(n, k, inputs.seed); break;
    default:
      if (inputs.scores.size() != n) throw std::invalid_argument("selection needs one score per station");
      out.selected = topk_indices(inputs.scores, k);
      break;
  }
  out.captured = captured_utility(out.selected, abs_u);
  const double oracle = captured_utility(topk_indices(abs_u, k), abs_u);
  out.efficiency = out.captured / (static_cast<double>(k) / static_cast<double>(n));
  out.optimality = strategy == Strategy::oracle ? 1.0 : out.captured / oracle;
  return out;
}

PaymentAllocation payment(std::span<const double> scores, double budget, std::string provenance) {
  if (!(budget >= 0.0)) throw std::invalid_argument("budget must be >= 0");
  double total = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0)) throw std::invalid_argument("payment scores must be >= 0");
    total += s;
  }
  if (!(total > 0.0)) throw std::invalid_argument("payment scores are all zero");
  PaymentAllocation out;
  out.budget = budget;
  out.provenance = std::move(provenance);
  out.shares.resize(scores.size());
  out.amounts.resize(scores.size());
  for (std::size_t g = 0; g < scores.size(); ++g) {
    out.shares[g] = scores[g] / total;
    out.amounts[g] = out.shares[g] * budget;
  }
  return out;
}

std::vector<double> true_shares(std::span<const double> utilities) {
  double total = 0.0;
  for (double u : utilities) total += std::abs(u);
  if (!(total > 0.0)) throw std::invalid_argument("utilities are all zero");
  std::vector<double> out(utilities.size());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = std::abs(utilities[g]) / total;
  return out;
}

namespace {

void require_probability(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw std::invalid_argument("shares must be nonnegative");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("shares must sum to 1");
}

}  // namespace

Overpayment overpayment(std::span<const double> p_proxy, std::span<const double> p_true) {
  if (p_proxy.size() != p_true.size()) throw std::invalid_argument("overpayment: length mismatch");
  require_probability(p_proxy);
  require_probability(p_true);
  Overpayment out;
  out.per_station.resize(p_proxy.size());
  for (std::size_t g = 0; g < p_proxy.size(); ++g) {
    const double d = p_proxy[g] - p_true[g];
    out.per_station[g] = d;
    if (d > 0) out.total += d; else out.underpayment -= d;
  }
  return out;
}

std::vector<std::vector<std::size_t>> decile_bins(std::span<const double> proxy, int bins) {
  const std::size_t n = proxy.size();
  if (bins < 1 || n < static_cast<std::size_t>(bins)) throw std::invalid_argument("too few stations for binning");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proxy[a] < proxy[b]; });
  const std::size_t base = n / static_cast<std::size_t>(bins);
  const std::size_t extra = n % static_cast<std::size_t>(bins);
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(bins));
  std::size_t pos = 0;
  for (std::size_t b = 0; b < out.size(); ++b) {
    const std::size_t len = base + (b < extra ? 1 : 0);
    out[b].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

CalibrationReport decile_calibration(std::span<const double> proxy, std::span<const double> utilities) {
  if (proxy.size() != utilities.size()) throw std::invalid_argument("calibration: length mismatch");
  if (proxy.size() < 10) throw std::invalid_argument("calibration needs at least 10 stations");
  std::vector<double> abs_p(proxy.size()), abs_u(utilities.size());
  for (std::size_t g = 0; g < proxy.size(); ++g) {
    abs_p[g] = std::abs(proxy[g]);
    abs_u[g] = std::abs(utilities[g]);
  }
  CalibrationReport out;
  for (const auto& bin : decile_bins(abs_p)) {
    double s = 0.0;
    for (std::size_t g : bin) s += abs_u[g];
    out.decile_mean_utility.push_back(s / static_cast<double>(bin.size()));
    out.decile_count.push_back(bin.size());
  }
  out.gini_utility = gini(abs_u);
  const double proxy_total = std::accumulate(abs_p.begin(), abs_p.end(), 0.0);
  out.true_shares = true_shares(abs_u);
  if (proxy_total > 0.0) {
    out.gini_proxy = gini(abs_p);
    out.proxy_shares = payment(abs_p, 1.0).shares;
    out.overpayment = overpayment(out.proxy_shares, out.true_shares).total;
    out.share_spearman = spearman(out.proxy_shares, out.true_shares);
  } else {
    out.gini_proxy = 0.0;
    out.overpayment = std::numeric_limits<double>::quiet_NaN();
    out.proxy_shares.assign(abs_p.size(), 0.0);
    out.share_spearman = spearman(out.proxy_shares, out.true_shares);
  }
  out.gini_ratio = out.gini_utility > 0.0 ? out.gini_proxy / out.gini_utility
                                          : std::numeric_limits<double>::quiet_NaN();
  return out;
}

namespace {

std::vector<double> averaged_shares(const std::vector<std::vector<double>>& scores,
                                    std::span<const std::size_t> rows) {
  std::vector<double> avg(scores.front().size(), 0.0);
  for (std::size_t t : rows) {
    for (std::size_t g = 0; g < avg.size(); ++g) avg[g] += std::abs(scores[t][g]);
  }
  double total = 0.0;
  for (double& a : avg) {
    a /= static_cast<double>(rows.size());
    total += a;
  }
  if (total > 0.0) {
    for (double& a : avg) a /= total;
  }
  return avg;
}

}  // namespace

StabilityResult payment_stability(const std::vector<std::vector<double>>& per_timestamp_scores, int n_resamples,
                                  std::size_t top_k, std::uint64_t seed, double level) {
  const std::size_t t_count = per_timestamp_scores.size();
  if (t_count < 10) throw std::invalid_argument("payment stability needs at least 10 timestamps");
  if (n_resamples < 1000) throw std::invalid_argument("bootstrap needs at least 1000 resamples");
  const std::size_t n = per_timestamp_scores.front().size();
  for (const auto& row : per_timestamp_scores) {
    if (row.size() != n) throw std::invalid_argument("payment stability: ragged scores");
  }
  std::vector<std::size_t> all(t_count);
  std::iota(all.begin(), all.end(), 0);
  StabilityResult out;
  out.shares = averaged_shares(per_timestamp_scores, all);

  std::vector<std::vector<double>> draws(n, std::vector<double>(static_cast<std::size_t>(n_resamples)));
  std::vector<std::size_t> rows(t_count);
  for (int r = 0; r < n_resamples; ++r) {
    Rng rng = make_rng(seed, {0xb007, static_cast<std::uint64_t>(r)});
    std::uniform_int_distribution<std::size_t> pick(0, t_count - 1);
    for (auto& row : rows) row = pick(rng);
    const auto shares = averaged_shares(per_timestamp_scores, rows);
    for (std::size_t g = 0; g < n; ++g) draws[g][static_cast<std::size_t>(r)] = shares[g];
  }
  const double alpha = 1.0 - level;
  out.ci.resize(n);
  for (std::size_t g = 0; g < n; ++g) {
    auto& d = draws[g];
    std::sort(d.begin(), d.end());
    BootstrapCI ci;
    ci.point = out.shares[g];
    ci.lower = std::min(quantile_sorted(d, alpha / 2.0), ci.point);
    ci.upper = std::max(quantile_sorted(d, 1.0 - alpha / 2.0), ci.point);
    ci.level = level;
    ci.resamples = n_resamples;
    out.ci[g] = ci;
  }
  out.top = topk_indices(out.shares, std::min(top_k, n));
  double ratio = 0.0;
  std::size_t used = 0;
  for (std::size_t g : out.top) {
    if (out.shares[g] > 0.0) {
      ratio += (out.ci[g].upper - out.ci[g].lower) / out.shares[g];
      ++used;
    }
  }
  out.ci_to_share = used ? ratio / static_cast<double>(used) : 0.0;
  return out;
}

namespace {

std::vector<double> blend(std::span<const double> proxy, std::span<const double> dist, double lambda) {
  std::vector<double> out(proxy.size());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = lambda * proxy[g] + (1.0 - lambda) * dist[g];
  return out;
}

double fold_loss(std::span<const double> blended, std::span<const double> utilities, ShrinkageObjective objective,
                 std::size_t k) {
  const auto truth = true_shares(utilities);
  if (objective == ShrinkageObjective::mse) {
    double s = 0.0;
    for (std::size_t g = 0; g < truth.size(); ++g) s += (blended[g] - truth[g]) * (blended[g] - truth[g]);
    return s / static_cast<double>(truth.size());
  }
  return -captured_utility(topk_indices(blended, std::min(k, blended.size())), utilities);
}

}  // namespace

ShrinkageFit shrinkage_fit(const std::vector<std::vector<double>>& proxy_shares,
                           std::span<const double> distance_shares,
                           const std::vector<std::vector<double>>& utilities, ShrinkageObjective objective,
                           std::size_t k) {
  const std::size_t t_count = proxy_shares.size();
  if (t_count < 3) throw std::invalid_argument("shrinkage needs at least 3 timestamps");
  if (utilities.size() != t_count) throw std::invalid_argument("shrinkage: timestamp count mismatch");
  const std::size_t n = distance_shares.size();
  for (std::size_t t = 0; t < t_count; ++t) {
    if (proxy_shares[t].size() != n || utilities[t].size() != n) {
      throw std::invalid_argument("shrinkage: station count mismatch");
    }
  }
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i * 0.05);

  // loss[t][i]: objective of grid[i] on timestamp t.
  std::vector<std::vector<double>> loss(t_count, std::vector<double>(grid.size()));
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      loss[t][i] = fold_loss(blend(proxy_shares[t], distance_shares, grid[i]), utilities[t], objective, k);
    }
  }

  ShrinkageFit out;
  out.objective = objective;
  double rho_sum = 0.0;
  std::size_t rho_count = 0;
  for (std::size_t held = 0; held < t_count; ++held) {
    std::size_t best = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid.size(); ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < t_count; ++t) {
        if (t != held) s += loss[t][i];
      }
      if (s <= best_loss) {
        best_loss = s;
        best = i;
      }
    }
    out.fold_lambda.push_back(grid[best]);
    std::vector<double> abs_u(n);
    for (std::size_t g = 0; g < n; ++g) abs_u[g] = std::abs(utilities[held][g]);
    const auto rb = spearman(blend(proxy_shares[held], distance_shares, grid[best]), abs_u);
    const auto rp = spearman(proxy_shares[held], abs_u);
    const double d = (rb.defined && rp.defined) ? rb.rho - rp.rho : std::numeric_limits<double>::quiet_NaN();
    out.fold_delta_rho.push_back(d);
    if (std::isfinite(d)) {
      rho_sum += d;
      ++rho_count;
    }
  }
  out.lambda = mean(out.fold_lambda);
  double ss = 0.0;
  for (double l : out.fold_lambda) ss += (l - out.lambda) * (l - out.lambda);
  out.lambda_sd = std::sqrt(ss / static_cast<double>(t_count));
  out.delta_rho = rho_count ? rho_sum / static_cast<double>(rho_count) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace gradval
