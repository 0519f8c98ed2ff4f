#include "gradval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "gradval/rng.hpp"

namespace gradval {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman_from_ranks(std::span<const double> ra, std::span<const double> rb) {
  if (ra.size() != rb.size()) throw std::invalid_argument("spearman: length mismatch");
  const double n = static_cast<double>(ra.size());
  const double m = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - m) * (rb[i] - m);
    saa += (ra[i] - m) * (ra[i] - m);
    sbb += (rb[i] - m) * (rb[i] - m);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

RankCorrelation spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 3) throw std::invalid_argument("spearman needs at least 3 values");
  RankCorrelation out;
  out.n = a.size();
  out.rho = spearman_from_ranks(average_ranks(a), average_ranks(b));
  if (std::isnan(out.rho)) {
    out.defined = false;
    out.p_value = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  if (std::abs(out.rho) >= 1.0) {
    out.p_value = 0.0;
    return out;
  }
  const double df = static_cast<double>(a.size()) - 2.0;
  const double t = out.rho * std::sqrt(df / (1.0 - out.rho * out.rho));
  boost::math::students_t dist(df);
  out.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
  return out;
}

std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k > v.size()) throw std::invalid_argument("k larger than vector");
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  order.resize(k);
  return order;
}

double topk_overlap(std::span<const double> a, std::span<const double> b, std::size_t k) {
  if (a.size() != b.size()) throw std::invalid_argument("topk_overlap: length mismatch");
  if (k == 0 || k > a.size()) throw std::invalid_argument("topk_overlap: invalid k");
  auto ta = topk_indices(a, k);
  auto tb = topk_indices(b, k);
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  std::vector<std::size_t> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> samples) {
  std::vector<double> nz;
  for (double x : samples) {
    if (!std::isfinite(x)) throw std::invalid_argument("wilcoxon: non-finite sample");
    if (x != 0.0) nz.push_back(x);
  }
  if (nz.size() < 6) throw std::invalid_argument("wilcoxon needs at least 6 nonzero samples");
  std::vector<double> mag(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mag[i] = std::abs(nz[i]);
  const auto ranks = average_ranks(mag);
  WilcoxonResult out;
  out.n = static_cast<int>(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) {
    if (nz[i] > 0) out.w_plus += ranks[i];
  }
  if (out.n <= 12) {
    out.exact = true;
    // Ranks are multiples of 0.5, so doubled ranks are exact integers.
    std::vector<int> r2(ranks.size());
    int total = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
      total += r2[i];
    }
    // Distribution of 2*W+ under random signs by subset-sum counting.
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    for (int r : r2) {
      for (int s = total; s >= r; --s) count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - r)];
    }
    const int obs = static_cast<int>(std::lround(2.0 * out.w_plus));
    double tail = 0.0;
    for (int s = obs; s <= total; ++s) tail += count[static_cast<std::size_t>(s)];
    out.p_value = tail / std::ldexp(1.0, out.n);
    return out;
  }
  const double n = out.n;
  const double mu = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48.0;
    i = j;
  }
  const double z = (out.w_plus - mu) / std::sqrt(var);
  out.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
  return out;
}

std::vector<bool> bh_fdr(std::span<const double> p_values, double q) {
  const std::size_t m = p_values.size();
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bh_fdr: p-value outside [0, 1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
  std::size_t cutoff = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (p_values[order[i]] <= static_cast<double>(i + 1) / static_cast<double>(m) * q) cutoff = i + 1;
  }
  std::vector<bool> reject(m, false);
  for (std::size_t i = 0; i < cutoff; ++i) reject[order[i]] = true;
  return reject;
}

double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<BootstrapCI> bootstrap_multi(const std::vector<std::vector<std::size_t>>& groups,
                                         const MultiStatistic& evaluate, std::span<const double> points,
                                         int n_resamples, double level, std::uint64_t seed, BootstrapScheme scheme) {
  if (n_resamples < 1000) throw std::invalid_argument("bootstrap needs at least 1000 resamples");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap level must be in (0, 1)");
  if (groups.empty()) throw std::invalid_argument("bootstrap needs at least one group");
  const std::size_t m = points.size();
  std::vector<std::vector<double>> stats(m);
  for (auto& s : stats) s.reserve(static_cast<std::size_t>(n_resamples));
  std::vector<std::size_t> sample;
  std::vector<double> values(m);
  for (int r = 0; r < n_resamples; ++r) {
    Rng rng = make_rng(seed, {0xb007, static_cast<std::uint64_t>(r)});
    std::uniform_int_distribution<std::size_t> pick(0, groups.size() - 1);
    sample.clear();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& grp = groups[pick(rng)];
      sample.insert(sample.end(), grp.begin(), grp.end());
    }
    std::fill(values.begin(), values.end(), std::numeric_limits<double>::quiet_NaN());
    evaluate(sample, values);
    for (std::size_t i = 0; i < m; ++i) {
      if (std::isfinite(values[i])) stats[i].push_back(values[i]);
    }
  }
  const double alpha = 1.0 - level;
  std::vector<BootstrapCI> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    BootstrapCI& ci = out[i];
    ci.level = level;
    ci.resamples = n_resamples;
    ci.scheme = scheme;
    ci.point = points[i];
    auto& s = stats[i];
    if (s.empty()) {
      ci.lower = ci.upper = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    std::sort(s.begin(), s.end());
    ci.lower = quantile_sorted(s, alpha / 2.0);
    ci.upper = quantile_sorted(s, 1.0 - alpha / 2.0);
    if (std::isfinite(ci.point)) {
      ci.lower = std::min(ci.lower, ci.point);
      ci.upper = std::max(ci.upper, ci.point);
    }
  }
  return out;
}

namespace {

BootstrapCI resample_groups(std::span<const double> values, const std::vector<std::vector<std::size_t>>& groups,
                            const Statistic& statistic, int n_resamples, double level, std::uint64_t seed,
                            BootstrapScheme scheme) {
  const double point = statistic(values);
  std::vector<double> sample;
  sample.reserve(values.size());
  auto eval = [&](std::span<const std::size_t> idx, std::vector<double>& out) {
    sample.clear();
    for (std::size_t i : idx) sample.push_back(values[i]);
    out[0] = statistic(sample);
  };
  return bootstrap_multi(groups, eval, std::span<const double>(&point, 1), n_resamples, level, seed, scheme)[0];
}

}  // namespace

BootstrapCI bootstrap_iid(std::span<const double> values, const Statistic& statistic, int n_resamples,
                          double level, std::uint64_t seed) {
  if (values.size() < 3) throw std::invalid_argument("bootstrap needs at least 3 samples");
  std::vector<std::vector<std::size_t>> groups(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) groups[i] = {i};
  return resample_groups(values, groups, statistic, n_resamples, level, seed, BootstrapScheme::iid);
}

BootstrapCI bootstrap_block(std::span<const double> values, const std::vector<std::vector<std::size_t>>& blocks,
                            const Statistic& statistic, int n_resamples, double level, std::uint64_t seed) {
  if (blocks.empty()) throw std::invalid_argument("block bootstrap needs blocks");
  std::vector<int> seen(values.size(), 0);
  for (const auto& b : blocks) {
    if (b.empty()) throw std::invalid_argument("empty bootstrap block");
    for (std::size_t i : b) {
      if (i >= values.size()) throw std::invalid_argument("block index out of range");
      ++seen[i];
    }
  }
  if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
    throw std::invalid_argument("blocks must partition the values");
  }
  return resample_groups(values, blocks, statistic, n_resamples, level, seed, BootstrapScheme::block);
}

double gini(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("gini of empty vector");
  double total = 0.0;
  for (double x : v) {
    if (!(x >= 0.0)) throw std::invalid_argument("gini needs nonnegative values");
    total += x;
  }
  if (!(total > 0.0)) throw std::invalid_argument("gini needs a positive sum");
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  // sum_i (2i - n - 1) x_(i), folded into pairs so equal values cancel exactly.
  long double num = 0.0L;
  for (std::size_t i = n / 2; i < n; ++i) {
    const std::size_t mirror = n - 1 - i;
    if (mirror >= i) continue;
    num += static_cast<long double>(2 * i + 1 - n) * (static_cast<long double>(s[i]) - s[mirror]);
  }
  return static_cast<double>(num / (static_cast<long double>(n) * total));
}

double pr_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("pr_auc: length mismatch");
  const std::size_t positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0 || positives == labels.size()) throw std::invalid_argument("pr_auc: degenerate labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] ? ++tp : ++fp;
      ++j;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    i = j;
  }
  double area = recall[0] * precision[0];
  for (std::size_t i = 1; i < recall.size(); ++i) {
    area += (recall[i] - recall[i - 1]) * 0.5 * (precision[i] + precision[i - 1]);
  }
  return area;
}

bool topk_hit(std::span<const double> scores, std::span<const std::size_t> attackers, std::size_t k) {
  const auto top = topk_indices(scores, k);
  for (std::size_t a : attackers) {
    if (std::find(top.begin(), top.end(), a) != top.end()) return true;
  }
  return false;
}

double topk_hit_rate(std::span<const DetectionCase> cases, std::size_t k) {
  if (cases.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hits = 0;
  for (const auto& c : cases) hits += topk_hit(c.scores, c.attackers, k) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

}  // namespace gradval
