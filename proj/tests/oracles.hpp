#pragma once

// Deliberately naive reference implementations used to cross-check the
// library. Nothing here calls into gradval's metric code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <vector>

namespace oracle {

// Rank = 1 + #smaller + (#equal - 1) / 2, by counting.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : v) {
      if (x < v[i]) ++less;
      if (x == v[i]) ++equal;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

// Top-k by repeated arg-max (lowest index on ties).
inline std::set<std::size_t> topk(const std::vector<double>& v, std::size_t k) {
  std::set<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = v.size();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (out.count(i)) continue;
      if (best == v.size() || v[i] > v[best]) best = i;
    }
    out.insert(best);
  }
  return out;
}

inline double topk_overlap(const std::vector<double>& a, const std::vector<double>& b, std::size_t k) {
  const auto sa = topk(a, k), sb = topk(b, k);
  std::size_t common = 0;
  for (auto i : sa) common += sb.count(i);
  return static_cast<double>(common) / static_cast<double>(k);
}

// Mean absolute difference over all ordered pairs / (2 * mean).
inline double gini(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double sum = 0, diff = 0;
  for (double x : v) sum += x;
  if (sum == 0) return 0.0;
  for (double x : v) {
    for (double y : v) diff += std::abs(x - y);
  }
  return diff / (2.0 * n * sum);
}

// Precision/recall at every distinct threshold, curve anchored at recall 0
// with the first point's precision, trapezoids over recall.
inline double pr_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double positives = 0;
  for (bool l : labels) positives += l;
  std::vector<double> precision, recall;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] ? tp : fp) += 1;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / positives);
  }
  double area = 0, prev_r = 0, prev_p = precision.front();
  for (std::size_t i = 0; i < precision.size(); ++i) {
    area += (recall[i] - prev_r) * (precision[i] + prev_p) / 2.0;
    prev_r = recall[i];
    prev_p = precision[i];
  }
  return area;
}

// Largest k with p_(k) <= k q / m; reject every p <= p_(k).
inline std::vector<bool> bh(const std::vector<double>& p, double q) {
  const std::size_t m = p.size();
  std::vector<double> sorted(p);
  std::sort(sorted.begin(), sorted.end());
  double cutoff = -1;
  for (std::size_t k = 1; k <= m; ++k) {
    if (sorted[k - 1] <= static_cast<double>(k) * q / static_cast<double>(m)) cutoff = sorted[k - 1];
  }
  std::vector<bool> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = p[i] <= cutoff;
  return out;
}

// One-sided exact p-value P(W+ >= observed) by enumerating all 2^n signs.
inline double wilcoxon_exact(const std::vector<double>& samples) {
  std::vector<double> nz;
  for (double x : samples) {
    if (x != 0) nz.push_back(x);
  }
  std::vector<double> mags;
  for (double x : nz) mags.push_back(std::abs(x));
  const auto r = ranks(mags);
  double observed = 0;
  for (std::size_t i = 0; i < nz.size(); ++i) {
    if (nz[i] > 0) observed += r[i];
  }
  const std::size_t n = nz.size();
  std::uint64_t count = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1) w += r[i];
    }
    if (w >= observed - 1e-9) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(1ULL << n);
}

// Great-circle distance by the spherical law of cosines.
inline double great_circle_km(double lat1, double lon1, double lat2, double lon2) {
  const double d = std::numbers::pi / 180.0;
  const double c = std::sin(lat1 * d) * std::sin(lat2 * d) +
                   std::cos(lat1 * d) * std::cos(lat2 * d) * std::cos((lon2 - lon1) * d);
  return 6371.0 * std::acos(std::clamp(c, -1.0, 1.0));
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, int distinct = 0) {
  std::vector<double> v(n);
  if (distinct > 0) {
    std::uniform_int_distribution<int> pick(0, distinct - 1);
    for (double& x : v) x = pick(rng);
  } else {
    std::normal_distribution<double> normal;
    for (double& x : v) x = normal(rng);
  }
  return v;
}

}  // namespace oracle
