#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gradval {

/// 1-based ascending ranks; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> v);

struct RankCorrelation {
  double rho = 0.0;
  std::size_t n = 0;
  double p_value = 1.0;  // two-sided, Student t approximation
  bool defined = true;   // false when either input is constant
};

RankCorrelation spearman(std::span<const double> a, std::span<const double> b);

/// Pearson correlation of two rank vectors (as from average_ranks); NaN when
/// either is constant.
double spearman_from_ranks(std::span<const double> ra, std::span<const double> rb);

/// Indices of the k largest values, ties broken by lower index.
std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k);
double topk_overlap(std::span<const double> a, std::span<const double> b, std::size_t k);

struct WilcoxonResult {
  double p_value = 1.0;  // one-sided, H1: positive shift
  double w_plus = 0.0;
  int n = 0;             // nonzero samples
  bool exact = false;
};

/// Zeros are dropped; needs at least 6 nonzero samples. Exact enumeration
/// for n <= 12, otherwise the tie-corrected normal approximation.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> samples);

/// Benjamini-Hochberg step-up rejections at level q.
std::vector<bool> bh_fdr(std::span<const double> p_values, double q = 0.05);

enum class BootstrapScheme { iid, block };

struct BootstrapCI {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  int resamples = 0;
  BootstrapScheme scheme = BootstrapScheme::iid;
};

using Statistic = std::function<double(std::span<const double>)>;

double mean(std::span<const double> v);

/// Percentile interval from resampling individual values with replacement.
BootstrapCI bootstrap_iid(std::span<const double> values, const Statistic& statistic,
                          int n_resamples = 10000, double level = 0.95, std::uint64_t seed = 0);

/// Resamples whole blocks (lists of value indices that partition the values).
/// Singleton blocks reproduce bootstrap_iid exactly for the same seed.
BootstrapCI bootstrap_block(std::span<const double> values,
                            const std::vector<std::vector<std::size_t>>& blocks,
                            const Statistic& statistic, int n_resamples = 10000, double level = 0.95,
                            std::uint64_t seed = 0);

/// Shared resampling engine. Each draw picks groups.size() groups with
/// replacement and passes the concatenated member indices to `evaluate`,
/// which fills one value per statistic. Non-finite values are skipped per
/// statistic. `points` are the full-sample estimates, one per statistic.
using MultiStatistic = std::function<void(std::span<const std::size_t>, std::vector<double>&)>;
std::vector<BootstrapCI> bootstrap_multi(const std::vector<std::vector<std::size_t>>& groups,
                                         const MultiStatistic& evaluate, std::span<const double> points,
                                         int n_resamples, double level, std::uint64_t seed,
                                         BootstrapScheme scheme = BootstrapScheme::iid);

/// Linear-interpolated quantile of sorted data.
double quantile_sorted(std::span<const double> sorted, double q);

/// Mean-absolute-difference Gini coefficient of a nonnegative vector.
double gini(std::span<const double> v);

/// Area under the precision-recall curve. Points are taken at each distinct
/// score threshold (descending); the curve starts at recall 0 with the first
/// point's precision and is integrated by the trapezoid rule over recall.
double pr_auc(std::span<const double> scores, const std::vector<bool>& labels);

/// True when any attacker index is among the top-k scores.
bool topk_hit(std::span<const double> scores, std::span<const std::size_t> attackers, std::size_t k);

struct DetectionCase {
  std::vector<double> scores;
  std::vector<std::size_t> attackers;
};

double topk_hit_rate(std::span<const DetectionCase> cases, std::size_t k);

}  // namespace gradval
