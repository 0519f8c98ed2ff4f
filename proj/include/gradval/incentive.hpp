#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradval/grid.hpp"
#include "gradval/metrics.hpp"

namespace gradval {

enum class Strategy { ig, gti, vg, distance, uniform, oracle };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

/// Inverse haversine distance (1/km) from each station cell to the target cell.
/// A station on the target cell itself gets twice the largest other score.
std::vector<double> distance_scores(const StationGrid& stations, const TargetSpec& target);

/// C(S) = sum_{g in S} |U_g| / sum_g |U_g|; NaN when the total is zero.
double captured_utility(std::span<const std::size_t> selected, std::span<const double> utilities);

std::vector<std::size_t> select_uniform(std::size_t n, std::size_t k, std::uint64_t seed);

struct SelectionInputs {
  std::vector<double> scores;     // proxy scores (ig/gti/vg) or distance scores
  std::vector<double> utilities;  // signed or absolute U_g; required by every strategy
  std::uint64_t seed = 0;         // uniform only
};

struct SelectionResult {
  Strategy strategy = Strategy::oracle;
  std::size_t k = 0;
  std::vector<std::size_t> selected;
  double captured = 0.0;
  double efficiency = 0.0;   // C / (K/N), the uniform expectation
  double optimality = 0.0;   // C / C_oracle
};

SelectionResult select(Strategy strategy, const SelectionInputs& inputs, std::size_t k);

struct PaymentAllocation {
  double budget = 0.0;
  std::vector<double> shares;
  std::vector<double> amounts;
  std::string provenance;
};

/// p(g) = |A(g)| / sum |A| * B.
PaymentAllocation payment(std::span<const double> scores, double budget, std::string provenance = {});

/// |U_g| / sum |U|.
std::vector<double> true_shares(std::span<const double> utilities);

struct Overpayment {
  double total = 0.0;         // sum max(0, proxy - true)
  double underpayment = 0.0;  // sum max(0, true - proxy)
  std::vector<double> per_station;
};

Overpayment overpayment(std::span<const double> p_proxy, std::span<const double> p_true);

/// Equal-count bins of station indices ordered by ascending proxy score (ties
/// by index); the first N mod 10 bins take one extra station.
std::vector<std::vector<std::size_t>> decile_bins(std::span<const double> proxy, int bins = 10);

struct CalibrationReport {
  std::vector<double> decile_mean_utility;
  std::vector<std::size_t> decile_count;
  double gini_proxy = 0.0;
  double gini_utility = 0.0;
  double gini_ratio = 0.0;
  double overpayment = 0.0;  // NaN when the proxy has no mass
  std::vector<double> proxy_shares;
  std::vector<double> true_shares;
  RankCorrelation share_spearman;
};

CalibrationReport decile_calibration(std::span<const double> proxy, std::span<const double> utilities);

struct StabilityResult {
  std::vector<double> shares;      // time-averaged point shares
  std::vector<BootstrapCI> ci;     // per station
  std::vector<std::size_t> top;    // top-k stations by point share
  double ci_to_share = 0.0;        // mean (upper - lower) / point over top
};

/// Resamples timestamps with replacement and recomputes time-averaged shares.
StabilityResult payment_stability(const std::vector<std::vector<double>>& per_timestamp_scores,
                                  int n_resamples = 10000, std::size_t top_k = 10,
                                  std::uint64_t seed = 0, double level = 0.95);

enum class ShrinkageObjective { mse, captured_utility };

struct ShrinkageFit {
  double lambda = 0.0;                 // mean over folds
  double lambda_sd = 0.0;
  std::vector<double> fold_lambda;
  std::vector<double> fold_delta_rho;  // rho(blend) - rho(proxy) on the held-out timestamp
  double delta_rho = 0.0;              // mean over folds with defined correlations
  ShrinkageObjective objective = ShrinkageObjective::mse;
};

/// Leave-one-timestamp-out fit of lambda in {0, 0.05, ..., 1} for
/// lambda * proxy + (1 - lambda) * distance. Each fold picks lambda on the
/// training timestamps (ties go to the larger lambda) and scores the blend on
/// the held-out one.
ShrinkageFit shrinkage_fit(const std::vector<std::vector<double>>& proxy_shares,
                           std::span<const double> distance_shares,
                           const std::vector<std::vector<double>>& utilities,
                           ShrinkageObjective objective = ShrinkageObjective::mse, std::size_t k = 10);

}  // namespace gradval
