#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradval/attribution.hpp"
#include "gradval/grid.hpp"
#include "gradval/metrics.hpp"
#include "gradval/model.hpp"

namespace gradval {

enum class AttackKind { inflate, spoof };
enum class AttackScope { single_target_var, single_other_var, all_surface };
enum class Placement { uniform, close, mid, mixed };

std::string to_string(AttackKind k);
std::string to_string(AttackScope s);
std::string to_string(Placement p);
AttackKind attack_kind_from_string(const std::string& s);
AttackScope attack_scope_from_string(const std::string& s);
Placement placement_from_string(const std::string& s);

inline constexpr double kCloseKm = 500.0;
inline constexpr double kMidKm = 1500.0;

struct AttackScenario {
  std::string id;
  AttackKind kind = AttackKind::inflate;
  std::vector<std::size_t> attackers;  // station indices
  double pct = 0.0;                    // inflate only
  AttackScope scope = AttackScope::all_surface;
  Placement placement = Placement::uniform;
  std::uint64_t seed = 0;
};

/// Variables touched by a scope. single_other_var takes the first grid
/// variable that is not the target variable.
std::vector<int> scope_variables(AttackScope scope, const GridSpec& grid, int target_variable);

/// inflate: x + (pct/100)(x - clim) at attacker cells, i.e. clim + (1 + pct/100)(x - clim);
/// spoof: clim at attacker cells. Only scoped variables change.
FieldTensor apply_attack(const FieldTensor& x, const AttackScenario& scenario, const Climatology& clim,
                         const StationGrid& stations, int target_variable);

/// Draws `count` distinct attackers. close: < 500 km from the target; mid:
/// 500-1500 km; mixed alternates close and mid draws.
std::vector<std::size_t> draw_attackers(const StationGrid& stations, const TargetSpec& target, Placement placement,
                                        std::size_t count, std::uint64_t seed);

struct ScenarioGrid {
  std::vector<int> attacker_counts{1, 3, 5};
  std::vector<double> pcts{10, 30, 50};
  int seeds = 10;
  AttackScope scope = AttackScope::all_surface;
  Placement placement = Placement::uniform;
  AttackKind kind = AttackKind::inflate;
};

std::vector<AttackScenario> make_scenarios(const ScenarioGrid& grid, const StationGrid& stations,
                                           const TargetSpec& target, std::uint64_t seed,
                                           const std::string& prefix);

/// Time-mean station scores over a period plus the per-timestamp values.
struct PeriodScores {
  std::vector<double> unsigned_mean;
  std::vector<double> signed_mean;
  std::vector<std::vector<double>> unsigned_per_timestamp;
  double mae = 0.0;
};

struct GamingContext {
  const ForecastModel* model = nullptr;
  const TruthModel* truth = nullptr;
  std::span<const FieldTensor> fields;
  const Climatology* clim = nullptr;
  const StationGrid* stations = nullptr;
  AttributionConfig attribution{Method::gti, BaselineKind::climatology, 8};
};

/// Scores on the clean fields, or on attacked fields when a scenario is given.
PeriodScores period_scores(const GamingContext& ctx, const AttackScenario* scenario = nullptr);

struct GamingOutcome {
  AttackScenario scenario;
  PeriodScores baseline;
  PeriodScores attack;
  double inflation_ratio = 1.0;   // mean over attackers of attack / baseline score
  double mae_change = 0.0;        // attack-period MAE minus baseline MAE
  double honest_share_change_pp = 0.0;
  double attacker_share_change_pp = 0.0;
};

GamingOutcome gaming_outcome(const AttackScenario& scenario, const PeriodScores& baseline, PeriodScores attack);

std::vector<GamingOutcome> run_gaming_experiment(const GamingContext& ctx, std::span<const AttackScenario> scenarios,
                                                 unsigned workers = 0);

inline constexpr double kScoreFloor = 1e-12;

/// log(max(attack, eps) / max(baseline, eps)) on period means.
std::vector<double> detector_d4(std::span<const double> baseline, std::span<const double> attack);
/// Per-timestamp variant: mean over t of the log ratio.
std::vector<double> detector_d4_per_timestamp(const std::vector<std::vector<double>>& baseline,
                                              const std::vector<std::vector<double>>& attack);
/// rank(baseline) - rank(attack), rank 1 = highest score, ties by lower index.
std::vector<double> detector_d3(std::span<const double> baseline, std::span<const double> attack);
/// |observed - predicted| / (predicted + eps), predicted by inverse-distance
/// weighting of the k nearest stations.
std::vector<double> detector_d5(std::span<const double> scores, const StationGrid& stations, std::size_t k = 8);

/// Each station's k nearest other stations with distances in km, nearest
/// first, ties by lower index. Lets D5 skip the neighbour search.
using NeighbourTable = std::vector<std::vector<std::pair<std::size_t, double>>>;
NeighbourTable nearest_neighbours(const StationGrid& stations, std::size_t k = 8);
std::vector<double> detector_d5(std::span<const double> scores, const NeighbourTable& neighbours);
/// |robust z| against the cross-station median and 1.4826 * MAD; empty when MAD = 0.
std::optional<std::vector<double>> detector_u1(std::span<const double> scores);

/// Per-station features for the supervised detector.
struct StationFeatures {
  std::vector<std::vector<double>> rows;  // d3, d4, d5, baseline share, distance km
  std::vector<bool> labels;
};

StationFeatures detection_features(const GamingOutcome& outcome, const StationGrid& stations,
                                   const TargetSpec& target, const NeighbourTable* neighbours = nullptr);

struct LogisticModel {
  std::vector<double> mean, scale, weights;
  double bias = 0.0;
  std::vector<double> predict(const std::vector<std::vector<double>>& rows) const;
};

/// Full-batch gradient descent on the standardised features, starting from zero.
LogisticModel fit_logistic(const std::vector<std::vector<double>>& rows, const std::vector<bool>& labels,
                           int iterations = 500, double learning_rate = 0.5, double l2 = 1e-3);

/// Leave-one-configuration-out: for each configuration, train on the others
/// and return the mean per-scenario PR-AUC on the held-out one.
std::vector<double> detector_d7_loco(const std::vector<std::vector<StationFeatures>>& configurations);

struct DetectionSummary {
  std::string detector;
  std::string configuration;
  std::string kind;
  std::size_t scenarios = 0;
  double pr_auc = 0.0;
  double prevalence = 0.0;
  double hit1 = 0.0;
  double hit5 = 0.0;
  double mean_attacker_score = 0.0;
};

struct DetectorScores {
  std::string detector;
  std::vector<double> scores;  // empty when the detector is undefined for the scenario
};

/// Every detector except D7 for one outcome.
std::vector<DetectorScores> run_detectors(const GamingOutcome& outcome, const StationGrid& stations,
                                          bool d4_per_timestamp = false, const NeighbourTable* neighbours = nullptr);

/// Aggregates one detector over scenarios of one kind; scenarios with
/// undefined scores are skipped.
DetectionSummary evaluate_detection(const std::string& detector, const std::string& configuration,
                                    std::span<const GamingOutcome> outcomes,
                                    std::span<const std::vector<double>> scores, std::size_t n_stations);

}  // namespace gradval
