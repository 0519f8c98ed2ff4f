#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gradval/config.hpp"
#include "gradval/metrics.hpp"

namespace gradval {

/// Agreement between per-timestamp attribution maps and utility maps
/// (one vector per timestamp, same length across timestamps).
struct FidelityStats {
  RankCorrelation aggregate;  // rho(time-mean attribution, time-mean |utility|)
  double topk_overlap = 0.0;
  BootstrapCI ci;             // timestamps resampled with replacement
  std::vector<double> per_timestamp_rho;
  std::optional<WilcoxonResult> wilcoxon;  // on the defined per-timestamp rho
  double median_rho = 0.0;
};

/// Utilities are compared by magnitude; pass signed values freely.
FidelityStats fidelity_stats(const std::vector<std::vector<double>>& attribution,
                             const std::vector<std::vector<double>>& utility, std::size_t k,
                             int n_resamples, double level, std::uint64_t seed);

struct ConvergenceResult {
  std::vector<double> per_timestamp_rho;  // rho(a_t, |u_t|), NaN when undefined
  double mean_rho = 0.0;                  // over defined timestamps
  double aggregate_rho = 0.0;             // rho(mean a, mean |u|)
  double recovery = 0.0;                  // mean_rho / aggregate_rho
  std::optional<int> convergence_n;       // empty: never converges
};

/// Smallest prefix N from which the one-sided Wilcoxon p on rho_1..rho_N' stays
/// below alpha for every N' >= N up to the full series. Needs >= 20 timestamps.
ConvergenceResult cycle_convergence(const std::vector<std::vector<double>>& attribution,
                                    const std::vector<std::vector<double>>& utility, double alpha = 0.05);

struct StageStatus {
  std::string name;
  bool ok = false;
  std::string error;
  double seconds = 0.0;
};

struct FileRecord {
  std::string path;  // relative to the output directory
  std::uintmax_t bytes = 0;
  std::string fnv64;
  std::string modified;  // UTC, ISO 8601
};

struct RunManifest {
  std::string config_hash;
  std::string version;
  std::vector<StageStatus> stages;
  std::vector<FileRecord> files;
  bool ok() const;
};

/// Stages in execution order: gen fidelity methods calibrate select pay game
/// detect converge report.
const std::vector<std::string>& stage_names();

/// Holds one output directory and the intermediate results shared between
/// stages. Results are computed on first use, so any stage can run alone;
/// generated data already on disk with a matching hash is reused.
class Workspace {
 public:
  Workspace(ExperimentConfig config, std::filesystem::path out_dir);
  ~Workspace();
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  const ExperimentConfig& config() const;
  const std::filesystem::path& out_dir() const;

  /// Runs one stage; failures are caught and reported in the status.
  StageStatus run_stage(const std::string& name);

  /// Runs the given stages (all when empty) and writes manifest.json last.
  RunManifest run(const std::vector<std::string>& stages = {});

 private:
  struct State;
  std::unique_ptr<State> state_;
};

RunManifest run_full(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                     const std::vector<std::string>& stages = {});

std::string version_string();

}  // namespace gradval
