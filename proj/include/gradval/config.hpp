#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradval/grid.hpp"

namespace gradval {

inline constexpr int kSchemaVersion = 1;

struct TargetPoint {
  std::string name;
  double lat = 0.0;
  double lon = 0.0;
};

struct ModelEntry {
  std::string name;
  int depth = 3;
};

struct GamingConfigEntry {
  std::string target;
  std::string variable;
  bool extended = false;  // adds the high-magnitude and placement strata
};

struct GamingSettings {
  int timestamps = 20;
  // Gaming uses its own, denser station lattice; scoring stations is cheap.
  int station_stride = 2;
  std::string method = "GTI";
  std::vector<std::string> models{"desk-d1", "desk-d3"};
  std::vector<GamingConfigEntry> configurations{
      {"Zurich", "t2m", true}, {"Zurich", "u10m", false}, {"London", "t2m", false}};
  std::vector<int> attacker_counts{1, 3, 5};
  std::vector<double> pcts{10, 30, 50};
  int seeds = 10;
  std::string scope = "all_surface";
  std::vector<double> extended_pcts{100, 200};
  std::vector<std::string> placements{"close", "mid", "mixed"};
  double placement_pct = 50;
  bool spoof = true;
  bool d4_per_timestamp = false;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 20240611;
  GridConfig grid;
  int station_stride = 4;
  int n_timestamps = 60;
  int climatology_draws = 1000;
  double spectral_slope = 1.5;

  std::vector<TargetPoint> targets{{"Zurich", 47.4, 8.6}, {"London", 51.5, -0.1}, {"Berlin", 52.5, 13.4}};
  std::vector<std::string> target_variables{"t2m", "u10m", "msl"};
  std::vector<ModelEntry> models{{"desk-d1", 1}, {"desk-d3", 3}};
  int hidden = 4;
  int stencil_radius = 2;
  double readout_length_km = 500.0;
  double truth_mismatch = 0.05;
  double noise_fraction = 0.02;  // of the prediction std over timestamps

  int ig_steps = 50;
  int fast_steps = 8;
  std::vector<int> k_sensitivity{1, 8, 50};
  std::vector<std::string> sensitivity_baselines{"zero", "persistence"};

  std::vector<int> patches{1, 3, 5};
  std::vector<std::string> modes{"mean_replace", "scale_bias", "additive_noise"};
  double magnitude = 0.10;

  std::vector<int> budgets{5, 10, 20, 50, 100};
  int uniform_seeds = 100;
  double payment_budget = 10000.0;
  int payment_top_k = 10;
  int bootstrap_resamples = 10000;
  int fast_resamples = 1000;
  double ci_level = 0.95;
  double fdr_q = 0.05;
  std::string shrinkage_objective = "mse";
  int shrinkage_k = 10;
  int subadditivity_set = 5;
  int subadditivity_timestamps = 10;
  int unit_scale_timestamps = 10;
  double unit_scale_factor = 1000.0;

  GamingSettings gaming;

  bool fast = false;
  unsigned workers = 0;  // 0 = hardware concurrency
};

ExperimentConfig default_config();

/// Steps and resample counts after applying the fast flag.
int effective_steps(const ExperimentConfig& c);
int effective_resamples(const ExperimentConfig& c);

/// Throws std::invalid_argument describing the first inconsistency.
void validate(const ExperimentConfig& c);

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& c);

/// FNV-1a over the canonical JSON dump; the worker count is excluded.
std::string config_hash(const ExperimentConfig& c);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace gradval
