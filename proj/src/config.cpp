#include "gradval/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gradval/serialize.hpp"

namespace gradval {

using nlohmann::json;

ExperimentConfig default_config() { return ExperimentConfig{}; }

int effective_steps(const ExperimentConfig& c) { return c.fast ? c.fast_steps : c.ig_steps; }
int effective_resamples(const ExperimentConfig& c) { return c.fast ? c.fast_resamples : c.bootstrap_resamples; }

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (c.schema_version != kSchemaVersion) fail("unsupported schema_version " + std::to_string(c.schema_version));
  const GridSpec grid(c.grid);
  if (c.station_stride < 1 || c.station_stride > c.grid.n_lat || c.station_stride > c.grid.n_lon) {
    fail("station_stride out of range");
  }
  if (c.n_timestamps < 20) fail("n_timestamps must be >= 20");
  if (c.climatology_draws < 1) fail("climatology_draws must be >= 1");
  if (c.targets.empty() || c.target_variables.empty() || c.models.empty()) fail("targets, variables and models are required");
  std::set<std::string> names;
  for (const auto& t : c.targets) {
    if (!names.insert(t.name).second) fail("duplicate target " + t.name);
    make_target(grid, t.name, t.lat, t.lon, c.grid.variables.front());
  }
  for (const auto& v : c.target_variables) {
    if (!grid.has_variable(v)) fail("unknown target variable " + v);
  }
  std::set<std::string> model_names;
  for (const auto& m : c.models) {
    if (!model_names.insert(m.name).second) fail("duplicate model " + m.name);
    if (m.depth < 1 || m.depth > 6) fail("model depth must be in [1, 6]");
  }
  if (c.ig_steps < 1 || c.fast_steps < 1) fail("IG steps must be >= 1");
  for (int k : c.k_sensitivity) {
    if (k < 1) fail("k_sensitivity entries must be >= 1");
  }
  for (const auto& b : c.sensitivity_baselines) {
    if (b != "zero" && b != "persistence" && b != "climatology") fail("unknown baseline " + b);
  }
  if (c.patches.empty() || c.modes.empty()) fail("patches and modes are required");
  for (int p : c.patches) {
    if (p < 1 || p % 2 == 0) fail("patch sizes must be odd and >= 1");
  }
  for (const auto& m : c.modes) {
    if (m != "mean_replace" && m != "scale_bias" && m != "additive_noise") fail("unknown mode " + m);
  }
  if (!(c.magnitude > 0.0)) fail("magnitude must be > 0");
  if (c.budgets.empty()) fail("budgets are required");
  for (int k : c.budgets) {
    if (k < 1) fail("budgets must be >= 1");
  }
  if (c.uniform_seeds < 1) fail("uniform_seeds must be >= 1");
  if (!(c.payment_budget > 0.0)) fail("payment_budget must be > 0");
  if (c.bootstrap_resamples < 1000 || c.fast_resamples < 1000) fail("bootstrap resamples must be >= 1000");
  if (!(c.ci_level > 0.0 && c.ci_level < 1.0)) fail("ci_level must be in (0, 1)");
  if (c.shrinkage_objective != "mse" && c.shrinkage_objective != "captured_utility") fail("unknown shrinkage objective");
  if (c.subadditivity_set < 2) fail("subadditivity_set must be >= 2");
  if (c.unit_scale_timestamps < 1 || !(c.unit_scale_factor > 0.0)) fail("invalid unit-scale settings");
  const auto& g = c.gaming;
  if (g.timestamps < 1 || g.timestamps > c.n_timestamps) fail("gaming.timestamps out of range");
  if (g.station_stride < 1 || g.station_stride > c.grid.n_lat || g.station_stride > c.grid.n_lon) {
    fail("gaming.station_stride out of range");
  }
  if (g.method != "IG" && g.method != "GTI" && g.method != "VG") fail("unknown gaming method");
  for (const auto& m : g.models) {
    if (!model_names.count(m)) fail("gaming model " + m + " not defined");
  }
  for (const auto& e : g.configurations) {
    if (!names.count(e.target)) fail("gaming target " + e.target + " not defined");
    if (!grid.has_variable(e.variable)) fail("gaming variable " + e.variable + " unknown");
  }
  if (g.seeds < 1) fail("gaming.seeds must be >= 1");
  for (double p : g.pcts) {
    if (!(p > 0.0)) fail("inflation pct must be > 0");
  }
  if (g.scope != "single_target_var" && g.scope != "single_other_var" && g.scope != "all_surface") {
    fail("invalid scope " + g.scope);
  }
}

json to_json(const ExperimentConfig& c) {
  json targets = json::array();
  for (const auto& t : c.targets) targets.push_back({{"name", t.name}, {"lat", t.lat}, {"lon", t.lon}});
  json models = json::array();
  for (const auto& m : c.models) models.push_back({{"name", m.name}, {"depth", m.depth}});
  json gconf = json::array();
  for (const auto& e : c.gaming.configurations) {
    gconf.push_back({{"target", e.target}, {"variable", e.variable}, {"extended", e.extended}});
  }
  const auto& g = c.gaming;
  return json{
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"grid", grid_to_json(c.grid)},
      {"station_stride", c.station_stride},
      {"n_timestamps", c.n_timestamps},
      {"climatology_draws", c.climatology_draws},
      {"spectral_slope", c.spectral_slope},
      {"targets", targets},
      {"target_variables", c.target_variables},
      {"models", models},
      {"hidden", c.hidden},
      {"stencil_radius", c.stencil_radius},
      {"readout_length_km", c.readout_length_km},
      {"truth_mismatch", c.truth_mismatch},
      {"noise_fraction", c.noise_fraction},
      {"ig_steps", c.ig_steps},
      {"fast_steps", c.fast_steps},
      {"k_sensitivity", c.k_sensitivity},
      {"sensitivity_baselines", c.sensitivity_baselines},
      {"patches", c.patches},
      {"modes", c.modes},
      {"magnitude", c.magnitude},
      {"budgets", c.budgets},
      {"uniform_seeds", c.uniform_seeds},
      {"payment_budget", c.payment_budget},
      {"payment_top_k", c.payment_top_k},
      {"bootstrap_resamples", c.bootstrap_resamples},
      {"fast_resamples", c.fast_resamples},
      {"ci_level", c.ci_level},
      {"fdr_q", c.fdr_q},
      {"shrinkage_objective", c.shrinkage_objective},
      {"shrinkage_k", c.shrinkage_k},
      {"subadditivity_set", c.subadditivity_set},
      {"subadditivity_timestamps", c.subadditivity_timestamps},
      {"unit_scale_timestamps", c.unit_scale_timestamps},
      {"unit_scale_factor", c.unit_scale_factor},
      {"gaming",
       {{"timestamps", g.timestamps},
        {"station_stride", g.station_stride},
        {"method", g.method},
        {"models", g.models},
        {"configurations", gconf},
        {"attacker_counts", g.attacker_counts},
        {"pcts", g.pcts},
        {"seeds", g.seeds},
        {"scope", g.scope},
        {"extended_pcts", g.extended_pcts},
        {"placements", g.placements},
        {"placement_pct", g.placement_pct},
        {"spoof", g.spoof},
        {"d4_per_timestamp", g.d4_per_timestamp}}},
      {"fast", c.fast},
      {"workers", c.workers},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  c.schema_version = j.value("schema_version", 0);
  if (c.schema_version != kSchemaVersion) {
    throw std::invalid_argument("config: unsupported schema_version " + std::to_string(c.schema_version));
  }
  static const std::set<std::string> known{
      "schema_version", "seed", "grid", "station_stride", "n_timestamps", "climatology_draws", "spectral_slope",
      "targets", "target_variables", "models", "hidden", "stencil_radius", "readout_length_km", "truth_mismatch",
      "noise_fraction", "ig_steps", "fast_steps", "k_sensitivity", "sensitivity_baselines", "patches", "modes",
      "magnitude", "budgets", "uniform_seeds", "payment_budget", "payment_top_k", "bootstrap_resamples",
      "fast_resamples", "ci_level", "fdr_q", "shrinkage_objective", "shrinkage_k", "subadditivity_set",
      "subadditivity_timestamps", "unit_scale_timestamps", "unit_scale_factor", "gaming", "fast", "workers"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("config: unknown key " + key);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("grid")) c.grid = grid_from_json(j.at("grid"));
  c.station_stride = j.value("station_stride", c.station_stride);
  c.n_timestamps = j.value("n_timestamps", c.n_timestamps);
  c.climatology_draws = j.value("climatology_draws", c.climatology_draws);
  c.spectral_slope = j.value("spectral_slope", c.spectral_slope);
  if (j.contains("targets")) {
    c.targets.clear();
    for (const auto& t : j.at("targets")) {
      c.targets.push_back({t.at("name").get<std::string>(), t.at("lat").get<double>(), t.at("lon").get<double>()});
    }
  }
  c.target_variables = j.value("target_variables", c.target_variables);
  if (j.contains("models")) {
    c.models.clear();
    for (const auto& m : j.at("models")) c.models.push_back({m.at("name").get<std::string>(), m.at("depth").get<int>()});
  }
  c.hidden = j.value("hidden", c.hidden);
  c.stencil_radius = j.value("stencil_radius", c.stencil_radius);
  c.readout_length_km = j.value("readout_length_km", c.readout_length_km);
  c.truth_mismatch = j.value("truth_mismatch", c.truth_mismatch);
  c.noise_fraction = j.value("noise_fraction", c.noise_fraction);
  c.ig_steps = j.value("ig_steps", c.ig_steps);
  c.fast_steps = j.value("fast_steps", c.fast_steps);
  c.k_sensitivity = j.value("k_sensitivity", c.k_sensitivity);
  c.sensitivity_baselines = j.value("sensitivity_baselines", c.sensitivity_baselines);
  c.patches = j.value("patches", c.patches);
  c.modes = j.value("modes", c.modes);
  c.magnitude = j.value("magnitude", c.magnitude);
  c.budgets = j.value("budgets", c.budgets);
  c.uniform_seeds = j.value("uniform_seeds", c.uniform_seeds);
  c.payment_budget = j.value("payment_budget", c.payment_budget);
  c.payment_top_k = j.value("payment_top_k", c.payment_top_k);
  c.bootstrap_resamples = j.value("bootstrap_resamples", c.bootstrap_resamples);
  c.fast_resamples = j.value("fast_resamples", c.fast_resamples);
  c.ci_level = j.value("ci_level", c.ci_level);
  c.fdr_q = j.value("fdr_q", c.fdr_q);
  c.shrinkage_objective = j.value("shrinkage_objective", c.shrinkage_objective);
  c.shrinkage_k = j.value("shrinkage_k", c.shrinkage_k);
  c.subadditivity_set = j.value("subadditivity_set", c.subadditivity_set);
  c.subadditivity_timestamps = j.value("subadditivity_timestamps", c.subadditivity_timestamps);
  c.unit_scale_timestamps = j.value("unit_scale_timestamps", c.unit_scale_timestamps);
  c.unit_scale_factor = j.value("unit_scale_factor", c.unit_scale_factor);
  if (j.contains("gaming")) {
    const auto& g = j.at("gaming");
    static const std::set<std::string> gaming_keys{
        "timestamps", "station_stride", "method", "models", "configurations", "attacker_counts", "pcts", "seeds",
        "scope", "extended_pcts", "placements", "placement_pct", "spoof", "d4_per_timestamp"};
    for (const auto& [key, _] : g.items()) {
      if (!gaming_keys.count(key)) throw std::invalid_argument("config: unknown key gaming." + key);
    }
    auto& o = c.gaming;
    o.timestamps = g.value("timestamps", o.timestamps);
    o.station_stride = g.value("station_stride", o.station_stride);
    o.method = g.value("method", o.method);
    o.models = g.value("models", o.models);
    if (g.contains("configurations")) {
      o.configurations.clear();
      for (const auto& e : g.at("configurations")) {
        o.configurations.push_back(
            {e.at("target").get<std::string>(), e.at("variable").get<std::string>(), e.value("extended", false)});
      }
    }
    o.attacker_counts = g.value("attacker_counts", o.attacker_counts);
    o.pcts = g.value("pcts", o.pcts);
    o.seeds = g.value("seeds", o.seeds);
    o.scope = g.value("scope", o.scope);
    o.extended_pcts = g.value("extended_pcts", o.extended_pcts);
    o.placements = g.value("placements", o.placements);
    o.placement_pct = g.value("placement_pct", o.placement_pct);
    o.spoof = g.value("spoof", o.spoof);
    o.d4_per_timestamp = g.value("d4_per_timestamp", o.d4_per_timestamp);
  }
  c.fast = j.value("fast", c.fast);
  c.workers = j.value("workers", c.workers);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  ExperimentConfig c = config_from_json(json::parse(in));
  validate(c);
  return c;
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("workers");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace gradval
