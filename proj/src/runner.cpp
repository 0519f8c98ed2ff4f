#include "gradval/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <type_traits>

#include <json.hpp>

#include "gradval/ablation.hpp"
#include "gradval/attribution.hpp"
#include "gradval/field_io.hpp"
#include "gradval/gaming.hpp"
#include "gradval/incentive.hpp"
#include "gradval/model.hpp"
#include "gradval/parallel.hpp"
#include "gradval/rng.hpp"
#include "gradval/synth.hpp"

namespace gradval {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kModelStream = 0x30de1;
constexpr std::uint64_t kTruthStream = 0x7a07;
constexpr std::uint64_t kNoiseStream = 0xadd0;
constexpr std::uint64_t kBootStream = 0xb0075;
constexpr std::uint64_t kBlockStream = 0xb10c;
constexpr std::uint64_t kSelectStream = 0x5e1ec7;
constexpr std::uint64_t kPayStream = 0x9a4;
constexpr std::uint64_t kGameStream = 0x6a3e;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

class Table {
 public:
  explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

  template <class... Ts>
  void add(const Ts&... cells) {
    std::vector<std::string> row;
    (row.push_back(cell(cells)), ...);
    if (row.size() != header_.size()) throw std::logic_error("table row width mismatch");
    rows_.push_back(std::move(row));
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) out += ',';
        out += r[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  template <class T>
  static std::string cell(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "1" : "0";
    } else if constexpr (std::is_integral_v<T>) {
      return std::to_string(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      return num(static_cast<double>(v));
    } else {
      return std::string(v);
    }
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

using Series = std::vector<std::vector<double>>;  // [timestamp][item]

std::vector<double> time_mean(const Series& s, std::span<const std::size_t> idx) {
  std::vector<double> out(s.front().size(), 0.0);
  for (std::size_t t : idx) {
    const auto& v = s[t];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  for (double& x : out) x /= static_cast<double>(idx.size());
  return out;
}

std::vector<double> time_mean(const Series& s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  return time_mean(s, idx);
}

Series abs_series(const Series& s) {
  Series out = s;
  for (auto& v : out) {
    for (double& x : v) x = std::abs(x);
  }
  return out;
}

struct FidelityPair {
  std::size_t attribution = 0;
  std::size_t utility = 0;
  std::size_t k = 1;
};

// All statistics share the same timestamp draws; each series mean is ranked
// once per draw.
std::vector<FidelityStats> fidelity_batch(const std::vector<const Series*>& series,
                                          const std::vector<FidelityPair>& pairs, int n_resamples, double level,
                                          std::uint64_t seed) {
  const std::size_t T = series.front()->size();
  for (const Series* s : series) {
    if (s->size() != T || T < 3) throw std::invalid_argument("fidelity: series need equal length >= 3");
  }
  std::vector<std::vector<double>> means;
  for (const Series* s : series) means.push_back(time_mean(*s));

  std::vector<FidelityStats> out(pairs.size());
  std::vector<double> points(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& pr = pairs[p];
    auto& st = out[p];
    const auto& a = means[pr.attribution];
    const auto& u = means[pr.utility];
    st.aggregate = spearman(a, u);
    st.topk_overlap = topk_overlap(a, u, std::min(pr.k, a.size()));
    points[p] = st.aggregate.rho;
    std::vector<double> defined;
    for (std::size_t t = 0; t < T; ++t) {
      const auto r = spearman((*series[pr.attribution])[t], (*series[pr.utility])[t]);
      st.per_timestamp_rho.push_back(r.defined ? r.rho : kNaN);
      if (r.defined) defined.push_back(r.rho);
    }
    if (!defined.empty()) {
      std::vector<double> sorted = defined;
      std::sort(sorted.begin(), sorted.end());
      st.median_rho = quantile_sorted(sorted, 0.5);
      try {
        st.wilcoxon = wilcoxon_signed_rank(defined);
      } catch (const std::invalid_argument&) {
      }
    } else {
      st.median_rho = kNaN;
    }
  }

  std::vector<std::vector<std::size_t>> groups(T);
  for (std::size_t t = 0; t < T; ++t) groups[t] = {t};
  std::vector<std::vector<double>> ranks(series.size());
  auto evaluate = [&](std::span<const std::size_t> idx, std::vector<double>& values) {
    for (std::size_t s = 0; s < series.size(); ++s) ranks[s] = average_ranks(time_mean(*series[s], idx));
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      values[p] = spearman_from_ranks(ranks[pairs[p].attribution], ranks[pairs[p].utility]);
    }
  };
  const auto cis = bootstrap_multi(groups, evaluate, points, n_resamples, level, seed);
  for (std::size_t p = 0; p < pairs.size(); ++p) out[p].ci = cis[p];
  return out;
}

std::size_t clip_budget(int k, std::size_t n) {
  if (static_cast<std::size_t>(k) > n) {
    std::clog << "[gradval] budget K=" << k << " clipped to N=" << n << "\n";
    return n;
  }
  return static_cast<std::size_t>(k);
}

std::vector<std::size_t> clipped_budgets(const std::vector<int>& budgets, std::size_t n) {
  std::vector<std::size_t> out;
  for (int k : budgets) {
    const std::size_t c = clip_budget(k, n);
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : kNaN;
}

std::string utc_time(fs::file_time_type t) {
  const auto sys = std::chrono::time_point_cast<std::chrono::seconds>(
      t - fs::file_time_type::clock::now() + std::chrono::system_clock::now());
  const std::time_t tt = std::chrono::system_clock::to_time_t(sys);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

FidelityStats fidelity_stats(const std::vector<std::vector<double>>& attribution,
                             const std::vector<std::vector<double>>& utility, std::size_t k, int n_resamples,
                             double level, std::uint64_t seed) {
  if (attribution.size() != utility.size()) throw std::invalid_argument("fidelity: timestamp count mismatch");
  const Series u = abs_series(utility);
  return fidelity_batch({&attribution, &u}, {{0, 1, k}}, n_resamples, level, seed).front();
}

ConvergenceResult cycle_convergence(const std::vector<std::vector<double>>& attribution,
                                    const std::vector<std::vector<double>>& utility, double alpha) {
  if (attribution.size() != utility.size()) throw std::invalid_argument("convergence: timestamp count mismatch");
  if (attribution.size() < 20) throw std::invalid_argument("convergence needs at least 20 timestamps");
  const Series u = abs_series(utility);
  ConvergenceResult out;
  std::vector<double> defined;
  for (std::size_t t = 0; t < attribution.size(); ++t) {
    const auto r = spearman(attribution[t], u[t]);
    out.per_timestamp_rho.push_back(r.defined ? r.rho : kNaN);
    if (r.defined) defined.push_back(r.rho);
  }
  out.mean_rho = defined.empty() ? kNaN : mean(defined);
  const auto agg = spearman(time_mean(attribution), time_mean(u));
  out.aggregate_rho = agg.defined ? agg.rho : kNaN;
  out.recovery = out.mean_rho / out.aggregate_rho;

  // Walk backwards: N is the start of the final run of significant prefixes.
  std::optional<int> n;
  std::vector<double> prefix;
  std::vector<bool> significant(attribution.size(), false);
  for (std::size_t t = 0; t < attribution.size(); ++t) {
    if (std::isfinite(out.per_timestamp_rho[t])) prefix.push_back(out.per_timestamp_rho[t]);
    try {
      significant[t] = wilcoxon_signed_rank(prefix).p_value < alpha;
    } catch (const std::invalid_argument&) {
      significant[t] = false;
    }
  }
  for (std::size_t t = attribution.size(); t-- > 0;) {
    if (!significant[t]) break;
    n = static_cast<int>(t + 1);
  }
  out.convergence_n = n;
  return out;
}

bool RunManifest::ok() const {
  return std::all_of(stages.begin(), stages.end(), [](const StageStatus& s) { return s.ok; });
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen",    "fidelity", "methods", "calibrate", "select",
                                              "pay",    "game",     "detect",  "converge",  "report"};
  return names;
}

std::string version_string() { return "0.1.0"; }

// ---------------------------------------------------------------------------

struct SeriesDef {
  std::string name;
  Method method = Method::ig;
  BaselineKind baseline = BaselineKind::climatology;
  int steps = 0;
};

struct SpecInfo {
  PerturbationSpec spec;
  std::string name;
};

struct StepResult {
  double prediction = 0.0;
  double verification = 0.0;
  std::vector<std::vector<double>> var_imp;      // per series; empty when skipped
  std::vector<std::vector<double>> spatial_imp;  // per series
  std::vector<int> evals;                        // per series
  std::vector<double> global_u;
  std::vector<std::vector<double>> spatial_u;    // per spec, signed
};

struct UnitScaleResult {
  std::string variable;
  double factor = 1.0;
  std::size_t timestamps = 0;
  double ig_max_rel = 0.0;
  double gti_max_rel = 0.0;
  double prediction_max_abs = 0.0;
  bool ig_ranking_same = true;
  bool gti_ranking_same = true;
  bool vg_ranking_same = true;
  double vg_ranking_rho = 1.0;
  bool selections_same = true;
};

struct FidelityRow {
  std::string scope;  // global or spatial
  std::string spec;   // "-" for global
  std::string method;
  FidelityStats stats;
  std::optional<BootstrapCI> block;
  bool significant = false;
};

struct ConfigRun {
  std::size_t model = 0;
  std::size_t target = 0;
  int variable = 0;  // grid variable index
  std::string name;
  TargetSpec target_spec;
  std::optional<ForecastModel> forecast;
  std::optional<TruthModel> truth;
  std::vector<StepResult> steps;
  std::string error;
  std::vector<FidelityRow> fidelity;
  UnitScaleResult unit;
};

struct GamingRun {
  std::string name;
  TargetSpec target;
  std::optional<ForecastModel> forecast;
  std::optional<TruthModel> truth;
  std::vector<AttackScenario> scenarios;
  std::vector<GamingOutcome> outcomes;
};

struct Workspace::State {
  ExperimentConfig config;
  fs::path out;
  std::string hash;

  GridPtr grid;
  std::optional<StationGrid> stations;
  std::optional<StationGrid> gaming_stations;
  std::vector<FieldTensor> fields;
  std::optional<Climatology> clim;
  std::vector<double> field_std;
  bool data_ready = false;

  std::vector<SeriesDef> series;
  std::vector<SpecInfo> specs;
  std::size_t reference_spec = 0;
  std::vector<ConfigRun> configs;
  bool configs_ready = false;
  bool fidelity_ready = false;
  bool unit_ready = false;
  std::vector<GamingRun> gaming;
  bool gaming_ready = false;

  std::set<std::string> files;
  std::vector<std::string> report_lines;

  unsigned workers() const { return config.workers ? config.workers : default_workers(); }

  void write_text(const std::string& rel, const std::string& text) {
    const fs::path p = out / rel;
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + p.string());
    files.insert(rel);
  }
  void write_table(const std::string& rel, const Table& t) { write_text(rel, t.str()); }
  void track(const std::string& rel) { files.insert(rel); }

  std::size_t series_index(const std::string& name) const {
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (series[i].name == name) return i;
    }
    throw std::logic_error("unknown series " + name);
  }

  // --- data -----------------------------------------------------------------

  std::string data_hash() const {
    json j;
    j["seed"] = config.seed;
    j["grid"] = to_json(config)["grid"];
    j["n_timestamps"] = config.n_timestamps;
    j["climatology_draws"] = config.climatology_draws;
    j["spectral_slope"] = config.spectral_slope;
    return hex64(fnv1a64(j.dump()));
  }

  void ensure_data() {
    if (data_ready) return;
    grid = make_grid(config.grid);
    stations.emplace(make_station_grid(grid, config.station_stride));
    gaming_stations.emplace(make_station_grid(grid, config.gaming.station_stride));
    const fs::path meta = out / "data" / "meta.json";
    bool loaded = false;
    if (fs::exists(meta)) {
      try {
        std::ifstream f(meta);
        const json j = json::parse(f);
        if (j.at("data_hash").get<std::string>() == data_hash()) {
          auto fs_ = read_fields(out / "data" / "fields.gvf");
          auto cl = read_fields(out / "data" / "climatology.gvf");
          if (fs_.size() == static_cast<std::size_t>(config.n_timestamps) && cl.size() == 1 &&
              fs_.front().grid() == *grid) {
            for (auto& f2 : fs_) fields.emplace_back(grid, std::vector<double>(f2.values().begin(), f2.values().end()),
                                                      f2.timestamp());
            clim.emplace(FieldTensor(grid, std::vector<double>(cl[0].values().begin(), cl[0].values().end())));
            loaded = true;
          }
        }
      } catch (const std::exception& e) {
        std::clog << "[gradval] ignoring stored data: " << e.what() << "\n";
        fields.clear();
      }
    }
    if (!loaded) {
      SynthOptions opt;
      opt.spectral_slope = config.spectral_slope;
      opt.climatology_draws = config.climatology_draws;
      auto synth = synth_fields(config.seed, grid, config.n_timestamps, opt);
      fields = std::move(synth.fields);
      clim.emplace(std::move(synth.climatology));
    }
    field_std = per_variable_std(fields);
    data_ready = true;
  }

  // --- model matrix ---------------------------------------------------------

  ForecastModel build_model(std::size_t m, std::size_t t, int v) const {
    const auto& me = config.models[m];
    const auto& tp = config.targets[t];
    TargetSpec target = make_target(*grid, tp.name, tp.lat, tp.lon, grid->variable(v));
    ModelConfig base;
    base.hidden = config.hidden;
    base.stencil_radius = config.stencil_radius;
    base.readout_length_km = config.readout_length_km;
    const std::uint64_t s = derive_seed(config.seed, {kModelStream, m, t, static_cast<std::uint64_t>(v)});
    return make_desk_model(s, grid, std::move(target), me.depth, base);
  }

  TruthModel build_truth(const ForecastModel& model, std::size_t m, std::size_t t, int v,
                         std::span<const FieldTensor> period) const {
    std::vector<double> preds;
    for (const auto& x : period) preds.push_back(model.forward(x));
    const double mu = mean(preds);
    double var = 0.0;
    for (double p : preds) var += (p - mu) * (p - mu);
    const double sd = std::sqrt(var / static_cast<double>(preds.size()));
    const std::uint64_t s = derive_seed(config.seed, {kTruthStream, m, t, static_cast<std::uint64_t>(v)});
    return make_truth(model, s, config.noise_fraction * sd, config.truth_mismatch);
  }

  void setup_matrix() {
    if (!series.empty()) return;
    const int steps = effective_steps(config);
    series.push_back({"IG", Method::ig, BaselineKind::climatology, steps});
    series.push_back({"GTI", Method::gti, BaselineKind::climatology, 0});
    series.push_back({"VG", Method::vg, BaselineKind::climatology, 0});
    for (int k : config.k_sensitivity) {
      if (config.fast && k > steps) continue;
      series.push_back({"IG@" + std::to_string(k), Method::ig, BaselineKind::climatology, k});
    }
    for (const auto& b : config.sensitivity_baselines) {
      series.push_back({"IG-" + b, Method::ig, baseline_from_string(b), config.fast_steps});
    }
    for (int p : config.patches) {
      for (const auto& m : config.modes) {
        SpecInfo si;
        si.spec.mode = perturb_mode_from_string(m);
        si.spec.patch = p;
        si.spec.magnitude = config.magnitude;
        si.spec.seed = derive_seed(config.seed, {kNoiseStream});
        si.name = "p" + std::to_string(p) + "-" + m;
        specs.push_back(std::move(si));
      }
    }
    reference_spec = 0;
  }

  void ensure_configs() {
    if (configs_ready) return;
    ensure_data();
    setup_matrix();
    for (auto& s : specs) s.spec.noise_std = field_std;
    for (std::size_t m = 0; m < config.models.size(); ++m) {
      for (std::size_t t = 0; t < config.targets.size(); ++t) {
        for (const auto& v : config.target_variables) {
          ConfigRun c;
          c.model = m;
          c.target = t;
          c.variable = grid->variable_index(v);
          c.name = config.models[m].name + "/" + config.targets[t].name + "/" + v;
          configs.push_back(std::move(c));
        }
      }
    }
    parallel_for(
        configs.size(),
        [&](std::size_t i) {
          auto& c = configs[i];
          try {
            c.forecast.emplace(build_model(c.model, c.target, c.variable));
            c.target_spec = c.forecast->target();
            c.truth.emplace(build_truth(*c.forecast, c.model, c.target, c.variable, fields));
            c.steps.resize(fields.size());
          } catch (const std::exception& e) {
            c.error = e.what();
          }
        },
        workers());

    const std::size_t T = fields.size();
    std::mutex err_mutex;
    parallel_for(
        configs.size() * T,
        [&](std::size_t task) {
          auto& c = configs[task / T];
          if (!c.forecast) return;
          try {
            compute_step(c, task % T);
          } catch (const std::exception& e) {
            std::lock_guard lock(err_mutex);
            if (c.error.empty()) c.error = e.what();
          }
        },
        workers());
    configs_ready = true;
  }

  void compute_step(ConfigRun& c, std::size_t t) {
    const ForecastModel& model = *c.forecast;
    const FieldTensor& x = fields[t];
    StepResult& r = c.steps[t];
    const auto outcome = evaluate(model, *c.truth, x);
    r.prediction = outcome.prediction;
    r.verification = outcome.verification;

    const FieldTensor clim_base = make_baseline(BaselineKind::climatology, fields, t, *clim);
    std::vector<int> ig_steps;
    for (const auto& s : series) {
      if (s.method == Method::ig && s.baseline == BaselineKind::climatology &&
          std::find(ig_steps.begin(), ig_steps.end(), s.steps) == ig_steps.end()) {
        ig_steps.push_back(s.steps);
      }
    }
    const auto ig_maps = integrated_gradients_multi(model, x, clim_base, ig_steps);

    r.var_imp.resize(series.size());
    r.spatial_imp.resize(series.size());
    r.evals.assign(series.size(), 0);
    for (std::size_t i = 0; i < series.size(); ++i) {
      const auto& s = series[i];
      std::optional<AttributionMap> map;
      if (s.method == Method::ig && s.baseline == BaselineKind::climatology) {
        const auto pos = std::find(ig_steps.begin(), ig_steps.end(), s.steps) - ig_steps.begin();
        map = ig_maps[static_cast<std::size_t>(pos)];
      } else if (s.method == Method::gti) {
        map = gradient_times_input(model, x, clim_base);
      } else if (s.method == Method::vg) {
        map = vanilla_gradient(model, x);
      } else {
        if (s.baseline == BaselineKind::persistence && t == 0) continue;
        map = integrated_gradients(model, x, make_baseline(s.baseline, fields, t, *clim), s.steps);
      }
      r.var_imp[i] = variable_importance(*map);
      r.spatial_imp[i] = spatial_importance(*map, *stations);
      r.evals[i] = map->provenance.gradient_evals;
    }

    r.global_u = global_ablation(model, x, r.verification, *clim).utility;
    for (const auto& si : specs) {
      r.spatial_u.push_back(spatial_utility(model, x, r.verification, *stations, si.spec, *clim).signed_utility);
    }
  }

  std::vector<std::size_t> ok_configs() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < configs.size(); ++i) {
      if (configs[i].error.empty()) out.push_back(i);
    }
    return out;
  }

  void raise_config_errors(const std::string& stage) const {
    std::string msg;
    for (const auto& c : configs) {
      if (!c.error.empty()) msg += (msg.empty() ? "" : "; ") + c.name + ": " + c.error;
    }
    if (!msg.empty()) throw std::runtime_error(stage + ": " + msg);
  }

  // Per-timestamp series restricted to timestamps where `s` is defined.
  Series attr_series(const ConfigRun& c, std::size_t s, bool spatial, std::vector<std::size_t>* kept = nullptr) const {
    Series out;
    for (std::size_t t = 0; t < c.steps.size(); ++t) {
      const auto& v = spatial ? c.steps[t].spatial_imp[s] : c.steps[t].var_imp[s];
      if (v.empty()) continue;
      out.push_back(v);
      if (kept) kept->push_back(t);
    }
    return out;
  }

  Series global_util(const ConfigRun& c, const std::vector<std::size_t>* only = nullptr) const {
    Series out;
    for (std::size_t t = 0; t < c.steps.size(); ++t) {
      if (only && std::find(only->begin(), only->end(), t) == only->end()) continue;
      out.push_back(c.steps[t].global_u);
    }
    return abs_series(out);
  }

  Series spatial_util(const ConfigRun& c, std::size_t spec, const std::vector<std::size_t>* only = nullptr,
                      bool absolute = true) const {
    Series out;
    for (std::size_t t = 0; t < c.steps.size(); ++t) {
      if (only && std::find(only->begin(), only->end(), t) == only->end()) continue;
      out.push_back(c.steps[t].spatial_u[spec]);
    }
    return absolute ? abs_series(out) : out;
  }

  // --- fidelity -------------------------------------------------------------

  void ensure_fidelity() {
    if (fidelity_ready) return;
    ensure_configs();
    const auto ok = ok_configs();
    const std::size_t kv = std::min<std::size_t>(3, static_cast<std::size_t>(grid->n_vars()));
    const std::size_t ks = std::min<std::size_t>(static_cast<std::size_t>(config.payment_top_k), stations->size());
    const int resamples = effective_resamples(config);
    parallel_for(
        ok.size(),
        [&](std::size_t oi) {
          const std::size_t ci = ok[oi];
          auto& c = configs[ci];
          std::vector<Series> data;
          data.reserve(4 + specs.size() + 3);
          for (std::size_t m = 0; m < 3; ++m) data.push_back(attr_series(c, m, false));
          data.push_back(global_util(c));
          for (std::size_t m = 0; m < 3; ++m) data.push_back(attr_series(c, m, true));
          for (std::size_t s = 0; s < specs.size(); ++s) data.push_back(spatial_util(c, s));
          std::vector<const Series*> ptrs;
          for (const auto& d : data) ptrs.push_back(&d);
          std::vector<FidelityPair> pairs;
          for (std::size_t m = 0; m < 3; ++m) pairs.push_back({m, 3, kv});
          for (std::size_t s = 0; s < specs.size(); ++s) {
            for (std::size_t m = 0; m < 3; ++m) pairs.push_back({4 + m, 7 + s, ks});
          }
          const auto stats = fidelity_batch(ptrs, pairs, resamples, config.ci_level,
                                            derive_seed(config.seed, {kBootStream, ci}));

          // Station-block intervals for IG.
          const auto blocks = stations->blocks(2, 2);
          const auto ig_mean = time_mean(data[4]);
          std::vector<std::vector<double>> util_means;
          for (std::size_t s = 0; s < specs.size(); ++s) util_means.push_back(time_mean(data[7 + s]));
          std::vector<double> block_points;
          for (std::size_t s = 0; s < specs.size(); ++s) block_points.push_back(stats[3 + s * 3].aggregate.rho);
          std::vector<double> a, u;
          auto eval = [&](std::span<const std::size_t> idx, std::vector<double>& values) {
            a.clear();
            for (std::size_t i : idx) a.push_back(ig_mean[i]);
            const auto ra = average_ranks(a);
            for (std::size_t s = 0; s < specs.size(); ++s) {
              u.clear();
              for (std::size_t i : idx) u.push_back(util_means[s][i]);
              values[s] = spearman_from_ranks(ra, average_ranks(u));
            }
          };
          const auto block_ci = bootstrap_multi(blocks, eval, block_points, resamples, config.ci_level,
                                                derive_seed(config.seed, {kBlockStream, ci}), BootstrapScheme::block);

          std::vector<FidelityRow> rows;
          const char* names[3] = {"IG", "GTI", "VG"};
          for (std::size_t m = 0; m < 3; ++m) rows.push_back({"global", "-", names[m], stats[m], std::nullopt, false});
          for (std::size_t s = 0; s < specs.size(); ++s) {
            for (std::size_t m = 0; m < 3; ++m) {
              FidelityRow row{"spatial", specs[s].name, names[m], stats[3 + s * 3 + m], std::nullopt, false};
              if (m == 0) row.block = block_ci[s];
              rows.push_back(std::move(row));
            }
          }
          for (const std::string scope : {"global", "spatial"}) {
            std::vector<double> p;
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < rows.size(); ++i) {
              if (rows[i].scope != scope) continue;
              const double pv = rows[i].stats.aggregate.p_value;
              p.push_back(std::isfinite(pv) ? pv : 1.0);
              idx.push_back(i);
            }
            const auto rej = bh_fdr(p, config.fdr_q);
            for (std::size_t i = 0; i < idx.size(); ++i) rows[idx[i]].significant = rej[i];
          }
          c.fidelity = std::move(rows);
        },
        workers());
    fidelity_ready = true;
  }

  // --- unit-scale experiment --------------------------------------------------

  void ensure_unit_scale() {
    if (unit_ready) return;
    ensure_configs();
    const auto ok = ok_configs();
    const std::size_t Tu = std::min<std::size_t>(static_cast<std::size_t>(config.unit_scale_timestamps), fields.size());
    const auto budgets = clipped_budgets(config.budgets, stations->size());
    const double f = config.unit_scale_factor;
    parallel_for(
        ok.size(),
        [&](std::size_t oi) {
          auto& c = configs[ok[oi]];
          const ForecastModel& model = *c.forecast;
          std::vector<std::vector<double>> vg_var;
          for (std::size_t t = 0; t < Tu; ++t) vg_var.push_back(c.steps[t].var_imp[2]);
          // Plant the change in the non-target variable VG ranks highest; the
          // target variable would also change the output units.
          const auto vg_mean = time_average(vg_var);
          int v = -1;
          for (int i = 0; i < grid->n_vars(); ++i) {
            if (i == c.variable) continue;
            if (v < 0 || vg_mean[static_cast<std::size_t>(i)] > vg_mean[static_cast<std::size_t>(v)]) v = i;
          }
          UnitScaleResult u;
          u.variable = grid->variable(v);
          u.factor = f;
          u.timestamps = Tu;
          const ForecastModel scaled = rescale_units(model, v, f);
          const FieldTensor clim_scaled = rescale_variable(clim->mean(), v, f);
          const int k = config.fast_steps;
          std::vector<std::vector<double>> var[2][3], spatial[2][3];
          auto max_rel = [](const FieldTensor& a, const FieldTensor& b) {
            double scale = 0.0, diff = 0.0;
            for (std::size_t n = 0; n < a.size(); ++n) {
              scale = std::max(scale, std::abs(a.values()[n]));
              diff = std::max(diff, std::abs(a.values()[n] - b.values()[n]));
            }
            return scale > 0.0 ? diff / scale : diff;
          };
          for (std::size_t t = 0; t < Tu; ++t) {
            const FieldTensor& x = fields[t];
            const FieldTensor xs = rescale_variable(x, v, f);
            const FieldTensor& base = clim->mean();
            const AttributionMap maps[2][3] = {
                {integrated_gradients(model, x, base, k), gradient_times_input(model, x, base),
                 vanilla_gradient(model, x)},
                {integrated_gradients(scaled, xs, clim_scaled, k), gradient_times_input(scaled, xs, clim_scaled),
                 vanilla_gradient(scaled, xs)}};
            u.ig_max_rel = std::max(u.ig_max_rel, max_rel(maps[0][0].scores, maps[1][0].scores));
            u.gti_max_rel = std::max(u.gti_max_rel, max_rel(maps[0][1].scores, maps[1][1].scores));
            u.prediction_max_abs = std::max(u.prediction_max_abs, std::abs(model.forward(x) - scaled.forward(xs)));
            for (int s = 0; s < 2; ++s) {
              for (int m = 0; m < 3; ++m) {
                var[s][m].push_back(variable_importance(maps[s][m]));
                spatial[s][m].push_back(spatial_importance(maps[s][m], *stations));
              }
            }
          }
          bool same[3];
          for (int m = 0; m < 3; ++m) {
            const auto r0 = average_ranks(time_average(var[0][m]));
            const auto r1 = average_ranks(time_average(var[1][m]));
            same[m] = r0 == r1;
            if (m == 2) u.vg_ranking_rho = spearman_from_ranks(r0, r1);
          }
          u.ig_ranking_same = same[0];
          u.gti_ranking_same = same[1];
          u.vg_ranking_same = same[2];
          for (int m = 0; m < 2; ++m) {
            const auto s0 = time_average(spatial[0][m]);
            const auto s1 = time_average(spatial[1][m]);
            for (std::size_t kk : budgets) {
              auto a = topk_indices(s0, kk);
              auto b = topk_indices(s1, kk);
              std::sort(a.begin(), a.end());
              std::sort(b.begin(), b.end());
              if (a != b) u.selections_same = false;
            }
          }
          c.unit = u;
        },
        workers());
    unit_ready = true;
  }

  // --- gaming -----------------------------------------------------------------

  void ensure_gaming() {
    if (gaming_ready) return;
    ensure_data();
    const auto& g = config.gaming;
    const std::size_t T = static_cast<std::size_t>(g.timestamps);
    std::span<const FieldTensor> period(fields.data(), T);

    for (const auto& mname : g.models) {
      const std::size_t m = static_cast<std::size_t>(
          std::find_if(config.models.begin(), config.models.end(), [&](const ModelEntry& e) { return e.name == mname; }) -
          config.models.begin());
      for (const auto& entry : g.configurations) {
        const std::size_t t = static_cast<std::size_t>(
            std::find_if(config.targets.begin(), config.targets.end(),
                         [&](const TargetPoint& p) { return p.name == entry.target; }) -
            config.targets.begin());
        const int v = grid->variable_index(entry.variable);
        GamingRun run;
        run.name = mname + "/" + entry.target + "/" + entry.variable;
        run.forecast.emplace(build_model(m, t, v));
        run.target = run.forecast->target();
        run.truth.emplace(build_truth(*run.forecast, m, t, v, fields));
        const std::uint64_t seed = derive_seed(config.seed, {kGameStream, m, t, static_cast<std::uint64_t>(v)});
        const AttackScope scope = attack_scope_from_string(g.scope);
        auto add = [&](ScenarioGrid sg) {
          sg.scope = scope;
          auto sc = make_scenarios(sg, *gaming_stations, run.target, seed, run.name);
          run.scenarios.insert(run.scenarios.end(), sc.begin(), sc.end());
        };
        add({g.attacker_counts, {0.0}, 1, scope, Placement::uniform, AttackKind::inflate});
        add({g.attacker_counts, g.pcts, g.seeds, scope, Placement::uniform, AttackKind::inflate});
        if (entry.extended) {
          add({g.attacker_counts, g.extended_pcts, g.seeds, scope, Placement::uniform, AttackKind::inflate});
          for (const auto& p : g.placements) {
            add({g.attacker_counts, {g.placement_pct}, g.seeds, scope, placement_from_string(p), AttackKind::inflate});
          }
        }
        if (g.spoof) add({g.attacker_counts, {0.0}, g.seeds, scope, Placement::uniform, AttackKind::spoof});

        GamingContext ctx;
        ctx.model = &*run.forecast;
        ctx.truth = &*run.truth;
        ctx.fields = period;
        ctx.clim = &*clim;
        ctx.stations = &*gaming_stations;
        ctx.attribution = {method_from_string(g.method), BaselineKind::climatology, config.fast_steps};
        run.outcomes = run_gaming_experiment(ctx, run.scenarios, workers());
        gaming.push_back(std::move(run));
      }
    }
    gaming_ready = true;
  }

  // --- stages -----------------------------------------------------------------

  void stage_gen() {
    ensure_data();
    fs::create_directories(out / "data");
    write_fields(out / "data" / "fields.gvf", fields);
    track("data/fields.gvf");
    const std::vector<FieldTensor> cl{clim->mean()};
    write_fields(out / "data" / "climatology.gvf", cl);
    track("data/climatology.gvf");
    write_stations_csv(out / "data" / "stations.csv", *stations);
    track("data/stations.csv");
    write_stations_csv(out / "data" / "gaming_stations.csv", *gaming_stations);
    track("data/gaming_stations.csv");
    json meta;
    meta["data_hash"] = data_hash();
    meta["n_timestamps"] = fields.size();
    meta["stations"] = stations->size();
    meta["field_std"] = field_std;
    write_text("data/meta.json", meta.dump(2) + "\n");
    setup_matrix();
    for (std::size_t m = 0; m < config.models.size(); ++m) {
      for (std::size_t t = 0; t < config.targets.size(); ++t) {
        for (const auto& v : config.target_variables) {
          const auto model = build_model(m, t, grid->variable_index(v));
          const std::string rel = "models/" + config.models[m].name + "-" + config.targets[t].name + "-" + v + ".json";
          fs::create_directories((out / rel).parent_path());
          save_model(out / rel, model);
          track(rel);
        }
      }
    }
  }

  void stage_fidelity() {
    ensure_fidelity();
    Table global({"config", "method", "n_items", "timestamps", "rho", "p_value", "topk_overlap", "ci_lower",
                  "ci_upper", "median_rho_t", "wilcoxon_p", "wilcoxon_n", "bh_significant"});
    Table spatial({"config", "spec", "method", "n_items", "timestamps", "rho", "p_value", "topk_overlap", "ci_lower",
                   "ci_upper", "block_ci_lower", "block_ci_upper", "median_rho_t", "wilcoxon_p", "wilcoxon_n",
                   "bh_significant"});
    for (std::size_t ci : ok_configs()) {
      const auto& c = configs[ci];
      for (const auto& r : c.fidelity) {
        const auto& s = r.stats;
        const double wp = s.wilcoxon ? s.wilcoxon->p_value : kNaN;
        const int wn = s.wilcoxon ? s.wilcoxon->n : 0;
        if (r.scope == "global") {
          global.add(c.name, r.method, s.aggregate.n, s.per_timestamp_rho.size(), s.aggregate.rho, s.aggregate.p_value,
                     s.topk_overlap, s.ci.lower, s.ci.upper, s.median_rho, wp, wn, r.significant);
        } else {
          spatial.add(c.name, r.spec, r.method, s.aggregate.n, s.per_timestamp_rho.size(), s.aggregate.rho,
                      s.aggregate.p_value, s.topk_overlap, s.ci.lower, s.ci.upper, r.block ? r.block->lower : kNaN,
                      r.block ? r.block->upper : kNaN, s.median_rho, wp, wn, r.significant);
        }
      }
    }
    write_table("fidelity_global.csv", global);
    write_table("fidelity_spatial.csv", spatial);

    // Raw per-station utilities of the first configuration for plotting.
    const auto ok = ok_configs();
    if (!ok.empty()) {
      const auto& c = configs[ok.front()];
      Table u({"config", "spec", "timestamp", "station_id", "lat", "lon", "utility"});
      for (std::size_t t = 0; t < c.steps.size(); ++t) {
        const auto& v = c.steps[t].spatial_u[reference_spec];
        for (std::size_t g = 0; g < v.size(); ++g) {
          u.add(c.name, specs[reference_spec].name, t, (*stations)[g].id, stations->lat(g), stations->lon(g), v[g]);
        }
      }
      write_table("utility_example.csv", u);
    }
    raise_config_errors("fidelity");
  }

  void stage_methods() {
    ensure_fidelity();
    ensure_unit_scale();
    const auto ok = ok_configs();
    const char* names[3] = {"IG", "GTI", "VG"};

    Table summary({"scope", "method", "configs", "mean_rho", "mean_ci_lower", "mean_ci_upper", "mean_topk_overlap",
                   "mean_median_rho_t", "significant_positive"});
    Table wins({"scope", "method_a", "method_b", "configs", "win_rate"});
    for (const std::string scope : {"global", "spatial"}) {
      std::map<std::string, std::vector<const FidelityRow*>> by;
      std::map<std::pair<std::string, std::string>, std::map<std::string, double>> cell;  // (config, spec) -> method -> rho
      for (std::size_t ci : ok) {
        for (const auto& r : configs[ci].fidelity) {
          if (r.scope != scope) continue;
          by[r.method].push_back(&r);
          cell[{configs[ci].name, r.spec}][r.method] = r.stats.aggregate.rho;
        }
      }
      for (const char* m : names) {
        std::vector<double> rho, lo, hi, tk, med;
        int sig = 0;
        for (const FidelityRow* r : by[m]) {
          rho.push_back(r->stats.aggregate.rho);
          lo.push_back(r->stats.ci.lower);
          hi.push_back(r->stats.ci.upper);
          tk.push_back(r->stats.topk_overlap);
          med.push_back(r->stats.median_rho);
          if (r->significant && r->stats.aggregate.rho > 0) ++sig;
        }
        summary.add(scope, m, by[m].size(), mean_of(rho), mean_of(lo), mean_of(hi), mean_of(tk), mean_of(med), sig);
      }
      for (const char* a : names) {
        for (const char* b : names) {
          if (std::string(a) == b) continue;
          double w = 0.0;
          std::size_t n = 0;
          for (const auto& [key, rho] : cell) {
            const double ra = rho.at(a), rb = rho.at(b);
            if (!std::isfinite(ra) || !std::isfinite(rb)) continue;
            w += ra > rb ? 1.0 : (ra == rb ? 0.5 : 0.0);
            ++n;
          }
          wins.add(scope, a, b, n, n ? w / static_cast<double>(n) : kNaN);
        }
      }
    }
    write_table("methods_summary.csv", summary);
    write_table("method_wins.csv", wins);

    // IG step-count sensitivity.
    Table ks({"config", "scope", "k_a", "k_b", "ranking_rho", "fidelity_rho_a", "fidelity_rho_b"});
    std::vector<std::size_t> kidx;
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (series[i].name.rfind("IG@", 0) == 0) kidx.push_back(i);
    }
    for (std::size_t ci : ok) {
      const auto& c = configs[ci];
      for (const bool sp : {false, true}) {
        const Series util = sp ? spatial_util(c, reference_spec) : global_util(c);
        const auto um = time_mean(util);
        for (std::size_t a = 0; a < kidx.size(); ++a) {
          for (std::size_t b = a + 1; b < kidx.size(); ++b) {
            const auto ma = time_mean(attr_series(c, kidx[a], sp));
            const auto mb = time_mean(attr_series(c, kidx[b], sp));
            ks.add(c.name, sp ? "spatial" : "global", series[kidx[a]].steps, series[kidx[b]].steps,
                   spearman(ma, mb).rho, spearman(ma, um).rho, spearman(mb, um).rho);
          }
        }
      }
    }
    write_table("k_sensitivity.csv", ks);

    Table bs({"config", "baseline", "steps", "timestamps", "global_rho", "spatial_rho", "global_ranking_rho_vs_climatology",
              "spatial_ranking_rho_vs_climatology"});
    for (std::size_t ci : ok) {
      const auto& c = configs[ci];
      for (std::size_t i = 0; i < series.size(); ++i) {
        if (series[i].method != Method::ig || series[i].name.rfind("IG-", 0) != 0) continue;
        std::vector<std::size_t> kept;
        const Series gv = attr_series(c, i, false, &kept);
        const Series sv = attr_series(c, i, true);
        Series ref_g, ref_s;
        for (std::size_t t : kept) {
          ref_g.push_back(c.steps[t].var_imp[0]);
          ref_s.push_back(c.steps[t].spatial_imp[0]);
        }
        const auto gm = time_mean(gv), sm = time_mean(sv);
        bs.add(c.name, to_string(series[i].baseline), series[i].steps, kept.size(),
               spearman(gm, time_mean(global_util(c, &kept))).rho,
               spearman(sm, time_mean(spatial_util(c, reference_spec, &kept))).rho, spearman(gm, time_mean(ref_g)).rho,
               spearman(sm, time_mean(ref_s)).rho);
      }
    }
    write_table("baseline_sensitivity.csv", bs);

    Table us({"config", "planted_variable", "factor", "timestamps", "ig_max_rel_change", "gti_max_rel_change",
              "prediction_max_abs_change", "ig_ranking_unchanged", "gti_ranking_unchanged", "vg_ranking_unchanged",
              "vg_ranking_rho", "selections_unchanged"});
    for (std::size_t ci : ok) {
      const auto& c = configs[ci];
      const auto& u = c.unit;
      us.add(c.name, u.variable, u.factor, u.timestamps, u.ig_max_rel, u.gti_max_rel, u.prediction_max_abs,
             u.ig_ranking_same, u.gti_ranking_same, u.vg_ranking_same, u.vg_ranking_rho, u.selections_same);
    }
    write_table("unit_scale.csv", us);

    Table ev({"config", "method", "steps", "gradient_evals_per_timestamp", "expected"});
    for (std::size_t ci : ok) {
      const auto& c = configs[ci];
      for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const int expected = s.method == Method::ig ? s.steps + 1 : 1;
        int evals = c.steps.back().evals[i];
        for (const auto& st : c.steps) {
          if (st.evals[i] != 0 && st.evals[i] != evals) evals = -1;
        }
        ev.add(c.name, s.name, s.steps, evals, expected);
      }
    }
    write_table("gradient_evals.csv", ev);
    raise_config_errors("methods");
  }

  void stage_calibrate() {
    ensure_configs();
    Table cal({"config", "spec", "method", "gini_proxy", "gini_utility", "gini_ratio", "overpayment", "share_rho"});
    Table dec({"config", "spec", "method", "decile", "stations", "mean_utility"});
    const char* names[3] = {"IG", "GTI", "VG"};
    for (std::size_t ci : ok_configs()) {
      const auto& c = configs[ci];
      for (std::size_t s = 0; s < specs.size(); ++s) {
        const auto um = time_mean(spatial_util(c, s));
        for (std::size_t m = 0; m <= 3; ++m) {
          const std::string method = m < 3 ? names[m] : "ORACLE";
          const auto proxy = m < 3 ? time_mean(attr_series(c, m, true)) : um;
          const auto rep = decile_calibration(proxy, um);
          cal.add(c.name, specs[s].name, method, rep.gini_proxy, rep.gini_utility, rep.gini_ratio, rep.overpayment,
                  rep.share_spearman.rho);
          for (std::size_t d = 0; d < rep.decile_mean_utility.size(); ++d) {
            dec.add(c.name, specs[s].name, method, d + 1, rep.decile_count[d], rep.decile_mean_utility[d]);
          }
        }
      }
    }
    write_table("calibration.csv", cal);
    write_table("deciles.csv", dec);
    raise_config_errors("calibrate");
  }

  void stage_select() {
    ensure_configs();
    const std::size_t N = stations->size();
    const auto budgets = clipped_budgets(config.budgets, N);
    const Strategy strategies[] = {Strategy::ig, Strategy::gti, Strategy::vg, Strategy::distance, Strategy::uniform,
                                   Strategy::oracle};
    Table sel({"config", "spec", "strategy", "k", "captured", "efficiency", "optimality", "uniform_se"});
    struct Agg {
      std::vector<double> eff, opt;
      std::size_t dominated = 0, total = 0;
    };
    std::map<std::pair<std::string, std::size_t>, Agg> agg;
    std::size_t dominance_ok = 0, dominance_total = 0;
    for (std::size_t ci : ok_configs()) {
      const auto& c = configs[ci];
      const auto dist = distance_scores(*stations, c.target_spec);
      for (std::size_t s = 0; s < specs.size(); ++s) {
        const auto um = time_mean(spatial_util(c, s));
        for (std::size_t k : budgets) {
          std::map<Strategy, double> captured;
          for (Strategy st : strategies) {
            SelectionInputs in;
            in.utilities = um;
            double cap = 0.0, eff = 0.0, opt = 0.0, se = kNaN;
            if (st == Strategy::uniform) {
              std::vector<double> caps, effs, opts;
              for (int r = 0; r < config.uniform_seeds; ++r) {
                in.seed = derive_seed(config.seed, {kSelectStream, ci, s, k, static_cast<std::uint64_t>(r)});
                const auto res = select(st, in, k);
                caps.push_back(res.captured);
                effs.push_back(res.efficiency);
                opts.push_back(res.optimality);
              }
              cap = mean(caps);
              eff = mean(effs);
              opt = mean(opts);
              double var = 0.0;
              for (double x : caps) var += (x - cap) * (x - cap);
              se = caps.size() > 1 ? std::sqrt(var / static_cast<double>(caps.size() - 1) / static_cast<double>(caps.size()))
                                   : kNaN;
            } else {
              if (st == Strategy::distance) in.scores = dist;
              if (st == Strategy::ig || st == Strategy::gti || st == Strategy::vg) {
                in.scores = time_mean(attr_series(c, static_cast<std::size_t>(st), true));
              }
              const auto res = select(st, in, k);
              cap = res.captured;
              eff = res.efficiency;
              opt = res.optimality;
            }
            captured[st] = cap;
            sel.add(c.name, specs[s].name, to_string(st), k, cap, eff, opt, se);
            auto& a = agg[{to_string(st), k}];
            a.eff.push_back(eff);
            a.opt.push_back(opt);
          }
          bool dom = true;
          for (const auto& [st, cap] : captured) {
            auto& a = agg[{to_string(st), k}];
            ++a.total;
            if (captured[Strategy::oracle] >= cap - 1e-12) {
              ++a.dominated;
            } else {
              dom = false;
            }
          }
          ++dominance_total;
          if (dom) ++dominance_ok;
        }
      }
    }
    write_table("selection.csv", sel);
    Table sum({"strategy", "k", "configs", "mean_efficiency", "mean_optimality", "oracle_dominance"});
    for (Strategy st : strategies) {
      for (std::size_t k : budgets) {
        const auto& a = agg[{to_string(st), k}];
        sum.add(to_string(st), k, a.eff.size(), mean_of(a.eff), mean_of(a.opt),
                a.total ? static_cast<double>(a.dominated) / static_cast<double>(a.total) : kNaN);
      }
    }
    write_table("selection_summary.csv", sum);
    oracle_dominance = dominance_total ? static_cast<double>(dominance_ok) / static_cast<double>(dominance_total) : kNaN;

    // Joint versus individual ablation for the stations nearest the target.
    Table sub({"config", "patch", "timestamp", "stations", "joint", "individual_sum", "ratio"});
    const std::size_t set_size = std::min<std::size_t>(static_cast<std::size_t>(config.subadditivity_set), N);
    const std::size_t Ts = std::min<std::size_t>(static_cast<std::size_t>(config.subadditivity_timestamps), fields.size());
    const auto ok = ok_configs();
    std::vector<std::vector<std::vector<JointAblation>>> joint(ok.size());
    parallel_for(
        ok.size(),
        [&](std::size_t oi) {
          const auto& c = configs[ok[oi]];
          std::vector<std::size_t> order(N);
          std::iota(order.begin(), order.end(), 0);
          std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return stations->distance_km(a, c.target_spec.lat, c.target_spec.lon) <
                   stations->distance_km(b, c.target_spec.lat, c.target_spec.lon);
          });
          order.resize(set_size);
          std::sort(order.begin(), order.end());
          for (int p : config.patches) {
            PerturbationSpec spec;
            spec.mode = PerturbMode::mean_replace;
            spec.patch = p;
            spec.magnitude = config.magnitude;
            std::vector<JointAblation> per_t;
            for (std::size_t t = 0; t < Ts; ++t) {
              per_t.push_back(joint_ablation(*c.forecast, fields[t], c.steps[t].verification, *stations, order, spec, *clim));
            }
            joint[oi].push_back(std::move(per_t));
          }
        },
        workers());
    std::vector<double> ratios;
    for (std::size_t oi = 0; oi < ok.size(); ++oi) {
      const auto& c = configs[ok[oi]];
      for (std::size_t pi = 0; pi < config.patches.size(); ++pi) {
        for (std::size_t t = 0; t < joint[oi][pi].size(); ++t) {
          const auto& j = joint[oi][pi][t];
          sub.add(c.name, config.patches[pi], t, set_size, j.joint, j.individual_sum, j.ratio ? *j.ratio : kNaN);
          if (j.ratio) ratios.push_back(*j.ratio);
        }
      }
    }
    write_table("subadditivity.csv", sub);
    if (!ratios.empty()) {
      std::sort(ratios.begin(), ratios.end());
      median_subadditivity = quantile_sorted(ratios, 0.5);
    }
    raise_config_errors("select");
  }

  void stage_pay() {
    ensure_configs();
    const auto ok = ok_configs();
    const char* names[3] = {"IG", "GTI", "VG"};
    Table pay({"config", "method", "station_id", "score", "share", "amount", "true_share"});
    Table chk({"config", "method", "budget", "budget_error", "min_amount", "overpayment", "underpayment"});
    for (std::size_t ci : ok) {
      const auto& c = configs[ci];
      const auto um = time_mean(spatial_util(c, reference_spec));
      const auto ts = true_shares(um);
      for (std::size_t m = 0; m < 3; ++m) {
        const auto score = time_mean(attr_series(c, m, true));
        const auto alloc = payment(score, config.payment_budget, c.name + "/" + names[m]);
        const double total = std::accumulate(alloc.amounts.begin(), alloc.amounts.end(), 0.0);
        const auto over = overpayment(alloc.shares, ts);
        chk.add(c.name, names[m], alloc.budget, std::abs(total - alloc.budget),
                *std::min_element(alloc.amounts.begin(), alloc.amounts.end()), over.total, over.underpayment);
        for (std::size_t g = 0; g < score.size(); ++g) {
          pay.add(c.name, names[m], (*stations)[g].id, score[g], alloc.shares[g], alloc.amounts[g], ts[g]);
        }
      }
    }
    write_table("payments.csv", pay);
    write_table("payment_checks.csv", chk);

    const int resamples = effective_resamples(config);
    const std::size_t top_k = std::min<std::size_t>(static_cast<std::size_t>(config.payment_top_k), stations->size());
    std::vector<StabilityResult> stab(ok.size());
    std::vector<ShrinkageFit> shrink(ok.size());
    const auto objective = config.shrinkage_objective == "mse" ? ShrinkageObjective::mse
                                                               : ShrinkageObjective::captured_utility;
    parallel_for(
        ok.size(),
        [&](std::size_t oi) {
          const auto& c = configs[ok[oi]];
          const Series ig = attr_series(c, 0, true);
          stab[oi] = payment_stability(ig, resamples, top_k, derive_seed(config.seed, {kPayStream, ok[oi]}),
                                       config.ci_level);
          Series shares;
          for (const auto& v : ig) shares.push_back(true_shares(v));
          const auto dist = true_shares(distance_scores(*stations, c.target_spec));
          shrink[oi] = shrinkage_fit(shares, dist, spatial_util(c, reference_spec, nullptr, false), objective,
                                     static_cast<std::size_t>(config.shrinkage_k));
        },
        workers());
    Table st({"config", "method", "rank", "station_id", "share", "ci_lower", "ci_upper", "ci_to_share"});
    Table sh({"config", "objective", "lambda", "lambda_sd", "delta_rho", "folds"});
    for (std::size_t oi = 0; oi < ok.size(); ++oi) {
      const auto& c = configs[ok[oi]];
      const auto& s = stab[oi];
      for (std::size_t r = 0; r < s.top.size(); ++r) {
        const std::size_t g = s.top[r];
        st.add(c.name, "IG", r + 1, (*stations)[g].id, s.shares[g], s.ci[g].lower, s.ci[g].upper, s.ci_to_share);
      }
      const auto& f = shrink[oi];
      sh.add(c.name, config.shrinkage_objective, f.lambda, f.lambda_sd, f.delta_rho, f.fold_lambda.size());
    }
    write_table("stability.csv", st);
    write_table("shrinkage.csv", sh);
    raise_config_errors("pay");
  }

  void stage_game() {
    ensure_gaming();
    json scen = json::array();
    Table outc({"configuration", "scenario", "kind", "placement", "pct", "attackers", "attacker_ids", "inflation_ratio",
                "baseline_mae", "attack_mae", "mae_change", "honest_share_change_pp", "attacker_share_change_pp"});
    for (const auto& run : gaming) {
      json list = json::array();
      for (const auto& o : run.outcomes) {
        const auto& sc = o.scenario;
        std::string ids;
        json att = json::array();
        for (std::size_t a : sc.attackers) {
          ids += (ids.empty() ? "" : " ") + std::to_string((*gaming_stations)[a].id);
          att.push_back((*gaming_stations)[a].id);
        }
        list.push_back({{"id", sc.id},
                        {"kind", to_string(sc.kind)},
                        {"placement", to_string(sc.placement)},
                        {"scope", to_string(sc.scope)},
                        {"pct", sc.pct},
                        {"attackers", att},
                        {"seed", sc.seed}});
        outc.add(run.name, sc.id, to_string(sc.kind), to_string(sc.placement), sc.pct, sc.attackers.size(), ids,
                 o.inflation_ratio, o.baseline.mae, o.attack.mae, o.mae_change, o.honest_share_change_pp,
                 o.attacker_share_change_pp);
      }
      scen.push_back({{"configuration", run.name}, {"method", config.gaming.method}, {"scenarios", list}});
    }
    write_text("gaming_scenarios.json", scen.dump(1) + "\n");
    write_table("gaming_outcomes.csv", outc);
  }

  static std::string stratum_of(const AttackScenario& sc) {
    if (sc.kind == AttackKind::spoof) return "spoof";
    if (sc.pct == 0.0) return "null";
    if (sc.placement != Placement::uniform) return to_string(sc.placement);
    return "p" + std::to_string(std::llround(sc.pct));
  }

  void stage_detect() {
    ensure_gaming();
    const std::size_t N = gaming_stations->size();
    Table det({"configuration", "detector", "kind", "stratum", "scenarios", "pr_auc", "prevalence", "hit1", "hit5",
               "mean_attacker_score"});
    Table per({"configuration", "scenario", "detector", "pr_auc", "hit5", "mean_attacker_score"});
    std::vector<std::vector<StationFeatures>> features;
    const auto neighbours = nearest_neighbours(*gaming_stations);
    for (const auto& run : gaming) {
      std::vector<std::vector<DetectorScores>> scores;
      for (const auto& o : run.outcomes) scores.push_back(run_detectors(o, *gaming_stations, config.gaming.d4_per_timestamp, &neighbours));
      const std::vector<std::string> detectors{"D3", "D4", "D5", "U1"};
      std::vector<std::string> strata;
      std::map<std::string, std::vector<std::size_t>> members;
      for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
        const auto& sc = run.outcomes[i].scenario;
        const std::string s = stratum_of(sc);
        if (s == "null") continue;
        if (!members.count(s)) strata.push_back(s);
        members[s].push_back(i);
        if (sc.kind == AttackKind::inflate && sc.placement == Placement::uniform) {
          if (!members.count("all_inflate")) strata.push_back("all_inflate");
          members["all_inflate"].push_back(i);
        }
      }
      for (std::size_t d = 0; d < detectors.size(); ++d) {
        for (const auto& s : strata) {
          std::vector<GamingOutcome> outs;
          std::vector<std::vector<double>> sc;
          for (std::size_t i : members[s]) {
            outs.push_back(run.outcomes[i]);
            sc.push_back(scores[i][d].scores);
          }
          const auto sum = evaluate_detection(detectors[d], run.name, outs, sc, N);
          det.add(run.name, detectors[d], sum.kind, s, sum.scenarios, sum.pr_auc, sum.prevalence, sum.hit1, sum.hit5,
                  sum.mean_attacker_score);
        }
        for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
          const auto& o = run.outcomes[i];
          if (stratum_of(o.scenario) == "null") continue;
          const auto sum = evaluate_detection(detectors[d], run.name, std::span(&o, 1),
                                              std::span(&scores[i][d].scores, 1), N);
          per.add(run.name, o.scenario.id, detectors[d], sum.pr_auc, sum.hit5, sum.mean_attacker_score);
        }
      }
      std::vector<StationFeatures> f;
      for (std::size_t i : members["all_inflate"]) f.push_back(detection_features(run.outcomes[i], *gaming_stations, run.target, &neighbours));
      features.push_back(std::move(f));
    }
    write_table("detection.csv", det);
    write_table("detection_scenarios.csv", per);
    Table d7({"held_out_configuration", "pr_auc"});
    if (gaming.size() >= 2) {
      const auto auc = detector_d7_loco(features);
      for (std::size_t i = 0; i < gaming.size(); ++i) d7.add(gaming[i].name, auc[i]);
    }
    write_table("d7.csv", d7);
  }

  void stage_converge() {
    ensure_configs();
    Table cv({"config", "scope", "spec", "method", "timestamps", "mean_rho_t", "aggregate_rho", "recovery",
              "convergence_n"});
    for (std::size_t ci : ok_configs()) {
      const auto& c = configs[ci];
      const auto g = cycle_convergence(attr_series(c, 0, false), global_util(c));
      auto nstr = [](const ConvergenceResult& r) { return r.convergence_n ? std::to_string(*r.convergence_n) : "never"; };
      cv.add(c.name, "global", "-", "IG", g.per_timestamp_rho.size(), g.mean_rho, g.aggregate_rho, g.recovery, nstr(g));
      for (std::size_t s = 0; s < specs.size(); ++s) {
        const auto r = cycle_convergence(attr_series(c, 0, true), spatial_util(c, s));
        cv.add(c.name, "spatial", specs[s].name, "IG", r.per_timestamp_rho.size(), r.mean_rho, r.aggregate_rho,
               r.recovery, nstr(r));
      }
    }
    write_table("convergence.csv", cv);
    raise_config_errors("converge");
  }

  void stage_report() {
    ensure_fidelity();
    ensure_unit_scale();
    ensure_gaming();
    if (std::isnan(oracle_dominance)) stage_select();
    std::ostringstream md;
    md << "# gradval run summary\n\n";
    md << "config hash `" << hash << "`, seed " << config.seed << ", " << fields.size() << " timestamps, "
       << stations->size() << " stations, " << configs.size() << " global configurations, "
       << configs.size() * specs.size() << " spatial configurations.\n\n";
    md << "## Fidelity (unweighted means across configurations)\n\n";
    md << "| scope | method | mean rho | significant |\n|---|---|---|---|\n";
    for (const std::string scope : {"global", "spatial"}) {
      for (const char* m : {"IG", "GTI", "VG"}) {
        std::vector<double> rho;
        int sig = 0, n = 0;
        for (std::size_t ci : ok_configs()) {
          for (const auto& r : configs[ci].fidelity) {
            if (r.scope != scope || r.method != m) continue;
            rho.push_back(r.stats.aggregate.rho);
            ++n;
            if (r.significant && r.stats.aggregate.rho > 0) ++sig;
          }
        }
        md << "| " << scope << " | " << m << " | " << num(mean_of(rho)) << " | " << sig << "/" << n << " |\n";
      }
    }
    int ranking_changes = 0, invariant = 0, n_unit = 0;
    for (std::size_t ci : ok_configs()) {
      const auto& u = configs[ci].unit;
      ++n_unit;
      if (!u.vg_ranking_same) ++ranking_changes;
      if (u.ig_ranking_same && u.gti_ranking_same && u.selections_same) ++invariant;
    }
    md << "\n## Unit scaling\n\nIG/GTI rankings and selections unchanged in " << invariant << "/" << n_unit
       << " configurations; VG ranking changed in " << ranking_changes << "/" << n_unit << ".\n";
    md << "\n## Selection and subadditivity\n\nOracle dominates every strategy in " << num(100.0 * oracle_dominance)
       << "% of (configuration, budget) cells. Median joint/individual ratio: " << num(median_subadditivity) << ".\n";
    md << "\n## Gaming\n\n| configuration | scenarios | mean inflation ratio (p50) |\n|---|---|---|\n";
    for (const auto& run : gaming) {
      std::vector<double> r;
      for (const auto& o : run.outcomes) {
        if (o.scenario.kind == AttackKind::inflate && o.scenario.pct == 50.0 &&
            o.scenario.placement == Placement::uniform) {
          r.push_back(o.inflation_ratio);
        }
      }
      md << "| " << run.name << " | " << run.outcomes.size() << " | " << num(mean_of(r)) << " |\n";
    }
    md << "\nPlot-ready tables: fidelity_*.csv, k_sensitivity.csv, deciles.csv, selection_summary.csv, "
          "payments.csv, detection.csv, convergence.csv.\n";
    write_text("summary.md", md.str());
    raise_config_errors("report");
  }

  double oracle_dominance = kNaN;
  double median_subadditivity = kNaN;
};

Workspace::Workspace(ExperimentConfig config, fs::path out_dir) : state_(std::make_unique<State>()) {
  validate(config);
  state_->config = std::move(config);
  state_->out = std::move(out_dir);
  state_->hash = config_hash(state_->config);
}

Workspace::~Workspace() = default;

const ExperimentConfig& Workspace::config() const { return state_->config; }
const fs::path& Workspace::out_dir() const { return state_->out; }

StageStatus Workspace::run_stage(const std::string& name) {
  StageStatus st;
  st.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::create_directories(state_->out);
    auto& s = *state_;
    if (name == "gen") s.stage_gen();
    else if (name == "fidelity") s.stage_fidelity();
    else if (name == "methods") s.stage_methods();
    else if (name == "calibrate") s.stage_calibrate();
    else if (name == "select") s.stage_select();
    else if (name == "pay") s.stage_pay();
    else if (name == "game") s.stage_game();
    else if (name == "detect") s.stage_detect();
    else if (name == "converge") s.stage_converge();
    else if (name == "report") s.stage_report();
    else throw std::invalid_argument("unknown stage: " + name);
    st.ok = true;
  } catch (const std::exception& e) {
    st.ok = false;
    st.error = e.what();
  }
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::clog << "[gradval] " << name << (st.ok ? " ok " : " FAILED ") << num(st.seconds) << "s"
            << (st.ok ? "" : ": " + st.error) << "\n";
  return st;
}

RunManifest Workspace::run(const std::vector<std::string>& stages) {
  auto& s = *state_;
  fs::create_directories(s.out);
  save_config(s.out / "config.json", s.config);
  s.track("config.json");
  RunManifest m;
  m.config_hash = s.hash;
  m.version = version_string();
  const auto& list = stages.empty() ? stage_names() : stages;
  for (const auto& name : list) m.stages.push_back(run_stage(name));

  for (const auto& rel : s.files) {
    const fs::path p = s.out / rel;
    if (!fs::exists(p)) continue;
    std::ifstream f(p, std::ios::binary);
    std::ostringstream buf;
    buf << f.rdbuf();
    m.files.push_back({rel, fs::file_size(p), hex64(fnv1a64(buf.str())), utc_time(fs::last_write_time(p))});
  }
  json j;
  j["schema_version"] = kSchemaVersion;
  j["version"] = m.version;
  j["config_hash"] = m.config_hash;
  j["ok"] = m.ok();
  j["stages"] = json::array();
  for (const auto& st : m.stages) {
    j["stages"].push_back({{"name", st.name}, {"ok", st.ok}, {"error", st.error}, {"seconds", st.seconds}});
  }
  j["files"] = json::array();
  for (const auto& f : m.files) {
    j["files"].push_back({{"path", f.path}, {"bytes", f.bytes}, {"fnv64", f.fnv64}, {"modified", f.modified}});
  }
  std::ofstream(s.out / "manifest.json") << j.dump(2) << "\n";
  return m;
}

RunManifest run_full(const ExperimentConfig& config, const fs::path& out_dir, const std::vector<std::string>& stages) {
  Workspace ws(config, out_dir);
  return ws.run(stages);
}

}  // namespace gradval
