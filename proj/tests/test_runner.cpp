#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gradval/config.hpp"
#include "gradval/runner.hpp"
#include "oracles.hpp"

using namespace gradval;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.targets = {{"Zurich", 47.4, 8.6}, {"London", 51.5, -0.1}};
  c.target_variables = {"t2m"};
  c.models = {{"desk-d1", 1}};
  c.n_timestamps = 20;
  c.climatology_draws = 50;
  c.fast = true;
  c.k_sensitivity = {1, 8};
  c.patches = {1};
  c.modes = {"mean_replace"};
  c.budgets = {5, 10};
  c.uniform_seeds = 10;
  c.subadditivity_timestamps = 3;
  c.unit_scale_timestamps = 3;
  c.gaming.timestamps = 4;
  c.gaming.models = {"desk-d1"};
  c.gaming.configurations = {{"Zurich", "t2m", false}, {"London", "t2m", false}};
  c.gaming.attacker_counts = {1, 3};
  c.gaming.pcts = {50};
  c.gaming.seeds = 2;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gradval_runner_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<double>> noise_maps(std::mt19937_64& rng, int t, int n) {
  std::vector<std::vector<double>> out;
  for (int i = 0; i < t; ++i) out.push_back(oracle::random_vector(rng, static_cast<std::size_t>(n)));
  return out;
}

}  // namespace

TEST_CASE("config JSON round-trip and hash") {
  auto c = small_config();
  c.gaming.scope = "single_target_var";
  auto back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c) != config_hash(default_config()));

  auto w = c;
  w.workers = 7;
  CHECK(config_hash(w) == config_hash(c));
  auto s = c;
  s.seed += 1;
  CHECK(config_hash(s) != config_hash(c));

  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  save_config(dir / "c.json", c);
  CHECK(to_json(load_config(dir / "c.json")) == to_json(c));
  fs::remove_all(dir);

  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate(default_config()));
  CHECK_NOTHROW(validate(small_config()));
  auto bad = [](auto edit) {
    auto c = small_config();
    edit(c);
    return c;
  };
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.n_timestamps = 10; })), std::invalid_argument);
  CHECK_THROWS(validate(bad([](auto& c) { c.patches = {2}; })));
  CHECK_THROWS(validate(bad([](auto& c) { c.modes = {"delete"}; })));
  CHECK_THROWS(validate(bad([](auto& c) { c.targets.push_back({"Equator", 0.0, 0.0}); })));
  CHECK_THROWS(validate(bad([](auto& c) { c.gaming.models = {"desk-d9"}; })));
  CHECK_THROWS(validate(bad([](auto& c) { c.bootstrap_resamples = 10; })));
  CHECK_THROWS(validate(bad([](auto& c) { c.schema_version = 2; })));

  auto j = to_json(small_config());
  j["mystery"] = 1;
  CHECK_THROWS_WITH(config_from_json(j), doctest::Contains("unknown key mystery"));
  auto k = to_json(small_config());
  k["gaming"]["colour"] = "red";
  CHECK_THROWS(config_from_json(k));
}

TEST_CASE("fidelity statistics") {
  std::mt19937_64 rng(1);
  auto u = noise_maps(rng, 20, 40);
  auto a = u;
  for (auto& v : a) {
    for (double& x : v) x = std::abs(x) * 3.0;
  }
  auto f = fidelity_stats(a, u, 5, 1000, 0.95, 1);
  CHECK(f.aggregate.rho == doctest::Approx(1.0));
  CHECK(f.topk_overlap == 1.0);
  CHECK(f.median_rho == doctest::Approx(1.0));
  REQUIRE(f.wilcoxon.has_value());
  CHECK(f.wilcoxon->p_value < 1e-3);
  CHECK(f.ci.lower <= f.aggregate.rho + 1e-12);

  std::vector<double> ma(40, 0.0), mu(40, 0.0);
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < 40; ++i) {
      ma[i] += a[t][i];
      mu[i] += std::abs(u[t][i]);
    }
  }
  auto g = noise_maps(rng, 20, 40);
  auto r = fidelity_stats(g, u, 5, 1000, 0.95, 1);
  std::vector<double> mg(40, 0.0);
  for (const auto& v : g) {
    for (std::size_t i = 0; i < 40; ++i) mg[i] += v[i];
  }
  CHECK(r.aggregate.rho == doctest::Approx(oracle::spearman(mg, mu)).epsilon(1e-12));
  CHECK(r.ci.lower < r.ci.upper);
}

TEST_CASE("cycle convergence") {
  std::mt19937_64 rng(2);
  auto u = noise_maps(rng, 30, 50);
  auto same = u;
  for (auto& v : same) {
    for (double& x : v) x = std::abs(x);
  }
  auto c = cycle_convergence(same, u);
  CHECK(c.recovery == doctest::Approx(1.0));
  REQUIRE(c.convergence_n.has_value());
  CHECK(*c.convergence_n <= 10);

  int never = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto a = noise_maps(rng, 30, 50);
    never += !cycle_convergence(a, u).convergence_n.has_value();
  }
  CHECK(never >= 15);

  // Weak per-timestamp signal on a shared pattern: aggregate agreement beats
  // single maps, and enough timestamps still reach significance.
  std::vector<double> pattern = oracle::random_vector(rng, 50);
  std::vector<std::vector<double>> a, uu;
  std::normal_distribution<double> noise;
  for (int t = 0; t < 40; ++t) {
    std::vector<double> at(50), ut(50);
    for (int i = 0; i < 50; ++i) {
      ut[i] = std::abs(pattern[i]) + 0.5 * std::abs(noise(rng));
      at[i] = std::abs(pattern[i]) + 1.5 * noise(rng);
    }
    a.push_back(at);
    uu.push_back(ut);
  }
  auto w = cycle_convergence(a, uu);
  CHECK(w.recovery < 1.0);
  CHECK(w.recovery > 0.0);
  REQUIRE(w.convergence_n.has_value());
  CHECK(*w.convergence_n < 40);

  CHECK_THROWS(cycle_convergence(std::vector<std::vector<double>>(5, std::vector<double>(10, 1.0)),
                                 std::vector<std::vector<double>>(5, std::vector<double>(10, 1.0))));
}

TEST_CASE("full run is deterministic and manifested") {
  auto c = small_config();
  const auto a = scratch("a"), b = scratch("b");
  auto ma = run_full(c, a);
  auto cb = c;
  cb.workers = 2;
  auto mb = run_full(cb, b);
  REQUIRE(ma.ok());
  REQUIRE(mb.ok());
  CHECK(ma.stages.size() == stage_names().size());
  CHECK(ma.config_hash == config_hash(c));
  CHECK(ma.version == version_string());

  REQUIRE(ma.files.size() == mb.files.size());
  std::size_t csv = 0;
  for (std::size_t i = 0; i < ma.files.size(); ++i) {
    CAPTURE(ma.files[i].path);
    CHECK(ma.files[i].path == mb.files[i].path);
    csv += ma.files[i].path.ends_with(".csv");
    if (ma.files[i].path == "config.json") continue;  // records the worker count
    CHECK(ma.files[i].fnv64 == mb.files[i].fnv64);
    CHECK(slurp(a / ma.files[i].path) == slurp(b / ma.files[i].path));
  }
  CHECK(csv >= 20u);

  // Every regular file except the manifest itself is listed.
  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") ++on_disk;
  }
  CHECK(on_disk == ma.files.size());

  auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["ok"] == true);
  CHECK(manifest["config_hash"] == config_hash(c));
  CHECK(manifest["files"].size() == ma.files.size());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("stages run alone and failures are reported") {
  auto c = small_config();
  const auto dir = scratch("stage");
  auto m = run_full(c, dir, {"pay"});
  REQUIRE(m.stages.size() == 1u);
  CHECK(m.stages[0].ok);
  CHECK(fs::exists(dir / "payments.csv"));
  CHECK(!fs::exists(dir / "detection.csv"));

  auto bad = run_full(c, dir, {"nonsense"});
  CHECK(!bad.ok());
  CHECK(bad.stages[0].error.find("unknown stage") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("fidelity output is well formed") {
  auto c = small_config();
  const auto dir = scratch("fid");
  REQUIRE(run_full(c, dir, {"fidelity"}).ok());
  std::ifstream in(dir / "fidelity_global.csv");
  std::string header, line;
  std::getline(in, header);
  CHECK(header.starts_with("config,method,n_items,timestamps,rho"));
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cfg, method, n, t, rho;
    std::getline(ss, cfg, ',');
    std::getline(ss, method, ',');
    std::getline(ss, n, ',');
    std::getline(ss, t, ',');
    std::getline(ss, rho, ',');
    CHECK(t == "20");
    const double r = std::stod(rho);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
  CHECK(rows >= 2 * 3);
  fs::remove_all(dir);
}
