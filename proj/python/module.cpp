#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "gradval/attribution.hpp"
#include "gradval/config.hpp"
#include "gradval/metrics.hpp"
#include "gradval/model.hpp"
#include "gradval/runner.hpp"
#include "gradval/synth.hpp"

namespace py = pybind11;
using namespace gradval;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

GridConfig grid_config(const std::string& json) {
  if (json.empty()) return GridConfig{};
  ExperimentConfig c = default_config();
  nlohmann::json j = to_json(c);
  j["grid"] = nlohmann::json::parse(json);
  return config_from_json(j).grid;
}

Array to_array(const FieldTensor& f) {
  const auto& g = f.grid();
  Array out({g.n_vars(), g.n_lat(), g.n_lon()});
  std::copy(f.values().begin(), f.values().end(), out.mutable_data());
  return out;
}

FieldTensor from_array(const GridPtr& grid, const Array& a) {
  if (a.ndim() != 3 || a.shape(0) != grid->n_vars() || a.shape(1) != grid->n_lat() || a.shape(2) != grid->n_lon()) {
    throw std::invalid_argument("expected an array of shape (n_vars, n_lat, n_lon)");
  }
  return FieldTensor(grid, std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gradient attribution versus ablation utility for observing-station valuation";
  m.def("version", &version_string);

  m.def("default_config_json", [] { return to_json(default_config()).dump(); });
  m.def("validate_config_json", [](const std::string& s) { validate(config_from_json(nlohmann::json::parse(s))); });
  m.def("config_hash_json", [](const std::string& s) { return config_hash(config_from_json(nlohmann::json::parse(s))); });
  m.def(
      "run_full_json",
      [](const std::string& s, const std::string& out, const std::vector<std::string>& stages) {
        const auto c = config_from_json(nlohmann::json::parse(s));
        validate(c);
        RunManifest r;
        {
          py::gil_scoped_release release;
          r = run_full(c, out, stages);
        }
        nlohmann::json j{{"ok", r.ok()}, {"config_hash", r.config_hash}, {"version", r.version}};
        for (const auto& st : r.stages) j["stages"].push_back({{"name", st.name}, {"ok", st.ok}, {"error", st.error}});
        for (const auto& f : r.files) j["files"].push_back(f.path);
        return j.dump();
      },
      py::arg("config"), py::arg("out_dir"), py::arg("stages") = std::vector<std::string>{});
  m.def("stage_names", &stage_names);

  py::class_<ForecastModel>(m, "Model")
      .def_property_readonly("id", &ForecastModel::id)
      .def_property_readonly("variables", [](const ForecastModel& f) { return f.grid().variables(); })
      .def_property_readonly("shape",
                             [](const ForecastModel& f) {
                               return py::make_tuple(f.grid().n_vars(), f.grid().n_lat(), f.grid().n_lon());
                             })
      .def("forward", [](const ForecastModel& f, const Array& x) { return f.forward(from_array(f.grid_ptr(), x)); })
      .def("gradient",
           [](const ForecastModel& f, const Array& x) { return to_array(f.gradient(from_array(f.grid_ptr(), x))); })
      .def(
          "attribute",
          [](const ForecastModel& f, const Array& x, const Array& baseline, const std::string& method, int steps) {
            AttributionConfig c;
            c.method = method_from_string(method);
            c.steps = steps;
            return to_array(attribute(f, from_array(f.grid_ptr(), x), from_array(f.grid_ptr(), baseline), c).scores);
          },
          py::arg("x"), py::arg("baseline"), py::arg("method") = "IG", py::arg("steps") = 50);

  m.def(
      "model",
      [](const std::string& kind, std::uint64_t seed, double lat, double lon, const std::string& variable, int depth,
         const std::string& grid_json) {
        auto grid = make_grid(grid_config(grid_json));
        auto target = make_target(*grid, "target", lat, lon, variable);
        if (kind == "linear") return make_linear_model(seed, grid, target);
        if (kind != "desk") throw std::invalid_argument("unknown model kind " + kind);
        return make_desk_model(seed, grid, target, depth);
      },
      py::arg("kind") = "desk", py::arg("seed") = 1, py::arg("lat") = 47.4, py::arg("lon") = 8.6,
      py::arg("variable") = "t2m", py::arg("depth") = 3, py::arg("grid") = "");

  m.def(
      "synth_fields",
      [](std::uint64_t seed, int n, int climatology_draws, const std::string& grid_json) {
        auto grid = make_grid(grid_config(grid_json));
        SynthOptions o;
        o.climatology_draws = climatology_draws;
        auto r = synth_fields(seed, grid, n, o);
        Array out({n, grid->n_vars(), grid->n_lat(), grid->n_lon()});
        double* p = out.mutable_data();
        for (const auto& f : r.fields) p = std::copy(f.values().begin(), f.values().end(), p);
        return py::make_tuple(out, to_array(r.climatology.mean()));
      },
      py::arg("seed"), py::arg("n"), py::arg("climatology_draws") = 200, py::arg("grid") = "");

  m.def("spearman", [](const Array& a, const Array& b) {
    auto r = spearman(to_vector(a), to_vector(b));
    return py::make_tuple(r.rho, r.p_value);
  });
  m.def("topk_overlap", [](const Array& a, const Array& b, std::size_t k) { return topk_overlap(to_vector(a), to_vector(b), k); });
  m.def("gini", [](const Array& a) { return gini(to_vector(a)); });
  m.def("pr_auc", [](const Array& s, const std::vector<bool>& labels) { return pr_auc(to_vector(s), labels); });
  m.def("bh_fdr", [](const Array& p, double q) { return bh_fdr(to_vector(p), q); }, py::arg("p"), py::arg("q") = 0.05);
  m.def("wilcoxon", [](const Array& s) {
    auto r = wilcoxon_signed_rank(to_vector(s));
    return py::make_tuple(r.w_plus, r.p_value);
  });
}
