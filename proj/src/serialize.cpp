#include "gradval/serialize.hpp"

#include <fstream>
#include <stdexcept>

namespace gradval {

using nlohmann::json;

json grid_to_json(const GridConfig& c) {
  return json{{"n_lat", c.n_lat},     {"n_lon", c.n_lon},     {"lat_min", c.lat_min},
              {"lat_max", c.lat_max}, {"lon_min", c.lon_min}, {"lon_max", c.lon_max},
              {"variables", c.variables}};
}

GridConfig grid_from_json(const json& j) {
  GridConfig c;
  c.n_lat = j.value("n_lat", c.n_lat);
  c.n_lon = j.value("n_lon", c.n_lon);
  c.lat_min = j.value("lat_min", c.lat_min);
  c.lat_max = j.value("lat_max", c.lat_max);
  c.lon_min = j.value("lon_min", c.lon_min);
  c.lon_max = j.value("lon_max", c.lon_max);
  c.variables = j.value("variables", c.variables);
  return c;
}

json model_config_to_json(const ModelConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"seed", c.seed},
              {"depth", c.depth},
              {"hidden", c.hidden},
              {"stencil_radius", c.stencil_radius},
              {"readout_length_km", c.readout_length_km},
              {"readout_radius", c.readout_radius},
              {"readout_scale", c.readout_scale},
              {"target_activation_std", c.target_activation_std},
              {"unit_factors", c.unit_factors},
              {"masked_variables", c.masked_variables},
              {"weight_mismatch", c.weight_mismatch},
              {"mismatch_seed", c.mismatch_seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.kind = model_kind_from_string(j.value("kind", std::string("desk")));
  c.seed = j.value("seed", c.seed);
  c.depth = j.value("depth", c.depth);
  c.hidden = j.value("hidden", c.hidden);
  c.stencil_radius = j.value("stencil_radius", c.stencil_radius);
  c.readout_length_km = j.value("readout_length_km", c.readout_length_km);
  c.readout_radius = j.value("readout_radius", c.readout_radius);
  c.readout_scale = j.value("readout_scale", c.readout_scale);
  c.target_activation_std = j.value("target_activation_std", c.target_activation_std);
  c.unit_factors = j.value("unit_factors", c.unit_factors);
  c.masked_variables = j.value("masked_variables", c.masked_variables);
  c.weight_mismatch = j.value("weight_mismatch", c.weight_mismatch);
  c.mismatch_seed = j.value("mismatch_seed", c.mismatch_seed);
  return c;
}

json target_to_json(const TargetSpec& t) {
  return json{{"name", t.name}, {"lat", t.lat}, {"lon", t.lon}, {"variable", t.variable}};
}

void save_model(const std::filesystem::path& path, const ForecastModel& model) {
  json j{{"format", "gradval-model"},
         {"version", 1},
         {"grid", grid_to_json(model.grid().config())},
         {"target", target_to_json(model.target())},
         {"model", model_config_to_json(model.config())}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ForecastModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const json j = json::parse(in);
  if (j.value("format", std::string()) != "gradval-model") {
    throw std::runtime_error("not a model file: " + path.string());
  }
  GridPtr grid = make_grid(grid_from_json(j.at("grid")));
  const auto& t = j.at("target");
  TargetSpec target = make_target(*grid, t.at("name").get<std::string>(), t.at("lat").get<double>(),
                                  t.at("lon").get<double>(), t.at("variable").get<std::string>());
  return ForecastModel(grid, std::move(target), model_config_from_json(j.at("model")));
}

}  // namespace gradval
