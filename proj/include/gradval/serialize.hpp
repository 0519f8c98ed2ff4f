#pragma once

#include <json.hpp>

#include "gradval/grid.hpp"
#include "gradval/model.hpp"

namespace gradval {

nlohmann::json grid_to_json(const GridConfig& c);
GridConfig grid_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json target_to_json(const TargetSpec& t);

}  // namespace gradval
