#pragma once

#include <json.hpp>

#include "icvt/synthetic.hpp"
#include "icvt/training.hpp"

namespace icvt {

// Everything a run needs, held in one diffable JSON document.
struct RunConfig {
    uint64_t seed = 1;
    std::string data_dir;
    std::string out_dir;
    GenConfig gen;
    ModelConfig model;
    TrainerConfig trainer;
};

nlohmann::json config_to_json(const RunConfig& c);
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json default_config_json();

// "a.b.c=value"; the value is parsed as JSON when possible, else as a string
void apply_override(nlohmann::json& j, const std::string& assignment);

// stable content digest of a config document
std::string config_digest(const nlohmann::json& j);

RunConfig load_config_file(const std::string& path,
                           const std::vector<std::string>& overrides = {});

}  // namespace icvt
