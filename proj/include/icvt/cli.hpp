#pragma once

#include <memory>
#include <string>
#include <vector>

#include "icvt/config.hpp"
#include "icvt/cvae.hpp"

namespace icvt {

// Single entry point behind the `icvt` binary; callable in-process for tests.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

// Checkpoint directory helpers (params.bin + config.json + state.json).
struct LoadedModel {
    RunConfig config;
    std::unique_ptr<IcvtModel<float>> model;
    int64_t iteration = 0;
};

LoadedModel load_checkpoint(const std::string& dir);

// Uniform-random placement baseline: boxes drawn uniformly over the canvas
// with sizes matching the synthetic generator's ranges. Used as the
// reference point for occlusion comparisons.
Layout random_placement_layout(const Sample& sample, Rng& rng);

}  // namespace icvt
