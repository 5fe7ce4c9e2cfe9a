#pragma once

#include <optional>

#include "icvt/image.hpp"
#include "icvt/layout.hpp"

namespace icvt {

// One dataset record: a saliency-masked background image (pixels outside the
// mask are zeroed), the binary saliency mask itself, and the ground-truth
// layout.
struct Sample {
    Image image;
    Mask saliency;
    Layout layout;
    std::string id;
};

enum class Placement : int { Top = 0, Bottom = 1, Middle = 2, Random = 3 };

const char* placement_name(Placement p);
Placement placement_from_name(const std::string& s);

struct GenConfig {
    int H = 96, W = 128;
    int patch = 16;  // H and W must be divisible by this
    Placement placement = Placement::Random;
    int min_texts = 2, max_texts = 6;
    double substrate_prob = 0.35;
    double logo_prob = 0.4;
    uint64_t seed = 0;

    void validate() const;
};

// Deterministic in (config.seed, sample_seed). The subject blob occupies a
// horizontal band of rows; layout elements are laid out in the remaining
// bands, so the generated layout never occludes the subject.
Sample generate_sample(uint64_t sample_seed, const GenConfig& config);

// Directory layout: images/<id>.png, masks/<id>.png, layouts.jsonl, meta.json
void write_dataset(const std::vector<Sample>& samples, const std::string& dir,
                   const GenConfig& config);
std::vector<Sample> read_dataset(const std::string& dir);

// Stable id-hash split: fraction in [0,1); ids below 0.9 are training data.
double split_fraction(const std::string& id);
bool is_train_id(const std::string& id, double train_ratio = 0.9);

}  // namespace icvt
