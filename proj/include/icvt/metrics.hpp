#pragma once

#include <functional>
#include <optional>

#include "icvt/image.hpp"
#include "icvt/layout.hpp"
#include "icvt/synthetic.hpp"
#include "icvt/tensor.hpp"

namespace icvt {

struct MetricReport {
    double output_rate = 0;
    double overlap = 0;
    double alignment = 0;
    double occlusion = 0;
    int64_t n_samples = 0;
    int64_t n_occlusion_samples = 0;  // layouts with >= 1 valid box
    std::optional<double> fid;        // reserved; not computed here

    std::string to_json() const;
};

struct PerSampleMetrics {
    std::string id;
    int z_index = 0;
    int n_boxes = 0;
    double overlap = 0;
    double alignment = 0;
    std::optional<double> occlusion;
};

// A box is valid when it has a design class, is at least 1e-3 wide/tall, and
// intersects the unit canvas with positive area.
bool is_valid_box(const LayoutElement& e);

// Fraction of layouts with at least one valid box. Empty input is an error.
double output_rate(const std::vector<Layout>& layouts);

// Sum of pairwise intersection areas over the sum of box areas, boxes clipped
// to the canvas, capped at 1. Fewer than two valid boxes give 0.
double overlap(const Layout& layout);

// Mean over valid elements of the distance to the nearest aligned axis
// (left/x-center/right/top/y-center/bottom) of any other element. Fewer than
// two valid boxes give 0.
double alignment(const Layout& layout);

// Salient fraction of the union of all valid boxes rasterized on the mask
// grid. Undefined (nullopt) when the layout has no valid box.
std::optional<double> occlusion(const Layout& layout, const Mask& saliency);

// Alternative denominator (sum of areas instead of union); see the sum_areas
// flag on evaluate-style tooling.
std::optional<double> occlusion_sum_areas(const Layout& layout, const Mask& saliency);

// ---------------------------------------------------------------------------
// Brute-force oracles. Independent implementations used to validate the
// analytic metrics; deliberately naive.
// ---------------------------------------------------------------------------

double overlap_raster_oracle(const Layout& layout, int resolution);
double alignment_bruteforce_oracle(const Layout& layout);
double occlusion_bruteforce_oracle(const Layout& layout, const Mask& saliency);

// ---------------------------------------------------------------------------
// evaluation driver
// ---------------------------------------------------------------------------

// Generates n_z layouts per test sample via the callback and aggregates the
// four metrics. Deterministic given seed: the callback receives a
// per-(sample, z) seeded generator.
using LayoutGenerator = std::function<Layout(const Sample&, int z_index, Rng& rng)>;

MetricReport evaluate(const LayoutGenerator& gen, const std::vector<Sample>& test_set, int n_z,
                      uint64_t seed, std::vector<PerSampleMetrics>* per_sample = nullptr);

void write_per_sample_csv(const std::string& path, const std::vector<PerSampleMetrics>& rows);

}  // namespace icvt
