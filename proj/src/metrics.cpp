#include "icvt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "icvt/errors.hpp"

namespace icvt {

namespace {

struct Box {
    double x0, y0, x1, y1;
    double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

Box clip_to_canvas(const LayoutElement& e) {
    return {std::max(0.0, e.left()), std::max(0.0, e.top()), std::min(1.0, e.right()),
            std::min(1.0, e.bottom())};
}

double intersection_area(const Box& a, const Box& b) {
    double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    return w > 0 && h > 0 ? w * h : 0.0;
}

std::vector<LayoutElement> valid_elements(const Layout& layout) {
    std::vector<LayoutElement> out;
    for (const auto& e : layout.elements)
        if (is_valid_box(e)) out.push_back(e);
    return out;
}

}  // namespace

bool is_valid_box(const LayoutElement& e) {
    if (!is_design_class(e.cls)) return false;
    if (e.w < 1e-3 || e.h < 1e-3) return false;
    return clip_to_canvas(e).area() > 0.0;
}

double output_rate(const std::vector<Layout>& layouts) {
    if (layouts.empty()) throw std::invalid_argument("output_rate: empty input");
    int64_t hits = 0;
    for (const auto& l : layouts) {
        for (const auto& e : l.elements)
            if (is_valid_box(e)) {
                ++hits;
                break;
            }
    }
    return (double)hits / (double)layouts.size();
}

double overlap(const Layout& layout) {
    auto elems = valid_elements(layout);
    if (elems.size() < 2) return 0.0;
    double inter = 0, total = 0;
    std::vector<Box> boxes;
    for (const auto& e : elems) boxes.push_back(clip_to_canvas(e));
    for (const auto& b : boxes) total += b.area();
    for (size_t i = 0; i < boxes.size(); ++i)
        for (size_t j = i + 1; j < boxes.size(); ++j) inter += intersection_area(boxes[i], boxes[j]);
    if (total <= 0) return 0.0;
    return std::min(1.0, inter / total);
}

double alignment(const Layout& layout) {
    auto elems = valid_elements(layout);
    size_t n = elems.size();
    if (n < 2) return 0.0;
    auto axes = [](const LayoutElement& e) {
        return std::array<double, 6>{e.left(), e.cx, e.right(), e.top(), e.cy, e.bottom()};
    };
    double sum = 0;
    for (size_t i = 0; i < n; ++i) {
        auto ai = axes(elems[i]);
        double best = std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            auto aj = axes(elems[j]);
            for (int k = 0; k < 6; ++k) best = std::min(best, std::abs(ai[k] - aj[k]));
        }
        sum += best;
    }
    return sum / (double)n;
}

namespace {

// salient and union pixel counts of the valid-box union on an HxW grid
std::pair<int64_t, int64_t> union_counts(const std::vector<LayoutElement>& elems, const Mask& m) {
    int64_t in_union = 0, salient = 0;
    std::vector<Box> boxes;
    for (const auto& e : elems) boxes.push_back(clip_to_canvas(e));
    std::vector<uint8_t> row(m.w);
    for (int r = 0; r < m.h; ++r) {
        double y = (r + 0.5) / m.h;
        std::fill(row.begin(), row.end(), 0);
        bool any = false;
        for (const auto& b : boxes) {
            if (y < b.y0 || y > b.y1) continue;
            for (int c = 0; c < m.w; ++c) {
                double x = (c + 0.5) / m.w;
                if (x >= b.x0 && x <= b.x1) {
                    row[c] = 1;
                    any = true;
                }
            }
        }
        if (!any) continue;
        for (int c = 0; c < m.w; ++c)
            if (row[c]) {
                ++in_union;
                salient += m.at(r, c);
            }
    }
    return {salient, in_union};
}

}  // namespace

std::optional<double> occlusion(const Layout& layout, const Mask& saliency) {
    auto elems = valid_elements(layout);
    if (elems.empty()) return std::nullopt;
    auto [salient, total] = union_counts(elems, saliency);
    if (total == 0) return 0.0;  // union fell between pixel centers
    return (double)salient / (double)total;
}

std::optional<double> occlusion_sum_areas(const Layout& layout, const Mask& saliency) {
    auto elems = valid_elements(layout);
    if (elems.empty()) return std::nullopt;
    int64_t salient_sum = 0, total_sum = 0;
    for (const auto& e : elems) {
        Box b = clip_to_canvas(e);
        for (int r = 0; r < saliency.h; ++r) {
            double y = (r + 0.5) / saliency.h;
            if (y < b.y0 || y > b.y1) continue;
            for (int c = 0; c < saliency.w; ++c) {
                double x = (c + 0.5) / saliency.w;
                if (x >= b.x0 && x <= b.x1) {
                    ++total_sum;
                    salient_sum += saliency.at(r, c);
                }
            }
        }
    }
    if (total_sum == 0) return 0.0;
    return (double)salient_sum / (double)total_sum;
}

// ---------------------------------------------------------------------------
// oracles
// ---------------------------------------------------------------------------

double overlap_raster_oracle(const Layout& layout, int resolution) {
    auto elems = valid_elements(layout);
    if (elems.size() < 2) return 0.0;
    std::vector<Box> boxes;
    for (const auto& e : elems) boxes.push_back(clip_to_canvas(e));
    auto count_pixels = [&](const Box& b) {
        int64_t n = 0;
        for (int r = 0; r < resolution; ++r) {
            double y = (r + 0.5) / resolution;
            if (y < b.y0 || y > b.y1) continue;
            for (int c = 0; c < resolution; ++c) {
                double x = (c + 0.5) / resolution;
                if (x >= b.x0 && x <= b.x1) ++n;
            }
        }
        return n;
    };
    double px = 1.0 / ((double)resolution * resolution);
    double total = 0, inter = 0;
    for (const auto& b : boxes) total += (double)count_pixels(b) * px;
    for (size_t i = 0; i < boxes.size(); ++i)
        for (size_t j = i + 1; j < boxes.size(); ++j) {
            Box ib{std::max(boxes[i].x0, boxes[j].x0), std::max(boxes[i].y0, boxes[j].y0),
                   std::min(boxes[i].x1, boxes[j].x1), std::min(boxes[i].y1, boxes[j].y1)};
            if (ib.x1 > ib.x0 && ib.y1 > ib.y0) inter += (double)count_pixels(ib) * px;
        }
    if (total <= 0) return 0.0;
    return std::min(1.0, inter / total);
}

double alignment_bruteforce_oracle(const Layout& layout) {
    auto elems = valid_elements(layout);
    size_t n = elems.size();
    if (n < 2) return 0.0;
    double sum = 0;
    for (size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const auto& a = elems[i];
            const auto& b = elems[j];
            double pairs[6] = {std::abs(a.left() - b.left()),     std::abs(a.cx - b.cx),
                               std::abs(a.right() - b.right()),   std::abs(a.top() - b.top()),
                               std::abs(a.cy - b.cy),             std::abs(a.bottom() - b.bottom())};
            for (double d : pairs) best = std::min(best, d);
        }
        sum += best;
    }
    return sum / (double)n;
}

double occlusion_bruteforce_oracle(const Layout& layout, const Mask& saliency) {
    auto elems = valid_elements(layout);
    if (elems.empty()) return 0.0;
    std::vector<Box> boxes;
    for (const auto& e : elems) boxes.push_back(clip_to_canvas(e));
    int64_t in_union = 0, salient = 0;
    for (int r = 0; r < saliency.h; ++r)
        for (int c = 0; c < saliency.w; ++c) {
            double x = (c + 0.5) / saliency.w;
            double y = (r + 0.5) / saliency.h;
            bool inside = false;
            for (const auto& b : boxes)
                if (x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1) {
                    inside = true;
                    break;
                }
            if (inside) {
                ++in_union;
                salient += saliency.at(r, c);
            }
        }
    if (in_union == 0) return 0.0;
    return (double)salient / (double)in_union;
}

// ---------------------------------------------------------------------------
// evaluation driver
// ---------------------------------------------------------------------------

MetricReport evaluate(const LayoutGenerator& gen, const std::vector<Sample>& test_set, int n_z,
                      uint64_t seed, std::vector<PerSampleMetrics>* per_sample) {
    if (test_set.empty()) throw DataError("evaluate: empty test set");
    if (n_z < 1) throw std::invalid_argument("evaluate: n_z must be >= 1");
    MetricReport rep;
    std::vector<Layout> generated;
    double overlap_sum = 0, align_sum = 0, occl_sum = 0;
    int64_t occl_n = 0;
    for (size_t i = 0; i < test_set.size(); ++i) {
        for (int zi = 0; zi < n_z; ++zi) {
            Rng rng(mix_seeds(seed, (uint64_t)(i * 1000003ull + (uint64_t)zi)));
            Layout l = gen(test_set[i], zi, rng);
            double ov = overlap(l);
            double al = alignment(l);
            auto oc = occlusion(l, test_set[i].saliency);
            overlap_sum += ov;
            align_sum += al;
            if (oc) {
                occl_sum += *oc;
                ++occl_n;
            }
            if (per_sample) {
                PerSampleMetrics pm;
                pm.id = test_set[i].id;
                pm.z_index = zi;
                int nb = 0;
                for (const auto& e : l.elements) nb += is_valid_box(e) ? 1 : 0;
                pm.n_boxes = nb;
                pm.overlap = ov;
                pm.alignment = al;
                pm.occlusion = oc;
                per_sample->push_back(pm);
            }
            generated.push_back(std::move(l));
        }
    }
    rep.n_samples = (int64_t)generated.size();
    rep.output_rate = output_rate(generated);
    rep.overlap = overlap_sum / (double)rep.n_samples;
    rep.alignment = align_sum / (double)rep.n_samples;
    rep.occlusion = occl_n > 0 ? occl_sum / (double)occl_n : 0.0;
    rep.n_occlusion_samples = occl_n;
    return rep;
}

std::string MetricReport::to_json() const {
    std::ostringstream os;
    os.precision(10);
    os << "{\"output_rate\":" << output_rate << ",\"overlap\":" << overlap
       << ",\"alignment\":" << alignment << ",\"occlusion\":" << occlusion
       << ",\"n_samples\":" << n_samples << ",\"n_occlusion_samples\":" << n_occlusion_samples
       << ",\"fid\":" << (fid ? std::to_string(*fid) : "null") << "}";
    return os.str();
}

void write_per_sample_csv(const std::string& path, const std::vector<PerSampleMetrics>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "id,z_index,n_boxes,overlap,alignment,occlusion\n";
    for (const auto& r : rows) {
        f << r.id << "," << r.z_index << "," << r.n_boxes << "," << r.overlap << "," << r.alignment
          << ",";
        if (r.occlusion) f << *r.occlusion;
        f << "\n";
    }
}

}  // namespace icvt
