#include "icvt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "icvt/errors.hpp"
#include "icvt/layout_io.hpp"
#include "icvt/tensor.hpp"

namespace fs = std::filesystem;

namespace icvt {

const char* placement_name(Placement p) {
    switch (p) {
        case Placement::Top: return "top";
        case Placement::Bottom: return "bottom";
        case Placement::Middle: return "middle";
        case Placement::Random: return "random";
    }
    return "?";
}

Placement placement_from_name(const std::string& s) {
    if (s == "top") return Placement::Top;
    if (s == "bottom") return Placement::Bottom;
    if (s == "middle") return Placement::Middle;
    if (s == "random") return Placement::Random;
    throw std::invalid_argument("unknown placement mode: " + s);
}

void GenConfig::validate() const {
    if (H <= 0 || W <= 0 || patch <= 0 || H % patch != 0 || W % patch != 0)
        throw std::invalid_argument("image size must be divisible by patch size");
    if (min_texts < 1 || max_texts < min_texts) throw std::invalid_argument("bad text count range");
}

namespace {

// Coordinates are snapped to a dyadic grid so that the horizontal-flip
// augmentation (cx -> 1 - cx) is bit-exact in both directions.
double snap(double v) {
    const double grid = 1073741824.0;  // 2^30
    return std::round(v * grid) / grid;
}

struct Rgb {
    double r, g, b;
};

Rgb random_color(Rng& rng, double lo = 0.15, double hi = 0.95) {
    return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

struct Blob {
    bool ellipse;
    double cx, cy, w, h;  // normalized, like a layout box
    int row0 = 0, row1 = 0;

    bool contains(double x, double y) const {
        double a = w / 2, b = h / 2;
        double dx = x - cx, dy = y - cy;
        if (ellipse) return (dx * dx) / (a * a) + (dy * dy) / (b * b) <= 1.0;
        double rad = 0.25 * std::min(a, b);
        double ax = std::abs(dx), ay = std::abs(dy);
        if (ax > a || ay > b) return false;
        if (ax <= a - rad || ay <= b - rad) return true;
        double ex = ax - (a - rad), ey = ay - (b - rad);
        return ex * ex + ey * ey <= rad * rad;
    }
};

// vertical interval (normalized) that is free of blob rows
struct Band {
    double y0, y1;
    double height() const { return y1 - y0; }
};

}  // namespace

Sample generate_sample(uint64_t sample_seed, const GenConfig& config) {
    config.validate();
    Rng rng(mix_seeds(config.seed, sample_seed));
    const int H = config.H, W = config.W;

    // background gradient + noise
    Rgb ca = random_color(rng), cb = random_color(rng);
    double mix_dir = rng.uniform();  // blend along rows vs columns
    Image bg(H, W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double t = mix_dir * (r + 0.5) / H + (1 - mix_dir) * (c + 0.5) / W;
            double n = rng.uniform(-0.03, 0.03);
            bg.at(r, c, 0) = (float)std::clamp(ca.r + (cb.r - ca.r) * t + n, 0.0, 1.0);
            bg.at(r, c, 1) = (float)std::clamp(ca.g + (cb.g - ca.g) * t + n, 0.0, 1.0);
            bg.at(r, c, 2) = (float)std::clamp(ca.b + (cb.b - ca.b) * t + n, 0.0, 1.0);
        }

    Blob blob;
    blob.ellipse = rng.bernoulli(0.5);
    blob.w = rng.uniform(0.30, 0.55);
    blob.h = rng.uniform(0.22, 0.38);
    blob.cx = rng.uniform(0.35, 0.65);
    switch (config.placement) {
        case Placement::Top: blob.cy = rng.uniform(0.16, 0.28); break;
        case Placement::Bottom: blob.cy = rng.uniform(0.72, 0.84); break;
        case Placement::Middle: blob.cy = rng.uniform(0.45, 0.55); break;
        case Placement::Random: blob.cy = rng.uniform(0.20, 0.80); break;
    }
    Rgb blob_color = random_color(rng, 0.25, 1.0);

    // element geometry is drawn once; only the blob shrinks on retries.
    // The alignment anchor sits on a 128-bin center and text widths are even
    // bin multiples, so aligned edges survive coordinate quantization exactly.
    auto snap_center = [](double v) { return (std::round(v * 128.0 - 0.5) + 0.5) / 128.0; };
    auto snap_even = [](double v) { return std::max(2.0, std::round(v * 64.0)) / 64.0; };
    int align_left = rng.bernoulli(0.5);
    double align_x = snap_center(align_left ? rng.uniform(0.06, 0.28) : rng.uniform(0.40, 0.60));
    int n_texts = (int)rng.randint(config.min_texts, config.max_texts);
    struct TextSpec {
        double w, h, vgap;
        bool substrate;
        double pad_x, pad_y;
    };
    std::vector<TextSpec> texts(n_texts);
    for (auto& t : texts) {
        t.w = snap_even(rng.uniform(0.25, 0.60));
        t.h = rng.uniform(0.040, 0.080);
        t.vgap = rng.uniform(0.012, 0.030);
        t.substrate = rng.bernoulli(config.substrate_prob);
        t.pad_x = rng.uniform(0.015, 0.035);
        t.pad_y = rng.uniform(0.008, 0.018);
    }
    bool want_logo = rng.bernoulli(config.logo_prob);
    double logo_w = rng.uniform(0.08, 0.18);
    double logo_h = rng.uniform(0.030, 0.060);
    double logo_cx = rng.uniform(0.12, 0.88);

    const double pad_reserve = 0.020;  // row budget reserved for substrate padding
    const double edge = 0.02;
    const double gap_px = 2.0;

    auto band_rows = [&](const Blob& b) {
        // conservative row extent of the blob on the pixel grid
        int r0 = std::max(0, (int)std::floor((b.cy - b.h / 2) * H) - 1);
        int r1 = std::min(H - 1, (int)std::ceil((b.cy + b.h / 2) * H) + 1);
        Band top{edge, std::max(edge, (r0 - gap_px) / (double)H)};
        Band bottom{std::min(1.0 - edge, (r1 + 1 + gap_px) / (double)H), 1.0 - edge};
        return std::pair<Band, Band>(top, bottom);
    };

    std::vector<LayoutElement> elems;
    double shrink = 1.0;
    for (int attempt = 0;; ++attempt) {
        elems.clear();
        Blob b = blob;
        b.h *= shrink;
        b.w *= std::sqrt(shrink);
        auto [top_band, bottom_band] = band_rows(b);

        // logo sits at the top of whichever band is higher and tall enough
        std::vector<std::pair<Band, double>> cursors;  // band, next free y
        cursors.push_back({top_band, top_band.y0});
        cursors.push_back({bottom_band, bottom_band.y0});
        bool ok = true;

        double lh = logo_h * shrink;
        if (want_logo) {
            bool placed = false;
            for (auto& [band, cur] : cursors) {
                if (band.y1 - cur >= lh + 0.01) {
                    LayoutElement e;
                    e.cls = ElemClass::Logo;
                    e.w = logo_w;
                    e.h = lh;
                    e.cx = std::clamp(logo_cx, edge + e.w / 2, 1.0 - edge - e.w / 2);
                    e.cy = cur + lh / 2;
                    elems.push_back(e);
                    cur += lh + 0.015;
                    placed = true;
                    break;
                }
            }
            ok = ok && placed;
        }

        for (int i = 0; ok && i < n_texts; ++i) {
            const auto& t = texts[i];
            double th = t.h * shrink;
            double slot = th + 2 * pad_reserve + t.vgap;
            bool placed = false;
            for (auto& [band, cur] : cursors) {
                if (band.y1 - cur >= slot) {
                    LayoutElement e;
                    e.cls = ElemClass::Text;
                    e.h = th;
                    e.w = t.w;
                    if (align_left)
                        e.cx = std::clamp(align_x + e.w / 2, e.w / 2 + edge, 1.0 - edge - e.w / 2);
                    else
                        e.cx = std::clamp(align_x, e.w / 2 + edge, 1.0 - edge - e.w / 2);
                    e.cy = cur + pad_reserve + th / 2;
                    elems.push_back(e);
                    if (t.substrate) {
                        LayoutElement s;
                        s.cls = ElemClass::Substrate;
                        s.cx = e.cx;
                        s.cy = e.cy;
                        double px = std::min(t.pad_x, std::min(e.left() - 0.005, 0.995 - e.right()));
                        double py = std::min(t.pad_y, pad_reserve - 0.002);
                        if (px > 0.003 && py > 0.003) {
                            s.w = e.w + 2 * px;
                            s.h = e.h + 2 * py;
                            elems.push_back(s);
                        }
                    }
                    cur += slot;
                    placed = true;
                    break;
                }
            }
            ok = ok && placed;
        }

        if (ok) {
            blob = b;
            break;
        }
        // blob too large for the requested elements: shrink and retry, then
        // start dropping texts as a last resort
        shrink *= 0.82;
        if (attempt > 0 && attempt % 6 == 0 && n_texts > config.min_texts) --n_texts;
        if (attempt > 60) {  // unreachable in practice
            n_texts = 1;
            shrink = 0.3;
        }
    }

    // rasterize blob into image + mask, then zero everything outside the mask
    Sample s;
    s.saliency = Mask(H, W);
    s.image = Image(H, W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double x = (c + 0.5) / W, y = (r + 0.5) / H;
            if (blob.contains(x, y)) {
                s.saliency.at(r, c) = 1;
                double dx = (x - blob.cx) / (blob.w / 2), dy = (y - blob.cy) / (blob.h / 2);
                double shade = 1.0 - 0.35 * (dx * dx + dy * dy);
                double a = 0.85;
                for (int ch = 0; ch < 3; ++ch) {
                    double base = ch == 0 ? blob_color.r : ch == 1 ? blob_color.g : blob_color.b;
                    double v = a * base * shade + (1 - a) * bg.at(r, c, ch);
                    s.image.at(r, c, ch) = (float)std::clamp(v, 0.0, 1.0);
                }
            }
        }
    // ensure at least one salient pixel even for degenerate blobs
    if (s.saliency.count() == 0) {
        int rc = std::clamp((int)(blob.cy * H), 0, H - 1);
        int cc = std::clamp((int)(blob.cx * W), 0, W - 1);
        s.saliency.at(rc, cc) = 1;
        s.image.at(rc, cc, 0) = (float)blob_color.r;
        s.image.at(rc, cc, 1) = (float)blob_color.g;
        s.image.at(rc, cc, 2) = (float)blob_color.b;
    }

    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "s%016llx", (unsigned long long)sample_seed);
    s.id = idbuf;
    for (auto& e : elems) {
        e.cx = snap(e.cx);
        e.cy = snap(e.cy);
        e.w = snap(e.w);
        e.h = snap(e.h);
    }
    s.layout.elements = order_elements(elems);
    s.layout.canvas_w = W;
    s.layout.canvas_h = H;
    s.layout.id = s.id;
    return s;
}

void write_dataset(const std::vector<Sample>& samples, const std::string& dir,
                   const GenConfig& config) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::vector<Layout> layouts;
    for (const auto& s : samples) {
        write_png_rgb((fs::path(dir) / "images" / (s.id + ".png")).string(), s.image);
        write_png_gray((fs::path(dir) / "masks" / (s.id + ".png")).string(), s.saliency);
        layouts.push_back(s.layout);
    }
    write_layouts_jsonl((fs::path(dir) / "layouts.jsonl").string(), layouts);
    nlohmann::json meta;
    meta["count"] = samples.size();
    meta["config"] = {{"H", config.H},
                      {"W", config.W},
                      {"patch", config.patch},
                      {"placement", placement_name(config.placement)},
                      {"min_texts", config.min_texts},
                      {"max_texts", config.max_texts},
                      {"substrate_prob", config.substrate_prob},
                      {"logo_prob", config.logo_prob},
                      {"seed", config.seed}};
    std::ofstream f((fs::path(dir) / "meta.json").string());
    f << meta.dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write meta.json in " + dir);
}

std::vector<Sample> read_dataset(const std::string& dir) {
    std::vector<Sample> out;
    fs::path layouts_path = fs::path(dir) / "layouts.jsonl";
    if (!fs::exists(layouts_path)) return out;  // empty dataset
    std::vector<Layout> layouts = read_layouts_jsonl(layouts_path.string());
    out.reserve(layouts.size());
    for (auto& l : layouts) {
        Sample s;
        fs::path img = fs::path(dir) / "images" / (l.id + ".png");
        fs::path msk = fs::path(dir) / "masks" / (l.id + ".png");
        if (!fs::exists(img)) throw DataError("missing image file for sample '" + l.id + "'");
        if (!fs::exists(msk)) throw DataError("missing mask file for sample '" + l.id + "'");
        try {
            s.image = read_png_rgb(img.string());
            s.saliency = read_png_mask(msk.string());
        } catch (const std::exception& e) {
            throw DataError("corrupt files for sample '" + l.id + "': " + e.what());
        }
        if (s.image.h != s.saliency.h || s.image.w != s.saliency.w)
            throw DataError("image/mask size mismatch for sample '" + l.id + "'");
        s.id = l.id;
        s.layout = std::move(l);
        out.push_back(std::move(s));
    }
    return out;
}

double split_fraction(const std::string& id) {
    // FNV-1a, stable across platforms and runs
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : id) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return (double)(h % 1000000ull) / 1000000.0;
}

bool is_train_id(const std::string& id, double train_ratio) {
    return split_fraction(id) < train_ratio;
}

}  // namespace icvt
