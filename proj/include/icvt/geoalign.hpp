#pragma once

#include "icvt/nn.hpp"

namespace icvt {

// ---------------------------------------------------------------------------
// Patch geometry
// ---------------------------------------------------------------------------

// Center/size boxes of the patch grid cells, row-major to match patchify.
// Box j at grid cell (r,c): cx=(c+0.5)/cols, cy=(r+0.5)/rows, w=1/cols,
// h=1/rows.
template <typename T = double>
Tensor<T> patch_boxes(int rows, int cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("patch_boxes: grid must be >= 1x1");
    Tensor<T> out(Shape{(int64_t)rows * cols, 4});
    int64_t j = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c, ++j) {
            out[j * 4 + 0] = (T)((c + 0.5) / cols);
            out[j * 4 + 1] = (T)((r + 0.5) / rows);
            out[j * 4 + 2] = (T)(1.0 / cols);
            out[j * 4 + 3] = (T)(1.0 / rows);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Geometry embeddings
// ---------------------------------------------------------------------------

enum class GeoEmbedMode { Sine, Learned };

inline const char* geo_embed_mode_name(GeoEmbedMode m) {
    return m == GeoEmbedMode::Sine ? "sine" : "learned";
}

// Fixed sinusoidal embedding of a box: each of (cx, cy, w, h) is mapped to
// d_g/4 dims as interleaved sin/cos pairs, then concatenated.
template <typename T>
Tensor<T> sine_box_embedding(const Tensor<T>& boxes, int64_t d_g) {
    if (d_g % 4 != 0) throw std::invalid_argument("sine geometry embedding needs d_g % 4 == 0");
    if (boxes.dim(-1) != 4) throw std::invalid_argument("boxes must be (...,4)");
    int64_t N = boxes.numel() / 4;
    int64_t per = d_g / 4;
    Shape os(boxes.shape.begin(), boxes.shape.end() - 1);
    os.push_back(d_g);
    Tensor<T> out(os);
    const double two_pi = 6.283185307179586477;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < 4; ++k) {
            double v = (double)boxes[n * 4 + k] * two_pi;
            T* dst = out.data() + n * d_g + k * per;
            for (int64_t i = 0; i < per / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * (double)i / (double)per);
                dst[2 * i] = (T)std::sin(v * freq);
                dst[2 * i + 1] = (T)std::cos(v * freq);
            }
        }
    return out;
}

// Embeds boxes into R^{d_g}, either with the fixed sinusoidal map or a
// learned projection of the raw (cx,cy,w,h).
template <typename T>
struct GeometryEmbed {
    GeoEmbedMode mode = GeoEmbedMode::Sine;
    int64_t d_g = 0;
    Linear<T> proj;  // learned mode only

    void init(ParamRegistry<T>& reg, const std::string& name, GeoEmbedMode m, int64_t dim,
              Rng& rng) {
        mode = m;
        d_g = dim;
        if (mode == GeoEmbedMode::Sine && dim % 4 != 0)
            throw std::invalid_argument("sine geometry embedding needs d_g % 4 == 0");
        if (mode == GeoEmbedMode::Learned) proj.init(reg, name + ".proj", 4, dim, rng, /*bias=*/false);
    }

    // boxes: (...,4) constant tensor -> Var (..., d_g)
    Var<T> embed(const Tensor<T>& boxes) const {
        if (mode == GeoEmbedMode::Sine) return make_const(sine_box_embedding(boxes, d_g));
        return matmul(make_const(boxes), proj.W->node);
    }
};

// ---------------------------------------------------------------------------
// Relative geometry (manual fusion)
// ---------------------------------------------------------------------------

// r_ij = (log(max(|cx_i-cx_j|,eps)/w_i), log(max(|cy_i-cy_j|,eps)/h_i),
//         log(w_i/w_j), log(h_i/h_j)), i = layout boxes, j = patch cells.
template <typename T>
Tensor<T> relative_geometry(const Tensor<T>& layout_boxes, const Tensor<T>& patch_boxes_t,
                            double eps = 1e-3) {
    if (layout_boxes.dim(-1) != 4 || patch_boxes_t.dim(-1) != 4)
        throw std::invalid_argument("relative_geometry: boxes must be (...,4)");
    if (eps <= 0) throw std::invalid_argument("relative_geometry: eps must be positive");
    int64_t Ti = layout_boxes.numel() / 4;
    int64_t L = patch_boxes_t.numel() / 4;
    for (int64_t i = 0; i < Ti; ++i)
        if (layout_boxes[i * 4 + 2] <= 0 || layout_boxes[i * 4 + 3] <= 0)
            throw std::invalid_argument("relative_geometry: nonpositive layout box size");
    for (int64_t j = 0; j < L; ++j)
        if (patch_boxes_t[j * 4 + 2] <= 0 || patch_boxes_t[j * 4 + 3] <= 0)
            throw std::invalid_argument("relative_geometry: nonpositive patch box size");
    Tensor<T> out(Shape{Ti, L, 4});
    for (int64_t i = 0; i < Ti; ++i) {
        double cxi = layout_boxes[i * 4 + 0], cyi = layout_boxes[i * 4 + 1];
        double wi = layout_boxes[i * 4 + 2], hi = layout_boxes[i * 4 + 3];
        for (int64_t j = 0; j < L; ++j) {
            double cxj = patch_boxes_t[j * 4 + 0], cyj = patch_boxes_t[j * 4 + 1];
            double wj = patch_boxes_t[j * 4 + 2], hj = patch_boxes_t[j * 4 + 3];
            T* r = out.data() + (i * L + j) * 4;
            r[0] = (T)std::log(std::max(std::abs(cxi - cxj), eps) / wi);
            r[1] = (T)std::log(std::max(std::abs(cyi - cyj), eps) / hi);
            r[2] = (T)std::log(wi / wj);
            r[3] = (T)std::log(hi / hj);
        }
    }
    return out;
}

// G_ij = ReLU(w_g^T FC(r_ij)): a 4->hidden linear layer followed by a learned
// functional and a ReLU, producing one nonnegative logit per (layout, patch)
// pair. G never sees content features, so its gradient w.r.t. them is zero by
// construction.
template <typename T>
struct ManualGeometryHead {
    Linear<T> fc;              // 4 -> hidden
    Parameter<T>* wg = nullptr;  // (hidden, 1)
    int64_t hidden = 64;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t hidden_dim, Rng& rng) {
        hidden = hidden_dim;
        fc.init(reg, name + ".fc", 4, hidden_dim, rng);
        wg = reg.add(name + ".wg", xavier_uniform<T>(hidden_dim, 1, rng));
    }

    // r: (...,4) constant -> Var (...) with last dim removed
    Var<T> forward(const Tensor<T>& r) const {
        int64_t rows = r.numel() / 4;
        auto flat = make_const(r.reshaped(Shape{rows, 4}));
        auto h = fc.forward(flat);
        auto g = relu(matmul(h, wg->node));  // (rows, 1)
        Shape os(r.shape.begin(), r.shape.end() - 1);
        return reshape(g, os);
    }
};

// ---------------------------------------------------------------------------
// Standalone fused cross-attention (single-head math level)
// ---------------------------------------------------------------------------

template <typename T>
void softmax_rows_inplace(Tensor<T>& m) {
    int64_t C = m.dim(-1);
    int64_t R = m.numel() / C;
    for (int64_t r = 0; r < R; ++r) {
        T* x = m.data() + r * C;
        T mx = x[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        T sum = 0;
        for (int64_t c = 0; c < C; ++c) {
            x[c] = std::exp(x[c] - mx);
            sum += x[c];
        }
        for (int64_t c = 0; c < C; ++c) x[c] /= sum;
    }
}

namespace detail {
template <typename T>
Tensor<T> plain_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    if (b.dim(1) != K) throw std::invalid_argument("fusion: dimension mismatch");
    Tensor<T> c(Shape{M, N});
    gemm_nt_serial(M, N, K, a.data(), K, b.data(), K, c.data(), N, false);
    return c;
}
template <typename T>
Tensor<T> plain_matmul(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K) throw std::invalid_argument("fusion: dimension mismatch");
    Tensor<T> c(Shape{M, N});
    gemm_nn_serial(M, N, K, a.data(), K, b.data(), N, c.data(), N, false);
    return c;
}
}  // namespace detail

// Adding fusion: logits = (Qc+Qg)(Kc+Kg)^T / sqrt(d). The logits decompose
// exactly into content, geometry and cross terms.
template <typename T>
Tensor<T> fuse_adding_logits(const Tensor<T>& qc, const Tensor<T>& qg, const Tensor<T>& kc,
                             const Tensor<T>& kg) {
    if (qc.shape != qg.shape || kc.shape != kg.shape || qc.dim(1) != kc.dim(1))
        throw std::invalid_argument("fuse_adding: dimension mismatch");
    int64_t Tq = qc.dim(0), d = qc.dim(1), S = kc.dim(0);
    Tensor<T> q(Shape{Tq, d}), k(Shape{S, d});
    for (int64_t i = 0; i < q.numel(); ++i) q[i] = qc[i] + qg[i];
    for (int64_t i = 0; i < k.numel(); ++i) k[i] = kc[i] + kg[i];
    Tensor<T> logits = detail::plain_matmul_nt(q, k);
    T scale = (T)(1.0 / std::sqrt((double)d));
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] *= scale;
    return logits;
}

template <typename T>
Tensor<T> fuse_adding(const Tensor<T>& qc, const Tensor<T>& qg, const Tensor<T>& kc,
                      const Tensor<T>& kg, const Tensor<T>& vc) {
    if (vc.dim(0) != kc.dim(0)) throw std::invalid_argument("fuse_adding: value count mismatch");
    Tensor<T> a = fuse_adding_logits(qc, qg, kc, kg);
    softmax_rows_inplace(a);
    return detail::plain_matmul(a, vc);
}

// Concat fusion: Q = [Qc;Qg], K = [Kc;Kg], so the logits are exactly
// (QcKc^T + QgKg^T)/sqrt(dc+dg) with no cross term.
template <typename T>
Tensor<T> fuse_concat_logits(const Tensor<T>& qc, const Tensor<T>& qg, const Tensor<T>& kc,
                             const Tensor<T>& kg) {
    if (qc.dim(1) != kc.dim(1) || qg.dim(1) != kg.dim(1) || qc.dim(0) != qg.dim(0) ||
        kc.dim(0) != kg.dim(0))
        throw std::invalid_argument("fuse_concat: dimension mismatch");
    int64_t Tq = qc.dim(0), dc = qc.dim(1), dg = qg.dim(1), S = kc.dim(0);
    Tensor<T> q(Shape{Tq, dc + dg}), k(Shape{S, dc + dg});
    for (int64_t i = 0; i < Tq; ++i) {
        std::memcpy(q.data() + i * (dc + dg), qc.data() + i * dc, sizeof(T) * dc);
        std::memcpy(q.data() + i * (dc + dg) + dc, qg.data() + i * dg, sizeof(T) * dg);
    }
    for (int64_t i = 0; i < S; ++i) {
        std::memcpy(k.data() + i * (dc + dg), kc.data() + i * dc, sizeof(T) * dc);
        std::memcpy(k.data() + i * (dc + dg) + dc, kg.data() + i * dg, sizeof(T) * dg);
    }
    Tensor<T> logits = detail::plain_matmul_nt(q, k);
    T scale = (T)(1.0 / std::sqrt((double)(dc + dg)));
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] *= scale;
    return logits;
}

template <typename T>
Tensor<T> fuse_concat(const Tensor<T>& qc, const Tensor<T>& qg, const Tensor<T>& kc,
                      const Tensor<T>& kg, const Tensor<T>& vc) {
    if (vc.dim(0) != kc.dim(0)) throw std::invalid_argument("fuse_concat: value count mismatch");
    Tensor<T> a = fuse_concat_logits(qc, qg, kc, kg);
    softmax_rows_inplace(a);
    return detail::plain_matmul(a, vc);
}

// Manual fusion: logits = (QcKc^T + G)/sqrt(d) with a precomputed geometry
// term G.
template <typename T>
Tensor<T> fuse_manual(const Tensor<T>& qc, const Tensor<T>& kc, const Tensor<T>& vc,
                      const Tensor<T>& g) {
    if (qc.dim(1) != kc.dim(1)) throw std::invalid_argument("fuse_manual: dimension mismatch");
    if (g.dim(0) != qc.dim(0) || g.dim(1) != kc.dim(0))
        throw std::invalid_argument("fuse_manual: geometry term shape mismatch");
    Tensor<T> logits = detail::plain_matmul_nt(qc, kc);
    T scale = (T)(1.0 / std::sqrt((double)qc.dim(1)));
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = (logits[i] + g[i]) * scale;
    softmax_rows_inplace(logits);
    return detail::plain_matmul(logits, vc);
}

// ---------------------------------------------------------------------------
// Ablation variants
// ---------------------------------------------------------------------------

// Config-selectable rows of the fusion/embedding grid.
struct AblationVariant {
    FusionMode fusion = FusionMode::None;
    GeoEmbedMode geo = GeoEmbedMode::Sine;
    bool key_pe = true;
    std::string name = "baseline";
};

inline AblationVariant parse_variant(const std::string& s) {
    AblationVariant v;
    v.name = s;
    if (s == "baseline") {
        v.fusion = FusionMode::None;
    } else if (s == "baseline-no-pe") {
        v.fusion = FusionMode::None;
        v.key_pe = false;
    } else if (s == "adding-learned") {
        v.fusion = FusionMode::Adding;
        v.geo = GeoEmbedMode::Learned;
    } else if (s == "adding-sine") {
        v.fusion = FusionMode::Adding;
        v.geo = GeoEmbedMode::Sine;
    } else if (s == "concat-learned") {
        v.fusion = FusionMode::Concat;
        v.geo = GeoEmbedMode::Learned;
    } else if (s == "concat-sine") {
        v.fusion = FusionMode::Concat;
        v.geo = GeoEmbedMode::Sine;
    } else if (s == "manual") {
        v.fusion = FusionMode::Manual;
    } else {
        throw std::invalid_argument("unknown model variant: " + s);
    }
    return v;
}

inline std::vector<std::string> all_variant_names() {
    return {"baseline",      "baseline-no-pe", "adding-learned", "adding-sine",
            "concat-learned", "concat-sine",    "manual"};
}

}  // namespace icvt
