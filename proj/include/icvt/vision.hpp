#pragma once

#include "icvt/geoalign.hpp"
#include "icvt/image.hpp"
#include "icvt/nn.hpp"

namespace icvt {

// Per-patch conditioning produced from the saliency-masked image: content
// features, the 2D sinusoidal encoding added to cross-attention keys, and the
// geometry box of each patch cell.
template <typename T>
struct VisualCondition {
    Tensor<T> content;      // (L, d_model)
    Tensor<T> pos;          // (L, d_model)
    Tensor<T> patch_boxes;  // (L, 4)
    int rows = 0, cols = 0;
};

// Flatten an image into row-major P x P patches; within a patch the values
// are laid out as (row, col, channel).
template <typename T>
Tensor<T> patchify(const Image& img, int patch) {
    if (patch <= 0 || img.h % patch != 0 || img.w % patch != 0)
        throw std::invalid_argument("patchify: image size not divisible by patch size");
    int rows = img.h / patch, cols = img.w / patch;
    int64_t L = (int64_t)rows * cols;
    int64_t D = (int64_t)3 * patch * patch;
    Tensor<T> out(Shape{L, D});
    for (int pr = 0; pr < rows; ++pr)
        for (int pc = 0; pc < cols; ++pc) {
            T* dst = out.data() + ((int64_t)pr * cols + pc) * D;
            for (int r = 0; r < patch; ++r)
                for (int c = 0; c < patch; ++c)
                    for (int ch = 0; ch < 3; ++ch)
                        *dst++ = (T)img.at(pr * patch + r, pc * patch + c, ch);
        }
    return out;
}

// 2D sinusoidal positional encoding over the patch grid: d_model/2 dims for
// the row index and d_model/2 for the column index, concatenated. At grid
// cell (0,0) all sine components are 0 and all cosine components are 1.
template <typename T>
Tensor<T> sine_pos_2d(int rows, int cols, int64_t d_model) {
    if (d_model % 4 != 0) throw std::invalid_argument("sine_pos_2d: d_model must divide by 4");
    int64_t half = d_model / 2;
    Tensor<T> out(Shape{(int64_t)rows * cols, d_model});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            T* dst = out.data() + ((int64_t)r * cols + c) * d_model;
            for (int64_t i = 0; i < half / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * (double)i / (double)half);
                dst[2 * i] = (T)std::sin(r * freq);
                dst[2 * i + 1] = (T)std::cos(r * freq);
                dst[half + 2 * i] = (T)std::sin(c * freq);
                dst[half + 2 * i + 1] = (T)std::cos(c * freq);
            }
        }
    return out;
}

struct BackboneConfig {
    int patch = 16;
    int64_t d_v = 192;
    int layers = 4;
    int heads = 4;
    int64_t ffn_mult = 2;
    double dropout = 0.1;
};

// Pre-norm transformer encoder over patch embeddings with a learned patch
// projection and learned positional embedding. No class token; the full
// sequence feeds the adapter.
template <typename T>
struct ViTBackbone {
    BackboneConfig cfg;
    int64_t seq_len = 0;
    Linear<T> patch_proj;
    Parameter<T>* pos_embed = nullptr;
    struct Block {
        LayerNorm<T> ln1, ln2;
        MultiheadAttention<T> attn;
        FeedForward<T> ffn;
    };
    std::vector<Block> blocks;
    LayerNorm<T> final_ln;

    void init(ParamRegistry<T>& reg, const std::string& name, const BackboneConfig& c,
              int64_t patch_dim, int64_t len, Rng& rng) {
        cfg = c;
        seq_len = len;
        patch_proj.init(reg, name + ".patch_proj", patch_dim, c.d_v, rng);
        pos_embed = reg.add(name + ".pos_embed", normal_init<T>(Shape{len, c.d_v}, rng), true);
        blocks.resize(c.layers);
        for (int i = 0; i < c.layers; ++i) {
            std::string bn = name + ".block" + std::to_string(i);
            blocks[i].ln1.init(reg, bn + ".ln1", c.d_v);
            blocks[i].attn.init(reg, bn + ".attn", c.d_v, c.heads, FusionMode::None, 0, c.dropout,
                                rng);
            blocks[i].ln2.init(reg, bn + ".ln2", c.d_v);
            blocks[i].ffn.init(reg, bn + ".ffn", c.d_v, c.d_v * c.ffn_mult, Activation::Gelu,
                               c.dropout, rng);
        }
        final_ln.init(reg, name + ".final_ln", c.d_v);
    }

    // patches: (B, L, patch_dim) -> (B, L, d_v)
    Var<T> forward(Var<T> patches, Rng& rng, bool training) const {
        auto x = patch_proj.forward(patches);
        x = add_bc(x, pos_embed->node);
        for (const auto& b : blocks) {
            auto h = b.attn.self_forward(b.ln1.forward(x), nullptr, rng, training);
            x = add(x, dropout(h, cfg.dropout, rng, training));
            auto f = b.ffn.forward(b.ln2.forward(x), rng, training);
            x = add(x, dropout(f, cfg.dropout, rng, training));
        }
        return final_ln.forward(x);
    }
};

struct AdapterConfig {
    int layers = 1;
    int heads = 4;
    int64_t ffn_mult = 2;
    double dropout = 0.1;
};

// Transformer encoder stage after the backbone plus a linear projection from
// the backbone width to the model dimension.
template <typename T>
struct Adapter {
    AdapterConfig cfg;
    struct Block {
        LayerNorm<T> ln1, ln2;
        MultiheadAttention<T> attn;
        FeedForward<T> ffn;
    };
    std::vector<Block> blocks;
    LayerNorm<T> final_ln;
    Linear<T> out_proj;

    void init(ParamRegistry<T>& reg, const std::string& name, const AdapterConfig& c, int64_t d_v,
              int64_t d_model, Rng& rng) {
        cfg = c;
        blocks.resize(c.layers);
        for (int i = 0; i < c.layers; ++i) {
            std::string bn = name + ".block" + std::to_string(i);
            blocks[i].ln1.init(reg, bn + ".ln1", d_v);
            blocks[i].attn.init(reg, bn + ".attn", d_v, c.heads, FusionMode::None, 0, c.dropout, rng);
            blocks[i].ln2.init(reg, bn + ".ln2", d_v);
            blocks[i].ffn.init(reg, bn + ".ffn", d_v, d_v * c.ffn_mult, Activation::Gelu, c.dropout,
                               rng);
        }
        final_ln.init(reg, name + ".final_ln", d_v);
        out_proj.init(reg, name + ".out_proj", d_v, d_model, rng);
    }

    // (B, L, d_v) -> (B, L, d_model)
    Var<T> forward(Var<T> features, Rng& rng, bool training) const {
        auto x = features;
        for (const auto& b : blocks) {
            auto h = b.attn.self_forward(b.ln1.forward(x), nullptr, rng, training);
            x = add(x, dropout(h, cfg.dropout, rng, training));
            auto f = b.ffn.forward(b.ln2.forward(x), rng, training);
            x = add(x, dropout(f, cfg.dropout, rng, training));
        }
        return out_proj.forward(final_ln.forward(x));
    }
};

}  // namespace icvt
