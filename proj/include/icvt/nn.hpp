#pragma once

#include <fstream>
#include <map>
#include <memory>

#include "icvt/autograd.hpp"

namespace icvt {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Var<T> node;     // graph binding, refreshed by bind()
    Tensor<T> m, v;  // optimizer moments
    bool no_decay = false;
};

template <typename T>
struct ParamRegistry {
    std::vector<std::unique_ptr<Parameter<T>>> params;

    Parameter<T>* add(std::string name, Tensor<T> init, bool no_decay = false) {
        for (auto& p : params)
            if (p->name == name) throw std::logic_error("duplicate parameter: " + name);
        auto p = std::make_unique<Parameter<T>>();
        p->name = std::move(name);
        p->value = std::move(init);
        p->no_decay = no_decay;
        params.push_back(std::move(p));
        return params.back().get();
    }

    Parameter<T>* find(const std::string& name) {
        for (auto& p : params)
            if (p->name == name) return p.get();
        return nullptr;
    }

    // Fresh leaf nodes per forward pass; nodes alias the parameter storage.
    void bind(bool requires_grad) {
        for (auto& p : params) p->node = make_leaf(p->value, requires_grad);
    }

    int64_t count() const {
        int64_t n = 0;
        for (auto& p : params) n += p->value.numel();
        return n;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + path);
        const char magic[8] = {'I', 'C', 'V', 'T', 'P', 'A', 'R', '1'};
        f.write(magic, 8);
        uint64_t n = params.size();
        f.write((const char*)&n, 8);
        for (auto& p : params) {
            uint32_t nl = (uint32_t)p->name.size();
            f.write((const char*)&nl, 4);
            f.write(p->name.data(), nl);
            uint32_t nd = (uint32_t)p->value.shape.size();
            f.write((const char*)&nd, 4);
            for (int64_t d : p->value.shape) f.write((const char*)&d, 8);
            uint32_t esz = sizeof(T);
            f.write((const char*)&esz, 4);
            f.write((const char*)p->value.data(), sizeof(T) * p->value.numel());
        }
        if (!f) throw std::runtime_error("write failed: " + path);
    }

    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot read " + path);
        char magic[8];
        f.read(magic, 8);
        if (std::string(magic, 8) != "ICVTPAR1") throw std::runtime_error("bad parameter file: " + path);
        uint64_t n = 0;
        f.read((char*)&n, 8);
        std::map<std::string, Tensor<T>> loaded;
        for (uint64_t i = 0; i < n; ++i) {
            uint32_t nl = 0;
            f.read((char*)&nl, 4);
            std::string name(nl, '\0');
            f.read(name.data(), nl);
            uint32_t nd = 0;
            f.read((char*)&nd, 4);
            Shape s(nd);
            for (uint32_t j = 0; j < nd; ++j) f.read((char*)&s[j], 8);
            uint32_t esz = 0;
            f.read((char*)&esz, 4);
            if (esz != sizeof(T)) throw std::runtime_error("parameter dtype mismatch in " + path);
            Tensor<T> t(s);
            f.read((char*)t.data(), sizeof(T) * t.numel());
            loaded.emplace(std::move(name), std::move(t));
        }
        if (!f) throw std::runtime_error("truncated parameter file: " + path);
        for (auto& p : params) {
            auto it = loaded.find(p->name);
            if (it == loaded.end()) throw std::runtime_error("missing parameter " + p->name + " in " + path);
            if (it->second.shape != p->value.shape)
                throw std::runtime_error("shape mismatch for parameter " + p->name);
            p->value = it->second;
        }
    }
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / (double)(fan_in + fan_out));
    Tensor<T> t(Shape{fan_in, fan_out});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)rng.uniform(-limit, limit);
    return t;
}

template <typename T>
Tensor<T> normal_init(Shape s, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)rng.normal(0.0, stddev);
    return t;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    Parameter<T>* W = nullptr;
    Parameter<T>* b = nullptr;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t in, int64_t out, Rng& rng,
              bool bias = true) {
        W = reg.add(name + ".weight", xavier_uniform<T>(in, out, rng));
        if (bias) b = reg.add(name + ".bias", Tensor<T>(Shape{out}), true);
    }

    Var<T> forward(Var<T> x) const {
        auto y = matmul(x, W->node);
        return b ? add_bc(y, b->node) : y;
    }
};

template <typename T>
struct LayerNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t dim) {
        gamma = reg.add(name + ".gamma", Tensor<T>(Shape{dim}, T(1)), true);
        beta = reg.add(name + ".beta", Tensor<T>(Shape{dim}), true);
    }

    Var<T> forward(Var<T> x) const { return layer_norm(x, gamma->node, beta->node); }
};

enum class Activation { Relu, Gelu };

template <typename T>
struct FeedForward {
    Linear<T> fc1, fc2;
    Activation act = Activation::Relu;
    double drop = 0.0;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t dim, int64_t hidden,
              Activation a, double dropout_p, Rng& rng) {
        fc1.init(reg, name + ".fc1", dim, hidden, rng);
        fc2.init(reg, name + ".fc2", hidden, dim, rng);
        act = a;
        drop = dropout_p;
    }

    Var<T> forward(Var<T> x, Rng& rng, bool training) const {
        auto h = fc1.forward(x);
        h = act == Activation::Relu ? relu(h) : gelu(h);
        h = dropout(h, drop, rng, training);
        return fc2.forward(h);
    }
};

// Geometry fusion strategy used inside cross-attention.
enum class FusionMode { None, Adding, Concat, Manual };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::None: return "none";
        case FusionMode::Adding: return "adding";
        case FusionMode::Concat: return "concat";
        case FusionMode::Manual: return "manual";
    }
    return "?";
}

// Multi-head attention. Self-attention passes the same tensor for queries and
// memory. Cross-attention against visual memory supports an optional key
// positional encoding plus one of the geometry fusion modes:
//   adding: Q = Qc + Qg, K = Kc + Kg            (per-head dim d/H)
//   concat: Q = [Qc;Qg], K = [Kc;Kg] per head   (per-head dim 2d/H)
//   manual: logits = (QcKc^T + G) / sqrt(d/H)   (G supplied by the caller)
template <typename T>
struct MultiheadAttention {
    int64_t d_model = 0, heads = 0;
    FusionMode fusion = FusionMode::None;
    double drop = 0.0;
    Linear<T> wq, wk, wv, wo;
    Linear<T> wqg, wkg;  // geometry projections (adding/concat)

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t dim, int64_t n_heads,
              FusionMode f, int64_t d_g, double dropout_p, Rng& rng) {
        if (dim % n_heads != 0) throw std::invalid_argument("d_model must divide by heads");
        d_model = dim;
        heads = n_heads;
        fusion = f;
        drop = dropout_p;
        wq.init(reg, name + ".wq", dim, dim, rng);
        wk.init(reg, name + ".wk", dim, dim, rng);
        wv.init(reg, name + ".wv", dim, dim, rng);
        wo.init(reg, name + ".wo", dim, dim, rng);
        if (f == FusionMode::Adding || f == FusionMode::Concat) {
            if (f == FusionMode::Concat && d_g != dim)
                throw std::invalid_argument("concat fusion expects d_g == d_model");
            wqg.init(reg, name + ".wqg", d_g, dim, rng, /*bias=*/false);
            wkg.init(reg, name + ".wkg", d_g, dim, rng, /*bias=*/false);
        }
    }

    // (B,S,d) -> (B*H, S, dh)
    static Var<T> split_heads(Var<T> x, int64_t B, int64_t S, int64_t H, int64_t dh) {
        auto r = reshape(x, Shape{B, S, H, dh});
        auto p = permute_0213(r);
        return reshape(p, Shape{B * H, S, dh});
    }

    // shared-across-batch (S,d) -> (B*H, S, dh)
    static Var<T> split_heads_shared(Var<T> x, int64_t B, int64_t S, int64_t H, int64_t dh) {
        auto r = reshape(x, Shape{1, S, H, dh});
        auto p = permute_0213(r);               // (1,H,S,dh)
        auto t = tile_leading(reshape(p, Shape{H, S, dh}), B);  // (B,H,S,dh)
        return reshape(t, Shape{B * H, S, dh});
    }

    // x: (B,Tq,d) queries source; mem: (B,S,d) key/value source.
    // key_pos: optional (S,d), added to the key source before projection.
    // geo_q: optional (B,Tq,dg); geo_k: optional (S,dg).
    // manual_g: optional (B,Tq,S) nonnegative geometry logits.
    // extra_mask: optional additive mask; shape (Tq,S) broadcast over batch and
    // heads, or (B,Tq,S) broadcast over heads.
    // attn_out: if non-null, receives the post-softmax attention weights.
    Var<T> forward(Var<T> x, Var<T> mem, Var<T> key_pos, Var<T> geo_q, Var<T> geo_k,
                   Var<T> manual_g, const Tensor<T>* extra_mask, Rng& rng, bool training,
                   Tensor<T>* attn_out = nullptr) const {
        int64_t B = x->val.dim(0), Tq = x->val.dim(1);
        int64_t S = mem->val.dim(1);
        int64_t H = heads, dh = d_model / heads;

        auto q = wq.forward(x);
        auto k_src = key_pos ? add_bc(mem, key_pos) : mem;
        auto k = wk.forward(k_src);
        auto v = wv.forward(mem);

        Var<T> qg, kg;
        if (fusion == FusionMode::Adding || fusion == FusionMode::Concat) {
            if (!geo_q || !geo_k) throw std::invalid_argument("fusion mode requires geometry inputs");
            qg = matmul(geo_q, wqg.W->node);  // (B,Tq,d)
            kg = matmul(geo_k, wkg.W->node);  // (S,d)
        }
        if (fusion == FusionMode::Adding) {
            q = add(q, qg);
            k = add_bc(k, kg);
        }

        auto qh = split_heads(q, B, Tq, H, dh);
        auto kh = split_heads(k, B, S, H, dh);
        auto vh = split_heads(v, B, S, H, dh);

        T scale;
        if (fusion == FusionMode::Concat) {
            auto qgh = split_heads(qg, B, Tq, H, dh);
            auto kgh = split_heads_shared(kg, B, S, H, dh);
            qh = concat_last(qh, qgh);
            kh = concat_last(kh, kgh);
            scale = (T)(1.0 / std::sqrt((double)(2 * dh)));
        } else {
            scale = (T)(1.0 / std::sqrt((double)dh));
        }

        auto logits = matmul_nt(qh, kh);  // (B*H, Tq, S)
        if (fusion == FusionMode::Manual) {
            if (!manual_g) throw std::invalid_argument("manual fusion requires geometry term");
            logits = add_per_batch(logits, manual_g, H);
        }
        logits = mul_scalar(logits, scale);
        if (extra_mask) {
            auto m = make_const(*extra_mask);
            if (extra_mask->ndim() == 2)
                logits = add_bc(logits, m);
            else
                logits = add_per_batch(logits, m, H);
        }
        auto p = softmax_last(logits);
        if (attn_out) *attn_out = p->val.clone();
        p = dropout(p, drop, rng, training);
        auto ctx = matmul(p, vh);  // (B*H, Tq, dh)
        auto merged = reshape(permute_0213(reshape(ctx, Shape{B, H, Tq, dh})), Shape{B, Tq, d_model});
        return wo.forward(merged);
    }

    // plain self-attention with optional additive mask
    Var<T> self_forward(Var<T> x, const Tensor<T>* mask, Rng& rng, bool training) const {
        return forward(x, x, nullptr, nullptr, nullptr, nullptr, mask, rng, training);
    }
};

// Attention pooling with a single learned query: weights = softmax(qK^T/sqrt(d)),
// output = weights * V. With one valid key the output equals that key's value
// projection.
template <typename T>
struct AttentionPool {
    int64_t d_model = 0;
    Parameter<T>* query = nullptr;
    Linear<T> wk, wv;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t dim, Rng& rng) {
        d_model = dim;
        query = reg.add(name + ".query", normal_init<T>(Shape{1, dim}, rng), true);
        wk.init(reg, name + ".wk", dim, dim, rng);
        wv.init(reg, name + ".wv", dim, dim, rng);
    }

    // x: (B,S,d); pad_mask: optional (B,1,S) additive. Returns (B,d).
    Var<T> forward(Var<T> x, const Tensor<T>* pad_mask, Tensor<T>* attn_out = nullptr) const {
        int64_t B = x->val.dim(0), S = x->val.dim(1);
        if (S < 1) throw std::invalid_argument("attention pooling needs a non-empty sequence");
        auto k = wk.forward(x);
        auto v = wv.forward(x);
        auto q = tile_leading(query->node, B);  // (B,1,d)
        auto logits = mul_scalar(matmul_nt(q, k), (T)(1.0 / std::sqrt((double)d_model)));
        if (pad_mask) logits = add_per_batch(logits, make_const(*pad_mask), 1);
        auto p = softmax_last(logits);  // (B,1,S)
        if (attn_out) *attn_out = p->val.clone();
        auto out = matmul(p, v);  // (B,1,d)
        return reshape(out, Shape{B, d_model});
    }
};

}  // namespace icvt
