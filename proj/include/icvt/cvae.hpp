#pragma once

#include "icvt/geoalign.hpp"
#include "icvt/layout.hpp"
#include "icvt/vision.hpp"

namespace icvt {

// ---------------------------------------------------------------------------
// Latent-space plumbing shared by the model, the tests and the tools.
// ---------------------------------------------------------------------------

struct PosteriorParams {
    std::vector<double> mu;
    std::vector<double> log_sigma;
};

enum class PriorKind { StandardNormal, Learned };

// z = mu + exp(log_sigma) * noise, elementwise
inline std::vector<double> reparameterize(const PosteriorParams& p,
                                          const std::vector<double>& noise) {
    if (noise.size() != p.mu.size() || p.log_sigma.size() != p.mu.size())
        throw std::invalid_argument("reparameterize: dimension mismatch");
    std::vector<double> z(p.mu.size());
    for (size_t i = 0; i < z.size(); ++i) z[i] = p.mu[i] + std::exp(p.log_sigma[i]) * noise[i];
    return z;
}

// KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) for diagonal Gaussians
inline double kl_divergence(const PosteriorParams& q, const PosteriorParams& p) {
    if (q.mu.size() != p.mu.size()) throw std::invalid_argument("kl_divergence: dim mismatch");
    double kl = 0;
    for (size_t i = 0; i < q.mu.size(); ++i) {
        double lsq = q.log_sigma[i], lsp = p.log_sigma[i];
        double vq = std::exp(2 * lsq), vp = std::exp(2 * lsp);
        double dm = q.mu[i] - p.mu[i];
        kl += lsp - lsq + (vq + dm * dm) / (2 * vp) - 0.5;
    }
    return kl;
}

// KL against the standard normal prior: 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)
inline double kl_standard(const PosteriorParams& q) {
    double kl = 0;
    for (size_t i = 0; i < q.mu.size(); ++i) {
        double ls = q.log_sigma[i];
        kl += 0.5 * (q.mu[i] * q.mu[i] + std::exp(2 * ls) - 1.0 - 2 * ls);
    }
    return kl;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int64_t d_attr = 32;  // per-attribute embedding; model dim is 5x this
    int64_t d_z = 32;
    int enc_layers = 4;
    int dec_layers = 4;
    int heads = 8;
    int64_t ffn_mult = 2;
    int bins = 128;
    int max_elements = 20;
    double dropout = 0.1;
    bool continuous_coords = false;  // regression heads instead of bin classifiers
    int64_t manual_hidden = 64;
    PriorKind prior = PriorKind::StandardNormal;
    AblationVariant variant;
    BackboneConfig backbone;
    AdapterConfig adapter;
    int image_h = 96, image_w = 128;

    int64_t d_model() const { return 5 * d_attr; }
    int64_t d_g() const { return d_model(); }
    int grid_rows() const { return image_h / backbone.patch; }
    int grid_cols() const { return image_w / backbone.patch; }
    int64_t grid_len() const { return (int64_t)grid_rows() * grid_cols(); }
    Vocabulary vocab() const { return Vocabulary{bins}; }

    void validate() const {
        if (d_attr < 1 || d_z < 1 || heads < 1) throw std::invalid_argument("bad model dims");
        if (d_model() % heads != 0) throw std::invalid_argument("heads must divide model dim");
        if (bins < 2) throw std::invalid_argument("need at least 2 coordinate bins");
        if (image_h % backbone.patch != 0 || image_w % backbone.patch != 0)
            throw std::invalid_argument("image size must divide by patch size");
    }
};

// Decoder head logits for one forward pass.
template <typename T>
struct DecoderLogits {
    Var<T> cls;                  // (B, S, 6)
    std::array<Var<T>, 4> coord; // (B, S, bins) each, or (B, S, 1) in continuous mode
};

// Options for autoregressive sampling.
struct SampleOpts {
    double temperature = 1.0;  // 0 means argmax
    int max_len = -1;          // defaults to max_elements
};

// ---------------------------------------------------------------------------
// The full conditional model: visual backbone + adapter, posterior encoder
// with attention pooling, latent layer, and the autoregressive decoder whose
// begin-of-sequence slot is the projected latent code.
// ---------------------------------------------------------------------------

template <typename T>
struct IcvtModel {
    ModelConfig cfg;
    ParamRegistry<T> params;

    ViTBackbone<T> backbone;
    Adapter<T> adapter;

    Parameter<T>* class_emb = nullptr;            // (6, d_attr)
    std::array<Parameter<T>*, 4> coord_emb{};     // (bins+1, d_attr) each (discrete mode)
    std::array<Linear<T>, 4> coord_in;            // 1 -> d_attr (continuous mode)

    GeometryEmbed<T> geo_embed;
    Parameter<T>* bos_geo = nullptr;  // learned geometry query for the z slot

    struct Block {
        LayerNorm<T> ln1, ln2, ln3;
        MultiheadAttention<T> self_attn;
        MultiheadAttention<T> cross_attn;
        ManualGeometryHead<T> manual;
        FeedForward<T> ffn;
    };
    std::vector<Block> enc_blocks, dec_blocks;
    LayerNorm<T> enc_final, dec_final;

    AttentionPool<T> aap;
    Linear<T> mu_head, logsigma_head;
    Linear<T> z_proj;
    Linear<T> prior_net;  // pooled cond -> (mu_p, log_sigma_p), learned prior only

    Linear<T> head_cls;
    std::array<Linear<T>, 4> head_coord;

    Tensor<T> pos_enc;       // (L, d_model)
    Tensor<T> patch_boxes_;  // (L, 4)

    double eps_rel_geom = 1e-3;

    void init(const ModelConfig& c, uint64_t seed) {
        cfg = c;
        cfg.validate();
        Rng rng(mix_seeds(seed, 0x1c7a));
        int64_t d = cfg.d_model();
        int64_t patch_dim = 3LL * cfg.backbone.patch * cfg.backbone.patch;

        backbone.init(params, "backbone", cfg.backbone, patch_dim, cfg.grid_len(), rng);
        adapter.init(params, "adapter", cfg.adapter, cfg.backbone.d_v, d, rng);

        class_emb = params.add("embed.class", normal_init<T>(Shape{6, cfg.d_attr}, rng), true);
        if (cfg.continuous_coords) {
            const char* names[4] = {"embed.cx", "embed.cy", "embed.w", "embed.h"};
            for (int i = 0; i < 4; ++i) coord_in[i].init(params, names[i], 1, cfg.d_attr, rng);
        } else {
            const char* names[4] = {"embed.x", "embed.y", "embed.w", "embed.h"};
            for (int i = 0; i < 4; ++i)
                coord_emb[i] = params.add(names[i],
                                          normal_init<T>(Shape{cfg.bins + 1, cfg.d_attr}, rng), true);
        }

        geo_embed.init(params, "geo", cfg.variant.geo, cfg.d_g(), rng);
        bos_geo = params.add("geo.bos", normal_init<T>(Shape{cfg.d_g()}, rng), true);

        auto init_block = [&](Block& b, const std::string& bn) {
            b.ln1.init(params, bn + ".ln1", d);
            b.self_attn.init(params, bn + ".self", d, cfg.heads, FusionMode::None, 0, cfg.dropout,
                             rng);
            b.ln2.init(params, bn + ".ln2", d);
            b.cross_attn.init(params, bn + ".cross", d, cfg.heads, cfg.variant.fusion, cfg.d_g(),
                              cfg.dropout, rng);
            if (cfg.variant.fusion == FusionMode::Manual)
                b.manual.init(params, bn + ".manual", cfg.manual_hidden, rng);
            b.ln3.init(params, bn + ".ln3", d);
            b.ffn.init(params, bn + ".ffn", d, d * cfg.ffn_mult, Activation::Relu, cfg.dropout, rng);
        };
        enc_blocks.resize(cfg.enc_layers);
        for (int i = 0; i < cfg.enc_layers; ++i) init_block(enc_blocks[i], "enc.block" + std::to_string(i));
        enc_final.init(params, "enc.final_ln", d);
        dec_blocks.resize(cfg.dec_layers);
        for (int i = 0; i < cfg.dec_layers; ++i) init_block(dec_blocks[i], "dec.block" + std::to_string(i));
        dec_final.init(params, "dec.final_ln", d);

        aap.init(params, "aap", d, rng);
        mu_head.init(params, "posterior.mu", d, cfg.d_z, rng);
        logsigma_head.init(params, "posterior.logsigma", d, cfg.d_z, rng);
        z_proj.init(params, "decoder.z_proj", cfg.d_z, d, rng);
        if (cfg.prior == PriorKind::Learned) prior_net.init(params, "prior.net", d, 2 * cfg.d_z, rng);

        head_cls.init(params, "head.cls", d, 6, rng);
        const char* hn[4] = {"head.x", "head.y", "head.w", "head.h"};
        int64_t coord_out = cfg.continuous_coords ? 1 : cfg.bins;
        for (int i = 0; i < 4; ++i) head_coord[i].init(params, hn[i], d, coord_out, rng);

        pos_enc = sine_pos_2d<T>(cfg.grid_rows(), cfg.grid_cols(), d);
        patch_boxes_ = patch_boxes<T>(cfg.grid_rows(), cfg.grid_cols());
    }

    void bind(bool requires_grad) { params.bind(requires_grad); }

    // ------------------------------------------------------------------
    // conditioning
    // ------------------------------------------------------------------

    // images -> (B, L, d_model) content features; graph-connected so the
    // backbone trains jointly
    Var<T> encode_images(const std::vector<const Image*>& images, Rng& rng, bool training) const {
        int64_t B = (int64_t)images.size();
        int64_t L = cfg.grid_len();
        int64_t pd = 3LL * cfg.backbone.patch * cfg.backbone.patch;
        Tensor<T> patches(Shape{B, L, pd});
        for (int64_t b = 0; b < B; ++b) {
            Tensor<T> p = patchify<T>(*images[b], cfg.backbone.patch);
            std::memcpy(patches.data() + b * L * pd, p.data(), sizeof(T) * L * pd);
        }
        auto feats = backbone.forward(make_const(patches), rng, training);
        return adapter.forward(feats, rng, training);
    }

    // eval-mode conditioning for a single image; rebinds parameters, so do
    // not interleave with an in-flight training graph
    VisualCondition<T> make_condition(const Image& img) {
        bind(false);
        Rng rng(0);
        auto content = encode_images({&img}, rng, false);
        VisualCondition<T> vc;
        vc.content = content->val.reshaped(Shape{cfg.grid_len(), cfg.d_model()}).clone();
        vc.pos = pos_enc;
        vc.patch_boxes = patch_boxes_;
        vc.rows = cfg.grid_rows();
        vc.cols = cfg.grid_cols();
        return vc;
    }

    // ------------------------------------------------------------------
    // shared attention plumbing
    // ------------------------------------------------------------------

    Var<T> key_pos_var() const {
        return cfg.variant.key_pe ? make_const(pos_enc) : nullptr;
    }

    // geometry embedding of per-step boxes with the learned vector in slot 0
    // when with_bos_slot is set
    Var<T> geo_queries(const Tensor<T>& boxes, bool with_bos_slot) const {
        int64_t B = boxes.dim(0), S = boxes.dim(1);
        if (cfg.variant.fusion != FusionMode::Adding && cfg.variant.fusion != FusionMode::Concat)
            return nullptr;
        if (!with_bos_slot) return geo_embed.embed(boxes);
        Var<T> bos_row = tile_leading(reshape(bos_geo->node, Shape{1, cfg.d_g()}), B);  // (B,1,dg)
        if (S == 1) return bos_row;
        Tensor<T> rest(Shape{B, S - 1, 4});
        for (int64_t b = 0; b < B; ++b)
            std::memcpy(rest.data() + b * (S - 1) * 4, boxes.data() + (b * S + 1) * 4,
                        sizeof(T) * (S - 1) * 4);
        return concat_dim1(bos_row, geo_embed.embed(rest));
    }

    Var<T> geo_keys() const {
        if (cfg.variant.fusion != FusionMode::Adding && cfg.variant.fusion != FusionMode::Concat)
            return nullptr;
        return geo_embed.embed(patch_boxes_);
    }

    // manual geometry term G: (B,S,L) from per-step boxes; rows flagged in
    // no_box use the relative geometry of the full canvas box

    Var<T> manual_term(const Block& blk, const Tensor<T>& boxes) const {
        if (cfg.variant.fusion != FusionMode::Manual) return nullptr;
        Tensor<T> r(Shape{boxes.dim(0), boxes.dim(1), cfg.grid_len(), 4});
        int64_t per = boxes.dim(1) * cfg.grid_len() * 4;
        for (int64_t b = 0; b < boxes.dim(0); ++b) {
            Tensor<T> lb(Shape{boxes.dim(1), 4});
            std::memcpy(lb.data(), boxes.data() + b * boxes.dim(1) * 4, sizeof(T) * boxes.dim(1) * 4);
            Tensor<T> rb = relative_geometry(lb, patch_boxes_, eps_rel_geom);
            std::memcpy(r.data() + b * per, rb.data(), sizeof(T) * per);
        }
        auto g = blk.manual.forward(r);  // (B,S,L)
        return reshape(g, Shape{boxes.dim(0), boxes.dim(1), cfg.grid_len()});
    }

    // one stack of blocks (encoder or decoder)
    Var<T> run_blocks(const std::vector<Block>& blocks, const LayerNorm<T>& final_ln, Var<T> x,
                      Var<T> cond, const Tensor<T>* self_mask, const Tensor<T>& step_boxes,
                      bool with_bos_slot, Rng& rng, bool training) const {
        Var<T> kp = key_pos_var();
        Var<T> gq = geo_queries(step_boxes, with_bos_slot);
        Var<T> gk = geo_keys();
        for (const auto& b : blocks) {
            auto h = b.self_attn.self_forward(b.ln1.forward(x), self_mask, rng, training);
            x = add(x, dropout(h, cfg.dropout, rng, training));
            Var<T> g = manual_term(b, step_boxes);
            auto c = b.cross_attn.forward(b.ln2.forward(x), cond, kp, gq, gk, g, nullptr, rng,
                                          training);
            x = add(x, dropout(c, cfg.dropout, rng, training));
            auto f = b.ffn.forward(b.ln3.forward(x), rng, training);
            x = add(x, dropout(f, cfg.dropout, rng, training));
        }
        return final_ln.forward(x);
    }

    // ------------------------------------------------------------------
    // embeddings
    // ------------------------------------------------------------------

    // steps: (B,S) 5-tuples -> (B,S,d_model) by concatenating the five
    // attribute embeddings
    Var<T> embed_steps(const std::vector<std::array<int, 5>>& flat_steps, int64_t B,
                       int64_t S) const {
        std::vector<int> cls_idx(B * S);
        for (int64_t i = 0; i < B * S; ++i) cls_idx[i] = flat_steps[i][0];
        Var<T> e = embedding(class_emb->node, cls_idx);
        if (cfg.continuous_coords) {
            for (int k = 0; k < 4; ++k) {
                Tensor<T> v(Shape{B * S, 1});
                for (int64_t i = 0; i < B * S; ++i) {
                    int idx = flat_steps[i][k + 1];
                    v[i] = idx >= cfg.bins ? (T)0.5 : (T)dequantize(idx, cfg.bins);
                }
                e = concat_last(e, coord_in[k].forward(make_const(v)));
            }
        } else {
            for (int k = 0; k < 4; ++k) {
                std::vector<int> idx(B * S);
                for (int64_t i = 0; i < B * S; ++i) idx[i] = flat_steps[i][k + 1];
                e = concat_last(e, embedding(coord_emb[k]->node, idx));
            }
        }
        return reshape(e, Shape{B, S, cfg.d_model()});
    }

    // bin-center boxes of the embedded steps; framing steps get the full
    // canvas as a stand-in (they are either masked or replaced by the learned
    // BOS geometry slot)
    Tensor<T> step_boxes_of(const std::vector<std::array<int, 5>>& flat_steps, int64_t B,
                            int64_t S) const {
        Tensor<T> boxes(Shape{B, S, 4});
        for (int64_t i = 0; i < B * S; ++i) {
            const auto& st = flat_steps[i];
            bool framing = st[1] >= cfg.bins;
            for (int k = 0; k < 4; ++k)
                boxes[i * 4 + k] = framing ? (k < 2 ? (T)0.5 : (T)1.0)
                                           : (T)dequantize(st[k + 1], cfg.bins);
        }
        return boxes;
    }

    // ------------------------------------------------------------------
    // posterior encoder
    // ------------------------------------------------------------------

    // Batched encoder input: element steps padded to the batch max, with the
    // masks that keep padded rows out of attention and pooling.
    struct EncoderBatch {
        std::vector<std::array<int, 5>> steps;
        int64_t B = 0, S = 0;
        Tensor<T> self_mask;  // (B,S,S) additive
        Tensor<T> pool_mask;  // (B,1,S) additive
        Tensor<T> nonempty;   // (B) 1/0 flags
        Tensor<T> boxes;      // (B,S,4)
    };

    EncoderBatch make_encoder_batch(const std::vector<const Layout*>& layouts) const {
        EncoderBatch eb;
        eb.B = (int64_t)layouts.size();
        eb.S = 1;
        Vocabulary vocab = cfg.vocab();
        for (auto* l : layouts) eb.S = std::max<int64_t>(eb.S, (int64_t)l->size());
        eb.steps.assign(eb.B * eb.S, {Vocabulary::cls_pad, cfg.bins, cfg.bins, cfg.bins, cfg.bins});
        eb.self_mask = Tensor<T>(Shape{eb.B, eb.S, eb.S});
        eb.pool_mask = Tensor<T>(Shape{eb.B, (int64_t)1, eb.S});
        eb.nonempty = Tensor<T>(Shape{eb.B});
        const T ninf = -std::numeric_limits<T>::infinity();
        for (int64_t b = 0; b < eb.B; ++b) {
            const Layout& l = *layouts[b];
            int64_t n = (int64_t)l.size();
            eb.nonempty[b] = n > 0 ? T(1) : T(0);
            for (int64_t i = 0; i < n; ++i) {
                const auto& e = l.elements[i];
                check_element(e);
                eb.steps[b * eb.S + i] = {(int)e.cls, quantize(e.cx, vocab.bins),
                                          quantize(e.cy, vocab.bins), quantize(e.w, vocab.bins),
                                          quantize(e.h, vocab.bins)};
            }
            int64_t valid = std::max<int64_t>(n, 1);  // dummy row stays visible for empties
            for (int64_t i = 0; i < eb.S; ++i)
                for (int64_t j = 0; j < eb.S; ++j)
                    eb.self_mask[(b * eb.S + i) * eb.S + j] = j < valid ? T(0) : ninf;
            for (int64_t j = 0; j < eb.S; ++j) eb.pool_mask[b * eb.S + j] = j < valid ? T(0) : ninf;
        }
        eb.boxes = step_boxes_of(eb.steps, eb.B, eb.S);
        return eb;
    }

    // The joint layout-image sequence: self-attention over element steps
    // (no positional encoding, no causal mask), cross-attention to the
    // conditioning with the selected fusion, FFN; output length equals the
    // input length.
    Var<T> encoder_forward(const EncoderBatch& eb, Var<T> cond, Rng& rng, bool training) const {
        auto emb = embed_steps(eb.steps, eb.B, eb.S);
        return run_blocks(enc_blocks, enc_final, emb, cond, &eb.self_mask, eb.boxes,
                          /*with_bos_slot=*/false, rng, training);
    }

    // Batched posterior. Layouts with no elements skip the encoder: their
    // (mu, log sigma) are forced to the prior by masking, so they contribute
    // zero KL and decode from a pure prior draw.
    struct PosteriorOut {
        Var<T> mu, log_sigma;  // (B, d_z)
        Tensor<T> attn;        // pooling weights, for diagnostics
    };

    PosteriorOut encoder_posterior(const std::vector<const Layout*>& layouts, Var<T> cond,
                                   Rng& rng, bool training) const {
        EncoderBatch eb = make_encoder_batch(layouts);
        auto joint = encoder_forward(eb, cond, rng, training);
        PosteriorOut out;
        auto pooled = aap.forward(joint, &eb.pool_mask, &out.attn);
        auto mask_var = make_const(eb.nonempty);
        out.mu = row_scale(mu_head.forward(pooled), mask_var);
        out.log_sigma = row_scale(logsigma_head.forward(pooled), mask_var);
        return out;
    }

    // closed-form KL of the batched posterior against the configured prior,
    // summed over dims, averaged over the batch
    Var<T> kl_loss(const PosteriorOut& post, Var<T> cond) const {
        int64_t B = post.mu->val.dim(0);
        Var<T> mu = post.mu, ls = post.log_sigma;
        Var<T> kl_terms;
        if (cfg.prior == PriorKind::StandardNormal) {
            auto sig2 = exp_op(mul_scalar(ls, T(2)));
            auto t = add(mul(mu, mu), sig2);
            t = add(t, mul_scalar(ls, T(-2)));
            kl_terms = mul_scalar(add_scalar(t, T(-1)), T(0.5));
        } else {
            auto pooled = mean_mid(cond);  // (B, d_model)
            auto pp = prior_net.forward(pooled);
            auto mu_p = slice_last(pp, 0, cfg.d_z);
            auto ls_p = slice_last(pp, cfg.d_z, cfg.d_z);
            // lsp - lsq + (exp(2 lsq) + (mu_q - mu_p)^2) / (2 exp(2 lsp)) - 1/2
            auto dm = sub(mu, mu_p);
            auto num = add(exp_op(mul_scalar(ls, T(2))), mul(dm, dm));
            auto inv2vp = exp_op(mul_scalar(ls_p, T(-2)));
            kl_terms = add(sub(ls_p, ls), add_scalar(mul_scalar(mul(num, inv2vp), T(0.5)), T(-0.5)));
        }
        return mul_scalar(sum_all(kl_terms), T(1) / (T)B);
    }

    // ------------------------------------------------------------------
    // decoder
    // ------------------------------------------------------------------

    // input_steps: (B,S_in) teacher-forced inputs whose position 0 (the BOS
    // slot) is replaced by the projected latent code
    DecoderLogits<T> decoder_forward(const std::vector<std::array<int, 5>>& input_steps, int64_t B,
                                     int64_t S_in, Var<T> z, Var<T> cond, Rng& rng,
                                     bool training) const {
        if ((int64_t)input_steps.size() != B * S_in || S_in < 1)
            throw std::invalid_argument("decoder: bad input framing");
        for (int64_t b = 0; b < B; ++b)
            if (input_steps[b * S_in][0] != Vocabulary::cls_bos)
                throw std::invalid_argument("decoder: input must start with the BOS slot");
        auto z_row = reshape(z_proj.forward(z), Shape{B, (int64_t)1, cfg.d_model()});
        Var<T> emb;
        if (S_in > 1) {
            std::vector<std::array<int, 5>> rest(B * (S_in - 1));
            for (int64_t b = 0; b < B; ++b)
                for (int64_t s = 1; s < S_in; ++s) rest[b * (S_in - 1) + s - 1] = input_steps[b * S_in + s];
            emb = concat_dim1(z_row, embed_steps(rest, B, S_in - 1));
        } else {
            emb = z_row;
        }

        const T ninf = -std::numeric_limits<T>::infinity();
        Tensor<T> causal(Shape{S_in, S_in});
        for (int64_t i = 0; i < S_in; ++i)
            for (int64_t j = 0; j < S_in; ++j) causal[i * S_in + j] = j <= i ? T(0) : ninf;

        Tensor<T> boxes = step_boxes_of(input_steps, B, S_in);
        auto out = run_blocks(dec_blocks, dec_final, emb, cond, &causal, boxes,
                              /*with_bos_slot=*/true, rng, training);
        DecoderLogits<T> lg;
        lg.cls = head_cls.forward(out);
        for (int i = 0; i < 4; ++i) lg.coord[i] = head_coord[i].forward(out);
        return lg;
    }

    // ------------------------------------------------------------------
    // sampling
    // ------------------------------------------------------------------

    static int sample_categorical(const T* logits, int n, double temperature, Rng& rng) {
        if (temperature <= 0.0) {
            int best = 0;
            for (int i = 1; i < n; ++i)
                if (logits[i] > logits[best]) best = i;
            return best;
        }
        double mx = -1e300;
        for (int i = 0; i < n; ++i) mx = std::max(mx, (double)logits[i]);
        std::vector<double> p(n);
        double sum = 0;
        for (int i = 0; i < n; ++i) {
            p[i] = std::exp(((double)logits[i] - mx) / temperature);
            sum += p[i];
        }
        double u = rng.uniform() * sum;
        double acc = 0;
        for (int i = 0; i < n; ++i) {
            acc += p[i];
            if (u <= acc) return i;
        }
        return n - 1;
    }

    // Autoregressive generation from the latent code; stops at EOS or
    // max_len. Returns a canonically ordered layout. Classes are sampled over
    // the full 6-way vocabulary; non-design classes survive as elements that
    // the validity metrics reject.
    Layout generate(const VisualCondition<T>& vc, const std::vector<double>& z, SampleOpts opts,
                    Rng& rng) {
        auto steps = sample_steps(vc, z, {}, opts, rng);
        Layout out;
        out.canvas_w = cfg.image_w;
        out.canvas_h = cfg.image_h;
        for (const auto& st : steps) out.elements.push_back(step_to_element(st));
        out = canonicalize(out, cfg.bins);
        return out;
    }

    // Prefix-preserving completion: the partial's elements are teacher-forced
    // after the latent BOS slot and generation continues from there. If the
    // caller marks the partial as already complete it is returned unchanged.
    Layout complete(const VisualCondition<T>& vc, const Layout& partial, bool partial_complete,
                    const std::vector<double>& z, SampleOpts opts, Rng& rng) {
        int max_len = opts.max_len > 0 ? std::min(opts.max_len, cfg.max_elements) : cfg.max_elements;
        if ((int)partial.size() >= max_len + (partial_complete ? 1 : 0) && !partial_complete)
            throw std::invalid_argument("partial layout too long to complete");
        if (partial_complete) return partial;
        Vocabulary vocab = cfg.vocab();
        std::vector<std::array<int, 5>> prefix;
        for (const auto& e : partial.elements) {
            check_element(e);
            prefix.push_back({(int)e.cls, quantize(e.cx, vocab.bins), quantize(e.cy, vocab.bins),
                              quantize(e.w, vocab.bins), quantize(e.h, vocab.bins)});
        }
        auto steps = sample_steps(vc, z, prefix, opts, rng);
        Layout out;
        out.canvas_w = partial.canvas_w ? partial.canvas_w : cfg.image_w;
        out.canvas_h = partial.canvas_h ? partial.canvas_h : cfg.image_h;
        out.id = partial.id;
        out.elements = partial.elements;  // exact prefix, then the continuation
        for (size_t i = prefix.size(); i < steps.size(); ++i)
            out.elements.push_back(step_to_element(steps[i]));
        return out;
    }

    LayoutElement step_to_element(const std::array<int, 5>& st) const {
        LayoutElement e;
        e.cls = (ElemClass)st[0];
        e.cx = dequantize(st[1], cfg.bins);
        e.cy = dequantize(st[2], cfg.bins);
        e.w = dequantize(st[3], cfg.bins);
        e.h = dequantize(st[4], cfg.bins);
        return e;
    }

    std::vector<std::array<int, 5>> sample_steps(const VisualCondition<T>& vc,
                                                 const std::vector<double>& z,
                                                 std::vector<std::array<int, 5>> steps,
                                                 SampleOpts opts, Rng& rng) {
        if ((int64_t)z.size() != cfg.d_z) throw std::invalid_argument("latent size mismatch");
        int max_len = opts.max_len > 0 ? std::min(opts.max_len, cfg.max_elements) : cfg.max_elements;
        bind(false);
        Tensor<T> zt(Shape{(int64_t)1, cfg.d_z});
        for (int64_t i = 0; i < cfg.d_z; ++i) zt[i] = (T)z[i];
        auto zv = make_const(zt);
        auto cond = make_const(vc.content.reshaped(Shape{1, cfg.grid_len(), cfg.d_model()}));
        Rng drop_rng(0);

        while ((int)steps.size() < max_len) {
            int64_t S_in = (int64_t)steps.size() + 1;
            std::vector<std::array<int, 5>> inputs(S_in);
            inputs[0] = {Vocabulary::cls_bos, cfg.bins, cfg.bins, cfg.bins, cfg.bins};
            for (int64_t i = 1; i < S_in; ++i) inputs[i] = steps[i - 1];
            auto lg = decoder_forward(inputs, 1, S_in, zv, cond, drop_rng, false);
            int64_t last = S_in - 1;
            const T* cls_logits = lg.cls->val.data() + last * 6;
            int c = sample_categorical(cls_logits, 6, opts.temperature, rng);
            if (c == Vocabulary::cls_eos) break;
            std::array<int, 5> st;
            st[0] = c;
            for (int k = 0; k < 4; ++k) {
                if (cfg.continuous_coords) {
                    double v = std::clamp((double)lg.coord[k]->val[last], 0.0, 1.0);
                    st[k + 1] = quantize(v, cfg.bins);
                } else {
                    const T* cl = lg.coord[k]->val.data() + last * cfg.bins;
                    st[k + 1] = sample_categorical(cl, cfg.bins, opts.temperature, rng);
                }
            }
            steps.push_back(st);
        }
        return steps;
    }

    // single-sample posterior as plain values; empty layouts return the prior
    PosteriorParams posterior_params(const Layout& layout, const VisualCondition<T>& vc) {
        PosteriorParams out;
        out.mu.assign(cfg.d_z, 0.0);
        out.log_sigma.assign(cfg.d_z, 0.0);
        if (layout.empty()) return out;
        bind(false);
        Rng rng(0);
        auto cond = make_const(vc.content.reshaped(Shape{1, cfg.grid_len(), cfg.d_model()}));
        const Layout* lp = &layout;
        auto post = encoder_posterior({lp}, cond, rng, false);
        for (int64_t i = 0; i < cfg.d_z; ++i) {
            out.mu[i] = (double)post.mu->val[i];
            out.log_sigma[i] = (double)post.log_sigma->val[i];
        }
        return out;
    }
};

}  // namespace icvt
