#pragma once

#include <filesystem>
#include <fstream>
#include <functional>

#include "icvt/cvae.hpp"
#include "icvt/errors.hpp"
#include "icvt/synthetic.hpp"

namespace icvt {

// ---------------------------------------------------------------------------
// Cyclic KL-weight schedule: each cycle holds beta_low through the first half,
// ramps linearly over the third quarter, and holds beta_high for the rest.
// ---------------------------------------------------------------------------

struct BetaSchedule {
    double beta_low = 0.001;
    double beta_high = 0.3;
    int64_t period = 2000;  // iterations per cycle
    int cycles = 2;

    int64_t total_iters() const { return period * cycles; }
};

inline double beta_at(int64_t t, const BetaSchedule& s) {
    if (t < 0) throw std::invalid_argument("beta_at: negative iteration");
    double u = (double)(t % s.period);
    double half = (double)s.period / 2.0;
    double three_q = 3.0 * (double)s.period / 4.0;
    if (u <= half) return s.beta_low;
    if (u >= three_q) return s.beta_high;
    return s.beta_low + (s.beta_high - s.beta_low) * (u - half) / (three_q - half);
}

inline double total_loss(double recon, double kl, double beta) { return recon + beta * kl; }

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

// Horizontal flip of image, mask and layout together; an exact involution on
// the layout coordinates.
inline Sample flip_sample(const Sample& s) {
    Sample out;
    out.id = s.id;
    out.image = flip_horizontal(s.image);
    out.saliency = flip_horizontal(s.saliency);
    out.layout = s.layout;
    for (auto& e : out.layout.elements) e.cx = 1.0 - e.cx;
    out.layout = canonicalize(out.layout);
    return out;
}

// Multiplicative brightness/contrast/saturation jitter within +-0.2. The
// saliency mask is untouched and the image is re-multiplied by it, keeping
// pixels outside the subject at zero.
inline void color_jitter(Image& img, const Mask& mask, Rng& rng) {
    double fb = rng.uniform(0.8, 1.2);
    double fc = rng.uniform(0.8, 1.2);
    double fs = rng.uniform(0.8, 1.2);
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c) {
            double rr = img.at(r, c, 0), gg = img.at(r, c, 1), bb = img.at(r, c, 2);
            double gray = 0.299 * rr + 0.587 * gg + 0.114 * bb;
            double v[3] = {rr, gg, bb};
            for (int ch = 0; ch < 3; ++ch) {
                double x = gray + fs * (v[ch] - gray);
                x = 0.5 + fc * (x - 0.5);
                x *= fb;
                x = std::clamp(x, 0.0, 1.0) * mask.at(r, c);
                img.at(r, c, ch) = (float)x;
            }
        }
}

inline Sample augment(const Sample& s, Rng& rng, bool enable_flip = true,
                      bool enable_jitter = true) {
    Sample out = (enable_flip && rng.bernoulli(0.5)) ? flip_sample(s) : s;
    if (enable_jitter) color_jitter(out.image, out.saliency, rng);
    return out;
}

// ---------------------------------------------------------------------------
// optimizer: decoupled weight decay Adam with global-norm gradient clipping
// ---------------------------------------------------------------------------

struct OptimConfig {
    double lr = 3e-4;
    double lr_backbone = 1e-4;
    double weight_decay = 1e-2;
    double clip = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

template <typename T>
struct AdamW {
    OptimConfig cfg;
    int64_t step_count = 0;

    explicit AdamW(OptimConfig c = {}) : cfg(c) {}

    double grad_norm(ParamRegistry<T>& params) const {
        double sq = 0;
        for (auto& p : params.params) {
            if (!p->node || !p->node->grad.defined()) continue;
            const T* g = p->node->grad.data();
            for (int64_t i = 0; i < p->node->grad.numel(); ++i) sq += (double)g[i] * (double)g[i];
        }
        return std::sqrt(sq);
    }

    void step(ParamRegistry<T>& params) {
        ++step_count;
        double norm = grad_norm(params);
        double scale = (cfg.clip > 0 && norm > cfg.clip) ? cfg.clip / norm : 1.0;
        double bc1 = 1.0 - std::pow(cfg.adam_beta1, (double)step_count);
        double bc2 = 1.0 - std::pow(cfg.adam_beta2, (double)step_count);
        for (auto& p : params.params) {
            if (!p->node || !p->node->grad.defined()) continue;
            if (!p->m.defined()) {
                p->m = Tensor<T>(p->value.shape);
                p->v = Tensor<T>(p->value.shape);
            }
            bool is_backbone = p->name.rfind("backbone.", 0) == 0;
            double lr = is_backbone ? cfg.lr_backbone : cfg.lr;
            double wd = p->no_decay ? 0.0 : cfg.weight_decay;
            const T* g = p->node->grad.data();
            T* val = p->value.data();
            T* m = p->m.data();
            T* v = p->v.data();
            int64_t cnt = p->value.numel();
#pragma omp parallel for schedule(static) if (cnt > 32768)
            for (int64_t i = 0; i < cnt; ++i) {
                double gi = (double)g[i] * scale;
                double mi = cfg.adam_beta1 * (double)m[i] + (1 - cfg.adam_beta1) * gi;
                double vi = cfg.adam_beta2 * (double)v[i] + (1 - cfg.adam_beta2) * gi * gi;
                m[i] = (T)mi;
                v[i] = (T)vi;
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
                val[i] = (T)((double)val[i] - lr * update - lr * wd * (double)val[i]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// reconstruction loss
// ---------------------------------------------------------------------------

// Per sample: class cross-entropy averaged over element steps plus the EOS
// step, each coordinate head averaged over element steps only, summed across
// the five heads; then averaged over the batch.
template <typename T>
struct BatchLosses {
    Var<T> recon;
    Var<T> kl;
    Var<T> total;
    double beta = 0;
};

template <typename T>
Var<T> reconstruction_loss(const IcvtModel<T>& model, const DecoderLogits<T>& logits,
                           const std::vector<const Layout*>& layouts, int64_t S_in) {
    int64_t B = (int64_t)layouts.size();
    Vocabulary vocab = model.cfg.vocab();
    std::vector<int> cls_targets(B * S_in, Vocabulary::cls_pad);
    std::vector<T> cls_w(B * S_in, T(0));
    std::array<std::vector<int>, 4> coord_targets;
    std::array<std::vector<T>, 4> coord_targets_cont;
    std::array<std::vector<T>, 4> coord_w;
    for (int k = 0; k < 4; ++k) {
        coord_targets[k].assign(B * S_in, 0);
        coord_targets_cont[k].assign(B * S_in, T(0));
        coord_w[k].assign(B * S_in, T(0));
    }
    for (int64_t b = 0; b < B; ++b) {
        const Layout& l = *layouts[b];
        int64_t n = (int64_t)l.size();
        if (n + 1 > S_in) throw std::invalid_argument("reconstruction_loss: sequence too short");
        T wc = T(1) / (T)((n + 1) * B);
        T wk = n > 0 ? T(1) / (T)(n * B) : T(0);
        for (int64_t p = 0; p < n; ++p) {
            const auto& e = l.elements[p];
            cls_targets[b * S_in + p] = (int)e.cls;
            cls_w[b * S_in + p] = wc;
            double vals[4] = {e.cx, e.cy, e.w, e.h};
            for (int k = 0; k < 4; ++k) {
                coord_targets[k][b * S_in + p] = quantize(vals[k], vocab.bins);
                coord_targets_cont[k][b * S_in + p] = (T)vals[k];
                coord_w[k][b * S_in + p] = wk;
            }
        }
        cls_targets[b * S_in + n] = Vocabulary::cls_eos;
        cls_w[b * S_in + n] = wc;
    }
    auto recon = weighted_cross_entropy(reshape(logits.cls, Shape{B * S_in, (int64_t)6}),
                                        cls_targets, cls_w);
    for (int k = 0; k < 4; ++k) {
        if (model.cfg.continuous_coords) {
            auto pred = reshape(logits.coord[k], Shape{B * S_in});
            recon = add(recon, weighted_mse(pred, coord_targets_cont[k], coord_w[k]));
        } else {
            auto flat = reshape(logits.coord[k], Shape{B * S_in, (int64_t)model.cfg.bins});
            recon = add(recon, weighted_cross_entropy(flat, coord_targets[k], coord_w[k]));
        }
    }
    return recon;
}

// Full teacher-forced training objective for one batch.
template <typename T>
BatchLosses<T> batch_losses(IcvtModel<T>& model, const std::vector<const Sample*>& batch,
                            double beta, Rng& rng, bool training) {
    int64_t B = (int64_t)batch.size();
    std::vector<const Image*> images(B);
    std::vector<const Layout*> layouts(B);
    for (int64_t b = 0; b < B; ++b) {
        images[b] = &batch[b]->image;
        layouts[b] = &batch[b]->layout;
    }
    auto cond = model.encode_images(images, rng, training);
    auto post = model.encoder_posterior(layouts, cond, rng, training);
    auto kl = model.kl_loss(post, cond);

    // z = mu + sigma * eps
    Tensor<T> eps(Shape{B, model.cfg.d_z});
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = (T)rng.normal();
    auto z = add(post.mu, mul(exp_op(post.log_sigma), make_const(eps)));

    int64_t maxn = 0;
    for (auto* l : layouts) maxn = std::max<int64_t>(maxn, (int64_t)l->size());
    int64_t S_in = maxn + 1;
    Vocabulary vocab = model.cfg.vocab();
    std::vector<std::array<int, 5>> inputs(B * S_in,
                                           {Vocabulary::cls_pad, model.cfg.bins, model.cfg.bins,
                                            model.cfg.bins, model.cfg.bins});
    for (int64_t b = 0; b < B; ++b) {
        inputs[b * S_in] = {Vocabulary::cls_bos, model.cfg.bins, model.cfg.bins, model.cfg.bins,
                            model.cfg.bins};
        const Layout& l = *layouts[b];
        for (int64_t p = 0; p < (int64_t)l.size(); ++p) {
            const auto& e = l.elements[p];
            inputs[b * S_in + p + 1] = {(int)e.cls, quantize(e.cx, vocab.bins),
                                        quantize(e.cy, vocab.bins), quantize(e.w, vocab.bins),
                                        quantize(e.h, vocab.bins)};
        }
    }
    auto logits = model.decoder_forward(inputs, B, S_in, z, cond, rng, training);
    BatchLosses<T> out;
    out.recon = reconstruction_loss(model, logits, layouts, S_in);
    out.kl = kl;
    out.beta = beta;
    out.total = add(out.recon, mul_scalar(kl, (T)beta));
    return out;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct TrainLogEntry {
    int64_t iter;
    double recon, kl, beta;
};

struct TrainerConfig {
    int batch = 32;
    BetaSchedule schedule;
    OptimConfig optim;
    bool augment_flip = true;
    bool augment_jitter = true;
    uint64_t seed = 1;
    int64_t log_every = 1;
    int64_t checkpoint_every = 1000;
    std::string out_dir;
    std::string config_echo;  // full run config JSON, copied into checkpoints
};

template <typename T>
struct Trainer {
    IcvtModel<T>& model;
    TrainerConfig cfg;
    AdamW<T> optim;
    std::vector<TrainLogEntry> log;
    int64_t iteration = 0;
    std::function<void(const TrainLogEntry&)> on_log;
    std::function<void(int64_t, const std::string&)> on_checkpoint;

    Trainer(IcvtModel<T>& m, TrainerConfig c) : model(m), cfg(c), optim(c.optim) {
        if (cfg.optim.lr_backbone > cfg.optim.lr)
            throw std::invalid_argument("backbone learning rate must not exceed the model rate");
    }

    // One optimizer step on an explicit batch; returns the logged values.
    TrainLogEntry step(const std::vector<const Sample*>& batch, Rng& rng) {
        double beta = beta_at(iteration, cfg.schedule);
        model.bind(true);
        auto losses = batch_losses(model, batch, beta, rng, true);
        double recon = (double)losses.recon->val[0];
        double klv = (double)losses.kl->val[0];
        double tot = (double)losses.total->val[0];
        if (!std::isfinite(tot)) {
            diagnostic_snapshot(batch, recon, klv, beta);
            throw NumericError("non-finite loss at iteration " + std::to_string(iteration));
        }
        backward(losses.total);
        optim.step(model.params);
        TrainLogEntry e{iteration, recon, klv, beta};
        ++iteration;
        return e;
    }

    // Full run over the dataset's training split. Batch composition is a pure
    // function of (seed, iteration).
    void train(const std::vector<Sample>& train_set) {
        if (train_set.empty()) throw DataError("empty training set");
        int64_t total = cfg.schedule.total_iters();
        std::ofstream log_file;
        if (!cfg.out_dir.empty()) {
            std::filesystem::create_directories(cfg.out_dir);
            log_file.open(std::filesystem::path(cfg.out_dir) / "train_log.jsonl",
                          iteration > 0 ? std::ios::app : std::ios::trunc);
        }
        while (iteration < total) {
            Rng rng(mix_seeds(cfg.seed, (uint64_t)iteration));
            std::vector<Sample> aug;
            aug.reserve(cfg.batch);
            std::vector<const Sample*> batch;
            for (int i = 0; i < cfg.batch; ++i) {
                const Sample& s = train_set[(size_t)rng.randint(0, (int64_t)train_set.size() - 1)];
                aug.push_back(augment(s, rng, cfg.augment_flip, cfg.augment_jitter));
            }
            for (auto& s : aug) batch.push_back(&s);
            TrainLogEntry e = step(batch, rng);
            if (e.iter % cfg.log_every == 0 || e.iter + 1 == total) {
                log.push_back(e);
                if (log_file)
                    log_file << "{\"iter\":" << e.iter << ",\"recon\":" << e.recon
                             << ",\"kl\":" << e.kl << ",\"beta\":" << e.beta << "}\n";
                if (on_log) on_log(e);
            }
            if (!cfg.out_dir.empty() &&
                (iteration % cfg.checkpoint_every == 0 || iteration == total)) {
                std::string dir = save_checkpoint();
                if (on_checkpoint) on_checkpoint(iteration, dir);
            }
        }
    }

    std::string save_checkpoint() const {
        namespace fs = std::filesystem;
        fs::path dir = fs::path(cfg.out_dir) / "checkpoint";
        fs::create_directories(dir);
        model.params.save((dir / "params.bin").string());
        std::ofstream st(dir / "state.json");
        st << "{\"iteration\":" << iteration << ",\"rng_digest\":\""
           << std::hex << mix_seeds(cfg.seed, (uint64_t)iteration) << std::dec << "\"}\n";
        if (!cfg.config_echo.empty()) {
            std::ofstream cf(dir / "config.json");
            cf << cfg.config_echo << "\n";
        }
        return dir.string();
    }

    void diagnostic_snapshot(const std::vector<const Sample*>& batch, double recon, double kl,
                             double beta) const {
        if (cfg.out_dir.empty()) return;
        namespace fs = std::filesystem;
        fs::create_directories(cfg.out_dir);
        std::ofstream f(fs::path(cfg.out_dir) / "diagnostic.json");
        f << "{\"iteration\":" << iteration << ",\"recon\":" << recon << ",\"kl\":" << kl
          << ",\"beta\":" << beta << ",\"batch_ids\":[";
        for (size_t i = 0; i < batch.size(); ++i)
            f << (i ? "," : "") << "\"" << batch[i]->id << "\"";
        f << "]}\n";
    }
};

}  // namespace icvt
