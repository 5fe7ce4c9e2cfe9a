#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "icvt/metrics.hpp"
#include "icvt/training.hpp"
#include "test_util.hpp"

using namespace icvt;
using namespace icvt::testutil;

TEST_CASE("beta schedule reproduces the piecewise cyclic form") {
    BetaSchedule s;
    s.period = 2000;
    s.cycles = 2;
    CHECK(beta_at(0, s) == 0.001);
    CHECK(beta_at(1000, s) == 0.001);  // t = T/2, closed-low interval
    CHECK(beta_at(1500, s) == 0.3);    // t = 3T/4
    CHECK(beta_at(1999, s) == 0.3);    // t = T-1
    CHECK(std::abs(beta_at(1250, s) - 0.1505) < 1e-12);  // t = 5T/8

    // periodic with period T, bounded, continuous inside a cycle
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        int64_t t = rng.randint(0, 1999);
        CHECK(beta_at(t, s) == beta_at(t + 2000, s));
        double b = beta_at(t, s);
        CHECK(b >= 0.001);
        CHECK(b <= 0.3);
    }
    // linear in the ramp
    double mid = beta_at(1125, s);  // halfway between T/2 and 3T/4
    CHECK(std::abs(mid - (0.001 + 0.299 * 0.25)) < 1e-12);
    CHECK_THROWS_AS(beta_at(-1, s), std::invalid_argument);
}

TEST_CASE("total loss arithmetic") {
    CHECK(total_loss(1.0, 2.0, 0.0) == 1.0);
    CHECK(total_loss(1.0, 0.0, 0.3) == 1.0);
    CHECK(total_loss(1.0, 2.0, 0.3) == doctest::Approx(1.6).epsilon(1e-15));
}

namespace {

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.d_attr = 8;
    c.d_z = 8;
    c.enc_layers = 1;
    c.dec_layers = 1;
    c.heads = 4;
    c.bins = 128;
    c.max_elements = 8;
    c.dropout = 0.0;
    c.variant = parse_variant("baseline");
    c.backbone.patch = 16;
    c.backbone.d_v = 16;
    c.backbone.layers = 1;
    c.backbone.heads = 2;
    c.backbone.dropout = 0.0;
    c.adapter.layers = 1;
    c.adapter.heads = 2;
    c.adapter.dropout = 0.0;
    c.image_h = 32;
    c.image_w = 48;
    return c;
}

}  // namespace

TEST_CASE("reconstruction loss on uniform logits gives ln6 plus 4 ln B") {
    IcvtModel<float> m;
    m.init(tiny_model_config(), 3);
    Layout l1, l2;
    l1.elements = {LayoutElement{ElemClass::Text, 0.5, 0.5, 0.25, 0.125}};
    l2.elements = {LayoutElement{ElemClass::Text, 0.3, 0.3, 0.2, 0.1},
                   LayoutElement{ElemClass::Logo, 0.7, 0.7, 0.1, 0.1}};
    int64_t S_in = 3;
    DecoderLogits<float> logits;
    logits.cls = make_const(Tensor<float>(Shape{2, S_in, 6}));
    for (int k = 0; k < 4; ++k)
        logits.coord[k] = make_const(Tensor<float>(Shape{2, S_in, 128}));
    std::vector<const Layout*> layouts = {&l1, &l2};
    auto recon = reconstruction_loss(m, logits, layouts, S_in);
    double want = std::log(6.0) + 4 * std::log(128.0);
    CHECK(std::abs(recon->val[0] - want) < 1e-4);
    CHECK(std::abs(std::log(6.0) - 1.7918) < 1e-4);
    CHECK(std::abs(std::log(128.0) - 4.852) < 1e-3);
}

TEST_CASE("flip augmentation is an exact involution and occlusion-invariant") {
    GenConfig cfg;
    cfg.seed = 5;
    for (int i = 0; i < 20; ++i) {
        Sample s = generate_sample((uint64_t)i, cfg);
        Sample once = flip_sample(s);
        Sample twice = flip_sample(once);
        CHECK(twice.image.px == s.image.px);
        CHECK(twice.saliency.v == s.saliency.v);
        REQUIRE(twice.layout.size() == s.layout.size());
        for (size_t j = 0; j < s.layout.size(); ++j) {
            CHECK(twice.layout.elements[j].cx == s.layout.elements[j].cx);
            CHECK(twice.layout.elements[j].cy == s.layout.elements[j].cy);
            CHECK(twice.layout.elements[j].w == s.layout.elements[j].w);
            CHECK(twice.layout.elements[j].h == s.layout.elements[j].h);
            CHECK(twice.layout.elements[j].cls == s.layout.elements[j].cls);
        }
        // occlusion is invariant under a joint flip of mask and boxes
        auto o1 = occlusion(s.layout, s.saliency);
        auto o2 = occlusion(once.layout, once.saliency);
        REQUIRE(o1.has_value());
        REQUIRE(o2.has_value());
        CHECK(*o1 == doctest::Approx(*o2).epsilon(1e-12));
    }
    // spot check the coordinate rule
    Sample s = generate_sample(0, cfg);
    s.layout.elements[0].cx = 0.3;
    Sample f = flip_sample(s);
    bool found = false;
    for (auto& e : f.layout.elements)
        if (e.cx == doctest::Approx(0.7).epsilon(1e-12)) found = true;
    CHECK(found);
}

TEST_CASE("color jitter stays in range and never touches masked-out pixels") {
    GenConfig cfg;
    cfg.seed = 7;
    Sample s = generate_sample(3, cfg);
    Rng rng(11);
    Sample aug = augment(s, rng, false, true);
    CHECK(aug.saliency.v == s.saliency.v);
    for (int r = 0; r < aug.image.h; ++r)
        for (int c = 0; c < aug.image.w; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                float v = aug.image.at(r, c, ch);
                CHECK(v >= 0.f);
                CHECK(v <= 1.f);
                if (!aug.saliency.at(r, c)) CHECK(v == 0.f);
            }
    // layout untouched by jitter
    REQUIRE(aug.layout.size() == s.layout.size());
    for (size_t j = 0; j < s.layout.size(); ++j)
        CHECK(aug.layout.elements[j].cx == s.layout.elements[j].cx);
}

TEST_CASE("AdamW minimizes a quadratic and respects parameter groups") {
    ParamRegistry<float> reg;
    auto* w = reg.add("w", Tensor<float>(Shape{4}, 2.0f));
    auto* wb = reg.add("backbone.w", Tensor<float>(Shape{4}, 2.0f));
    OptimConfig oc;
    oc.lr = 0.05;
    oc.lr_backbone = 0.005;
    oc.weight_decay = 0.0;
    oc.clip = 0.0;
    AdamW<float> opt(oc);
    std::vector<float> target = {0.5f, -0.25f, 1.0f, 0.0f};
    for (int it = 0; it < 400; ++it) {
        reg.bind(true);
        std::vector<float> wts(4, 1.0f);
        auto loss = add(weighted_mse(w->node, target, wts), weighted_mse(wb->node, target, wts));
        backward(loss);
        if (it == 0) {
            // first-step updates are ~lr in magnitude per group
            Tensor<float> w_before = w->value.clone();
            Tensor<float> wb_before = wb->value.clone();
            opt.step(reg);
            CHECK(std::abs(w_before[0] - w->value[0]) == doctest::Approx(oc.lr).epsilon(0.05));
            CHECK(std::abs(wb_before[0] - wb->value[0]) ==
                  doctest::Approx(oc.lr_backbone).epsilon(0.05));
            continue;
        }
        opt.step(reg);
    }
    for (int k = 0; k < 4; ++k) CHECK(std::abs(w->value[k] - target[k]) < 0.02);

    // decoupled weight decay pulls unused-by-loss directions toward zero
    ParamRegistry<float> reg2;
    auto* v = reg2.add("v", Tensor<float>(Shape{1}, 1.0f));
    OptimConfig oc2;
    oc2.lr = 0.1;
    oc2.weight_decay = 0.5;
    oc2.clip = 0.0;
    AdamW<float> opt2(oc2);
    reg2.bind(true);
    std::vector<float> t0 = {1.0f}, w0 = {1.0f};
    auto loss = weighted_mse(v->node, t0, w0);  // zero gradient at v=1
    backward(loss);
    opt2.step(reg2);
    CHECK(v->value[0] < 1.0f);  // decay applied despite zero gradient
}

TEST_CASE("trainer runs, logs, checkpoints, and the loss falls on a smoke run") {
    namespace fs = std::filesystem;
    GenConfig gen;
    gen.seed = 11;
    gen.H = 48;
    gen.W = 64;
    std::vector<Sample> data;
    for (int i = 0; i < 256; ++i) data.push_back(generate_sample((uint64_t)i, gen));

    ModelConfig mc;
    mc.d_attr = 16;  // model dim 80
    mc.d_z = 8;
    mc.enc_layers = 2;
    mc.dec_layers = 2;
    mc.heads = 4;
    mc.bins = 32;
    mc.max_elements = 16;
    mc.dropout = 0.1;
    mc.variant = parse_variant("concat-sine");
    mc.backbone.patch = 16;
    mc.backbone.d_v = 64;
    mc.backbone.layers = 2;
    mc.backbone.heads = 4;
    mc.adapter.layers = 1;
    mc.image_h = 48;
    mc.image_w = 64;
    IcvtModel<float> model;
    model.init(mc, 13);

    TrainerConfig tc;
    tc.batch = 16;
    tc.schedule.period = 100;
    tc.schedule.cycles = 2;
    tc.optim.lr = 1e-3;
    tc.optim.lr_backbone = 3e-4;
    tc.seed = 17;
    tc.log_every = 1;
    tc.checkpoint_every = 100;
    fs::path out = fs::temp_directory_path() / "icvt_smoke_train";
    fs::remove_all(out);
    tc.out_dir = out.string();
    tc.config_echo = "{}";

    Trainer<float> trainer(model, tc);
    trainer.train(data);

    REQUIRE(trainer.log.size() == 200);
    auto avg = [&](int lo, int hi) {
        double s = 0;
        for (int i = lo; i < hi; ++i) s += trainer.log[i].recon;
        return s / (hi - lo);
    };
    double early = avg(8, 13);   // around iteration 10
    double late = avg(190, 200);
    CHECK(late <= 0.8 * early);

    // KL per dimension stays above the collapse floor after the first
    // high-beta phase
    double kl_late = 0;
    for (int i = 190; i < 200; ++i) kl_late += trainer.log[i].kl;
    kl_late /= 10;
    CHECK(kl_late / mc.d_z > 0.01);

    // checkpoint round trip reproduces eval logits bit for bit
    CHECK(fs::exists(out / "checkpoint" / "params.bin"));
    CHECK(fs::exists(out / "train_log.jsonl"));
    IcvtModel<float> reloaded;
    reloaded.init(mc, 999);  // different init, then overwritten by the load
    reloaded.params.load((out / "checkpoint" / "params.bin").string());

    auto vc1 = model.make_condition(data[0].image);
    auto vc2 = reloaded.make_condition(data[0].image);
    CHECK(max_abs_diff_t(vc1.content, vc2.content) == 0.0);
    std::vector<double> z(8, 0.25);
    SampleOpts opts;
    opts.temperature = 0.0;
    Rng r1(1), r2(1);
    Layout g1 = model.generate(vc1, z, opts, r1);
    Layout g2 = reloaded.generate(vc2, z, opts, r2);
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) {
        CHECK(g1.elements[i].cx == g2.elements[i].cx);
        CHECK(g1.elements[i].cls == g2.elements[i].cls);
    }
    fs::remove_all(out);
}

TEST_CASE("non-finite loss aborts with a numeric error") {
    GenConfig gen;
    gen.seed = 19;
    gen.H = 48;
    gen.W = 64;
    std::vector<Sample> data;
    for (int i = 0; i < 8; ++i) data.push_back(generate_sample((uint64_t)i, gen));

    ModelConfig mc = tiny_model_config();
    mc.image_h = 48;
    mc.image_w = 64;
    IcvtModel<float> model;
    model.init(mc, 23);
    // poison one weight
    model.head_cls.W->value[0] = std::numeric_limits<float>::infinity();

    TrainerConfig tc;
    tc.batch = 4;
    tc.schedule.period = 10;
    tc.schedule.cycles = 1;
    tc.seed = 29;
    Trainer<float> trainer(model, tc);
    std::vector<const Sample*> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(&data[i]);
    Rng rng(1);
    CHECK_THROWS_AS(trainer.step(batch, rng), NumericError);
}

TEST_CASE("backbone learning rate must not exceed the model rate") {
    ModelConfig mc = tiny_model_config();
    IcvtModel<float> model;
    model.init(mc, 31);
    TrainerConfig tc;
    tc.optim.lr = 1e-4;
    tc.optim.lr_backbone = 5e-4;
    CHECK_THROWS_AS(Trainer<float>(model, tc), std::invalid_argument);
}
