#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icvt/vision.hpp"
#include "test_util.hpp"

using namespace icvt;
using namespace icvt::testutil;

TEST_CASE("patchify counts and ordering") {
    Image img(64, 64);
    auto p = patchify<double>(img, 32);
    CHECK(p.shape == Shape{4, 3 * 32 * 32});

    Image wide(96, 128);
    CHECK(patchify<double>(wide, 16).dim(0) == 48);

    CHECK_THROWS_AS(patchify<double>(Image(50, 64), 32), std::invalid_argument);

    // constant image: every patch row identical
    Image flat(32, 64);
    for (auto& v : flat.px) v = 0.25f;
    auto pc = patchify<double>(flat, 16);
    for (int64_t r = 1; r < pc.dim(0); ++r)
        for (int64_t c = 0; c < pc.dim(1); ++c) CHECK(pc[r * pc.dim(1) + c] == pc[c]);

    // flattening order is (row, col, channel); patches are row-major
    Image tiny(4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            for (int ch = 0; ch < 3; ++ch) tiny.at(r, c, ch) = (float)(r * 100 + c * 10 + ch);
    auto pt = patchify<double>(tiny, 2);
    REQUIRE(pt.shape == Shape{4, 12});
    // patch 0 covers rows 0-1, cols 0-1
    CHECK(pt[0] == 0.0);    // (0,0,0)
    CHECK(pt[1] == 1.0);    // (0,0,1)
    CHECK(pt[3] == 10.0);   // (0,1,0)
    CHECK(pt[6] == 100.0);  // (1,0,0)
    // patch 1 covers rows 0-1, cols 2-3
    CHECK(pt[12] == 20.0);
}

TEST_CASE("2D sinusoidal positional encoding basics") {
    CHECK_THROWS_AS(sine_pos_2d<double>(2, 2, 30), std::invalid_argument);
    auto pe = sine_pos_2d<double>(6, 8, 160);
    REQUIRE(pe.shape == Shape{48, 160});

    // cell (0,0): sines are 0, cosines are 1 in both halves
    for (int64_t i = 0; i < 40; ++i) {
        CHECK(pe[2 * i] == 0.0);
        CHECK(pe[2 * i + 1] == 1.0);
        CHECK(pe[80 + 2 * i] == 0.0);
        CHECK(pe[80 + 2 * i + 1] == 1.0);
    }

    // distinct cells get distinct encodings
    for (int64_t a = 0; a < 48; ++a)
        for (int64_t b = a + 1; b < 48; ++b) {
            double d = 0;
            for (int64_t k = 0; k < 160; ++k) d = std::max(d, std::abs(pe[a * 160 + k] - pe[b * 160 + k]));
            CHECK(d > 1e-9);
        }
}

TEST_CASE("positional encoding dot product decays monotonically over short ranges") {
    auto pe = sine_pos_2d<double>(6, 8, 160);
    auto dot = [&](int a, int b) {
        double s = 0;
        for (int64_t k = 0; k < 160; ++k) s += pe[a * 160 + k] * pe[b * 160 + k];
        return s;
    };
    // along a row (column steps) from cell (2, 1): indices 2*8+1 + step
    int base = 2 * 8 + 1;
    double d0 = dot(base, base);
    double d1 = dot(base, base + 1);
    double d2 = dot(base, base + 2);
    double d3 = dot(base, base + 3);
    CHECK(d0 > d1);
    CHECK(d1 > d2);
    CHECK(d2 > d3);
    // along a column (row steps) from (1, 3)
    int base2 = 1 * 8 + 3;
    double e0 = dot(base2, base2);
    double e1 = dot(base2, base2 + 8);
    double e2 = dot(base2, base2 + 16);
    double e3 = dot(base2, base2 + 24);
    CHECK(e0 > e1);
    CHECK(e1 > e2);
    CHECK(e2 > e3);
}

namespace {

struct SmallBackbone {
    ParamRegistry<double> reg;
    ViTBackbone<double> bb;
    int64_t L, pd;

    SmallBackbone(int layers = 2, int64_t d_v = 32, uint64_t seed = 5, int64_t len = 6,
                  int64_t patch_dim = 12) : L(len), pd(patch_dim) {
        BackboneConfig cfg;
        cfg.patch = 2;
        cfg.d_v = d_v;
        cfg.layers = layers;
        cfg.heads = 4;
        cfg.ffn_mult = 2;
        cfg.dropout = 0.0;
        Rng rng(seed);
        bb.init(reg, "backbone", cfg, patch_dim, len, rng);
    }
};

}  // namespace

TEST_CASE("backbone forward has the right shape and is deterministic in eval mode") {
    SmallBackbone sb;
    Rng rng(9);
    Tensor<double> patches(Shape{2, sb.L, sb.pd});
    for (int64_t i = 0; i < patches.numel(); ++i) patches[i] = rng.normal();
    sb.reg.bind(false);
    Rng d1(0), d2(0);
    auto out1 = sb.bb.forward(make_const(patches), d1, false);
    auto out2 = sb.bb.forward(make_const(patches), d2, false);
    CHECK(out1->val.shape == Shape{2, sb.L, 32});
    CHECK(max_abs_diff(out1->val, out2->val) == 0.0);
}

TEST_CASE("backbone is permutation-equivariant when its positional embedding is zeroed") {
    SmallBackbone sb;
    for (int64_t i = 0; i < sb.bb.pos_embed->value.numel(); ++i) sb.bb.pos_embed->value[i] = 0;
    sb.reg.bind(false);
    Rng rng(11);
    Tensor<double> patches(Shape{1, sb.L, sb.pd});
    for (int64_t i = 0; i < patches.numel(); ++i) patches[i] = rng.normal();
    std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor<double> permuted(Shape{1, sb.L, sb.pd});
    for (int64_t r = 0; r < sb.L; ++r)
        for (int64_t c = 0; c < sb.pd; ++c) permuted[r * sb.pd + c] = patches[perm[r] * sb.pd + c];
    Rng d(0);
    auto out = sb.bb.forward(make_const(patches), d, false);
    auto out_p = sb.bb.forward(make_const(permuted), d, false);
    for (int64_t r = 0; r < sb.L; ++r)
        for (int64_t c = 0; c < 32; ++c)
            CHECK(std::abs(out_p->val[r * 32 + c] - out->val[perm[r] * 32 + c]) < 1e-12);
}

TEST_CASE("backbone input gradient matches central finite differences") {
    SmallBackbone sb(2, 32, 7);
    Rng rng(13);
    Tensor<double> patches(Shape{1, sb.L, sb.pd});
    for (int64_t i = 0; i < patches.numel(); ++i) patches[i] = rng.normal();
    Tensor<double> probe(Shape{1, sb.L, 32});
    for (int64_t i = 0; i < probe.numel(); ++i) probe[i] = rng.normal();

    auto f = [&](const Tensor<double>& x) {
        sb.reg.bind(false);
        Rng d(0);
        auto y = sb.bb.forward(make_leaf(x.clone(), false), d, false);
        double s = 0;
        for (int64_t i = 0; i < y->val.numel(); ++i) s += y->val[i] * probe[i];
        return s;
    };
    sb.reg.bind(true);
    auto leaf = make_leaf(patches.clone(), true);
    Rng d(0);
    auto y = sb.bb.forward(leaf, d, false);
    auto loss = sum_all(mul(y, make_const(probe)));
    backward(loss);
    auto num = numeric_grad(f, patches, 1e-3);
    CHECK(max_rel_err(leaf->grad, num) <= 1e-3);
}

TEST_CASE("adapter projects to the model width and zero-out-projection gives zero") {
    ParamRegistry<double> reg;
    Adapter<double> ad;
    AdapterConfig cfg;
    cfg.layers = 1;
    cfg.heads = 4;
    cfg.dropout = 0.0;
    Rng rng(17);
    ad.init(reg, "adapter", cfg, 32, 40, rng);
    Rng d(0);
    reg.bind(false);
    Tensor<double> feats(Shape{2, 6, 32});
    for (int64_t i = 0; i < feats.numel(); ++i) feats[i] = rng.normal();
    auto out = ad.forward(make_const(feats), d, false);
    CHECK(out->val.shape == Shape{2, 6, 40});

    for (int64_t i = 0; i < ad.out_proj.W->value.numel(); ++i) ad.out_proj.W->value[i] = 0;
    for (int64_t i = 0; i < ad.out_proj.b->value.numel(); ++i) ad.out_proj.b->value[i] = 0;
    reg.bind(false);
    Tensor<double> zeros(Shape{2, 6, 32});
    auto out0 = ad.forward(make_const(zeros), d, false);
    for (int64_t i = 0; i < out0->val.numel(); ++i) CHECK(out0->val[i] == 0.0);
}

TEST_CASE("adapter input gradient matches central finite differences") {
    ParamRegistry<double> reg;
    Adapter<double> ad;
    AdapterConfig cfg;
    cfg.layers = 1;
    cfg.heads = 4;
    cfg.dropout = 0.0;
    Rng rng(19);
    ad.init(reg, "adapter", cfg, 16, 20, rng);
    Tensor<double> feats(Shape{1, 5, 16});
    for (int64_t i = 0; i < feats.numel(); ++i) feats[i] = rng.normal();
    Tensor<double> probe(Shape{1, 5, 20});
    for (int64_t i = 0; i < probe.numel(); ++i) probe[i] = rng.normal();
    auto f = [&](const Tensor<double>& x) {
        reg.bind(false);
        Rng d(0);
        auto y = ad.forward(make_leaf(x.clone(), false), d, false);
        double s = 0;
        for (int64_t i = 0; i < y->val.numel(); ++i) s += y->val[i] * probe[i];
        return s;
    };
    reg.bind(true);
    auto leaf = make_leaf(feats.clone(), true);
    Rng d(0);
    auto loss = sum_all(mul(ad.forward(leaf, d, false), make_const(probe)));
    backward(loss);
    CHECK(max_rel_err(leaf->grad, numeric_grad(f, feats, 1e-3)) <= 1e-3);
}
