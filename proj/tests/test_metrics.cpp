#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icvt/errors.hpp"
#include "icvt/metrics.hpp"

using namespace icvt;

namespace {

LayoutElement elem(ElemClass c, double cx, double cy, double w, double h) {
    return LayoutElement{c, cx, cy, w, h};
}

Layout lay(std::initializer_list<LayoutElement> es) {
    Layout l;
    l.canvas_w = 128;
    l.canvas_h = 96;
    l.elements = es;
    return l;
}

Layout random_layout(Rng& rng, int max_boxes = 8) {
    Layout l;
    l.canvas_w = 128;
    l.canvas_h = 96;
    int n = (int)rng.randint(2, max_boxes);
    for (int i = 0; i < n; ++i) {
        double w = rng.uniform(0.08, 0.6);
        double h = rng.uniform(0.05, 0.4);
        l.elements.push_back(elem((ElemClass)rng.randint(0, 2),
                                  rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w,
                                  h));
    }
    return l;
}

}  // namespace

TEST_CASE("is_valid_box basic cases") {
    CHECK(is_valid_box(elem(ElemClass::Text, 0.5, 0.5, 0.2, 0.1)));
    CHECK(!is_valid_box(elem(ElemClass::Text, 0.5, 0.5, 0.0, 0.1)));      // w = 0
    CHECK(!is_valid_box(elem(ElemClass::Text, 0.5, 0.5, 0.0005, 0.1)));   // below min width
    CHECK(!is_valid_box(elem(ElemClass::Text, 2.0, 0.5, 0.1, 0.1)));      // fully off canvas
    CHECK(!is_valid_box(elem(ElemClass::Bos, 0.5, 0.5, 0.2, 0.1)));       // framing class
    // partially clipped but still intersecting is fine
    CHECK(is_valid_box(elem(ElemClass::Logo, 0.01, 0.5, 0.1, 0.1)));
}

TEST_CASE("output_rate counts layouts with at least one valid box") {
    Layout empty;
    Layout good = lay({elem(ElemClass::Text, 0.5, 0.5, 0.2, 0.1)});
    CHECK(output_rate({empty, empty}) == 0.0);
    CHECK(output_rate({good, good, good}) == 1.0);
    CHECK(output_rate({good, good, good, empty}) == 0.75);
    CHECK_THROWS_AS(output_rate({}), std::invalid_argument);
}

TEST_CASE("overlap trivial cases") {
    CHECK(overlap(lay({elem(ElemClass::Text, 0.5, 0.5, 0.2, 0.1)})) == 0.0);
    // two identical boxes: intersection a, total 2a -> 0.5
    auto two = lay({elem(ElemClass::Text, 0.4, 0.4, 0.25, 0.2),
                    elem(ElemClass::Text, 0.4, 0.4, 0.25, 0.2)});
    CHECK(overlap(two) == doctest::Approx(0.5).epsilon(1e-12));
    // disjoint boxes: 0
    auto disj = lay({elem(ElemClass::Text, 0.2, 0.2, 0.2, 0.2),
                     elem(ElemClass::Text, 0.8, 0.8, 0.2, 0.2)});
    CHECK(overlap(disj) == 0.0);
    // invalid elements are dropped before the computation
    auto with_junk = lay({elem(ElemClass::Text, 0.4, 0.4, 0.25, 0.2),
                          elem(ElemClass::Pad, 0.4, 0.4, 0.25, 0.2)});
    CHECK(overlap(with_junk) == 0.0);
}

TEST_CASE("overlap matches the raster oracle on random layouts") {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        Layout l = random_layout(rng, 5);
        double a = overlap(l);
        double b = overlap_raster_oracle(l, 1024);
        CHECK(std::abs(a - b) < 2e-3);
    }
}

TEST_CASE("alignment trivial cases and oracle agreement") {
    // shared left edge -> 0
    auto shared_left = lay({elem(ElemClass::Text, 0.3, 0.2, 0.2, 0.1),
                            elem(ElemClass::Text, 0.4, 0.5, 0.4, 0.1)});
    CHECK(shared_left.elements[0].left() == doctest::Approx(0.2));
    CHECK(shared_left.elements[1].left() == doctest::Approx(0.2));
    CHECK(alignment(shared_left) == doctest::Approx(0.0).epsilon(1e-12));

    // constructed: nearest axis pair differs by 0.05 for both elements
    auto offset = lay({elem(ElemClass::Text, 0.30, 0.20, 0.20, 0.10),
                       elem(ElemClass::Text, 0.35, 0.45, 0.20, 0.14)});
    // lefts: 0.20 vs 0.25; centers 0.30 vs 0.35; rights 0.40 vs 0.45 -> x gaps all 0.05
    // tops: 0.15 vs 0.38; centers 0.20 vs 0.45; bottoms 0.25 vs 0.52 -> y gaps >= 0.23
    CHECK(alignment(offset) == doctest::Approx(0.05).epsilon(1e-12));

    CHECK(alignment(lay({elem(ElemClass::Text, 0.5, 0.5, 0.2, 0.1)})) == 0.0);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Layout l = random_layout(rng);
        CHECK(alignment(l) == doctest::Approx(alignment_bruteforce_oracle(l)).epsilon(1e-12));
    }
}

TEST_CASE("occlusion trivial cases") {
    Mask top_half(96, 128);
    for (int r = 0; r < 48; ++r)
        for (int c = 0; c < 128; ++c) top_half.at(r, c) = 1;

    // box entirely in the bottom half
    auto below = lay({elem(ElemClass::Text, 0.5, 0.75, 0.4, 0.3)});
    auto o1 = occlusion(below, top_half);
    REQUIRE(o1.has_value());
    CHECK(*o1 == 0.0);

    // box entirely inside the salient region
    auto inside = lay({elem(ElemClass::Text, 0.5, 0.25, 0.4, 0.3)});
    auto o2 = occlusion(inside, top_half);
    REQUIRE(o2.has_value());
    CHECK(*o2 == 1.0);

    // full-canvas box: exactly half covered
    auto full = lay({elem(ElemClass::Text, 0.5, 0.5, 1.0, 1.0)});
    auto o3 = occlusion(full, top_half);
    REQUIRE(o3.has_value());
    CHECK(*o3 == doctest::Approx(0.5).epsilon(1e-9));

    // no valid boxes: undefined
    Layout empty;
    CHECK(!occlusion(empty, top_half).has_value());

    // all-zero and all-one masks
    Mask zeros(96, 128);
    Mask ones(96, 128);
    for (auto& v : ones.v) v = 1;
    auto any = lay({elem(ElemClass::Text, 0.5, 0.5, 0.4, 0.3)});
    CHECK(*occlusion(any, zeros) == 0.0);
    CHECK(*occlusion(any, ones) == 1.0);
}

TEST_CASE("occlusion agrees with the brute-force oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Layout l = random_layout(rng);
        Mask m(96, 128);
        for (auto& v : m.v) v = rng.bernoulli(0.3) ? 1 : 0;
        auto a = occlusion(l, m);
        REQUIRE(a.has_value());
        CHECK(*a == doctest::Approx(occlusion_bruteforce_oracle(l, m)).epsilon(1e-12));
    }
}

TEST_CASE("union denominator differs from the sum-of-areas variant under overlap") {
    Mask ones(96, 128);
    for (auto& v : ones.v) v = 1;
    Mask half(96, 128);
    for (int r = 0; r < 48; ++r)
        for (int c = 0; c < 128; ++c) half.at(r, c) = 1;
    auto stacked = lay({elem(ElemClass::Text, 0.5, 0.4, 0.6, 0.4),
                        elem(ElemClass::Substrate, 0.5, 0.4, 0.6, 0.4)});
    auto u = occlusion(stacked, half);
    auto s = occlusion_sum_areas(stacked, half);
    REQUIRE(u.has_value());
    REQUIRE(s.has_value());
    // one box fully salient, one straddling the boundary and double-counting
    // its salient overlap in the sum variant
    auto asym = lay({elem(ElemClass::Text, 0.25, 0.375, 0.5, 0.25),
                     elem(ElemClass::Text, 0.25, 0.5625, 0.5, 0.375)});
    auto u2 = occlusion(asym, half);
    auto s2 = occlusion_sum_areas(asym, half);
    // union: salient y in [0.25,0.5) over union y in [0.25,0.75) -> 0.5
    // sum:   (0.125 + 0.0625) / (0.125 + 0.1875) -> 0.6
    CHECK(*u2 == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(*s2 == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(std::abs(*u2 - *s2) > 1e-3);
}

TEST_CASE("metrics are invariant under uniform canvas rescaling") {
    Rng rng(11);
    Layout l = random_layout(rng);
    Layout big = l;
    big.canvas_w *= 4;
    big.canvas_h *= 4;
    CHECK(overlap(l) == overlap(big));
    CHECK(alignment(l) == alignment(big));
    // occlusion computed on a 2x resolution mask of the same shape
    Mask m(96, 128), m2(192, 256);
    for (int r = 0; r < 96; ++r)
        for (int c = 0; c < 128; ++c) {
            uint8_t v = (r < 40 && c > 30) ? 1 : 0;
            m.at(r, c) = v;
        }
    for (int r = 0; r < 192; ++r)
        for (int c = 0; c < 256; ++c) m2.at(r, c) = (r / 2 < 40 && c / 2 > 30) ? 1 : 0;
    auto o1 = occlusion(l, m);
    auto o2 = occlusion(l, m2);
    REQUIRE(o1.has_value());
    REQUIRE(o2.has_value());
    CHECK(std::abs(*o1 - *o2) < 0.02);
}

TEST_CASE("evaluate aggregates a stub generator into a hand-checked report") {
    // two samples with a top-half mask; the stub emits, per z:
    //   z0: two identical boxes fully salient -> overlap 0.5, alignment 0, occlusion 1
    //   z1: one box fully below -> overlap 0, alignment 0, occlusion 0
    GenConfig gen;
    gen.seed = 1;
    std::vector<Sample> samples;
    for (int i = 0; i < 2; ++i) {
        Sample s = generate_sample((uint64_t)i, gen);
        for (int r = 0; r < s.saliency.h; ++r)
            for (int c = 0; c < s.saliency.w; ++c) s.saliency.at(r, c) = r < s.saliency.h / 2;
        samples.push_back(std::move(s));
    }
    LayoutGenerator stub = [](const Sample&, int z, Rng&) {
        if (z == 0)
            return lay({elem(ElemClass::Text, 0.25, 0.25, 0.3, 0.3),
                        elem(ElemClass::Text, 0.25, 0.25, 0.3, 0.3)});
        return lay({elem(ElemClass::Text, 0.5, 0.8, 0.4, 0.2)});
    };
    std::vector<PerSampleMetrics> rows;
    MetricReport rep = evaluate(stub, samples, 2, 42, &rows);
    CHECK(rep.n_samples == 4);
    CHECK(rep.output_rate == 1.0);
    CHECK(rep.overlap == doctest::Approx(0.25).epsilon(1e-12));    // (0.5+0)/2
    CHECK(rep.alignment == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rep.occlusion == doctest::Approx(0.5).epsilon(1e-9));    // (1+0)/2
    CHECK(rep.n_occlusion_samples == 4);
    CHECK(rows.size() == 4);

    // schema: all required keys in the JSON
    std::string j = rep.to_json();
    for (const char* key : {"output_rate", "overlap", "alignment", "occlusion", "n_samples", "fid"})
        CHECK(j.find(key) != std::string::npos);

    // robustness: an always-empty generator still yields a report
    LayoutGenerator empty_gen = [](const Sample&, int, Rng&) { return Layout{}; };
    MetricReport rep2 = evaluate(empty_gen, samples, 1, 7, nullptr);
    CHECK(rep2.output_rate == 0.0);
    CHECK(rep2.n_occlusion_samples == 0);
}

TEST_CASE("evaluation occlusion is invariant under jointly flipped images") {
    GenConfig gen;
    gen.seed = 31;
    std::vector<Sample> samples, flipped;
    for (int i = 0; i < 6; ++i) {
        Sample s = generate_sample((uint64_t)i, gen);
        Sample f;
        f.id = s.id;
        f.image = flip_horizontal(s.image);
        f.saliency = flip_horizontal(s.saliency);
        f.layout = s.layout;
        samples.push_back(std::move(s));
        flipped.push_back(std::move(f));
    }
    // stub that mirrors its output when handed a flipped sample: emit the
    // ground-truth layout (flipped accordingly)
    LayoutGenerator gt = [](const Sample& s, int, Rng&) { return s.layout; };
    LayoutGenerator gt_flip = [](const Sample& s, int, Rng&) {
        Layout l = s.layout;
        for (auto& e : l.elements) e.cx = 1.0 - e.cx;
        return l;
    };
    MetricReport a = evaluate(gt, samples, 1, 3, nullptr);
    MetricReport b = evaluate(gt_flip, flipped, 1, 3, nullptr);
    CHECK(a.occlusion == doctest::Approx(b.occlusion).epsilon(1e-9));
}
