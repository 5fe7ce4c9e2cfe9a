#include "icvt/render.hpp"

#include <algorithm>
#include <cmath>

namespace icvt {

namespace {

void fill_rect(Image& img, int r0, int c0, int r1, int c1, float r, float g, float b) {
    r0 = std::max(0, r0);
    c0 = std::max(0, c0);
    r1 = std::min(img.h - 1, r1);
    c1 = std::min(img.w - 1, c1);
    for (int rr = r0; rr <= r1; ++rr)
        for (int cc = c0; cc <= c1; ++cc) {
            img.at(rr, cc, 0) = r;
            img.at(rr, cc, 1) = g;
            img.at(rr, cc, 2) = b;
        }
}

}  // namespace

Image render_overlay(const Image& base, const Layout& layout, int thickness) {
    Image out = base;
    for (const auto& e : layout.elements) {
        if (!is_design_class(e.cls)) continue;
        float col[3] = {0, 0, 0};
        if (e.cls == ElemClass::Text) col[0] = 1.f;
        else if (e.cls == ElemClass::Substrate) col[1] = 1.f;
        else col[2] = 1.f;
        int r0 = (int)std::lround(e.top() * base.h);
        int r1 = (int)std::lround(e.bottom() * base.h) - 1;
        int c0 = (int)std::lround(e.left() * base.w);
        int c1 = (int)std::lround(e.right() * base.w) - 1;
        if (r1 < r0 || c1 < c0) continue;
        int t = thickness;
        fill_rect(out, r0, c0, std::min(r1, r0 + t - 1), c1, col[0], col[1], col[2]);
        fill_rect(out, std::max(r0, r1 - t + 1), c0, r1, c1, col[0], col[1], col[2]);
        fill_rect(out, r0, c0, r1, std::min(c1, c0 + t - 1), col[0], col[1], col[2]);
        fill_rect(out, r0, std::max(c0, c1 - t + 1), r1, c1, col[0], col[1], col[2]);
    }
    return out;
}

}  // namespace icvt
