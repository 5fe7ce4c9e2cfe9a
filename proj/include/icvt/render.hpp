#pragma once

#include "icvt/image.hpp"
#include "icvt/layout.hpp"

namespace icvt {

// Draws class-colored rectangle outlines over the image: red for text, green
// for text substrates, blue for logos. Non-design classes are skipped.
Image render_overlay(const Image& base, const Layout& layout, int thickness = 2);

}  // namespace icvt
