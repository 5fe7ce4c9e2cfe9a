#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace icvt {

// Interleaved RGB float image, values in [0,1].
struct Image {
    int h = 0, w = 0;
    std::vector<float> px;  // h*w*3

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), px((size_t)h_ * w_ * 3, 0.f) {}
    float& at(int r, int c, int ch) { return px[((size_t)r * w + c) * 3 + ch]; }
    float at(int r, int c, int ch) const { return px[((size_t)r * w + c) * 3 + ch]; }
};

// Binary saliency mask, 1 = salient.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;  // h*w, values 0/1

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v((size_t)h_ * w_, 0) {}
    uint8_t& at(int r, int c) { return v[(size_t)r * w + c]; }
    uint8_t at(int r, int c) const { return v[(size_t)r * w + c]; }
    size_t count() const {
        size_t n = 0;
        for (uint8_t x : v) n += x;
        return n;
    }
};

// 8-bit PNG I/O (color type 2 = RGB, color type 0 = grayscale), no interlace.
void write_png_rgb(const std::string& path, const Image& img);
void write_png_gray(const std::string& path, const Mask& mask);  // 0 or 255
Image read_png_rgb(const std::string& path);
Mask read_png_mask(const std::string& path);  // >=128 -> 1

Image flip_horizontal(const Image& img);
Mask flip_horizontal(const Mask& mask);

}  // namespace icvt
