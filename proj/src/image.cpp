#include "icvt/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace icvt {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back((v >> 24) & 0xff);
    out.push_back((v >> 16) & 0xff);
    out.push_back((v >> 8) & 0xff);
    out.push_back(v & 0xff);
}

uint32_t get_u32(const uint8_t* p) {
    return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16) | ((uint32_t)p[2] << 8) | p[3];
}

void write_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32(out, (uint32_t)data.size());
    size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + crc_start, (uInt)(out.size() - crc_start));
    put_u32(out, crc);
}

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<uint8_t>& pixels) {
    std::vector<uint8_t> raw;
    raw.reserve((size_t)h * (w * channels + 1));
    for (int r = 0; r < h; ++r) {
        raw.push_back(0);  // filter type 0
        raw.insert(raw.end(), pixels.begin() + (size_t)r * w * channels,
                   pixels.begin() + (size_t)(r + 1) * w * channels);
    }
    uLongf bound = compressBound((uLong)raw.size());
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), (uLong)raw.size(), 6) != Z_OK)
        throw std::runtime_error("png: compression failed for " + path);
    compressed.resize(bound);

    std::vector<uint8_t> out;
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, (uint32_t)w);
    put_u32(ihdr, (uint32_t)h);
    ihdr.push_back(8);                               // bit depth
    ihdr.push_back(channels == 3 ? 2 : 0);           // color type
    ihdr.push_back(0);                               // compression
    ihdr.push_back(0);                               // filter
    ihdr.push_back(0);                               // interlace
    write_chunk(out, "IHDR", ihdr);
    write_chunk(out, "IDAT", compressed);
    write_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write((const char*)out.data(), (std::streamsize)out.size());
    if (!f) throw std::runtime_error("write failed: " + path);
}

struct DecodedPng {
    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> pixels;  // h*w*channels
};

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

DecodedPng read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw std::runtime_error("not a PNG file: " + path);

    DecodedPng png;
    int bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        uint32_t len = get_u32(buf.data() + pos);
        if (pos + 12 + len > buf.size()) throw std::runtime_error("truncated PNG: " + path);
        std::string type((const char*)buf.data() + pos + 4, 4);
        const uint8_t* data = buf.data() + pos + 8;
        if (type == "IHDR") {
            png.w = (int)get_u32(data);
            png.h = (int)get_u32(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (png.w <= 0 || png.h <= 0) throw std::runtime_error("bad PNG header: " + path);
    if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
        throw std::runtime_error("unsupported PNG format (need 8-bit gray/RGB): " + path);
    png.channels = color_type == 2 ? 3 : 1;

    size_t stride = (size_t)png.w * png.channels;
    std::vector<uint8_t> raw((stride + 1) * png.h);
    uLongf raw_size = (uLongf)raw.size();
    if (uncompress(raw.data(), &raw_size, idat.data(), (uLong)idat.size()) != Z_OK ||
        raw_size != raw.size())
        throw std::runtime_error("corrupt PNG data: " + path);

    png.pixels.resize(stride * png.h);
    int bpp = png.channels;
    for (int r = 0; r < png.h; ++r) {
        uint8_t filter = raw[(stride + 1) * r];
        const uint8_t* src = raw.data() + (stride + 1) * r + 1;
        uint8_t* cur = png.pixels.data() + stride * r;
        const uint8_t* up = r > 0 ? png.pixels.data() + stride * (r - 1) : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= (size_t)bpp ? cur[i - bpp] : 0;
            int b = up ? up[i] : 0;
            int c = (up && i >= (size_t)bpp) ? up[i - bpp] : 0;
            int x = src[i];
            switch (filter) {
                case 0: cur[i] = (uint8_t)x; break;
                case 1: cur[i] = (uint8_t)(x + a); break;
                case 2: cur[i] = (uint8_t)(x + b); break;
                case 3: cur[i] = (uint8_t)(x + (a + b) / 2); break;
                case 4: cur[i] = (uint8_t)(x + paeth(a, b, c)); break;
                default: throw std::runtime_error("bad PNG filter type: " + path);
            }
        }
    }
    return png;
}

uint8_t to_u8(float v) {
    float x = std::min(1.f, std::max(0.f, v));
    return (uint8_t)std::lround(x * 255.f);
}

}  // namespace

void write_png_rgb(const std::string& path, const Image& img) {
    std::vector<uint8_t> pixels((size_t)img.h * img.w * 3);
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = to_u8(img.px[i]);
    write_png(path, img.w, img.h, 3, pixels);
}

void write_png_gray(const std::string& path, const Mask& mask) {
    std::vector<uint8_t> pixels((size_t)mask.h * mask.w);
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = mask.v[i] ? 255 : 0;
    write_png(path, mask.w, mask.h, 1, pixels);
}

Image read_png_rgb(const std::string& path) {
    DecodedPng png = read_png(path);
    Image img(png.h, png.w);
    if (png.channels == 3) {
        for (size_t i = 0; i < png.pixels.size(); ++i) img.px[i] = png.pixels[i] / 255.f;
    } else {
        for (size_t i = 0; i < png.pixels.size(); ++i) {
            float v = png.pixels[i] / 255.f;
            img.px[i * 3] = img.px[i * 3 + 1] = img.px[i * 3 + 2] = v;
        }
    }
    return img;
}

Mask read_png_mask(const std::string& path) {
    DecodedPng png = read_png(path);
    if (png.channels != 1) throw std::runtime_error("mask PNG must be grayscale: " + path);
    Mask m(png.h, png.w);
    for (size_t i = 0; i < png.pixels.size(); ++i) m.v[i] = png.pixels[i] >= 128 ? 1 : 0;
    return m;
}

Image flip_horizontal(const Image& img) {
    Image out(img.h, img.w);
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(r, img.w - 1 - c, ch);
    return out;
}

Mask flip_horizontal(const Mask& mask) {
    Mask out(mask.h, mask.w);
    for (int r = 0; r < mask.h; ++r)
        for (int c = 0; c < mask.w; ++c) out.at(r, c) = mask.at(r, mask.w - 1 - c);
    return out;
}

}  // namespace icvt
