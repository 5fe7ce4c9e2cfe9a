#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace icvt {

// Element classes double as the decoder's class vocabulary: three design
// classes plus the three framing tokens.
enum class ElemClass : int { Text = 0, Substrate = 1, Logo = 2, Bos = 3, Eos = 4, Pad = 5 };

inline const char* elem_class_name(ElemClass c) {
    switch (c) {
        case ElemClass::Text: return "text";
        case ElemClass::Substrate: return "substrate";
        case ElemClass::Logo: return "logo";
        case ElemClass::Bos: return "BOS";
        case ElemClass::Eos: return "EOS";
        case ElemClass::Pad: return "PAD";
    }
    return "?";
}

inline ElemClass elem_class_from_name(const std::string& s) {
    if (s == "text") return ElemClass::Text;
    if (s == "substrate") return ElemClass::Substrate;
    if (s == "logo") return ElemClass::Logo;
    if (s == "BOS") return ElemClass::Bos;
    if (s == "EOS") return ElemClass::Eos;
    if (s == "PAD") return ElemClass::Pad;
    throw std::invalid_argument("unknown element class: " + s);
}

inline bool is_design_class(ElemClass c) {
    return c == ElemClass::Text || c == ElemClass::Substrate || c == ElemClass::Logo;
}

// Center/size box in normalized canvas coordinates. Values stay in [0,1];
// derived corners may spill past the canvas for partially clipped boxes.
struct LayoutElement {
    ElemClass cls = ElemClass::Text;
    double cx = 0, cy = 0, w = 0, h = 0;

    double left() const { return cx - w / 2; }
    double right() const { return cx + w / 2; }
    double top() const { return cy - h / 2; }
    double bottom() const { return cy + h / 2; }
};

struct Layout {
    std::vector<LayoutElement> elements;
    int canvas_w = 0, canvas_h = 0;
    std::string id;

    size_t size() const { return elements.size(); }
    bool empty() const { return elements.empty(); }
};

struct Vocabulary {
    int bins = 128;  // coordinate bins B
    static constexpr int n_classes = 6;
    static constexpr int cls_text = 0;
    static constexpr int cls_substrate = 1;
    static constexpr int cls_logo = 2;
    static constexpr int cls_bos = 3;
    static constexpr int cls_eos = 4;
    static constexpr int cls_pad = 5;
    // coordinate index reserved for BOS/EOS/PAD steps
    int sentinel_bin() const { return bins; }
    int coord_vocab() const { return bins + 1; }
};

// Token steps as parallel index sequences (c, x, y, w, h), BOS at step 0,
// EOS after the last element, PAD afterwards.
struct TokenizedLayout {
    std::vector<std::array<int, 5>> steps;
    std::vector<uint8_t> valid;  // 1 for BOS..EOS inclusive
    int n_elements = 0;

    int length() const { return (int)steps.size(); }
};

inline void check_element(const LayoutElement& e) {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!(in01(e.cx) && in01(e.cy) && in01(e.w) && in01(e.h)))
        throw std::invalid_argument("layout element coordinates out of [0,1]");
}

// floor quantization to B bins with clamping; bins index [0, B-1]
inline int quantize(double v, int bins) {
    if (bins < 2) throw std::invalid_argument("quantize: need at least 2 bins");
    v = std::min(1.0, std::max(0.0, v));
    int idx = (int)std::floor(v * bins);
    return std::min(idx, bins - 1);
}

// bin center
inline double dequantize(int idx, int bins) {
    if (idx < 0 || idx >= bins) throw std::out_of_range("dequantize: index out of range");
    return (idx + 0.5) / bins;
}

// Stable top-to-bottom, left-to-right ordering on quantized box corners, so
// near-ties resolve deterministically.
inline std::vector<LayoutElement> order_elements(const std::vector<LayoutElement>& elements,
                                                 int bins = 128) {
    std::vector<size_t> idx(elements.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        int ta = quantize(elements[a].top(), bins);
        int tb = quantize(elements[b].top(), bins);
        if (ta != tb) return ta < tb;
        int la = quantize(elements[a].left(), bins);
        int lb = quantize(elements[b].left(), bins);
        return la < lb;  // stable_sort keeps original order on full ties
    });
    std::vector<LayoutElement> out;
    out.reserve(elements.size());
    for (size_t i : idx) out.push_back(elements[i]);
    return out;
}

inline Layout canonicalize(Layout l, int bins = 128) {
    l.elements = order_elements(l.elements, bins);
    return l;
}

// One 5-tuple per element in order, framed as BOS ... EOS PAD...; total
// length max_elements + 2.
inline TokenizedLayout tokenize(const Layout& layout, const Vocabulary& vocab, int max_elements) {
    if ((int)layout.size() > max_elements)
        throw std::invalid_argument("layout has more than max_elements elements");
    TokenizedLayout tok;
    int len = max_elements + 2;
    tok.steps.resize(len);
    tok.valid.assign(len, 0);
    tok.n_elements = (int)layout.size();
    int sb = vocab.sentinel_bin();
    tok.steps[0] = {Vocabulary::cls_bos, sb, sb, sb, sb};
    tok.valid[0] = 1;
    for (size_t i = 0; i < layout.size(); ++i) {
        const auto& e = layout.elements[i];
        check_element(e);
        tok.steps[i + 1] = {(int)e.cls, quantize(e.cx, vocab.bins), quantize(e.cy, vocab.bins),
                            quantize(e.w, vocab.bins), quantize(e.h, vocab.bins)};
        tok.valid[i + 1] = 1;
    }
    int eos_pos = (int)layout.size() + 1;
    tok.steps[eos_pos] = {Vocabulary::cls_eos, sb, sb, sb, sb};
    tok.valid[eos_pos] = 1;
    for (int i = eos_pos + 1; i < len; ++i) tok.steps[i] = {Vocabulary::cls_pad, sb, sb, sb, sb};
    return tok;
}

// Inverse of tokenize at bin centers. Framing must be exactly
// BOS, elements..., EOS, PAD...
inline Layout detokenize(const TokenizedLayout& tok, const Vocabulary& vocab) {
    Layout out;
    if (tok.steps.empty() || tok.steps[0][0] != Vocabulary::cls_bos)
        throw std::invalid_argument("detokenize: missing BOS at position 0");
    int eos_pos = -1;
    for (int i = 1; i < tok.length(); ++i) {
        int c = tok.steps[i][0];
        if (c == Vocabulary::cls_bos) throw std::invalid_argument("detokenize: duplicate BOS");
        if (c == Vocabulary::cls_eos) {
            eos_pos = i;
            break;
        }
        if (c == Vocabulary::cls_pad)
            throw std::invalid_argument("detokenize: PAD before EOS");
        LayoutElement e;
        e.cls = (ElemClass)c;
        e.cx = dequantize(tok.steps[i][1], vocab.bins);
        e.cy = dequantize(tok.steps[i][2], vocab.bins);
        e.w = dequantize(tok.steps[i][3], vocab.bins);
        e.h = dequantize(tok.steps[i][4], vocab.bins);
        out.elements.push_back(e);
    }
    if (eos_pos < 0) throw std::invalid_argument("detokenize: missing EOS");
    for (int i = eos_pos + 1; i < tok.length(); ++i)
        if (tok.steps[i][0] != Vocabulary::cls_pad)
            throw std::invalid_argument("detokenize: non-PAD token after EOS");
    return out;
}

}  // namespace icvt
