#pragma once

#include <fstream>

#include <json.hpp>

#include "icvt/layout.hpp"

namespace icvt {

// Layout interchange: JSON Lines, one record per sample.
// {"id": str, "canvas": {"w": int, "h": int}, "elements": [{"cls": ..., "cx":
// ..., "cy": ..., "w": ..., "h": ...}]}

inline nlohmann::json layout_to_json(const Layout& l) {
    nlohmann::json rec;
    rec["id"] = l.id;
    rec["canvas"] = {{"w", l.canvas_w}, {"h", l.canvas_h}};
    rec["elements"] = nlohmann::json::array();
    for (const auto& e : l.elements) {
        rec["elements"].push_back({{"cls", elem_class_name(e.cls)},
                                   {"cx", e.cx},
                                   {"cy", e.cy},
                                   {"w", e.w},
                                   {"h", e.h}});
    }
    return rec;
}

inline Layout layout_from_json(const nlohmann::json& rec) {
    Layout l;
    l.id = rec.at("id").get<std::string>();
    l.canvas_w = rec.at("canvas").at("w").get<int>();
    l.canvas_h = rec.at("canvas").at("h").get<int>();
    for (const auto& je : rec.at("elements")) {
        LayoutElement e;
        e.cls = elem_class_from_name(je.at("cls").get<std::string>());
        e.cx = je.at("cx").get<double>();
        e.cy = je.at("cy").get<double>();
        e.w = je.at("w").get<double>();
        e.h = je.at("h").get<double>();
        l.elements.push_back(e);
    }
    return l;
}

inline void write_layouts_jsonl(const std::string& path, const std::vector<Layout>& layouts) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (const auto& l : layouts) f << layout_to_json(l).dump() << "\n";
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<Layout> read_layouts_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<Layout> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(layout_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace icvt
