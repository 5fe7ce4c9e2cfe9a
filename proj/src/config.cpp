#include "icvt/config.hpp"

#include <fstream>

#include "icvt/errors.hpp"

namespace icvt {

nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["data_dir"] = c.data_dir;
    j["out_dir"] = c.out_dir;
    j["data"] = {{"H", c.gen.H},
                 {"W", c.gen.W},
                 {"patch", c.gen.patch},
                 {"placement", placement_name(c.gen.placement)},
                 {"min_texts", c.gen.min_texts},
                 {"max_texts", c.gen.max_texts},
                 {"substrate_prob", c.gen.substrate_prob},
                 {"logo_prob", c.gen.logo_prob}};
    j["model"] = {{"d_attr", c.model.d_attr},
                  {"d_z", c.model.d_z},
                  {"enc_layers", c.model.enc_layers},
                  {"dec_layers", c.model.dec_layers},
                  {"heads", c.model.heads},
                  {"ffn_mult", c.model.ffn_mult},
                  {"bins", c.model.bins},
                  {"max_elements", c.model.max_elements},
                  {"dropout", c.model.dropout},
                  {"continuous_coords", c.model.continuous_coords},
                  {"manual_hidden", c.model.manual_hidden},
                  {"prior", c.model.prior == PriorKind::Learned ? "learned" : "standard"},
                  {"variant", c.model.variant.name},
                  {"backbone",
                   {{"patch", c.model.backbone.patch},
                    {"d_v", c.model.backbone.d_v},
                    {"layers", c.model.backbone.layers},
                    {"heads", c.model.backbone.heads},
                    {"ffn_mult", c.model.backbone.ffn_mult},
                    {"dropout", c.model.backbone.dropout}}},
                  {"adapter",
                   {{"layers", c.model.adapter.layers},
                    {"heads", c.model.adapter.heads},
                    {"ffn_mult", c.model.adapter.ffn_mult},
                    {"dropout", c.model.adapter.dropout}}}};
    j["train"] = {{"batch", c.trainer.batch},
                  {"iters_per_cycle", c.trainer.schedule.period},
                  {"cycles", c.trainer.schedule.cycles},
                  {"beta_low", c.trainer.schedule.beta_low},
                  {"beta_high", c.trainer.schedule.beta_high},
                  {"lr", c.trainer.optim.lr},
                  {"lr_backbone", c.trainer.optim.lr_backbone},
                  {"weight_decay", c.trainer.optim.weight_decay},
                  {"clip", c.trainer.optim.clip},
                  {"augment_flip", c.trainer.augment_flip},
                  {"augment_jitter", c.trainer.augment_jitter},
                  {"log_every", c.trainer.log_every},
                  {"checkpoint_every", c.trainer.checkpoint_every}};
    return j;
}

RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.seed = j.value("seed", (uint64_t)1);
    c.data_dir = j.value("data_dir", std::string());
    c.out_dir = j.value("out_dir", std::string());
    if (j.contains("data")) {
        const auto& d = j["data"];
        c.gen.H = d.value("H", 96);
        c.gen.W = d.value("W", 128);
        c.gen.patch = d.value("patch", 16);
        c.gen.placement = placement_from_name(d.value("placement", std::string("random")));
        c.gen.min_texts = d.value("min_texts", 2);
        c.gen.max_texts = d.value("max_texts", 6);
        c.gen.substrate_prob = d.value("substrate_prob", 0.35);
        c.gen.logo_prob = d.value("logo_prob", 0.4);
    }
    c.gen.seed = c.seed;
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.d_attr = m.value("d_attr", (int64_t)32);
        c.model.d_z = m.value("d_z", (int64_t)32);
        c.model.enc_layers = m.value("enc_layers", 4);
        c.model.dec_layers = m.value("dec_layers", 4);
        c.model.heads = m.value("heads", 8);
        c.model.ffn_mult = m.value("ffn_mult", (int64_t)2);
        c.model.bins = m.value("bins", 128);
        c.model.max_elements = m.value("max_elements", 20);
        c.model.dropout = m.value("dropout", 0.1);
        c.model.continuous_coords = m.value("continuous_coords", false);
        c.model.manual_hidden = m.value("manual_hidden", (int64_t)64);
        std::string prior = m.value("prior", std::string("standard"));
        if (prior == "standard")
            c.model.prior = PriorKind::StandardNormal;
        else if (prior == "learned")
            c.model.prior = PriorKind::Learned;
        else
            throw UsageError("unknown prior kind: " + prior);
        c.model.variant = parse_variant(m.value("variant", std::string("concat-sine")));
        if (m.contains("backbone")) {
            const auto& b = m["backbone"];
            c.model.backbone.patch = b.value("patch", 16);
            c.model.backbone.d_v = b.value("d_v", (int64_t)192);
            c.model.backbone.layers = b.value("layers", 4);
            c.model.backbone.heads = b.value("heads", 4);
            c.model.backbone.ffn_mult = b.value("ffn_mult", (int64_t)2);
            c.model.backbone.dropout = b.value("dropout", 0.1);
        }
        if (m.contains("adapter")) {
            const auto& a = m["adapter"];
            c.model.adapter.layers = a.value("layers", 1);
            c.model.adapter.heads = a.value("heads", 4);
            c.model.adapter.ffn_mult = a.value("ffn_mult", (int64_t)2);
            c.model.adapter.dropout = a.value("dropout", 0.1);
        }
    }
    c.model.image_h = c.gen.H;
    c.model.image_w = c.gen.W;
    if (c.gen.patch != c.model.backbone.patch)
        c.model.backbone.patch = c.gen.patch;
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.trainer.batch = t.value("batch", 32);
        c.trainer.schedule.period = t.value("iters_per_cycle", (int64_t)2000);
        c.trainer.schedule.cycles = t.value("cycles", 2);
        c.trainer.schedule.beta_low = t.value("beta_low", 0.001);
        c.trainer.schedule.beta_high = t.value("beta_high", 0.3);
        c.trainer.optim.lr = t.value("lr", 3e-4);
        c.trainer.optim.lr_backbone = t.value("lr_backbone", 1e-4);
        c.trainer.optim.weight_decay = t.value("weight_decay", 1e-2);
        c.trainer.optim.clip = t.value("clip", 1.0);
        c.trainer.augment_flip = t.value("augment_flip", true);
        c.trainer.augment_jitter = t.value("augment_jitter", true);
        c.trainer.log_every = t.value("log_every", (int64_t)1);
        c.trainer.checkpoint_every = t.value("checkpoint_every", (int64_t)1000);
    }
    c.trainer.seed = c.seed;
    c.trainer.out_dir = c.out_dir;
    if (c.trainer.optim.lr_backbone > c.trainer.optim.lr)
        throw UsageError("train.lr_backbone must not exceed train.lr");
    c.model.validate();
    c.gen.validate();
    return c;
}

nlohmann::json default_config_json() { return config_to_json(RunConfig{}); }

void apply_override(nlohmann::json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw UsageError("override must look like key.path=value: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    nlohmann::json* cur = &j;
    size_t pos = 0;
    while (true) {
        size_t dot = path.find('.', pos);
        std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (key.empty()) throw UsageError("bad override path: " + path);
        if (dot == std::string::npos) {
            nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
            (*cur)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
            return;
        }
        cur = &(*cur)[key];
        pos = dot + 1;
    }
}

std::string config_digest(const nlohmann::json& j) {
    std::string s = j.dump();  // keys are sorted by construction
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return buf;
}

RunConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json j = default_config_json();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot read config file: " + path);
        nlohmann::json file_json;
        try {
            f >> file_json;
        } catch (const std::exception& e) {
            throw UsageError("bad config file " + path + ": " + e.what());
        }
        j.merge_patch(file_json);
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

}  // namespace icvt
