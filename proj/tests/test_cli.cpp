#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "icvt/cli.hpp"
#include "icvt/layout_io.hpp"
#include "icvt/render.hpp"
#include "icvt/synthetic.hpp"

using namespace icvt;
namespace fs = std::filesystem;

namespace {

fs::path workdir() {
    auto d = fs::temp_directory_path() / "icvt_cli_test";
    fs::create_directories(d);
    return d;
}

// overrides shared by every command in this file: tiny images, tiny model
std::vector<std::string> tiny_overrides() {
    return {"--config", "data.H=32",
            "--config", "data.W=48",
            "--config", "model.d_attr=8",
            "--config", "model.d_z=8",
            "--config", "model.enc_layers=1",
            "--config", "model.dec_layers=1",
            "--config", "model.heads=4",
            "--config", "model.bins=16",
            "--config", "model.max_elements=12",
            "--config", "model.backbone.d_v=16",
            "--config", "model.backbone.layers=1",
            "--config", "model.backbone.heads=2",
            "--config", "model.adapter.layers=1",
            "--config", "train.batch=4",
            "--config", "train.iters_per_cycle=6",
            "--config", "train.cycles=1",
            "--config", "train.checkpoint_every=6",
            "--config", "train.log_every=2"};
}

std::vector<std::string> with_tiny(std::vector<std::string> head,
                                   std::vector<std::string> tail = {}) {
    auto t = tiny_overrides();
    head.insert(head.end(), t.begin(), t.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

const fs::path kWork = workdir();
const std::string kDataset = (kWork / "ds").string();
const std::string kRunDir = (kWork / "run").string();

void ensure_dataset() {
    if (fs::exists(fs::path(kDataset) / "layouts.jsonl")) return;
    int rc = run_cli(with_tiny({"icvt", "make-dataset", "--out", kDataset, "--n", "24", "--seed",
                                "5"}));
    REQUIRE(rc == 0);
}

void ensure_checkpoint() {
    ensure_dataset();
    if (fs::exists(fs::path(kRunDir) / "checkpoint" / "params.bin")) return;
    int rc = run_cli(with_tiny({"icvt", "train", "--data", kDataset, "--out", kRunDir, "--seed",
                                "7"}));
    REQUIRE(rc == 0);
}

}  // namespace

TEST_CASE("make-dataset writes a dataset whose meta counts match the files") {
    fs::remove_all(kWork);
    ensure_dataset();
    auto samples = read_dataset(kDataset);
    CHECK(samples.size() == 24);
    nlohmann::json meta;
    std::ifstream(fs::path(kDataset) / "meta.json") >> meta;
    CHECK(meta["count"] == 24);
    size_t n_img = 0, n_mask = 0;
    for (auto& e : fs::directory_iterator(fs::path(kDataset) / "images")) (void)e, ++n_img;
    for (auto& e : fs::directory_iterator(fs::path(kDataset) / "masks")) (void)e, ++n_mask;
    CHECK(n_img == 24);
    CHECK(n_mask == 24);
    CHECK(fs::exists(fs::path(kDataset) / "run_manifest.json"));

    // split manifest: stable id-hash assignment covering every sample
    nlohmann::json split;
    std::ifstream(fs::path(kDataset) / "split.json") >> split;
    CHECK(split["train_count"].get<int>() + split["val_count"].get<int>() == 24);
    for (const auto& id : split["train"]) CHECK(is_train_id(id.get<std::string>()));
    for (const auto& id : split["val"]) CHECK(!is_train_id(id.get<std::string>()));
}

TEST_CASE("make-dataset is deterministic in the seed and supports n=0") {
    auto d1 = (kWork / "ds_det1").string();
    auto d2 = (kWork / "ds_det2").string();
    REQUIRE(run_cli(with_tiny({"icvt", "make-dataset", "--out", d1, "--n", "6", "--seed", "9"})) ==
            0);
    REQUIRE(run_cli(with_tiny({"icvt", "make-dataset", "--out", d2, "--n", "6", "--seed", "9"})) ==
            0);
    CHECK(slurp(fs::path(d1) / "layouts.jsonl") == slurp(fs::path(d2) / "layouts.jsonl"));
    auto first_image = [&](const std::string& d) {
        auto layouts = read_layouts_jsonl((fs::path(d) / "layouts.jsonl").string());
        return slurp(fs::path(d) / "images" / (layouts[0].id + ".png"));
    };
    CHECK(first_image(d1) == first_image(d2));

    // manifest digests of identical configs are identical
    nlohmann::json m1, m2;
    std::ifstream(fs::path(d1) / "run_manifest.json") >> m1;
    std::ifstream(fs::path(d2) / "run_manifest.json") >> m2;
    CHECK(m1["config_digest"] == m2["config_digest"]);

    auto d0 = (kWork / "ds_zero").string();
    REQUIRE(run_cli(with_tiny({"icvt", "make-dataset", "--out", d0, "--n", "0"})) == 0);
    CHECK(read_dataset(d0).empty());
}

TEST_CASE("make-dataset honors ICVT_CACHE when --out is omitted") {
    auto cache = (kWork / "cache").string();
    setenv("ICVT_CACHE", cache.c_str(), 1);
    REQUIRE(run_cli(with_tiny({"icvt", "make-dataset", "--n", "2", "--seed", "3"})) == 0);
    bool found = false;
    for (auto& e : fs::directory_iterator(cache))
        if (fs::exists(e.path() / "layouts.jsonl")) found = true;
    CHECK(found);
    unsetenv("ICVT_CACHE");
    // without cache or --out: usage error
    CHECK(run_cli(with_tiny({"icvt", "make-dataset", "--n", "2"})) == 1);
}

TEST_CASE("train produces a checkpoint and fails cleanly on a missing dataset") {
    ensure_checkpoint();
    fs::path ck = fs::path(kRunDir) / "checkpoint";
    CHECK(fs::exists(ck / "params.bin"));
    CHECK(fs::exists(ck / "config.json"));
    CHECK(fs::exists(ck / "state.json"));
    nlohmann::json st;
    std::ifstream(ck / "state.json") >> st;
    CHECK(st["iteration"] == 6);
    CHECK(fs::exists(fs::path(kRunDir) / "train_log.jsonl"));
    CHECK(fs::exists(fs::path(kRunDir) / "run_manifest.json"));

    // training log lines carry iter/recon/kl/beta
    std::ifstream log(fs::path(kRunDir) / "train_log.jsonl");
    std::string line;
    REQUIRE(std::getline(log, line));
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("iter"));
    CHECK(j.contains("recon"));
    CHECK(j.contains("kl"));
    CHECK(j.contains("beta"));

    int rc = run_cli(with_tiny({"icvt", "train", "--data", (kWork / "no_such_dir").string(),
                                "--out", (kWork / "run2").string()}));
    CHECK(rc == 2);
}

TEST_CASE("resume continues the iteration count") {
    ensure_checkpoint();
    auto out2 = (kWork / "run_resumed").string();
    int rc = run_cli(with_tiny({"icvt", "train", "--data", kDataset, "--out", out2, "--seed", "7",
                                "--resume", (fs::path(kRunDir) / "checkpoint").string()},
                               {"--config", "train.cycles=2"}));
    REQUIRE(rc == 0);
    nlohmann::json st;
    std::ifstream(fs::path(out2) / "checkpoint" / "state.json") >> st;
    CHECK(st["iteration"] == 12);
}

TEST_CASE("sample writes n_z records per image and optional overlays") {
    ensure_checkpoint();
    auto small_ds = (kWork / "ds_two").string();
    REQUIRE(run_cli(with_tiny({"icvt", "make-dataset", "--out", small_ds, "--n", "2", "--seed",
                               "21"})) == 0);
    auto out_file = (kWork / "samples.jsonl").string();
    auto render_dir = (kWork / "renders").string();
    int rc = run_cli({"icvt", "sample", "--checkpoint", (fs::path(kRunDir) / "checkpoint").string(),
                      "--images", small_ds, "--n-z", "3", "--out", out_file, "--render",
                      render_dir, "--seed", "11"});
    REQUIRE(rc == 0);
    auto records = read_layouts_jsonl(out_file);
    CHECK(records.size() == 6);
    size_t n_png = 0;
    for (auto& e : fs::directory_iterator(render_dir)) (void)e, ++n_png;
    CHECK(n_png == 6);

    // missing checkpoint: data error
    CHECK(run_cli({"icvt", "sample", "--checkpoint", (kWork / "nope").string(), "--images",
                   small_ds, "--n-z", "1"}) == 2);
}

TEST_CASE("complete preserves the given prefix through the CLI") {
    ensure_checkpoint();
    auto samples = read_dataset(kDataset);
    REQUIRE(!samples.empty());
    auto img_path = (fs::path(kDataset) / "images" / (samples[0].id + ".png")).string();

    Layout partial;
    partial.id = "partial0";
    partial.canvas_w = 48;
    partial.canvas_h = 32;
    partial.elements.push_back(LayoutElement{ElemClass::Logo, 0.25, 0.125, 0.1875, 0.0625});
    auto partial_path = (kWork / "partial.jsonl").string();
    write_layouts_jsonl(partial_path, {partial});

    auto out_file = (kWork / "completions.jsonl").string();
    int rc = run_cli({"icvt", "complete", "--checkpoint",
                      (fs::path(kRunDir) / "checkpoint").string(), "--image", img_path,
                      "--partial", partial_path, "--n-z", "2", "--out", out_file, "--seed", "13"});
    REQUIRE(rc == 0);
    auto records = read_layouts_jsonl(out_file);
    REQUIRE(records.size() == 2);
    for (const auto& r : records) {
        REQUIRE(r.size() >= 1);
        CHECK(r.elements[0].cls == ElemClass::Logo);
        CHECK(r.elements[0].cx == partial.elements[0].cx);
        CHECK(r.elements[0].cy == partial.elements[0].cy);
        CHECK(r.elements[0].w == partial.elements[0].w);
        CHECK(r.elements[0].h == partial.elements[0].h);
    }
}

TEST_CASE("evaluate emits a schema-complete report and per-sample CSV") {
    ensure_checkpoint();
    auto report = (kWork / "report.json").string();
    auto csv = (kWork / "per_sample.csv").string();
    int rc = run_cli({"icvt", "evaluate", "--checkpoint",
                      (fs::path(kRunDir) / "checkpoint").string(), "--data", kDataset, "--n-z",
                      "1", "--out", report, "--csv", csv, "--seed", "17", "--random-baseline"});
    REQUIRE(rc == 0);
    nlohmann::json j;
    std::ifstream(report) >> j;
    for (const char* key : {"output_rate", "overlap", "alignment", "occlusion", "n_samples", "fid"})
        CHECK(j.contains(key));
    CHECK(j["n_samples"] == 24);
    CHECK(fs::exists(report + ".baseline.json"));
    std::ifstream c(csv);
    std::string header;
    std::getline(c, header);
    CHECK(header == "id,z_index,n_boxes,overlap,alignment,occlusion");
    int lines = 0;
    std::string tmp;
    while (std::getline(c, tmp)) ++lines;
    CHECK(lines == 24);

    CHECK(run_cli({"icvt", "evaluate", "--checkpoint", (kWork / "missing").string(), "--data",
                   kDataset}) == 2);
}

TEST_CASE("usage errors exit with code 1") {
    CHECK(run_cli({"icvt", "no-such-command"}) == 1);
    CHECK(run_cli({"icvt"}) == 1);
    CHECK(run_cli({"icvt", "train", "--out", (kWork / "x").string()}) == 1);  // no data dir
}

TEST_CASE("rendering draws the documented class colors and skips empty layouts") {
    GenConfig gen;
    gen.seed = 7;
    gen.H = 32;
    gen.W = 48;
    Sample s = generate_sample(0, gen);

    // empty layout: image unchanged
    Layout empty;
    Image same = render_overlay(s.image, empty);
    CHECK(same.px == s.image.px);

    Layout l;
    l.canvas_w = 48;
    l.canvas_h = 32;
    l.elements.push_back(LayoutElement{ElemClass::Text, 0.5, 0.25, 0.5, 0.25});
    l.elements.push_back(LayoutElement{ElemClass::Substrate, 0.5, 0.75, 0.75, 0.2});
    l.elements.push_back(LayoutElement{ElemClass::Logo, 0.2, 0.5, 0.2, 0.2});
    Image overlay = render_overlay(s.image, l);

    // border pixels carry the class colors: red text, green substrate, blue logo
    int text_top = (int)std::lround((0.25 - 0.125) * 32);
    CHECK(overlay.at(text_top, 24, 0) == 1.f);
    CHECK(overlay.at(text_top, 24, 1) == 0.f);
    int sub_top = (int)std::lround((0.75 - 0.1) * 32);
    CHECK(overlay.at(sub_top, 24, 1) == 1.f);
    int logo_row = 16;
    int logo_left = (int)std::lround((0.2 - 0.1) * 48);
    CHECK(overlay.at(logo_row, logo_left, 2) == 1.f);

    // golden-file byte equality
    auto out_png = (kWork / "overlay.png").string();
    write_png_rgb(out_png, overlay);
    fs::path golden = fs::path(ICVT_SOURCE_DIR) / "tests" / "golden" / "overlay_golden.png";
    if (!fs::exists(golden)) {
        // first run in a fresh checkout: write the golden next to the test data
        fs::create_directories(golden.parent_path());
        fs::copy_file(out_png, golden);
    }
    CHECK(slurp(out_png) == slurp(golden));
}
