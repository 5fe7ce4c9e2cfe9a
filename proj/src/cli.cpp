#include "icvt/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "icvt/errors.hpp"
#include "icvt/layout_io.hpp"
#include "icvt/metrics.hpp"
#include "icvt/render.hpp"
#include "icvt/training.hpp"

namespace fs = std::filesystem;

namespace icvt {

namespace {

std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Manifest {
    std::string command;
    std::string digest;
    uint64_t seed = 0;
    std::string started;
    std::vector<std::string> artifacts;
    std::vector<std::string> argv;

    void write(const fs::path& dir) const {
        fs::create_directories(dir);
        nlohmann::json j;
        j["command"] = command;
        j["config_digest"] = digest;
        j["seed"] = seed;
        j["started_at"] = started;
        j["finished_at"] = iso_now();
        j["artifacts"] = artifacts;
        j["argv"] = argv;
        std::ofstream f(dir / "run_manifest.json");
        f << j.dump(2) << "\n";
    }
};

// --config accepts both a file path and key.path=value overrides; it may be
// repeated.
RunConfig resolve_config(const std::vector<std::string>& config_args, nlohmann::json* echo) {
    std::string file;
    std::vector<std::string> overrides;
    for (const auto& a : config_args) {
        if (a.find('=') != std::string::npos)
            overrides.push_back(a);
        else if (file.empty())
            file = a;
        else
            throw UsageError("more than one config file given");
    }
    nlohmann::json j = default_config_json();
    if (!file.empty()) {
        std::ifstream f(file);
        if (!f) throw DataError("cannot read config file: " + file);
        nlohmann::json fj;
        try {
            f >> fj;
        } catch (const std::exception& e) {
            throw UsageError("bad config file " + file + ": " + e.what());
        }
        j.merge_patch(fj);
    }
    for (const auto& o : overrides) apply_override(j, o);
    RunConfig rc = config_from_json(j);
    if (echo) *echo = config_to_json(rc);
    return rc;
}

std::vector<Sample> load_dataset_or_fail(const std::string& dir) {
    if (!fs::exists(dir)) throw DataError("dataset directory does not exist: " + dir);
    return read_dataset(dir);
}

std::vector<double> draw_z(int64_t d_z, Rng& rng) {
    std::vector<double> z(d_z);
    for (auto& v : z) v = rng.normal();
    return z;
}

int cmd_make_dataset(const std::vector<std::string>& config_args, std::string out, int64_t n,
                     int64_t seed_opt, const std::vector<std::string>& argv) {
    nlohmann::json echo;
    RunConfig rc = resolve_config(config_args, &echo);
    if (seed_opt >= 0) {
        rc.seed = (uint64_t)seed_opt;
        rc.gen.seed = rc.seed;
        echo["seed"] = rc.seed;
    }
    if (out.empty()) {
        const char* cache = std::getenv("ICVT_CACHE");
        if (!cache || !*cache)
            throw UsageError("no --out given and ICVT_CACHE is not set");
        out = (fs::path(cache) / ("dataset-" + config_digest(echo) + "-" + std::to_string(n)))
                  .string();
    }
    Manifest man{"make-dataset", config_digest(echo), rc.seed, iso_now(), {}, argv};
    std::vector<Sample> samples;
    samples.reserve(n);
    for (int64_t i = 0; i < n; ++i) samples.push_back(generate_sample((uint64_t)i, rc.gen));
    write_dataset(samples, out, rc.gen);
    // stable id-hash split, recorded next to the data
    nlohmann::json split;
    split["train"] = nlohmann::json::array();
    split["val"] = nlohmann::json::array();
    for (const auto& s : samples) split[is_train_id(s.id) ? "train" : "val"].push_back(s.id);
    split["train_count"] = split["train"].size();
    split["val_count"] = split["val"].size();
    {
        std::ofstream f(fs::path(out) / "split.json");
        f << split.dump(2) << "\n";
    }
    man.artifacts = {out};
    man.write(out);
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_train(const std::vector<std::string>& config_args, std::string data, std::string out,
              std::string resume, int64_t seed_opt, const std::vector<std::string>& argv) {
    nlohmann::json echo;
    RunConfig rc = resolve_config(config_args, &echo);
    if (!data.empty()) rc.data_dir = data;
    if (!out.empty()) rc.out_dir = out;
    if (seed_opt >= 0) rc.seed = (uint64_t)seed_opt;
    echo["seed"] = rc.seed;
    echo["data_dir"] = rc.data_dir;
    echo["out_dir"] = rc.out_dir;
    if (rc.data_dir.empty()) throw UsageError("train needs --data or data_dir in the config");
    if (rc.out_dir.empty()) throw UsageError("train needs --out or out_dir in the config");
    rc.trainer.seed = rc.seed;
    rc.trainer.out_dir = rc.out_dir;
    rc.trainer.config_echo = echo.dump(2);

    std::vector<Sample> all = load_dataset_or_fail(rc.data_dir);
    if (all.empty()) throw DataError("dataset is empty: " + rc.data_dir);
    std::vector<Sample> train_set;
    for (auto& s : all)
        if (is_train_id(s.id)) train_set.push_back(std::move(s));
    if (train_set.empty()) throw DataError("training split is empty: " + rc.data_dir);

    Manifest man{"train", config_digest(echo), rc.seed, iso_now(), {}, argv};
    IcvtModel<float> model;
    model.init(rc.model, rc.seed);
    Trainer<float> trainer(model, rc.trainer);
    if (!resume.empty()) {
        model.params.load((fs::path(resume) / "params.bin").string());
        std::ifstream st(fs::path(resume) / "state.json");
        if (!st) throw DataError("missing state.json in checkpoint: " + resume);
        nlohmann::json sj;
        st >> sj;
        trainer.iteration = sj.value("iteration", (int64_t)0);
    }
    trainer.on_log = [](const TrainLogEntry& e) {
        std::cout << "iter " << e.iter << " recon " << e.recon << " kl " << e.kl << " beta "
                  << e.beta << "\n";
    };
    trainer.train(train_set);
    std::string ckpt = trainer.save_checkpoint();
    man.artifacts = {ckpt};
    man.write(rc.out_dir);
    std::cout << "checkpoint at " << ckpt << "\n";
    return 0;
}

int cmd_sample(const std::string& checkpoint, const std::string& images, int n_z,
               std::string out_file, std::string render_dir, double temperature, int64_t seed_opt,
               const std::vector<std::string>& argv) {
    LoadedModel lm = load_checkpoint(checkpoint);
    uint64_t seed = seed_opt >= 0 ? (uint64_t)seed_opt : lm.config.seed;
    std::vector<Sample> inputs = load_dataset_or_fail(images);
    if (inputs.empty()) throw DataError("no samples found in " + images);
    if (out_file.empty()) out_file = "samples.jsonl";
    Manifest man{"sample", config_digest(config_to_json(lm.config)), seed, iso_now(), {}, argv};

    std::vector<Layout> records;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto vc = lm.model->make_condition(inputs[i].image);
        for (int zi = 0; zi < n_z; ++zi) {
            Rng rng(mix_seeds(seed, (uint64_t)(i * 1000003ull + (uint64_t)zi)));
            auto z = draw_z(lm.config.model.d_z, rng);
            SampleOpts opts;
            opts.temperature = temperature;
            Layout l = lm.model->generate(vc, z, opts, rng);
            l.id = inputs[i].id + "#z" + std::to_string(zi);
            records.push_back(l);
            if (!render_dir.empty()) {
                fs::create_directories(render_dir);
                Image overlay = render_overlay(inputs[i].image, l);
                write_png_rgb((fs::path(render_dir) / (l.id + ".png")).string(), overlay);
            }
        }
    }
    write_layouts_jsonl(out_file, records);
    man.artifacts = {out_file};
    if (!render_dir.empty()) man.artifacts.push_back(render_dir);
    man.write(fs::path(out_file).parent_path().empty() ? "." : fs::path(out_file).parent_path());
    std::cout << "wrote " << records.size() << " layouts to " << out_file << "\n";
    return 0;
}

int cmd_complete(const std::string& checkpoint, const std::string& image_path,
                 const std::string& partial_path, int n_z, std::string out_file,
                 double temperature, int64_t seed_opt, const std::vector<std::string>& argv) {
    LoadedModel lm = load_checkpoint(checkpoint);
    uint64_t seed = seed_opt >= 0 ? (uint64_t)seed_opt : lm.config.seed;
    if (!fs::exists(image_path)) throw DataError("image not found: " + image_path);
    Image img;
    try {
        img = read_png_rgb(image_path);
    } catch (const std::exception& e) {
        throw DataError(std::string("cannot read image: ") + e.what());
    }
    std::vector<Layout> partials = read_layouts_jsonl(partial_path);
    if (partials.empty()) throw DataError("no partial layout records in " + partial_path);
    if (out_file.empty()) out_file = "completions.jsonl";
    Manifest man{"complete", config_digest(config_to_json(lm.config)), seed, iso_now(), {}, argv};

    auto vc = lm.model->make_condition(img);
    std::vector<Layout> records;
    for (size_t p = 0; p < partials.size(); ++p)
        for (int zi = 0; zi < n_z; ++zi) {
            Rng rng(mix_seeds(seed, (uint64_t)(p * 1000003ull + (uint64_t)zi)));
            auto z = draw_z(lm.config.model.d_z, rng);
            SampleOpts opts;
            opts.temperature = temperature;
            Layout l = lm.model->complete(vc, partials[p], false, z, opts, rng);
            l.id = partials[p].id + "#z" + std::to_string(zi);
            records.push_back(l);
        }
    write_layouts_jsonl(out_file, records);
    man.artifacts = {out_file};
    man.write(fs::path(out_file).parent_path().empty() ? "." : fs::path(out_file).parent_path());
    std::cout << "wrote " << records.size() << " completions to " << out_file << "\n";
    return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data, int n_z,
                 std::string out_file, std::string csv_file, bool random_baseline,
                 int64_t seed_opt, const std::vector<std::string>& argv) {
    LoadedModel lm = load_checkpoint(checkpoint);
    uint64_t seed = seed_opt >= 0 ? (uint64_t)seed_opt : lm.config.seed;
    std::vector<Sample> test_set = load_dataset_or_fail(data);
    if (test_set.empty()) throw DataError("no samples found in " + data);
    if (out_file.empty()) out_file = "report.json";
    Manifest man{"evaluate", config_digest(config_to_json(lm.config)), seed, iso_now(), {}, argv};

    // conditions are cached per image; generation itself is per (image, z)
    std::vector<VisualCondition<float>> conds;
    conds.reserve(test_set.size());
    for (auto& s : test_set) conds.push_back(lm.model->make_condition(s.image));
    std::vector<const Sample*> order;
    for (auto& s : test_set) order.push_back(&s);
    LayoutGenerator gen = [&](const Sample& s, int, Rng& rng) {
        size_t i = 0;
        while (order[i] != &s) ++i;
        auto z = draw_z(lm.config.model.d_z, rng);
        SampleOpts opts;
        return lm.model->generate(conds[i], z, opts, rng);
    };
    std::vector<PerSampleMetrics> rows;
    MetricReport rep = evaluate(gen, test_set, n_z, seed, csv_file.empty() ? nullptr : &rows);
    {
        std::ofstream f(out_file);
        f << rep.to_json() << "\n";
    }
    man.artifacts = {out_file};
    if (!csv_file.empty()) {
        write_per_sample_csv(csv_file, rows);
        man.artifacts.push_back(csv_file);
    }
    if (random_baseline) {
        LayoutGenerator base = [&](const Sample& s, int, Rng& rng) {
            return random_placement_layout(s, rng);
        };
        MetricReport brep = evaluate(base, test_set, n_z, mix_seeds(seed, 0xba5e), nullptr);
        std::string bpath = out_file + ".baseline.json";
        std::ofstream f(bpath);
        f << brep.to_json() << "\n";
        man.artifacts.push_back(bpath);
        std::cout << "baseline " << brep.to_json() << "\n";
    }
    man.write(fs::path(out_file).parent_path().empty() ? "." : fs::path(out_file).parent_path());
    std::cout << rep.to_json() << "\n";
    return 0;
}

}  // namespace

LoadedModel load_checkpoint(const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "params.bin"))
        throw DataError("checkpoint not found: " + dir);
    std::ifstream cf(fs::path(dir) / "config.json");
    if (!cf) throw DataError("missing config.json in checkpoint: " + dir);
    nlohmann::json j;
    try {
        cf >> j;
    } catch (const std::exception& e) {
        throw DataError("bad config.json in checkpoint " + dir + ": " + e.what());
    }
    LoadedModel lm;
    lm.config = config_from_json(j);
    lm.model = std::make_unique<IcvtModel<float>>();
    lm.model->init(lm.config.model, lm.config.seed);
    lm.model->params.load((fs::path(dir) / "params.bin").string());
    std::ifstream st(fs::path(dir) / "state.json");
    if (st) {
        nlohmann::json sj;
        st >> sj;
        lm.iteration = sj.value("iteration", (int64_t)0);
    }
    return lm;
}

Layout random_placement_layout(const Sample& sample, Rng& rng) {
    Layout l;
    l.canvas_w = sample.image.w;
    l.canvas_h = sample.image.h;
    l.id = sample.id;
    int n = (int)rng.randint(2, 7);
    for (int i = 0; i < n; ++i) {
        LayoutElement e;
        double pick = rng.uniform();
        e.cls = pick < 0.6 ? ElemClass::Text : pick < 0.85 ? ElemClass::Substrate : ElemClass::Logo;
        e.w = rng.uniform(0.08, 0.60);
        e.h = rng.uniform(0.03, 0.12);
        e.cx = rng.uniform(e.w / 2, 1.0 - e.w / 2);
        e.cy = rng.uniform(e.h / 2, 1.0 - e.h / 2);
        l.elements.push_back(e);
    }
    l = canonicalize(l);
    return l;
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> raw(argv, argv + argc);
    CLI::App app{"image-conditioned layout generation toolkit"};
    app.require_subcommand(1);

    // make-dataset
    auto* mk = app.add_subcommand("make-dataset", "generate a synthetic poster dataset");
    std::vector<std::string> mk_config;
    std::string mk_out;
    int64_t mk_n = 1000;
    int64_t mk_seed = -1;
    mk->add_option("--config", mk_config, "config file and/or key.path=value overrides");
    mk->add_option("--out", mk_out, "output dataset directory (default: under ICVT_CACHE)");
    mk->add_option("--n", mk_n, "number of samples")->required();
    mk->add_option("--seed", mk_seed, "generation seed");

    // train
    auto* tr = app.add_subcommand("train", "train the layout model");
    std::vector<std::string> tr_config;
    std::string tr_data, tr_out, tr_resume;
    int64_t tr_seed = -1;
    tr->add_option("--config", tr_config, "config file and/or key.path=value overrides");
    tr->add_option("--data", tr_data, "dataset directory");
    tr->add_option("--out", tr_out, "run output directory");
    tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
    tr->add_option("--seed", tr_seed, "training seed");

    // sample
    auto* sp = app.add_subcommand("sample", "generate layouts for a directory of images");
    std::string sp_ckpt, sp_images, sp_out, sp_render;
    int sp_nz = 1;
    double sp_temp = 1.0;
    int64_t sp_seed = -1;
    sp->add_option("--checkpoint", sp_ckpt, "checkpoint directory")->required();
    sp->add_option("--images", sp_images, "dataset directory with input images")->required();
    sp->add_option("--n-z", sp_nz, "latent draws per image");
    sp->add_option("--out", sp_out, "output JSONL path");
    sp->add_option("--render", sp_render, "directory for PNG overlays");
    sp->add_option("--temperature", sp_temp, "sampling temperature (0 = argmax)");
    sp->add_option("--seed", sp_seed, "sampling seed");

    // complete
    auto* cp = app.add_subcommand("complete", "complete partial layouts on an image");
    std::string cp_ckpt, cp_image, cp_partial, cp_out;
    int cp_nz = 1;
    double cp_temp = 1.0;
    int64_t cp_seed = -1;
    cp->add_option("--checkpoint", cp_ckpt, "checkpoint directory")->required();
    cp->add_option("--image", cp_image, "input image PNG")->required();
    cp->add_option("--partial", cp_partial, "partial layouts JSONL")->required();
    cp->add_option("--n-z", cp_nz, "latent draws per partial");
    cp->add_option("--out", cp_out, "output JSONL path");
    cp->add_option("--temperature", cp_temp, "sampling temperature (0 = argmax)");
    cp->add_option("--seed", cp_seed, "sampling seed");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "run the metric suite on a test set");
    std::string ev_ckpt, ev_data, ev_out, ev_csv;
    int ev_nz = 1;
    bool ev_baseline = false;
    int64_t ev_seed = -1;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--data", ev_data, "test dataset directory")->required();
    ev->add_option("--n-z", ev_nz, "latent draws per image");
    ev->add_option("--out", ev_out, "report JSON path");
    ev->add_option("--csv", ev_csv, "per-sample CSV path");
    ev->add_flag("--random-baseline", ev_baseline, "also report a uniform-random baseline");
    ev->add_option("--seed", ev_seed, "evaluation seed");

    try {
        app.parse(argc, argv);
        if (mk->parsed()) return cmd_make_dataset(mk_config, mk_out, mk_n, mk_seed, raw);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_seed, raw);
        if (sp->parsed())
            return cmd_sample(sp_ckpt, sp_images, sp_nz, sp_out, sp_render, sp_temp, sp_seed, raw);
        if (cp->parsed())
            return cmd_complete(cp_ckpt, cp_image, cp_partial, cp_nz, cp_out, cp_temp, cp_seed, raw);
        if (ev->parsed())
            return cmd_evaluate(ev_ckpt, ev_data, ev_nz, ev_out, ev_csv, ev_baseline, ev_seed, raw);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli((int)argv.size(), argv.data());
}

}  // namespace icvt
