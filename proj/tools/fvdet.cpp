// SPDX-License-Identifier: Apache-2.0
//
// fvdet command-line tool.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fvdet/fvdet.hpp"

namespace {

struct CommonOptions {
    std::string config;
    std::string out = "fvdet_out";
    std::optional<long long> seed;
    std::optional<std::size_t> jobs;
    std::vector<std::string> sets;
};

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("--config", o.config, "configuration file (key=value lines)");
    app->add_option("--out", o.out, "output directory")->capture_default_str();
    app->add_option("--seed", o.seed, "override the config seed");
    app->add_option("--jobs", o.jobs, "worker threads");
    app->add_option("--set", o.sets, "override a config key (key=value), repeatable");
}

fvdet::Config make_config(const CommonOptions& o) {
    fvdet::Config c = o.config.empty() ? fvdet::Config() : fvdet::Config::load(o.config);
    if (o.seed) c.set("seed", std::to_string(*o.seed));
    if (o.jobs) c.set("jobs", std::to_string(*o.jobs));
    for (const auto& kv : o.sets) c.set_assignment(kv);
    return c;
}

void print_container(const fvdet::ModelContainer& c) {
    std::cout << "format version " << c.version << '\n';
    if (c.pca) std::cout << "pca: " << c.pca->input_dim << " -> " << c.pca->dim << '\n';
    if (c.gmm) std::cout << "gmm: K=" << c.gmm->K << " D=" << c.gmm->D << '\n';
    for (const auto& m : c.models)
        std::cout << "model: class " << m.class_id << " (" << m.class_name << ") R=" << m.layout.R << " dim=" << m.w.size()
                  << " active groups " << fvdet::gaussian_support(m).count << "/" << m.num_groups() << '\n';
    std::cout << "config:\n" << c.config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fisher-vector object detection toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic two-class dataset");
    std::string synth_out = "synth";
    std::size_t synth_images = 300, synth_test = 100;
    std::uint64_t synth_seed = 0;
    fvdet::SynthSpec spec;
    synth->add_option("--out", synth_out, "dataset root")->capture_default_str();
    synth->add_option("--images", synth_images, "number of images")->capture_default_str();
    synth->add_option("--test", synth_test, "images tagged as test (the last ones)")->capture_default_str();
    synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
    synth->add_option("--width", spec.width)->capture_default_str();
    synth->add_option("--height", spec.height)->capture_default_str();
    synth->add_option("--min-size", spec.min_size, "smallest object side")->capture_default_str();
    synth->add_option("--max-size", spec.max_size, "largest object side")->capture_default_str();

    // ingest
    auto* ing = app.add_subcommand("ingest", "validate a dataset and print its summary");
    std::string ing_root, ing_format = "jsonl", ing_write;
    ing->add_option("root", ing_root, "dataset root")->required();
    ing->add_option("--format", ing_format, "jsonl | voc-xml")->capture_default_str();
    ing->add_option("--write-jsonl", ing_write, "write the index as annotations jsonl");

    // pipeline stages
    CommonOptions common;
    struct StageCmd {
        const char* cmd;
        const char* stage;
        const char* help;
    };
    const std::vector<StageCmd> stage_cmds = {
        {"pca", "pca", "sample descriptors and fit the PCA projection"},
        {"gmm", "gmm", "fit the GMM vocabulary"},
        {"train", "train", "train one detector per class with hard-negative mining"},
        {"detect", "detect", "run the detectors on the test split"},
        {"eval", "evaluate", "compute per-class AP (ap_report.csv)"},
    };
    std::vector<std::pair<CLI::App*, std::string>> stage_apps;
    for (const auto& s : stage_cmds) {
        auto* sub = app.add_subcommand(s.cmd, s.help);
        add_common(sub, common);
        stage_apps.emplace_back(sub, s.stage);
    }
    auto* run = app.add_subcommand("run", "run every stage including all analyses");
    add_common(run, common);

    auto* analyze = app.add_subcommand("analyze", "sparsity and interpretability experiments (all when no experiment is named)");
    add_common(analyze, common);
    std::vector<std::pair<CLI::App*, std::string>> analysis_apps;
    for (const auto& name : fvdet::analysis_stages()) {
        auto* sub = analyze->add_subcommand(name, "run the " + name + " experiment");
        add_common(sub, common);
        analysis_apps.emplace_back(sub, name);
    }

    // model
    auto* model = app.add_subcommand("model", "model container utilities");
    model->require_subcommand(1);
    auto* msave = model->add_subcommand("save", "export the trained container of a pipeline run");
    add_common(msave, common);
    std::string save_to;
    msave->add_option("dest", save_to, "destination file")->required();
    auto* mload = model->add_subcommand("load", "load and validate a container; with --config, check its config snapshot");
    std::string load_path;
    CommonOptions load_common;
    mload->add_option("path", load_path)->required();
    add_common(mload, load_common);
    auto* minfo = model->add_subcommand("info", "print a container's contents");
    std::string info_path;
    minfo->add_option("path", info_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            spec.num_test = synth_test;
            const auto idx = fvdet::generate_synthetic(synth_out, synth_images, synth_seed, spec);
            std::cout << "wrote " << idx.records.size() << " images to " << synth_out << '\n';
            return 0;
        }
        if (ing->parsed()) {
            const auto idx = fvdet::ingest(ing_root, fvdet::parse_format(ing_format));
            std::size_t objects = 0;
            std::map<std::string, std::size_t> splits;
            for (const auto& r : idx.records) {
                objects += r.objects.size();
                ++splits[r.split];
            }
            std::cout << idx.records.size() << " images, " << objects << " objects, " << idx.class_names.size() << " classes\n";
            for (const auto& [s, n] : splits) std::cout << "  split " << s << ": " << n << " images\n";
            for (std::size_t c = 0; c < idx.class_names.size(); ++c) std::cout << "  class " << c << ": " << idx.class_names[c] << '\n';
            if (!ing_write.empty()) fvdet::write_jsonl(idx, ing_write);
            return 0;
        }
        for (const auto& [sub, stage] : stage_apps)
            if (sub->parsed()) {
                fvdet::Pipeline p(make_config(common), common.out);
                p.run(stage);
                return 0;
            }
        if (run->parsed()) {
            fvdet::Pipeline p(make_config(common), common.out);
            p.run_all();
            return 0;
        }
        if (analyze->parsed()) {
            fvdet::Pipeline p(make_config(common), common.out);
            bool any = false;
            for (const auto& [sub, stage] : analysis_apps)
                if (sub->parsed()) {
                    p.run(stage);
                    any = true;
                }
            if (!any)
                for (const auto& stage : fvdet::analysis_stages()) p.run(stage);
            return 0;
        }
        if (msave->parsed()) {
            fvdet::Pipeline p(make_config(common), common.out);
            p.run("train");
            const std::string snap = p.snapshot("train");
            fvdet::save_model(save_to, fvdet::load_model(p.out() / "model.fvm", &snap));
            std::cout << "saved " << save_to << '\n';
            return 0;
        }
        if (mload->parsed()) {
            if (load_common.config.empty() && load_common.sets.empty()) {
                fvdet::load_model(load_path);
            } else {
                fvdet::Pipeline p(make_config(load_common), load_common.out);
                const std::string snap = p.snapshot("train");
                fvdet::load_model(load_path, &snap);
            }
            std::cout << "ok\n";
            return 0;
        }
        if (minfo->parsed()) {
            print_container(fvdet::load_model(info_path));
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "fvdet: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
