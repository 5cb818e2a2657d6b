// SPDX-License-Identifier: Apache-2.0
//
// Staged end-to-end pipeline writing into one output directory.
//
//   sample -> pca -> gmm -> train -> detect -> evaluate
//                            train -> prune-patches | prune-gaussians | surfaces | top-patches
//                            detect -> parts
//
// Each stage's cache key hashes the config keys it reads together with its
// parent's key; the root key includes a fingerprint of the dataset (index and
// image bytes). manifest.json maps stage -> key and artifacts. A stage whose
// recorded key matches and whose artifacts exist is not recomputed.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fvdet/analysis.hpp"
#include "fvdet/codebook.hpp"
#include "fvdet/config.hpp"
#include "fvdet/core.hpp"
#include "fvdet/corpus.hpp"
#include "fvdet/dataset.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/features.hpp"
#include "fvdet/model_io.hpp"
#include "fvdet/training.hpp"

namespace fvdet {

struct StageInfo {
    std::string name;
    std::string parent;  // empty: depends on the dataset only
    std::vector<std::string> keys;
};

inline const std::vector<StageInfo>& pipeline_stages() {
    static const std::vector<StageInfo> stages = {
        {"sample", "", {"seed", "patch_size", "step", "scales", "scale_factor", "root_sift", "drop_zero_energy", "pca_sample"}},
        {"pca", "sample", {"D"}},
        {"gmm", "pca", {"K", "gmm_sample", "gmm_max_iterations", "gmm_tolerance"}},
        {"train", "gmm", {"R", "normalization", "candidates", "candidate_min_side", "positive_iou", "initial_negatives_per_image",
                          "mining_rounds", "negatives_per_image", "lambda_l2", "svm_epochs", "monitor_every", "lambda_group",
                          "rda_gamma", "rda_iterations", "rda_batch"}},
        {"detect", "train", {"nms"}},
        {"evaluate", "detect", {"ap_mode", "eval_iou"}},
        {"prune-patches", "train", {"nms", "ap_mode", "eval_iou", "prune_fractions", "patch_score_mode"}},
        {"prune-gaussians", "train", {"nms", "ap_mode", "eval_iou", "lambda_grid"}},
        {"surfaces", "train", {"surface_grid", "analysis_class", "surface_gaussians"}},
        {"top-patches", "train", {"analysis_class", "top_n", "top_gaussian", "top_bin"}},
        {"parts", "detect", {"analysis_class", "part_top", "part_clusters", "raster"}},
    };
    return stages;
}

inline const std::vector<std::string>& analysis_stages() {
    static const std::vector<std::string> names = {"prune-patches", "prune-gaussians", "surfaces", "top-patches", "parts"};
    return names;
}

inline const StageInfo& stage_info(const std::string& name) {
    for (const auto& s : pipeline_stages())
        if (s.name == name) return s;
    throw Error("unknown pipeline stage '" + name + "'");
}

/// Keys read by the dataset itself; part of every stage's key.
inline const std::vector<std::string>& dataset_keys() {
    static const std::vector<std::string> keys = {"dataset", "format", "train_split", "test_split"};
    return keys;
}

/// A failure inside a named stage.
class StageError : public Error {
public:
    StageError(const std::string& stage, const std::string& what) : Error("stage '" + stage + "' failed: " + what), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

enum class StageStatus { computed, cached };

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp.string());
        f << text;
        if (!f) throw Error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::uint64_t hash_file(const std::filesystem::path& p, std::uint64_t h) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error("cannot open " + p.string());
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a(std::string(buf, static_cast<std::size_t>(f.gcount())), h);
    }
    return h;
}

// Symmetric heat map: 0 -> mid gray, +-scale -> white/black.
inline GrayImage heat_map(const std::vector<double>& grid, std::size_t G, double scale) {
    GrayImage img(static_cast<int>(G), static_cast<int>(G));
    for (std::size_t j = 0; j < G; ++j)
        for (std::size_t i = 0; i < G; ++i) {
            const double v = scale > 0.0 ? grid[j * G + i] / scale : 0.0;
            // row 0 of the image is the top of the plane (largest second coordinate)
            img.at(static_cast<int>(i), static_cast<int>(G - 1 - j)) = static_cast<float>(0.5 + 0.5 * std::clamp(v, -1.0, 1.0));
        }
    return img;
}

inline void paste(GrayImage& dst, const GrayImage& src, int x0, int y0) {
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) dst.at(x0 + x, y0 + y) = src.at(x, y);
}

}  // namespace detail

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".fvdet.lock") {
        std::filesystem::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw Error("output directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                        " if no run is active)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd_, pid.data(), pid.size());
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;
    ~DirectoryLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

class Pipeline {
public:
    Pipeline(Config cfg, std::filesystem::path out, std::ostream* log = &std::cerr)
        : cfg_(std::move(cfg)), out_(std::move(out)), lock_(out_), log_(log) {
        if (cfg_.str("dataset").empty()) throw Error("config key 'dataset' is required");
        index_ = ingest(cfg_.str("dataset"), parse_format(cfg_.str("format")));
        train_index_ = index_.subset(cfg_.str("train_split"));
        test_index_ = index_.subset(cfg_.str("test_split"));
        fingerprint_ = dataset_fingerprint(index_);
        const auto mpath = out_ / "manifest.json";
        if (std::filesystem::exists(mpath)) {
            try {
                std::ifstream f(mpath);
                manifest_ = nlohmann::json::parse(f);
            } catch (const std::exception& e) {
                warn("ignoring unreadable manifest " + mpath.string() + ": " + e.what());
                manifest_ = nlohmann::json::object();
            }
        }
        if (!manifest_.is_object() || !manifest_.contains("stages")) manifest_ = {{"format", 1}, {"stages", nlohmann::json::object()}};
    }

    /// Runs a stage and everything it depends on.
    void run(const std::string& stage) { ensure(stage); }

    void run_all() {
        for (const auto& s : pipeline_stages()) ensure(s.name);
    }

    const std::map<std::string, StageStatus>& status() const { return status_; }
    const std::filesystem::path& out() const { return out_; }
    const Config& config() const { return cfg_; }
    const DatasetIndex& index() const { return index_; }

    /// Sorted key=value lines of every key the stage's result depends on.
    std::string snapshot(const std::string& stage) const {
        std::vector<std::string> keys = dataset_keys();
        for (std::string s = stage; !s.empty(); s = stage_info(s).parent) {
            const auto& k = stage_info(s).keys;
            keys.insert(keys.end(), k.begin(), k.end());
        }
        return cfg_.canonical(keys) + "dataset_fingerprint=" + hex64(fingerprint_) + "\n";
    }

    std::string stage_key(const std::string& stage) const {
        const auto& info = stage_info(stage);
        const std::uint64_t parent = info.parent.empty() ? fnv1a(cfg_.canonical(dataset_keys()) + hex64(fingerprint_))
                                                         : std::stoull(stage_key(info.parent), nullptr, 16);
        std::vector<std::string> keys = info.keys;
        return hex64(fnv1a(info.name + "\n" + cfg_.canonical(keys), parent));
    }

    // Stage results. Each runs (or loads) its stage on first use.
    const RowMatrix<float>& sample() {
        if (!sample_) {
            ensure("sample");
            if (!sample_) sample_ = read_sample(out_ / "sample.bin");
        }
        return *sample_;
    }
    const PcaProjection& pca() {
        if (!pca_) {
            ensure("pca");
            if (!pca_) pca_ = load_container("pca", "pca.fvm").pca.value();
        }
        return *pca_;
    }
    const GmmModel& gmm() {
        if (!gmm_) {
            ensure("gmm");
            if (!gmm_) gmm_ = load_container("gmm", "gmm.fvm").gmm.value();
        }
        return *gmm_;
    }
    const std::vector<LinearModel>& models() {
        if (!models_) {
            ensure("train");
            if (!models_) models_ = load_container("train", "model.fvm").models;
        }
        return *models_;
    }
    const std::vector<Detection>& detections() {
        if (!detections_) {
            ensure("detect");
            if (!detections_) detections_ = read_detections(out_ / "detections.csv");
        }
        return *detections_;
    }
    const Corpus& train_corpus() {
        if (!train_corpus_) train_corpus_ = build_corpus(train_index_, "training");
        return *train_corpus_;
    }
    const Corpus& test_corpus() {
        if (!test_corpus_) test_corpus_ = build_corpus(test_index_, "test");
        return *test_corpus_;
    }
    /// Final training sets of the dense (or fine-tuned) models, per class.
    const std::vector<MiningResult>& training_sets() {
        if (!training_sets_) {
            ensure("train");
            if (!training_sets_) training_sets_ = read_training_windows(out_ / "training_windows.csv");
        }
        return *training_sets_;
    }

    DetectorConfig detector_config() const {
        DetectorConfig dc;
        dc.patches.patch_size = static_cast<int>(cfg_.count("patch_size"));
        dc.patches.step = static_cast<int>(cfg_.count("step"));
        dc.patches.num_scales = static_cast<int>(cfg_.count("scales"));
        dc.patches.scale_factor = cfg_.real("scale_factor");
        dc.patches.root_sift = cfg_.flag("root_sift");
        dc.drop_zero_energy = cfg_.flag("drop_zero_energy");
        dc.candidates.max_candidates = cfg_.count("candidates");
        dc.candidates.min_side = static_cast<int>(cfg_.count("candidate_min_side"));
        dc.normalization = parse_normalization(cfg_.str("normalization"));
        dc.nms_threshold = cfg_.real("nms");
        return dc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.lambda_l2 = cfg_.real("lambda_l2");
        tc.lambda_group = cfg_.real("lambda_group");
        tc.mining_rounds = cfg_.count("mining_rounds");
        tc.negatives_per_image = cfg_.count("negatives_per_image");
        tc.rda_gamma = cfg_.real("rda_gamma");
        tc.rda_iterations = cfg_.count("rda_iterations");
        tc.rda_batch = cfg_.count("rda_batch");
        tc.svm_epochs = cfg_.count("svm_epochs");
        tc.monitor_every = cfg_.count("monitor_every");
        tc.seed = static_cast<std::uint64_t>(cfg_.integer("seed"));
        return tc;
    }

    MiningConfig mining_config() const {
        MiningConfig mc;
        mc.positive_iou = cfg_.real("positive_iou");
        mc.initial_negatives_per_image = cfg_.count("initial_negatives_per_image");
        mc.jobs = jobs();
        return mc;
    }

    EvalOptions eval_options() const {
        EvalOptions e;
        e.nms_threshold = cfg_.real("nms");
        e.iou_threshold = cfg_.real("eval_iou");
        e.ap_mode = cfg_.str("ap_mode") == "all" ? ApMode::all_points : ApMode::voc07_11point;
        e.jobs = jobs();
        return e;
    }

    /// Fingerprint of the index content and of every referenced image file.
    static std::uint64_t dataset_fingerprint(const DatasetIndex& idx) {
        std::uint64_t h = fnv1a("fvdet-dataset");
        for (const auto& n : idx.class_names) h = fnv1a(n + "\n", h);
        for (const auto& r : idx.records) {
            std::string line = relative_image(idx, r.image) + "," + r.split + "," + std::to_string(r.width) + "," + std::to_string(r.height);
            for (const auto& o : r.objects)
                line += "," + std::to_string(o.class_id) + ":" + detail::fmt17(o.box.x) + ":" + detail::fmt17(o.box.y) + ":" +
                        detail::fmt17(o.box.w) + ":" + detail::fmt17(o.box.h) + ":" + (o.difficult ? "1" : "0");
            h = fnv1a(line + "\n", h);
            h = detail::hash_file(r.image, h);
        }
        return h;
    }

    static std::string relative_image(const DatasetIndex& idx, const std::filesystem::path& image) {
        return image.lexically_relative(idx.root).generic_string();
    }

private:
    std::size_t jobs() const { return std::max<std::size_t>(1, cfg_.count("jobs")); }

    void log(const std::string& msg) const {
        if (log_) *log_ << msg << std::endl;
    }

    void ensure(const std::string& stage) {
        if (status_.count(stage)) return;
        const StageInfo& info = stage_info(stage);
        if (!info.parent.empty()) ensure(info.parent);
        const std::string key = stage_key(stage);
        auto& stages = manifest_["stages"];
        if (stages.contains(stage) && stages[stage].value("key", "") == key) {
            bool present = true;
            for (const auto& a : stages[stage]["artifacts"])
                if (!std::filesystem::exists(out_ / a.get<std::string>())) present = false;
            if (present) {
                status_[stage] = StageStatus::cached;
                log("[" + stage + "] cached");
                return;
            }
        }
        stages.erase(stage);
        write_manifest();
        log("[" + stage + "] running");
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::string> artifacts;
        try {
            artifacts = compute(stage);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
        stages[stage] = {{"key", key}, {"artifacts", artifacts}};
        write_manifest();
        status_[stage] = StageStatus::computed;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log("[" + stage + "] done in " + std::to_string(secs) + " s");
    }

    void write_manifest() const { detail::write_text_atomic(out_ / "manifest.json", manifest_.dump(2) + "\n"); }

    ModelContainer load_container(const std::string& stage, const std::string& file) const {
        const std::string expected = snapshot(stage);
        return load_model(out_ / file, &expected);
    }

    void save_container(const std::string& stage, const std::string& file, ModelContainer c) const {
        c.config = snapshot(stage);
        save_model(out_ / file, c);
    }

    std::vector<std::string> compute(const std::string& stage) {
        if (stage == "sample") return compute_sample();
        if (stage == "pca") return compute_pca();
        if (stage == "gmm") return compute_gmm();
        if (stage == "train") return compute_train();
        if (stage == "detect") return compute_detect();
        if (stage == "evaluate") return compute_evaluate();
        if (stage == "prune-patches") return compute_prune_patches();
        if (stage == "prune-gaussians") return compute_prune_gaussians();
        if (stage == "surfaces") return compute_surfaces();
        if (stage == "top-patches") return compute_top_patches();
        if (stage == "parts") return compute_parts();
        throw Error("unknown pipeline stage '" + stage + "'");
    }

    // -- sample ------------------------------------------------------------

    std::vector<std::string> compute_sample() {
        const auto& recs = train_index_.records;
        if (recs.empty()) throw Error("no images in split '" + cfg_.str("train_split") + "'");
        const std::size_t total = cfg_.count("pca_sample");
        if (total == 0) throw Error("pca_sample must be positive");
        const std::size_t quota = (total + recs.size() - 1) / recs.size();
        const DetectorConfig dc = detector_config();
        const std::uint64_t seed = static_cast<std::uint64_t>(cfg_.integer("seed"));
        std::vector<RowMatrix<float>> parts(recs.size());
        parallel_for(recs.size(), jobs(), [&](std::size_t i) {
            PatchSet ps = extract_patches(read_image(recs[i].image), dc.patches);
            std::vector<std::uint32_t> idx;
            for (std::size_t j = 0; j < ps.size(); ++j)
                if (!dc.drop_zero_energy || !ps.zero_energy[j]) idx.push_back(static_cast<std::uint32_t>(j));
            Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
            rng.shuffle(idx);
            if (idx.size() > quota) idx.resize(quota);
            parts[i] = RowMatrix<float>(0, kRawDim);
            for (std::uint32_t j : idx) parts[i].push_back(ps.raw.row(j));
        });
        RowMatrix<float> s(0, kRawDim);
        for (const auto& p : parts)
            for (std::size_t r = 0; r < p.rows() && s.rows() < total; ++r) s.push_back(p.row(r));
        write_sample(out_ / "sample.bin", s);
        sample_ = std::move(s);
        return {"sample.bin"};
    }

    static void write_sample(const std::filesystem::path& path, const RowMatrix<float>& s) {
        detail::Writer w;
        w.raw("FVDSMP01", 8);
        w.u64(s.rows());
        w.u64(s.cols());
        w.raw(s.data().data(), s.rows() * s.cols() * sizeof(float));
        const auto tmp = std::filesystem::path(path.string() + ".tmp");
        {
            std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
            f.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
            if (!f) throw Error("cannot write " + tmp.string());
        }
        std::filesystem::rename(tmp, path);
    }

    static RowMatrix<float> read_sample(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw Error("cannot open " + path.string());
        const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        if (bytes.size() < 24 || std::memcmp(bytes.data(), "FVDSMP01", 8) != 0) throw Error(path.string() + ": not a sample file");
        detail::Reader in(std::span<const unsigned char>(bytes).subspan(8));
        const std::uint64_t rows = in.u64(), cols = in.u64();
        if (cols != kRawDim || in.remaining() != rows * cols * sizeof(float)) throw Error(path.string() + ": size mismatch");
        RowMatrix<float> s(rows, cols);
        std::memcpy(s.data().data(), bytes.data() + 24, rows * cols * sizeof(float));
        return s;
    }

    // -- codebook ----------------------------------------------------------

    std::vector<std::string> compute_pca() {
        const std::size_t D = cfg_.count("D");
        std::size_t rank = 0;
        PcaProjection p = fit_pca(sample(), D, &rank);
        canonicalize(p);
        ModelContainer c;
        c.pca = p;
        save_container("pca", "pca.fvm", c);
        pca_ = std::move(p);
        return {"pca.fvm"};
    }

    std::vector<std::string> compute_gmm() {
        const PcaProjection& p = pca();
        const RowMatrix<float>& s = sample();
        std::vector<std::size_t> rows(s.rows());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        const std::size_t limit = cfg_.count("gmm_sample");
        const std::uint64_t seed = static_cast<std::uint64_t>(cfg_.integer("seed"));
        if (limit < rows.size()) {
            Rng rng(seed + 2);
            rng.shuffle(rows);
            rows.resize(limit);
            std::sort(rows.begin(), rows.end());
        }
        RowMatrix<float> proj(rows.size(), p.dim);
        for (std::size_t i = 0; i < rows.size(); ++i) p.project<float, float>(s.row(rows[i]), proj.row(i));
        GmmOptions opt;
        opt.max_iterations = cfg_.count("gmm_max_iterations");
        opt.tolerance = cfg_.real("gmm_tolerance");
        GmmModel g = fit_gmm(proj, cfg_.count("K"), seed + 1, opt);
        canonicalize(g);
        ModelContainer c;
        c.gmm = g;
        save_container("gmm", "gmm.fvm", c);
        gmm_ = std::move(g);
        return {"gmm.fvm"};
    }

    Corpus build_corpus(const DatasetIndex& idx, const std::string& what) {
        const PcaProjection& p = pca();
        const GmmModel& g = gmm();
        const DetectorConfig dc = detector_config();
        log("  preparing " + std::to_string(idx.records.size()) + " " + what + " images");
        Corpus c;
        c.gmm = g;
        c.layout = FvLayout{cfg_.count("R"), g.K, g.D};
        c.normalization = dc.normalization;
        c.images.resize(idx.records.size());
        parallel_for(idx.records.size(), jobs(), [&](std::size_t i) {
            c.images[i] = make_corpus_image(read_image(idx.records[i].image), idx.records[i].objects, p, dc);
        });
        return c;
    }

    std::vector<ClassSpec> trained_classes() const {
        std::set<int> present;
        for (const auto& r : train_index_.records)
            for (const auto& o : r.objects)
                if (!o.difficult) present.insert(o.class_id);
        std::vector<ClassSpec> classes;
        for (std::size_t c = 0; c < index_.class_names.size(); ++c) {
            if (present.count(static_cast<int>(c)))
                classes.push_back({static_cast<int>(c), index_.class_names[c]});
            else
                warn("class '" + index_.class_names[c] + "' has no training objects; no model is trained for it");
        }
        if (classes.empty()) throw Error("no class has training objects");
        return classes;
    }

    // -- train -------------------------------------------------------------

    std::vector<std::string> compute_train() {
        const Corpus& data = train_corpus();
        const auto classes = trained_classes();
        const TrainConfig tc = train_config();
        const MiningConfig mc = mining_config();
        std::ostringstream progress;
        progress << "phase,class,round,iteration,objective,active_groups\n";
        const auto progress_fn = [&](const std::string& phase) {
            return [&progress, phase](const TrainProgress& p) {
                progress << phase << ',' << p.class_id << ',' << p.round << ',' << p.iteration << ',' << detail::fmt17(p.objective) << ','
                         << p.active_groups << '\n';
            };
        };
        std::vector<MiningResult> res = train_with_mining(data, classes, tc, mc, nullptr, progress_fn("l2"));
        if (tc.lambda_group > 0.0) {
            // Group-lasso selection on the final mined sets, then l2 fine-tuning on the support.
            std::vector<std::vector<std::uint8_t>> supports;
            for (std::size_t c = 0; c < classes.size(); ++c) {
                TrainConfig g = tc;
                g.seed = tc.seed + static_cast<std::uint64_t>(classes[c].id);
                const ProgressFn pf = [&, id = classes[c].id](const TrainProgress& p) {
                    TrainProgress q = p;
                    q.class_id = id;
                    progress_fn("group_lasso")(q);
                };
                const LinearModel m = train_group_lasso(res[c].positives, res[c].negatives, data.layout, g, pf);
                const GaussianSupport s = gaussian_support(m);
                if (s.count == 0) throw Error("lambda_group leaves class '" + classes[c].name + "' without active groups");
                supports.push_back(s.active);
            }
            res = train_with_mining(data, classes, tc, mc, &supports, progress_fn("finetune"));
        }
        ModelContainer c;
        c.pca = pca();
        c.gmm = gmm();
        std::vector<LinearModel> models;
        for (auto& r : res) {
            canonicalize(r.model);
            models.push_back(r.model);
        }
        c.models = models;
        save_container("train", "model.fvm", c);
        detail::write_text_atomic(out_ / "train_progress.csv", progress.str());
        write_training_windows(out_ / "training_windows.csv", res);
        models_ = std::move(models);
        training_sets_ = std::move(res);
        return {"model.fvm", "train_progress.csv", "training_windows.csv"};
    }

    void write_training_windows(const std::filesystem::path& path, const std::vector<MiningResult>& res) const {
        std::ostringstream os;
        os << "class,kind,image_id,x,y,w,h\n";
        for (const auto& r : res) {
            const auto emit = [&](const char* kind, const std::vector<ImageWindow>& ws) {
                for (const auto& iw : ws)
                    os << r.model.class_id << ',' << kind << ',' << relative_image(index_, train_index_.records[iw.image].image) << ','
                       << detail::fmt17(iw.window.x) << ',' << detail::fmt17(iw.window.y) << ',' << detail::fmt17(iw.window.w) << ','
                       << detail::fmt17(iw.window.h) << '\n';
            };
            emit("positive", r.positive_windows);
            emit("negative", r.negative_windows);
        }
        detail::write_text_atomic(path, os.str());
    }

    std::map<std::string, std::uint32_t> image_ids(const DatasetIndex& idx) const {
        std::map<std::string, std::uint32_t> ids;
        for (std::size_t i = 0; i < idx.records.size(); ++i) ids[relative_image(index_, idx.records[i].image)] = static_cast<std::uint32_t>(i);
        return ids;
    }

    std::vector<MiningResult> read_training_windows(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw Error("cannot open " + path.string());
        const auto ids = image_ids(train_index_);
        const auto& models = this->models();
        std::vector<MiningResult> res(models.size());
        std::map<int, std::size_t> slot;
        for (std::size_t m = 0; m < models.size(); ++m) {
            slot[models[m].class_id] = m;
            res[m].model = models[m];
        }
        std::string line;
        std::getline(f, line);
        for (std::size_t lineno = 2; std::getline(f, line); ++lineno) {
            const auto cols = detail::split_csv_line(line);
            const auto where = path.string() + ":" + std::to_string(lineno);
            if (cols.size() != 7) throw Error(where + ": expected 7 columns");
            const auto s = slot.find(std::stoi(cols[0]));
            const auto im = ids.find(cols[2]);
            if (s == slot.end() || im == ids.end()) throw Error(where + ": unknown class or image");
            const ImageWindow iw{im->second, Window{std::stod(cols[3]), std::stod(cols[4]), std::stod(cols[5]), std::stod(cols[6])}};
            (cols[1] == "positive" ? res[s->second].positive_windows : res[s->second].negative_windows).push_back(iw);
        }
        const Corpus& data = train_corpus();
        for (auto& r : res) {
            r.positives = features_for_windows(data, r.positive_windows, jobs());
            r.negatives = features_for_windows(data, r.negative_windows, jobs());
        }
        return res;
    }

    // -- detect / evaluate -------------------------------------------------

    std::vector<std::string> compute_detect() {
        const Corpus& test = test_corpus();
        DetectOptions opt;
        opt.nms_threshold = cfg_.real("nms");
        opt.jobs = jobs();
        std::vector<Detection> dets = detect_corpus(test, std::span<const LinearModel>(models()), opt);
        std::ostringstream os;
        os << "image_id,class,x,y,w,h,score\n";
        for (const Detection& d : dets)
            os << relative_image(index_, test_index_.records[static_cast<std::size_t>(d.image_id)].image) << ','
               << index_.class_names.at(static_cast<std::size_t>(d.class_id)) << ',' << detail::fmt17(d.window.x) << ','
               << detail::fmt17(d.window.y) << ',' << detail::fmt17(d.window.w) << ',' << detail::fmt17(d.window.h) << ','
               << detail::fmt17(d.score) << '\n';
        detail::write_text_atomic(out_ / "detections.csv", os.str());
        detections_ = std::move(dets);
        return {"detections.csv"};
    }

    std::vector<Detection> read_detections(const std::filesystem::path& path) const {
        std::ifstream f(path);
        if (!f) throw Error("cannot open " + path.string());
        const auto ids = image_ids(test_index_);
        std::vector<Detection> out;
        std::string line;
        std::getline(f, line);
        for (std::size_t lineno = 2; std::getline(f, line); ++lineno) {
            const auto cols = detail::split_csv_line(line);
            const auto where = path.string() + ":" + std::to_string(lineno);
            if (cols.size() != 7) throw Error(where + ": expected 7 columns");
            const auto im = ids.find(cols[0]);
            const int cls = index_.class_id(cols[1]);
            if (im == ids.end() || cls < 0) throw Error(where + ": unknown image or class");
            Detection d;
            d.image_id = static_cast<int>(im->second);
            d.class_id = cls;
            d.window = Window{std::stod(cols[2]), std::stod(cols[3]), std::stod(cols[4]), std::stod(cols[5])};
            d.score = std::stod(cols[6]);
            out.push_back(d);
        }
        return out;
    }

    std::vector<std::string> compute_evaluate() {
        const EvalOptions e = eval_options();
        const ApReport rep = evaluate_ap(detections(), test_index_.ground_truth(), index_.class_names.size(), e.iou_threshold, e.ap_mode,
                                         index_.class_names);
        std::ostringstream os;
        os << "class,ap\n";
        for (std::size_t c = 0; c < rep.per_class.size(); ++c)
            os << index_.class_names[c] << ',' << (rep.per_class[c] ? detail::fmt17(*rep.per_class[c]) : "") << '\n';
        os << "mAP," << detail::fmt17(rep.mean_ap) << '\n';
        detail::write_text_atomic(out_ / "ap_report.csv", os.str());
        return {"ap_report.csv"};
    }

    // -- analysis ----------------------------------------------------------

    std::string per_class_header(const std::string& prefix) const {
        std::string h;
        for (const auto& n : index_.class_names) h += "," + prefix + n;
        return h;
    }

    static std::string per_class_cells(const std::vector<double>& v) {
        std::string s;
        for (double x : v) s += "," + (std::isnan(x) ? std::string() : detail::fmt17(x));
        return s;
    }

    std::vector<std::string> compute_prune_patches() {
        const EvalOptions e = eval_options();
        const PruningCurve curve = prune_patches_experiment(test_corpus(), std::span<const LinearModel>(models()), cfg_.reals("prune_fractions"),
                                                            parse_patch_score_mode(cfg_.str("patch_score_mode")), e);
        std::ostringstream os;
        os << "fraction,ap" << per_class_header("ap_") << '\n';
        for (std::size_t i = 0; i < curve.fractions.size(); ++i)
            os << detail::fmt17(curve.fractions[i]) << ',' << detail::fmt17(curve.ap[i]) << per_class_cells(curve.per_class_ap[i]) << '\n';
        std::filesystem::create_directories(out_ / "analysis");
        detail::write_text_atomic(out_ / "analysis" / "prune_patches.csv", os.str());
        return {"analysis/prune_patches.csv"};
    }

    std::vector<std::string> compute_prune_gaussians() {
        GaussianPruningOptions opt;
        opt.train = train_config();
        opt.train.monitor_every = 0;
        opt.mining = mining_config();
        opt.eval = eval_options();
        std::vector<ClassSpec> classes;
        for (const auto& m : models()) classes.push_back({m.class_id, m.class_name});
        const auto points =
            prune_gaussians_experiment(train_corpus(), test_corpus(), classes, training_sets(), cfg_.reals("lambda_grid"), opt,
                                       [&](const GaussianPruningPoint& p) {
                                           std::ostringstream os;
                                           os << "  lambda " << p.lambda << ": active fraction " << p.active_fraction << ", raw mAP " << p.raw_ap
                                              << ", finetuned mAP " << p.finetuned_ap;
                                           log(os.str());
                                       });
        std::ostringstream os;
        os << "lambda,active_fraction,ap,finetuned_ap,skipped";
        for (const auto& c : classes) os << ",active_" << c.name;
        os << per_class_header("ap_") << per_class_header("finetuned_ap_") << '\n';
        for (const auto& p : points) {
            os << detail::fmt17(p.lambda) << ',' << detail::fmt17(p.active_fraction) << ','
               << (p.skipped ? "" : detail::fmt17(p.raw_ap)) << ',' << (p.skipped ? "" : detail::fmt17(p.finetuned_ap)) << ','
               << (p.skipped ? 1 : 0);
            for (std::size_t g : p.active_groups) os << ',' << g;
            const std::vector<double> blank(index_.class_names.size(), std::numeric_limits<double>::quiet_NaN());
            os << per_class_cells(p.skipped ? blank : p.raw_per_class) << per_class_cells(p.skipped ? blank : p.finetuned_per_class) << '\n';
        }
        std::filesystem::create_directories(out_ / "analysis");
        detail::write_text_atomic(out_ / "analysis" / "prune_gaussians.csv", os.str());
        return {"analysis/prune_gaussians.csv"};
    }

    const LinearModel& analysis_model() {
        const int c = static_cast<int>(cfg_.count("analysis_class"));
        for (const auto& m : models())
            if (m.class_id == c) return m;
        throw Error("no trained model for analysis_class " + std::to_string(c));
    }

    std::vector<std::string> compute_surfaces() {
        const LinearModel& m = analysis_model();
        const Corpus& data = train_corpus();
        const std::size_t G = cfg_.count("surface_grid");
        const std::size_t R = data.layout.R;
        const auto dir = out_ / "analysis" / "surfaces";
        std::filesystem::create_directories(dir);
        std::vector<std::string> artifacts;
        for (const std::size_t k : cfg_.counts("surface_gaussians")) {
            if (k >= data.gmm.K) throw Error("surface_gaussians: Gaussian " + std::to_string(k) + " out of range");
            const RowMatrix<float> desc = gaussian_descriptors(data, k, 50000);
            std::vector<ScoreSurface> surfaces;
            double scale = 0.0;
            for (std::size_t b = 0; b < data.layout.bins(); ++b) {
                surfaces.push_back(score_surface(desc, data.gmm, m, k, b, G));
                for (double v : surfaces.back().grid) scale = std::max(scale, std::abs(v));
                std::ostringstream os;
                for (std::size_t j = 0; j < G; ++j) {
                    for (std::size_t i = 0; i < G; ++i) os << (i ? "," : "") << detail::fmt17(surfaces.back().at(i, j));
                    os << '\n';
                }
                const std::string name = "surface_k" + std::to_string(k) + "_b" + std::to_string(b) + ".csv";
                detail::write_text_atomic(dir / name, os.str());
                artifacts.push_back("analysis/surfaces/" + name);
            }
            // whole-window bin on its own, the R x R cells as a grid in their spatial layout
            const std::string whole = "surface_k" + std::to_string(k) + "_whole.pgm";
            write_pgm(dir / whole, detail::heat_map(surfaces[0].grid, G, scale));
            const int gap = 2, g = static_cast<int>(G);
            GrayImage grid(static_cast<int>(R) * (g + gap) - gap, static_cast<int>(R) * (g + gap) - gap, 1.0f);
            for (std::size_t b = 1; b < surfaces.size(); ++b) {
                const int cx = static_cast<int>((b - 1) % R), cy = static_cast<int>((b - 1) / R);
                detail::paste(grid, detail::heat_map(surfaces[b].grid, G, scale), cx * (g + gap), cy * (g + gap));
            }
            const std::string cells = "surface_k" + std::to_string(k) + "_cells.pgm";
            write_pgm(dir / cells, grid);
            artifacts.push_back("analysis/surfaces/" + whole);
            artifacts.push_back("analysis/surfaces/" + cells);
        }
        return artifacts;
    }

    std::vector<std::string> compute_top_patches() {
        const LinearModel& m = analysis_model();
        const Corpus& data = train_corpus();
        const std::size_t k = cfg_.count("top_gaussian"), bin = cfg_.count("top_bin");
        if (k >= data.gmm.K) throw Error("top_gaussian out of range");
        if (bin >= data.layout.bins()) throw Error("top_bin out of range");
        const TopPatches top = top_patches(data, m, k, bin, cfg_.count("top_n"));
        if (top.short_list) warn("top-patches: fewer than top_n patches assigned to Gaussian " + std::to_string(k));
        std::ostringstream os;
        os << "rank,image_id,center_x,center_y,scale,level,score\n";
        for (std::size_t r = 0; r < top.patches.size(); ++r) {
            const auto& p = top.patches[r];
            os << r << ',' << relative_image(index_, train_index_.records[static_cast<std::size_t>(p.image_id)].image) << ','
               << detail::fmt17(p.center_x) << ',' << detail::fmt17(p.center_y) << ',' << detail::fmt17(p.scale) << ',' << p.level << ','
               << detail::fmt17(p.score) << '\n';
        }
        std::filesystem::create_directories(out_ / "analysis");
        detail::write_text_atomic(out_ / "analysis" / "top_patches.csv", os.str());

        // mosaic: each patch's support region resampled to 32x32, 6 per row
        const int cell = 32, gap = 2, per_row = 6;
        const int n = static_cast<int>(top.patches.size());
        const int rows = std::max(1, (n + per_row - 1) / per_row);
        GrayImage mosaic(per_row * (cell + gap) - gap, rows * (cell + gap) - gap, 1.0f);
        const double side0 = static_cast<double>(cfg_.count("patch_size"));
        for (int r = 0; r < n; ++r) {
            const auto& p = top.patches[static_cast<std::size_t>(r)];
            const GrayImage img = read_image(train_index_.records[static_cast<std::size_t>(p.image_id)].image);
            const double side = side0 * p.scale;
            const Window w{p.center_x - side / 2, p.center_y - side / 2, side, side};
            detail::paste(mosaic, raster_window(img, w, cell), (r % per_row) * (cell + gap), (r / per_row) * (cell + gap));
        }
        write_pgm(out_ / "analysis" / "top_patches.pgm", mosaic);
        return {"analysis/top_patches.csv", "analysis/top_patches.pgm"};
    }

    std::vector<std::string> compute_parts() {
        const int c = static_cast<int>(cfg_.count("analysis_class"));
        PartClusterOptions opt;
        opt.top_n = cfg_.count("part_top");
        opt.clusters = cfg_.count("part_clusters");
        opt.raster = static_cast<int>(cfg_.count("raster"));
        opt.seed = static_cast<std::uint64_t>(cfg_.integer("seed"));
        const auto load = [&](std::size_t i) { return read_image(test_index_.records[i].image); };
        const PartClusters pc = cluster_part_appearances(test_corpus(), load, detections(), c, opt);
        const auto dir = out_ / "analysis" / "parts";
        std::filesystem::create_directories(dir);
        std::vector<std::string> artifacts;
        std::ostringstream summary;
        summary << "bin,cluster,members,empty,objective\n";
        std::ostringstream assign;
        assign << "rank,image_id,x,y,w,h,score";
        for (std::size_t b = 0; b < pc.bins.size(); ++b) assign << ",bin" << b;
        assign << '\n';
        for (std::size_t d = 0; d < pc.detections.size(); ++d) {
            const Detection& det = pc.detections[d];
            assign << d << ',' << relative_image(index_, test_index_.records[static_cast<std::size_t>(det.image_id)].image) << ','
                   << detail::fmt17(det.window.x) << ',' << detail::fmt17(det.window.y) << ',' << detail::fmt17(det.window.w) << ','
                   << detail::fmt17(det.window.h) << ',' << detail::fmt17(det.score);
            for (const auto& bc : pc.bins) assign << ',' << bc.kmeans.assignment[d];
            assign << '\n';
        }
        const int gap = 2;
        for (const auto& bc : pc.bins) {
            for (std::size_t j = 0; j < bc.mean_images.size(); ++j)
                summary << bc.bin << ',' << j << ',' << bc.kmeans.counts[j] << ',' << int(bc.empty[j]) << ','
                        << detail::fmt17(bc.kmeans.objective) << '\n';
            GrayImage strip(static_cast<int>(bc.mean_images.size()) * (opt.raster + gap) - gap, opt.raster, 1.0f);
            for (std::size_t j = 0; j < bc.mean_images.size(); ++j)
                detail::paste(strip, bc.mean_images[j], static_cast<int>(j) * (opt.raster + gap), 0);
            const std::string name = "parts_bin" + std::to_string(bc.bin) + ".pgm";
            write_pgm(dir / name, strip);
            artifacts.push_back("analysis/parts/" + name);
        }
        detail::write_text_atomic(dir / "parts.csv", summary.str());
        detail::write_text_atomic(dir / "part_assignments.csv", assign.str());
        artifacts.push_back("analysis/parts/parts.csv");
        artifacts.push_back("analysis/parts/part_assignments.csv");
        return artifacts;
    }

    Config cfg_;
    std::filesystem::path out_;
    DirectoryLock lock_;
    std::ostream* log_;
    DatasetIndex index_, train_index_, test_index_;
    std::uint64_t fingerprint_ = 0;
    nlohmann::json manifest_;
    std::map<std::string, StageStatus> status_;

    std::optional<RowMatrix<float>> sample_;
    std::optional<PcaProjection> pca_;
    std::optional<GmmModel> gmm_;
    std::optional<std::vector<LinearModel>> models_;
    std::optional<std::vector<Detection>> detections_;
    std::optional<std::vector<MiningResult>> training_sets_;
    std::optional<Corpus> train_corpus_, test_corpus_;
};

}  // namespace fvdet
