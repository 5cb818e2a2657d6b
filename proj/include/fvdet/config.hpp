// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value pipeline configuration. Unknown keys are errors; every key
// has a documented default. Lines starting with '#' are comments.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fvdet/core.hpp"

namespace fvdet {

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* help;
};

// Detection geometry defaults follow the reference setup: 12x12 patches,
// step 3, 15 scales at factor 1.2, D=64, K=64, 4x4 pyramid, NMS at 0.3,
// 3 mining rounds of the top 2 false positives, 1500 candidates.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"dataset", "", "dataset root directory"},
        {"format", "jsonl", "annotation format: jsonl | voc-xml"},
        {"train_split", "train", "split tag used for training"},
        {"test_split", "test", "split tag used for detection and evaluation"},
        {"seed", "0", "global seed"},
        {"patch_size", "12", "patch side in pixels"},
        {"step", "3", "patch grid step in pixels"},
        {"scales", "15", "number of pyramid scales"},
        {"scale_factor", "1.2", "scale ratio between pyramid levels"},
        {"root_sift", "false", "square-root (Hellinger) transform of descriptors"},
        {"drop_zero_energy", "false", "drop patches with a zero-gradient descriptor"},
        {"pca_sample", "100000", "descriptors sampled from training images for PCA and GMM"},
        {"D", "64", "PCA output dimension"},
        {"K", "64", "GMM components"},
        {"gmm_sample", "100000", "projected descriptors used to fit the GMM (subset of pca_sample)"},
        {"gmm_max_iterations", "200", "EM iteration cap"},
        {"gmm_tolerance", "1e-5", "EM relative log-likelihood tolerance"},
        {"R", "4", "pyramid grid side (R x R cells plus the whole window)"},
        {"normalization", "intra", "raw | ssr | intra"},
        {"candidates", "1500", "maximum candidate windows per image"},
        {"candidate_min_side", "32", "smallest candidate side in pixels"},
        {"nms", "0.3", "NMS overlap threshold (strictly greater suppresses)"},
        {"positive_iou", "0.7", "candidate overlap with a GT box to join the positives"},
        {"initial_negatives_per_image", "4", "random negatives per training image before mining"},
        {"mining_rounds", "3", "hard-negative mining rounds"},
        {"negatives_per_image", "2", "hard negatives mined per image and round"},
        {"lambda_l2", "1e-4", "l2 SVM regularization"},
        {"svm_epochs", "20", "SGD passes over the training set"},
        {"monitor_every", "1000", "iterations between training progress rows (0 = none)"},
        {"lambda_group", "0", "group-lasso strength for train-stage sparse training (0 = dense l2 training)"},
        {"rda_gamma", "0.05", "RDA step scale"},
        {"rda_iterations", "20000", "RDA iterations"},
        {"rda_batch", "1", "examples per RDA subgradient (0 = full batch)"},
        {"ap_mode", "voc07", "voc07 (11-point) | all"},
        {"eval_iou", "0.5", "overlap for a true positive"},
        {"prune_fractions", "0,0.2,0.4,0.6,0.8,0.9,1", "patch pruning fractions"},
        {"patch_score_mode", "normalized", "normalized | raw patch contributions for pruning"},
        {"lambda_grid", "0,0.0001,0.0003,0.0004,0.0005,0.001", "group-lasso strengths swept by prune-gaussians"},
        {"surface_grid", "64", "score surface resolution"},
        {"analysis_class", "0", "class id used by surfaces, top-patches and parts"},
        {"surface_gaussians", "0,1,2,3", "Gaussians for which surfaces are rendered"},
        {"top_n", "36", "patches retrieved per (Gaussian, bin)"},
        {"top_gaussian", "0", "Gaussian for top-patch retrieval"},
        {"top_bin", "0", "pyramid bin for top-patch retrieval"},
        {"part_top", "200", "detections clustered for part appearances"},
        {"part_clusters", "6", "clusters per bin"},
        {"raster", "64", "side of part-appearance rasters"},
        {"jobs", "1", "worker threads"},
    };
    return keys;
}

class Config {
public:
    Config() {
        for (const auto& k : config_keys()) values_[k.name] = k.default_value;
    }

    static Config parse(const std::string& text, const std::string& source = "config") {
        Config c;
        std::istringstream in(text);
        std::string line;
        for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw Error(source + ":" + std::to_string(lineno) + ": expected key=value");
            try {
                c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            } catch (const Error& e) {
                throw Error(source + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        return c;
    }

    static Config load(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw Error("cannot open config " + path.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw Error("unknown config key '" + key + "'");
        values_[key] = value;
        validate_key(key);
    }

    /// "key=value" override from the command line.
    void set_assignment(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error("expected key=value, got '" + kv + "'");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    const std::string& str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw Error("unknown config key '" + key + "'");
        return it->second;
    }

    double real(const std::string& key) const { return to_double(key, str(key)); }

    long long integer(const std::string& key) const {
        const std::string& v = str(key);
        long long out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) throw Error("config key '" + key + "': expected an integer, got '" + v + "'");
        return out;
    }

    std::size_t count(const std::string& key) const {
        const long long v = integer(key);
        if (v < 0) throw Error("config key '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw Error("config key '" + key + "': expected true or false, got '" + v + "'");
    }

    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(to_double(key, item));
        }
        return out;
    }

    std::vector<std::size_t> counts(const std::string& key) const {
        std::vector<std::size_t> out;
        for (double v : reals(key)) {
            if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) throw Error("config key '" + key + "': expected counts");
            out.push_back(static_cast<std::size_t>(v));
        }
        return out;
    }

    /// Sorted "key=value" lines for the given keys (all keys when empty).
    std::string canonical(const std::vector<std::string>& keys = {}) const {
        std::vector<std::string> ks = keys;
        if (ks.empty())
            for (const auto& [k, v] : values_) ks.push_back(k);
        std::sort(ks.begin(), ks.end());
        ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
        std::string out;
        for (const auto& k : ks) out += k + "=" + str(k) + "\n";
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    bool operator==(const Config&) const = default;

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw Error("config key '" + key + "': expected a number, got '" + v + "'");
        }
    }

    void validate_key(const std::string& key) const {
        static const std::vector<std::string> ints = {"seed", "patch_size", "step", "scales", "pca_sample", "D", "K", "gmm_sample",
                                                      "gmm_max_iterations", "R", "candidates", "candidate_min_side",
                                                      "initial_negatives_per_image", "mining_rounds", "negatives_per_image",
                                                      "svm_epochs", "monitor_every", "rda_iterations", "rda_batch", "surface_grid", "analysis_class",
                                                      "top_n", "top_gaussian", "top_bin", "part_top", "part_clusters", "raster", "jobs"};
        static const std::vector<std::string> reals_ = {"scale_factor", "gmm_tolerance", "nms", "positive_iou", "lambda_l2",
                                                        "lambda_group", "rda_gamma", "eval_iou"};
        if (std::find(ints.begin(), ints.end(), key) != ints.end()) (void)count(key);
        if (std::find(reals_.begin(), reals_.end(), key) != reals_.end()) {
            if (real(key) < 0.0) throw Error("config key '" + key + "' must be non-negative");
        }
        if (key == "root_sift" || key == "drop_zero_energy") (void)flag(key);
        if (key == "prune_fractions" || key == "lambda_grid") (void)reals(key);
        if (key == "surface_gaussians") (void)counts(key);
        if (key == "format" && str(key) != "jsonl" && str(key) != "voc-xml") throw Error("format must be jsonl or voc-xml");
        if (key == "normalization" && str(key) != "raw" && str(key) != "ssr" && str(key) != "intra")
            throw Error("normalization must be raw, ssr or intra");
        if (key == "ap_mode" && str(key) != "voc07" && str(key) != "all") throw Error("ap_mode must be voc07 or all");
        if (key == "patch_score_mode" && str(key) != "normalized" && str(key) != "raw")
            throw Error("patch_score_mode must be normalized or raw");
    }

    std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a, used for stage cache keys.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (const unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
    return s;
}

}  // namespace fvdet
