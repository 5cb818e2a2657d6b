// SPDX-License-Identifier: Apache-2.0
//
// Detector training over a corpus: positive and initial negative window
// sets, hard-negative mining rounds, and l2 fine-tuning restricted to a
// Gaussian support. Classes are trained in lockstep so that each mining
// round accumulates every candidate window once for all class models.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fvdet/core.hpp"
#include "fvdet/corpus.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/learner.hpp"

namespace fvdet {

struct MiningConfig {
    double positive_iou = 0.7;      // candidates this close to a GT box of the class join the positives
    double negative_max_iou = 0.3;  // initial negatives overlap every GT box less than this
    std::size_t initial_negatives_per_image = 4;
    double exclude_iou = 0.5;       // mined windows overlap every GT box of the class less than this
    double dedup_iou = 0.3;         // mined windows are NMS-deduplicated at this overlap
    std::size_t jobs = 1;
};

struct ClassSpec {
    int id = 0;
    std::string name;
};

/// A window of a given corpus image.
struct ImageWindow {
    std::uint32_t image = 0;
    Window window;
    bool operator==(const ImageWindow&) const = default;
};

namespace detail {

inline void append_rows(RowMatrix<float>& dst, const RowMatrix<float>& src) {
    if (dst.empty()) dst.set_cols(src.cols());
    for (std::size_t r = 0; r < src.rows(); ++r) dst.push_back(src.row(r));
}

inline double max_iou(const Window& w, const std::vector<Object>& objs, int class_id /* -1: any */) {
    double m = 0.0;
    for (const Object& o : objs)
        if (class_id < 0 || o.class_id == class_id) m = std::max(m, iou(w, o.box));
    return m;
}

// For each image, select(i) returns one window list per output; the FVs of
// each list are appended (in image order) to the corresponding output, and
// the windows themselves to `windows` when given.
template <typename Fn>
std::vector<RowMatrix<float>> collect(const Corpus& data, std::size_t outputs, std::size_t jobs, Fn&& select,
                                      std::vector<std::vector<ImageWindow>>* windows = nullptr) {
    std::vector<std::vector<RowMatrix<float>>> parts(data.images.size());
    std::vector<std::vector<std::vector<Window>>> chosen(data.images.size());
    parallel_for(data.images.size(), jobs, [&](std::size_t i) {
        chosen[i] = select(i);
        std::size_t total = 0;
        for (const auto& l : chosen[i]) total += l.size();
        parts[i].resize(outputs);
        if (total == 0) return;
        const ImageEncoding enc = data.encode(i);
        for (std::size_t o = 0; o < outputs; ++o)
            if (!chosen[i][o].empty()) parts[i][o] = window_features(enc, chosen[i][o], data.normalization);
    });
    std::vector<RowMatrix<float>> out(outputs, RowMatrix<float>(0, data.layout.size()));
    if (windows) windows->assign(outputs, {});
    for (std::size_t i = 0; i < parts.size(); ++i)
        for (std::size_t o = 0; o < outputs; ++o) {
            if (o < parts[i].size()) append_rows(out[o], parts[i][o]);
            if (windows && o < chosen[i].size())
                for (const Window& w : chosen[i][o]) (*windows)[o].push_back({static_cast<std::uint32_t>(i), w});
        }
    return out;
}

}  // namespace detail

/// Positive windows of one image for a class: its non-difficult GT boxes
/// followed by candidates with IoU >= positive_iou to one of them.
inline std::vector<Window> positive_windows(const CorpusImage& img, int class_id, const MiningConfig& cfg) {
    std::vector<Window> ws;
    std::vector<Object> targets;
    for (const Object& o : img.objects)
        if (o.class_id == class_id && !o.difficult) {
            ws.push_back(o.box);
            targets.push_back(o);
        }
    if (ws.empty()) return ws;
    for (const Window& c : img.candidates)
        if (detail::max_iou(c, targets, -1) >= cfg.positive_iou) ws.push_back(c);
    return ws;
}

/// Random candidates overlapping every GT box by less than negative_max_iou,
/// at most initial_negatives_per_image per image.
inline std::vector<Window> initial_negative_windows(const CorpusImage& img, std::size_t image_index, const MiningConfig& cfg,
                                                    std::uint64_t seed) {
    std::vector<Window> pool;
    for (const Window& c : img.candidates)
        if (detail::max_iou(c, img.objects, -1) < cfg.negative_max_iou) pool.push_back(c);
    Rng rng(seed ^ (0xd1b54a32d192ed03ULL * (image_index + 1)));
    rng.shuffle(pool);
    if (pool.size() > cfg.initial_negatives_per_image) pool.resize(cfg.initial_negatives_per_image);
    return pool;
}

inline RowMatrix<float> collect_positives(const Corpus& data, int class_id, const MiningConfig& cfg) {
    return detail::collect(data, 1, cfg.jobs, [&](std::size_t i) {
        return std::vector<std::vector<Window>>{positive_windows(data.images[i], class_id, cfg)};
    })[0];
}

inline RowMatrix<float> initial_negatives(const Corpus& data, const MiningConfig& cfg, std::uint64_t seed) {
    return detail::collect(data, 1, cfg.jobs, [&](std::size_t i) {
        return std::vector<std::vector<Window>>{initial_negative_windows(data.images[i], i, cfg, seed)};
    })[0];
}

/// Hard negatives of one image for one class, from scored candidates: drop
/// windows with IoU >= exclude_iou to a GT box of the class, dedup by NMS at
/// dedup_iou, keep the best `per_image` regardless of their score.
inline std::vector<Window> select_hard_negatives(const std::vector<Detection>& scored, const CorpusImage& img, int class_id,
                                                 std::size_t per_image, const MiningConfig& cfg) {
    std::vector<Detection> eligible;
    for (const Detection& d : scored)
        if (d.class_id == class_id && detail::max_iou(d.window, img.objects, class_id) < cfg.exclude_iou) eligible.push_back(d);
    eligible = nms(std::move(eligible), cfg.dedup_iou);
    std::vector<Window> out;
    for (std::size_t j = 0; j < eligible.size() && j < per_image; ++j) out.push_back(eligible[j].window);
    return out;
}

/// Hard-negative windows per model and image: result[m][i]. With `supports`,
/// model m is scored with accumulation restricted to its active groups.
inline std::vector<std::vector<std::vector<Window>>> mine_hard_negative_windows(
    std::span<const LinearModel> models, const Corpus& data, std::size_t per_image, const MiningConfig& cfg,
    const std::vector<std::vector<std::uint8_t>>* supports = nullptr) {
    std::vector<std::vector<std::vector<Window>>> out(models.size(), std::vector<std::vector<Window>>(data.images.size()));
    parallel_for(data.images.size(), cfg.jobs, [&](std::size_t i) {
        const auto& img = data.images[i];
        if (img.candidates.empty()) return;
        const ImageEncoding enc = data.encode(i);
        std::vector<Detection> scored;
        if (supports) {
            for (std::size_t m = 0; m < models.size(); ++m) {
                auto d = score_windows(enc, img.candidates, models[m], data.normalization, static_cast<int>(i), &(*supports)[m]);
                scored.insert(scored.end(), d.begin(), d.end());
            }
        } else {
            scored = score_windows(enc, img.candidates, models, data.normalization, static_cast<int>(i));
        }
        for (std::size_t m = 0; m < models.size(); ++m)
            out[m][i] = select_hard_negatives(scored, img, models[m].class_id, per_image, cfg);
    });
    return out;
}

inline RowMatrix<float> mine_hard_negatives(const LinearModel& model, const Corpus& data, std::size_t per_image,
                                            const MiningConfig& cfg) {
    const auto windows = mine_hard_negative_windows(std::span<const LinearModel>(&model, 1), data, per_image, cfg);
    return detail::collect(data, 1, cfg.jobs, [&](std::size_t i) { return std::vector<std::vector<Window>>{windows[0][i]}; })[0];
}

struct MiningResult {
    LinearModel model;
    RowMatrix<float> positives;
    RowMatrix<float> negatives;
    std::vector<ImageWindow> positive_windows;  // row i of positives is the FV of positive_windows[i]
    std::vector<ImageWindow> negative_windows;
    std::vector<std::size_t> negative_pool_sizes;  // before each training round
};

/// Normalized FVs of the given windows, in the given order.
inline RowMatrix<float> features_for_windows(const Corpus& data, const std::vector<ImageWindow>& windows, std::size_t jobs = 1) {
    std::vector<std::vector<std::size_t>> by_image(data.images.size());
    for (std::size_t j = 0; j < windows.size(); ++j) {
        if (windows[j].image >= data.images.size()) throw Error("features_for_windows: image index out of range");
        by_image[windows[j].image].push_back(j);
    }
    RowMatrix<float> out(windows.size(), data.layout.size());
    parallel_for(data.images.size(), jobs, [&](std::size_t i) {
        if (by_image[i].empty()) return;
        const ImageEncoding enc = data.encode(i);
        std::vector<Window> ws;
        for (std::size_t j : by_image[i]) ws.push_back(windows[j].window);
        const RowMatrix<float> f = window_features(enc, ws, data.normalization);
        for (std::size_t r = 0; r < ws.size(); ++r) std::copy(f.row(r).begin(), f.row(r).end(), out.row(by_image[i][r]).begin());
    });
    return out;
}

/// For every class: train an l2 SVM on positives and random initial
/// negatives, then mining_rounds times mine hard negatives, append, retrain.
/// With `supports` (one per class), every FV of class c is masked to its
/// active groups, so the returned weights are exactly zero elsewhere.
inline std::vector<MiningResult> train_with_mining(const Corpus& data, const std::vector<ClassSpec>& classes, const TrainConfig& cfg,
                                                   const MiningConfig& mcfg,
                                                   const std::vector<std::vector<std::uint8_t>>* supports = nullptr,
                                                   const ProgressFn& progress = {}) {
    const std::size_t nc = classes.size();
    if (supports && supports->size() != nc) throw Error("train_with_mining: one support per class required");
    const std::size_t blk = data.layout.block();
    std::vector<MiningResult> res(nc);

    std::vector<std::vector<ImageWindow>> initial_windows;
    auto initial = detail::collect(
        data, nc + 1, mcfg.jobs,
        [&](std::size_t i) {
            std::vector<std::vector<Window>> lists;
            for (const auto& c : classes) lists.push_back(positive_windows(data.images[i], c.id, mcfg));
            lists.push_back(initial_negative_windows(data.images[i], i, mcfg, cfg.seed));
            return lists;
        },
        &initial_windows);
    for (std::size_t c = 0; c < nc; ++c) {
        res[c].positives = std::move(initial[c]);
        res[c].negatives = initial[nc];
        res[c].positive_windows = initial_windows[c];
        res[c].negative_windows = initial_windows[nc];
        if (supports) {
            mask_features(res[c].positives, (*supports)[c], blk);
            mask_features(res[c].negatives, (*supports)[c], blk);
        }
    }

    std::vector<LinearModel> models(nc);
    for (std::size_t round = 0;; ++round) {
        for (std::size_t c = 0; c < nc; ++c) {
            res[c].negative_pool_sizes.push_back(res[c].negatives.rows());
            TrainConfig round_cfg = cfg;
            round_cfg.seed = cfg.seed + 1000003ULL * round + static_cast<std::uint64_t>(classes[c].id);
            ProgressFn tagged;
            if (progress)
                tagged = [&, round, c](const TrainProgress& p) {
                    TrainProgress q = p;
                    q.class_id = classes[c].id;
                    q.round = round;
                    progress(q);
                };
            models[c] = train_svm_l2(res[c].positives, res[c].negatives, data.layout, round_cfg, tagged);
            models[c].class_id = classes[c].id;
            models[c].class_name = classes[c].name;
        }
        if (round == cfg.mining_rounds) break;
        const auto windows = mine_hard_negative_windows(models, data, cfg.negatives_per_image, mcfg, supports);
        std::vector<std::vector<ImageWindow>> mined_windows;
        auto mined = detail::collect(
            data, nc, mcfg.jobs,
            [&](std::size_t i) {
                std::vector<std::vector<Window>> lists;
                for (std::size_t c = 0; c < nc; ++c) lists.push_back(windows[c][i]);
                return lists;
            },
            &mined_windows);
        for (std::size_t c = 0; c < nc; ++c) {
            if (supports) mask_features(mined[c], (*supports)[c], blk);
            detail::append_rows(res[c].negatives, mined[c]);
            res[c].negative_windows.insert(res[c].negative_windows.end(), mined_windows[c].begin(), mined_windows[c].end());
        }
    }
    for (std::size_t c = 0; c < nc; ++c) res[c].model = std::move(models[c]);
    return res;
}

inline MiningResult train_with_mining(const Corpus& data, const ClassSpec& cls, const TrainConfig& cfg, const MiningConfig& mcfg,
                                      const std::vector<std::uint8_t>* support = nullptr, const ProgressFn& progress = {}) {
    std::vector<std::vector<std::uint8_t>> supports;
    if (support) supports.push_back(*support);
    return std::move(train_with_mining(data, {cls}, cfg, mcfg, support ? &supports : nullptr, progress)[0]);
}

/// l2 retraining with mining on the features of the selected groups only.
inline MiningResult finetune_l2(const Corpus& data, const ClassSpec& cls, const std::vector<std::uint8_t>& support,
                                const TrainConfig& cfg, const MiningConfig& mcfg, const ProgressFn& progress = {}) {
    if (support.size() != data.layout.groups()) throw Error("finetune_l2: support size does not match layout");
    if (std::find(support.begin(), support.end(), 1) == support.end()) throw Error("finetune_l2: empty support");
    return train_with_mining(data, cls, cfg, mcfg, &support, progress);
}

}  // namespace fvdet
