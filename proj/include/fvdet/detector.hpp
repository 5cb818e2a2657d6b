// SPDX-License-Identifier: Apache-2.0
//
// Candidate windows, window scoring over a shared per-image patch cache,
// non-maximum suppression and VOC-style average precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fvdet/codebook.hpp"
#include "fvdet/core.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/features.hpp"
#include "fvdet/geometry.hpp"
#include "fvdet/learner.hpp"

namespace fvdet {

struct Detection {
    Window window;
    int class_id = 0;
    double score = 0.0;
    int image_id = 0;
    bool degenerate = false;  // window contained no patches
};

/// Ground-truth object in one image.
struct Object {
    int class_id = 0;
    Window box;
    bool difficult = false;

    bool operator==(const Object&) const = default;
};

struct CandidateConfig {
    std::size_t max_candidates = 1500;
    int min_side = 32;
    double stride_fraction = 0.25;
    double dedup_iou = 0.95;
};

struct DetectorConfig {
    PatchParams patches;
    CandidateConfig candidates;
    Normalization normalization = Normalization::intra;
    double nms_threshold = 0.3;
    bool drop_zero_energy = false;
};

namespace detail {

inline std::vector<int> positions(int extent, int side, int stride) {
    std::vector<int> out;
    for (int p = 0; p + side <= extent; p += stride) out.push_back(p);
    if (!out.empty() && out.back() != extent - side) out.push_back(extent - side);
    return out;
}

inline bool score_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.window < b.window;
}

}  // namespace detail

/// Dense multi-scale, multi-aspect sliding grid: aspect ratios 1:2, 1:1 and
/// 2:1, areas doubling from min_side^2 up to the image area, stride a quarter
/// of the window side, near-duplicates (IoU >= dedup_iou) removed, largest
/// windows first, truncated to max_candidates.
inline std::vector<Window> generate_candidates(int width, int height, const CandidateConfig& cfg = {}) {
    std::vector<Window> raw;
    const double image_area = static_cast<double>(width) * height;
    raw.push_back({0, 0, static_cast<double>(width), static_cast<double>(height)});
    std::vector<double> areas;
    for (double a = static_cast<double>(cfg.min_side) * cfg.min_side; a <= image_area + 1e-9; a *= 2.0) areas.push_back(a);
    std::reverse(areas.begin(), areas.end());
    for (const double area : areas) {
        for (const double aspect : {1.0, 0.5, 2.0}) {  // width / height
            const int w = static_cast<int>(std::lround(std::sqrt(area * aspect)));
            const int h = static_cast<int>(std::lround(std::sqrt(area / aspect)));
            if (w < 1 || h < 1 || w > width || h > height) continue;
            const int sx = std::max(1, static_cast<int>(std::lround(w * cfg.stride_fraction)));
            const int sy = std::max(1, static_cast<int>(std::lround(h * cfg.stride_fraction)));
            for (const int y : detail::positions(height, h, sy))
                for (const int x : detail::positions(width, w, sx))
                    raw.push_back({static_cast<double>(x), static_cast<double>(y), static_cast<double>(w), static_cast<double>(h)});
        }
    }
    std::vector<Window> kept;
    for (const Window& c : raw) {
        bool dup = false;
        for (const Window& k : kept)
            if (iou(c, k) >= cfg.dedup_iou) {
                dup = true;
                break;
            }
        if (!dup) kept.push_back(c);
        if (kept.size() >= cfg.max_candidates) break;
    }
    return kept;
}

inline std::vector<Window> generate_candidates(const GrayImage& image, const CandidateConfig& cfg = {}) {
    return generate_candidates(image.width, image.height, cfg);
}

/// Greedy suppression: visit by descending score (ties by window order) and
/// keep a detection iff its IoU with every kept one is <= threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double threshold = 0.3) {
    std::sort(dets.begin(), dets.end(), detail::score_order);
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool keep = true;
        for (const Detection& k : kept)
            if (iou(d.window, k.window) > threshold) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(d);
    }
    return kept;
}

/// NMS applied separately within each (image, class).
inline std::vector<Detection> nms_per_class(const std::vector<Detection>& dets, double threshold) {
    std::map<std::pair<int, int>, std::vector<Detection>> groups;
    for (const Detection& d : dets) groups[{d.image_id, d.class_id}].push_back(d);
    std::vector<Detection> out;
    for (auto& [key, v] : groups) {
        auto kept = nms(std::move(v), threshold);
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

/// Scores of all candidate windows of one image for one model, using the
/// image's shared point-wise cache. `active` (per group) enables skipping
/// accumulation of groups whose weights are exactly zero.
inline std::vector<Detection> score_windows(const ImageEncoding& enc, const std::vector<Window>& windows, const LinearModel& model,
                                            Normalization norm, int image_id = 0,
                                            const std::vector<std::uint8_t>* active = nullptr) {
    if (!(enc.layout == model.layout)) throw Error("score_windows: model layout does not match encoding");
    WindowAccumulator acc(enc.layout);
    std::vector<Detection> out;
    out.reserve(windows.size());
    const bool can_skip = norm != Normalization::ssr;
    for (const Window& win : windows) {
        SparseFv fv = acc.accumulate(enc, win, can_skip ? active : nullptr);
        normalize(fv, norm);
        Detection d;
        d.window = win;
        d.class_id = model.class_id;
        d.image_id = image_id;
        d.degenerate = fv.bin_counts[0] == 0;
        d.score = d.degenerate ? model.bias : score(fv, model.w, model.bias);
        out.push_back(d);
    }
    return out;
}

/// Patches of an image, projected and (optionally) stripped of zero-energy ones.
inline PatchSet prepare_patches(const GrayImage& image, const PcaProjection& pca, const DetectorConfig& cfg) {
    PatchSet ps = extract_patches(image, cfg.patches);
    if (cfg.drop_zero_energy) {
        PatchSet kept;
        kept.raw.set_cols(ps.raw.cols());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps.zero_energy[i]) continue;
            kept.locations.push_back(ps.locations[i]);
            kept.raw.push_back(ps.raw.row(i));
            kept.zero_energy.push_back(0);
        }
        ps = std::move(kept);
    }
    project_patches(pca, ps);
    return ps;
}

/// Full single-image pipeline: patches, shared encoding, candidates, scores.
inline std::vector<Detection> score_windows(const GrayImage& image, const LinearModel& model, const GmmModel& gmm,
                                            const PcaProjection& pca, const DetectorConfig& cfg, int image_id = 0) {
    const PatchSet ps = prepare_patches(image, pca, cfg);
    const ImageEncoding enc = encode_image(gmm, ps, model.layout.R);
    return score_windows(enc, generate_candidates(image, cfg.candidates), model, cfg.normalization, image_id);
}

/// Cache-free scoring of a single window through the reference aggregation.
inline double score_window_reference(const GrayImage& image, const Window& win, const LinearModel& model, const GmmModel& gmm,
                                     const PcaProjection& pca, const DetectorConfig& cfg) {
    const PatchSet ps = prepare_patches(image, pca, cfg);
    PyramidFv fv = aggregate(gmm, ps, win, model.layout.R);
    if (fv.degenerate) return model.bias;
    fv = normalize(std::move(fv), cfg.normalization);
    return score(fv, model.w, model.bias);
}

enum class ApMode { voc07_11point, all_points };

struct ApReport {
    std::vector<std::optional<double>> per_class;  // nullopt: class without ground truth
    double mean_ap = 0.0;
};

/// Average precision of one class. A detection is a true positive iff its
/// best-overlapping ground truth of that class has IoU >= iou_threshold and
/// is not yet matched; later duplicates are false positives. Difficult
/// objects are neither matched as positives nor counted in recall.
inline std::optional<double> average_precision(const std::vector<Detection>& detections,
                                               const std::vector<std::vector<Object>>& gt, int class_id,
                                               double iou_threshold = 0.5, ApMode mode = ApMode::voc07_11point) {
    std::size_t npos = 0;
    std::vector<std::vector<char>> matched(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        matched[i].assign(gt[i].size(), 0);
        for (const Object& o : gt[i])
            if (o.class_id == class_id && !o.difficult) ++npos;
    }
    if (npos == 0) return std::nullopt;

    std::vector<Detection> dets;
    for (const Detection& d : detections)
        if (d.class_id == class_id) dets.push_back(d);
    std::sort(dets.begin(), dets.end(), detail::score_order);

    std::vector<double> tp, fp;
    for (const Detection& d : dets) {
        if (d.image_id < 0 || static_cast<std::size_t>(d.image_id) >= gt.size()) throw Error("average_precision: image id out of range");
        const auto& objs = gt[static_cast<std::size_t>(d.image_id)];
        double best = -1.0;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < objs.size(); ++j) {
            if (objs[j].class_id != class_id) continue;
            const double o = iou(d.window, objs[j].box);
            if (o > best) {
                best = o;
                arg = j;
            }
        }
        if (best >= iou_threshold) {
            if (objs[arg].difficult) continue;
            auto& m = matched[static_cast<std::size_t>(d.image_id)][arg];
            if (!m) {
                m = 1;
                tp.push_back(1);
                fp.push_back(0);
            } else {
                tp.push_back(0);
                fp.push_back(1);
            }
        } else {
            tp.push_back(0);
            fp.push_back(1);
        }
    }
    std::vector<double> rec(tp.size()), prec(tp.size());
    double ctp = 0, cfp = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        ctp += tp[i];
        cfp += fp[i];
        rec[i] = ctp / static_cast<double>(npos);
        prec[i] = ctp / (ctp + cfp);
    }
    double ap = 0.0;
    if (mode == ApMode::voc07_11point) {
        for (int k = 0; k <= 10; ++k) {
            const double t = k / 10.0;
            double p = 0.0;
            for (std::size_t i = 0; i < rec.size(); ++i)
                if (rec[i] >= t - 1e-12) p = std::max(p, prec[i]);
            ap += p;
        }
        ap /= 11.0;
    } else {
        std::vector<double> mrec{0.0}, mpre{0.0};
        mrec.insert(mrec.end(), rec.begin(), rec.end());
        mpre.insert(mpre.end(), prec.begin(), prec.end());
        mrec.push_back(1.0);
        mpre.push_back(0.0);
        for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
        for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
    return ap;
}

/// Per-class AP and their mean over classes that have ground truth.
inline ApReport evaluate_ap(const std::vector<Detection>& detections, const std::vector<std::vector<Object>>& gt,
                            std::size_t num_classes, double iou_threshold = 0.5, ApMode mode = ApMode::voc07_11point,
                            const std::vector<std::string>& class_names = {}) {
    ApReport rep;
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto ap = average_precision(detections, gt, static_cast<int>(c), iou_threshold, mode);
        if (!ap) {
            warn("evaluate_ap: class " + (c < class_names.size() ? class_names[c] : std::to_string(c)) +
                 " has no ground truth; excluded from mAP");
        } else {
            sum += *ap;
            ++used;
        }
        rep.per_class.push_back(ap);
    }
    rep.mean_ap = used ? sum / static_cast<double>(used) : 0.0;
    return rep;
}

}  // namespace fvdet
