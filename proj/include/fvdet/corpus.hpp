// SPDX-License-Identifier: Apache-2.0
//
// A set of images reduced to projected patches, candidate windows and ground
// truth, together with the codebook used to encode them. Training, detection
// and the analysis experiments all run over a Corpus.

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "fvdet/codebook.hpp"
#include "fvdet/core.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/features.hpp"
#include "fvdet/learner.hpp"

namespace fvdet {

struct CorpusImage {
    PatchSet patches;  // locations and projected descriptors; raw may be empty
    std::vector<Window> candidates;
    std::vector<Object> objects;
    int width = 0;
    int height = 0;
};

struct Corpus {
    std::vector<CorpusImage> images;
    GmmModel gmm;
    FvLayout layout;
    Normalization normalization = Normalization::intra;

    ImageEncoding encode(std::size_t i) const { return encode_image(gmm, images[i].patches, layout.R); }

    std::vector<std::vector<Object>> ground_truth() const {
        std::vector<std::vector<Object>> gt;
        gt.reserve(images.size());
        for (const auto& im : images) gt.push_back(im.objects);
        return gt;
    }
};

/// Builds a corpus image: patches (projected with `pca`, raw dropped),
/// candidate windows and objects.
inline CorpusImage make_corpus_image(const GrayImage& image, std::vector<Object> objects, const PcaProjection& pca,
                                     const DetectorConfig& cfg) {
    CorpusImage ci;
    ci.patches = prepare_patches(image, pca, cfg);
    ci.patches.raw = RowMatrix<float>(0, ci.patches.raw.cols());
    ci.candidates = generate_candidates(image, cfg.candidates);
    ci.objects = std::move(objects);
    ci.width = image.width;
    ci.height = image.height;
    return ci;
}

/// Writes a block-sparse FV into a dense float row.
inline void densify_into(const SparseFv& fv, std::span<float> row) {
    std::fill(row.begin(), row.end(), 0.0f);
    const std::size_t blk = fv.layout.block();
    for (std::size_t j = 0; j < fv.groups.size(); ++j)
        for (std::size_t i = 0; i < blk; ++i)
            row[static_cast<std::size_t>(fv.groups[j]) * blk + i] = static_cast<float>(fv.values[j * blk + i]);
}

/// Normalized FV of each window as float rows.
inline RowMatrix<float> window_features(const ImageEncoding& enc, const std::vector<Window>& windows, Normalization norm) {
    RowMatrix<float> out(0, enc.layout.size());
    out.reserve(windows.size());
    WindowAccumulator acc(enc.layout);
    std::vector<float> row(enc.layout.size());
    for (const Window& w : windows) {
        SparseFv fv = acc.accumulate(enc, w);
        normalize(fv, norm);
        densify_into(fv, row);
        out.push_back(row);
    }
    return out;
}

/// Scores every window for every model from a single accumulation per window.
/// Detections are ordered window-major, model-minor.
inline std::vector<Detection> score_windows(const ImageEncoding& enc, const std::vector<Window>& windows,
                                            std::span<const LinearModel> models, Normalization norm, int image_id = 0) {
    for (const auto& m : models)
        if (!(m.layout == enc.layout)) throw Error("score_windows: model layout does not match encoding");
    WindowAccumulator acc(enc.layout);
    std::vector<Detection> out;
    out.reserve(windows.size() * models.size());
    for (const Window& win : windows) {
        SparseFv fv = acc.accumulate(enc, win);
        normalize(fv, norm);
        const bool degenerate = fv.bin_counts[0] == 0;
        for (const auto& m : models) {
            Detection d;
            d.window = win;
            d.class_id = m.class_id;
            d.image_id = image_id;
            d.degenerate = degenerate;
            d.score = degenerate ? m.bias : score(fv, m.w, m.bias);
            out.push_back(d);
        }
    }
    return out;
}

struct DetectOptions {
    double nms_threshold = 0.3;
    bool skip_inactive = false;  // accumulate only groups with non-zero weight (one pass per model)
    std::size_t jobs = 1;
};

/// Scores all candidates of all images and applies per-class NMS per image.
inline std::vector<Detection> detect_corpus(const Corpus& corpus, std::span<const LinearModel> models, const DetectOptions& opt = {}) {
    std::vector<std::vector<Detection>> per_image(corpus.images.size());
    std::vector<GaussianSupport> supports;
    if (opt.skip_inactive)
        for (const auto& m : models) supports.push_back(gaussian_support(m));
    parallel_for(corpus.images.size(), opt.jobs, [&](std::size_t i) {
        const ImageEncoding enc = corpus.encode(i);
        const auto& cands = corpus.images[i].candidates;
        std::vector<Detection> dets;
        if (opt.skip_inactive) {
            for (std::size_t m = 0; m < models.size(); ++m) {
                auto d = score_windows(enc, cands, models[m], corpus.normalization, static_cast<int>(i), &supports[m].active);
                dets.insert(dets.end(), d.begin(), d.end());
            }
        } else {
            dets = score_windows(enc, cands, models, corpus.normalization, static_cast<int>(i));
        }
        per_image[i] = nms_per_class(dets, opt.nms_threshold);
    });
    std::vector<Detection> out;
    for (auto& d : per_image) out.insert(out.end(), d.begin(), d.end());
    return out;
}

inline std::vector<Detection> detect_corpus(const Corpus& corpus, const LinearModel& model, const DetectOptions& opt = {}) {
    return detect_corpus(corpus, std::span<const LinearModel>(&model, 1), opt);
}

}  // namespace fvdet
