// SPDX-License-Identifier: Apache-2.0
//
// Small in-memory synthetic benchmark shared by the learner, detector and
// analysis tests.

#pragma once

#include <vector>

#include "fvdet/fvdet.hpp"

namespace fixture {

struct Bench {
    fvdet::DetectorConfig det;
    fvdet::PcaProjection pca;
    std::vector<fvdet::GrayImage> train_images, test_images;
    fvdet::Corpus train, test;
    std::vector<fvdet::ClassSpec> classes;
};

struct BenchSpec {
    std::size_t n_train = 24;
    std::size_t n_test = 12;
    std::size_t K = 4;
    std::size_t D = 12;
    std::size_t R = 2;
    int size = 96;
    int scales = 6;
    std::uint64_t seed = 1;
};

inline Bench make_bench(const BenchSpec& s = {}) {
    using namespace fvdet;
    Bench b;
    b.det.patches.num_scales = s.scales;
    b.det.candidates.max_candidates = 300;
    SynthSpec spec;
    spec.width = spec.height = s.size;
    spec.min_size = 40;
    spec.max_size = 64;
    spec.max_objects = 1;
    std::vector<std::vector<Object>> train_objs, test_objs;
    for (std::size_t i = 0; i < s.n_train + s.n_test; ++i) {
        Rng rng(s.seed * 7919 + i);
        std::vector<Object> objs;
        GrayImage img = render_synthetic(spec, rng, objs);
        if (i < s.n_train) {
            b.train_images.push_back(std::move(img));
            train_objs.push_back(objs);
        } else {
            b.test_images.push_back(std::move(img));
            test_objs.push_back(objs);
        }
    }
    RowMatrix<float> sample(0, kRawDim);
    for (std::size_t i = 0; i < b.train_images.size(); ++i) {
        const PatchSet ps = extract_patches(b.train_images[i], b.det.patches);
        for (std::size_t j = i % 3; j < ps.size(); j += 3) sample.push_back(ps.raw.row(j));
    }
    {
        ScopedWarningCapture quiet;
        b.pca = fit_pca(sample, s.D);
    }
    RowMatrix<float> projected(0, s.D);
    std::vector<float> y(s.D);
    for (std::size_t r = 0; r < sample.rows(); r += 2) {
        b.pca.project<float, float>(sample.row(r), y);
        projected.push_back(y);
    }
    GmmOptions gopt;
    gopt.max_iterations = 50;
    const GmmModel g = fit_gmm(projected, s.K, s.seed, gopt);
    for (Corpus* c : {&b.train, &b.test}) {
        c->gmm = g;
        c->layout = {s.R, s.K, s.D};
        c->normalization = Normalization::intra;
    }
    for (std::size_t i = 0; i < b.train_images.size(); ++i)
        b.train.images.push_back(make_corpus_image(b.train_images[i], train_objs[i], b.pca, b.det));
    for (std::size_t i = 0; i < b.test_images.size(); ++i)
        b.test.images.push_back(make_corpus_image(b.test_images[i], test_objs[i], b.pca, b.det));
    b.classes = {{0, "checker"}, {1, "stripes"}};
    return b;
}

}  // namespace fixture
