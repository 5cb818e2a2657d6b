// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "fvdet/fvdet.hpp"

using namespace fvdet;

namespace {

Detection det(Window w, double s, int cls = 0, int image = 0) {
    Detection d;
    d.window = w;
    d.score = s;
    d.class_id = cls;
    d.image_id = image;
    return d;
}

std::vector<Detection> random_detections(std::size_t n, int images, int classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(0, 80), side(8, 48), sc(-2, 2);
    std::vector<Detection> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(det({std::floor(pos(rng)), std::floor(pos(rng)), std::floor(side(rng)), std::floor(side(rng))}, sc(rng),
                          static_cast<int>(rng() % classes), static_cast<int>(rng() % images)));
    return out;
}

LinearModel random_model(const FvLayout& l, std::uint64_t seed, double bias = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    LinearModel m(l);
    for (double& v : m.w) v = n(rng);
    m.bias = bias;
    return m;
}

}  // namespace

// --- geometry -------------------------------------------------------------

TEST(Iou, Examples) {
    const Window a{0, 0, 10, 10};
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(iou(a, {20, 20, 5, 5}), 0.0);
    EXPECT_DOUBLE_EQ(iou(a, {10, 0, 10, 10}), 0.0);  // touching edges
    EXPECT_DOUBLE_EQ(iou(a, {5, 0, 10, 10}), 50.0 / 150.0);
}

// --- nms ------------------------------------------------------------------

TEST(Nms, IdenticalWindowsKeepHigher) {
    const Window w{3, 4, 20, 20};
    const auto kept = nms({det(w, 0.8), det(w, 0.9)}, 0.3);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].score, 0.9);
}

TEST(Nms, ThresholdIsStrict) {
    // IoU 1/3 > 0.3 suppresses; IoU 0.25 does not
    EXPECT_EQ(nms({det({0, 0, 10, 10}, 1.0), det({5, 0, 10, 10}, 0.5)}, 0.3).size(), 1u);
    const Window b{0, 0, 10, 10}, c{0, 6, 10, 10};  // overlap 40, union 160
    ASSERT_DOUBLE_EQ(iou(b, c), 0.25);
    EXPECT_EQ(nms({det(b, 1.0), det(c, 0.5)}, 0.3).size(), 2u);
    EXPECT_EQ(nms({det(b, 1.0), det(c, 0.5)}, 0.25).size(), 2u);
}

TEST(Nms, EmptyInput) { EXPECT_TRUE(nms({}, 0.3).empty()); }

TEST(Nms, OutputIsAntichainAndCoversInput) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto in = random_detections(150, 1, 1, seed);
        for (const double thr : {0.0, 0.3, 0.7}) {
            const auto kept = nms(in, thr);
            for (std::size_t i = 0; i < kept.size(); ++i)
                for (std::size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(iou(kept[i].window, kept[j].window), thr);
            // every dropped detection overlaps a kept one that scores at least as high
            for (const auto& d : in) {
                bool covered = false;
                for (const auto& k : kept)
                    if ((k.window == d.window && k.score == d.score) || (iou(k.window, d.window) > thr && k.score >= d.score))
                        covered = true;
                EXPECT_TRUE(covered);
            }
        }
    }
}

TEST(Nms, PerClassDoesNotCrossClassesOrImages) {
    const Window w{0, 0, 10, 10};
    const auto kept = nms_per_class({det(w, 1, 0, 0), det(w, 0.5, 1, 0), det(w, 0.7, 0, 1), det(w, 0.2, 0, 0)}, 0.3);
    EXPECT_EQ(kept.size(), 3u);
}

// --- AP -------------------------------------------------------------------

TEST(AveragePrecision, SingleTruePositive) {
    const std::vector<std::vector<Object>> gt{{{0, {10, 10, 20, 20}, false}}};
    EXPECT_EQ(*average_precision({det({11, 10, 20, 20}, 1.0)}, gt, 0), 1.0);
}

TEST(AveragePrecision, DuplicateIsFalsePositiveButApStaysOne) {
    // ranked: TP (prec 1, rec 1), FP (prec 1/2, rec 1); interpolated precision at every recall level is 1
    const std::vector<std::vector<Object>> gt{{{0, {10, 10, 20, 20}, false}}};
    const std::vector<Detection> d{det({10, 10, 20, 20}, 1.0), det({11, 11, 20, 20}, 0.5)};
    EXPECT_EQ(*average_precision(d, gt, 0, 0.5, ApMode::voc07_11point), 1.0);
    EXPECT_EQ(*average_precision(d, gt, 0, 0.5, ApMode::all_points), 1.0);
    // a duplicate ranked first halves the precision at every recall level
    const std::vector<Detection> e{det({40, 40, 20, 20}, 2.0), det({10, 10, 20, 20}, 1.0)};
    EXPECT_EQ(*average_precision(e, gt, 0, 0.5, ApMode::voc07_11point), 0.5);
}

TEST(AveragePrecision, PerfectRanking) {
    for (const int n : {1, 3, 17}) {
        std::vector<std::vector<Object>> gt(n);
        std::vector<Detection> d;
        for (int i = 0; i < n; ++i) {
            gt[i].push_back({0, {5.0 * i, 0, 30, 30}, false});
            d.push_back(det({5.0 * i, 0, 30, 30}, 10.0 - i, 0, i));
            d.push_back(det({70, 70, 10, 10}, -100.0 - i, 0, i));  // ranked below every TP
        }
        EXPECT_EQ(*average_precision(d, gt, 0), 1.0);
    }
}

TEST(AveragePrecision, HandComputedCurve) {
    // two GT; ranking TP, FP, TP -> (p, r) = (1, .5), (.5, .5), (2/3, 1)
    // 11-point: recall <= .5 -> 1 (6 points), recall > .5 -> 2/3 (5 points)
    const std::vector<std::vector<Object>> gt{{{0, {0, 0, 10, 10}, false}, {0, {50, 50, 10, 10}, false}}};
    const std::vector<Detection> d{det({0, 0, 10, 10}, 3), det({25, 25, 10, 10}, 2), det({50, 50, 10, 10}, 1)};
    EXPECT_NEAR(*average_precision(d, gt, 0), (6.0 + 5.0 * 2.0 / 3.0) / 11.0, 1e-12);
    EXPECT_NEAR(*average_precision(d, gt, 0, 0.5, ApMode::all_points), 0.5 * 1.0 + 0.5 * 2.0 / 3.0, 1e-12);
}

TEST(AveragePrecision, DifficultObjectsAreIgnored) {
    const std::vector<std::vector<Object>> gt{{{0, {0, 0, 10, 10}, false}, {0, {50, 50, 10, 10}, true}}};
    const std::vector<Detection> d{det({50, 50, 10, 10}, 3), det({0, 0, 10, 10}, 1)};
    EXPECT_EQ(*average_precision(d, gt, 0), 1.0);
}

TEST(EvaluateAp, OrderInvariant) {
    std::vector<std::vector<Object>> gt(5);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 5; ++i)
        for (int c = 0; c < 3; ++c) gt[i].push_back({c, {10.0 * c, 5.0 * i, 30, 30}, false});
    auto d = random_detections(400, 5, 3, 4);
    const ApReport a = evaluate_ap(d, gt, 3);
    for (int t = 0; t < 5; ++t) {
        std::shuffle(d.begin(), d.end(), rng);
        const ApReport b = evaluate_ap(d, gt, 3);
        EXPECT_EQ(a.per_class, b.per_class);
        EXPECT_EQ(a.mean_ap, b.mean_ap);
    }
}

TEST(EvaluateAp, ClassWithoutGroundTruthExcluded) {
    const std::vector<std::vector<Object>> gt{{{0, {0, 0, 10, 10}, false}}};
    const std::vector<Detection> d{det({30, 30, 10, 10}, 2, 0), det({0, 0, 10, 10}, 1, 0), det({0, 0, 10, 10}, 1, 1)};
    ScopedWarningCapture cap;
    const ApReport r = evaluate_ap(d, gt, 2, 0.5, ApMode::voc07_11point, {"a", "b"});
    ASSERT_EQ(r.per_class.size(), 2u);
    EXPECT_FALSE(r.per_class[1].has_value());
    EXPECT_DOUBLE_EQ(r.mean_ap, *r.per_class[0]);
    ASSERT_EQ(cap.messages().size(), 1u);
    EXPECT_NE(cap.messages()[0].find("b"), std::string::npos);
}

// --- candidates -----------------------------------------------------------

TEST(Candidates, TinyImageIncludesFullWindow) {
    const auto c = generate_candidates(32, 32);
    EXPECT_NE(std::find(c.begin(), c.end(), Window{0, 0, 32, 32}), c.end());
}

TEST(Candidates, WithinBoundsAndCapped) {
    for (const auto& [w, h] : {std::pair{32, 32}, {64, 200}, {500, 375}, {128, 128}}) {
        for (const std::size_t cap : {std::size_t{10}, std::size_t{1500}}) {
            CandidateConfig cfg;
            cfg.max_candidates = cap;
            const auto c = generate_candidates(w, h, cfg);
            EXPECT_LE(c.size(), cap);
            EXPECT_FALSE(c.empty());
            for (const auto& x : c) {
                EXPECT_GE(x.w, 1);
                EXPECT_GE(x.h, 1);
                EXPECT_GE(x.x, 0);
                EXPECT_GE(x.y, 0);
                EXPECT_LE(x.x + x.w, w);
                EXPECT_LE(x.y + x.h, h);
            }
        }
    }
}

TEST(Candidates, RecallOnSyntheticObjects) {
    SynthSpec spec;
    std::size_t covered = 0, n = 200;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(1000 + i);
        std::vector<Object> objs;
        const GrayImage img = render_synthetic(spec, rng, objs);
        const auto cands = generate_candidates(img);
        bool all = true;
        for (const auto& o : objs) {
            double best = 0.0;
            for (const auto& c : cands) best = std::max(best, iou(c, o.box));
            all = all && best >= 0.5;
        }
        covered += all;
    }
    EXPECT_GE(static_cast<double>(covered) / n, 0.95);
}

// --- scoring --------------------------------------------------------------

class Scoring : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fixture::BenchSpec s;
        s.n_train = 6;
        s.n_test = 0;
        bench_ = new fixture::Bench(fixture::make_bench(s));
    }
    static void TearDownTestSuite() {
        delete bench_;
        bench_ = nullptr;
    }
    static fixture::Bench* bench_;
};
fixture::Bench* Scoring::bench_ = nullptr;

TEST_F(Scoring, ZeroModelScoresBias) {
    LinearModel m(bench_->train.layout);
    m.bias = -0.7;
    const auto d = score_windows(bench_->train_images[0], m, bench_->train.gmm, bench_->pca, bench_->det);
    ASSERT_FALSE(d.empty());
    for (const auto& x : d) EXPECT_EQ(x.score, -0.7);
}

TEST_F(Scoring, EnumerationOrderDoesNotMatter) {
    const LinearModel m = random_model(bench_->train.layout, 1);
    const ImageEncoding enc = bench_->train.encode(1);
    auto wins = bench_->train.images[1].candidates;
    const auto a = score_windows(enc, wins, m, Normalization::intra);
    std::mt19937_64 rng(2);
    std::shuffle(wins.begin(), wins.end(), rng);
    const auto b = score_windows(enc, wins, m, Normalization::intra);
    std::map<Window, double> sa;
    for (const auto& d : a) sa[d.window] = d.score;
    for (const auto& d : b) EXPECT_EQ(sa.at(d.window), d.score);
}

TEST_F(Scoring, SharedCacheMatchesCacheFreePath) {
    const LinearModel m = random_model(bench_->train.layout, 3);
    for (std::size_t i = 0; i < 2; ++i) {
        const GrayImage& img = bench_->train_images[i];
        const auto d = score_windows(img, m, bench_->train.gmm, bench_->pca, bench_->det, static_cast<int>(i));
        for (std::size_t j = 0; j < d.size(); j += 7) {
            const double ref = score_window_reference(img, d[j].window, m, bench_->train.gmm, bench_->pca, bench_->det);
            EXPECT_NEAR(d[j].score, ref, 1e-5) << "image " << i << " window " << j;
        }
    }
}

TEST_F(Scoring, SkippingZeroGroupsIsExact) {
    LinearModel m = random_model(bench_->train.layout, 4);
    std::mt19937_64 rng(5);
    for (std::size_t g = 0; g < m.num_groups(); ++g)
        if (rng() % 2)
            for (double& v : m.group(g)) v = 0.0;
    const auto support = gaussian_support(m);
    ASSERT_GT(support.count, 0u);
    ASSERT_LT(support.count, m.num_groups());
    for (std::size_t i = 0; i < 3; ++i) {
        const ImageEncoding enc = bench_->train.encode(i);
        const auto& wins = bench_->train.images[i].candidates;
        for (const auto norm : {Normalization::raw, Normalization::intra}) {
            const auto dense = score_windows(enc, wins, m, norm);
            const auto sparse = score_windows(enc, wins, m, norm, 0, &support.active);
            ASSERT_EQ(dense.size(), sparse.size());
            for (std::size_t j = 0; j < dense.size(); ++j) EXPECT_NEAR(dense[j].score, sparse[j].score, 1e-6);
        }
    }
    Corpus c = bench_->train;
    DetectOptions a, b;
    b.skip_inactive = true;
    const auto da = detect_corpus(c, m, a), db = detect_corpus(c, m, b);
    ASSERT_EQ(da.size(), db.size());
    for (std::size_t j = 0; j < da.size(); ++j) EXPECT_NEAR(da[j].score, db[j].score, 1e-6);
}

TEST_F(Scoring, MultiModelMatchesSingleModel) {
    const std::vector<LinearModel> ms{random_model(bench_->train.layout, 6), random_model(bench_->train.layout, 7)};
    const ImageEncoding enc = bench_->train.encode(0);
    const auto& wins = bench_->train.images[0].candidates;
    const auto both = score_windows(enc, wins, std::span<const LinearModel>(ms), Normalization::intra);
    for (std::size_t m = 0; m < 2; ++m) {
        const auto one = score_windows(enc, wins, ms[m], Normalization::intra);
        for (std::size_t j = 0; j < wins.size(); ++j) EXPECT_EQ(both[j * 2 + m].score, one[j].score);
    }
}

TEST_F(Scoring, LayoutMismatchIsAnError) {
    const LinearModel m(FvLayout{0, 2, 2});
    EXPECT_THROW(score_windows(bench_->train.encode(0), bench_->train.images[0].candidates, m, Normalization::intra), Error);
}
