// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "fvdet/fvdet.hpp"
#include "oracles.hpp"

using namespace fvdet;

namespace {

GrayImage noise_image(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    GrayImage img(w, h);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

PatchParams one_scale() {
    PatchParams p;
    p.num_scales = 1;
    return p;
}

std::vector<std::pair<int, int>> counts_per_level(const PatchSet& ps, int scales) {
    std::vector<std::pair<int, int>> out(static_cast<std::size_t>(scales), {0, 0});
    std::vector<std::set<double>> xs(scales), ys(scales);
    for (const auto& l : ps.locations) {
        xs[l.level].insert(l.center_x);
        ys[l.level].insert(l.center_y);
    }
    for (int s = 0; s < scales; ++s) out[s] = {static_cast<int>(xs[s].size()), static_cast<int>(ys[s].size())};
    return out;
}

}  // namespace

TEST(ExtractPatches, TwentyFourSquareGivesTwentyFive) {
    const PatchSet ps = extract_patches(noise_image(24, 24, 1), one_scale());
    EXPECT_EQ(ps.size(), 25u);
    EXPECT_EQ(ps.raw.rows(), 25u);
    EXPECT_EQ(ps.raw.cols(), kRawDim);
}

TEST(ExtractPatches, TooSmallImageIsEmpty) {
    const PatchSet ps = extract_patches(noise_image(11, 11, 2), PatchParams{});
    EXPECT_EQ(ps.size(), 0u);
}

TEST(ExtractPatches, HundredSquareMatchesGridEnumerator) {
    const PatchParams p;  // 12, 3, 15, 1.2
    const PatchSet ps = extract_patches(noise_image(100, 100, 3), p);
    const auto expect = oracle::grid_counts(100, 100, 12, 3, 15, 1.2);
    const auto got = counts_per_level(ps, 15);
    std::size_t total = 0;
    for (int s = 0; s < 15; ++s) {
        EXPECT_EQ(got[s], expect[s]) << "scale " << s;
        total += static_cast<std::size_t>(expect[s].first) * expect[s].second;
    }
    EXPECT_EQ(ps.size(), total);
}

TEST(ExtractPatches, GridFormulaExhaustiveSizes) {
    PatchParams p;
    p.num_scales = 15;
    for (int w = 1; w <= 64; ++w) {
        const int h = 1 + (w * 37) % 64;  // a spread of aspect ratios
        const PatchSet ps = extract_patches(GrayImage(w, h, 0.5f), p);
        const auto expect = oracle::grid_counts(w, h, 12, 3, 15, 1.2);
        std::size_t total = 0;
        for (const auto& [nx, ny] : expect) total += static_cast<std::size_t>(nx) * ny;
        ASSERT_EQ(ps.size(), total) << w << "x" << h;
        std::vector<std::size_t> per_level(15, 0);
        for (const auto& l : ps.locations) ++per_level[l.level];
        for (int s = 0; s < 15; ++s) EXPECT_EQ(per_level[s], static_cast<std::size_t>(expect[s].first) * expect[s].second);
    }
}

TEST(ExtractPatches, CoordinatesInOriginalSpace) {
    const PatchSet ps = extract_patches(noise_image(60, 40, 4), PatchParams{});
    for (const auto& l : ps.locations) {
        EXPECT_GT(l.center_x, 0.0);
        EXPECT_LT(l.center_x, 60.0);
        EXPECT_GT(l.center_y, 0.0);
        EXPECT_LT(l.center_y, 40.0);
        EXPECT_NEAR(l.scale, std::pow(1.2, l.level), 1e-12);
    }
}

TEST(SiftLike, ConstantPatchIsZeroEnergy) {
    std::vector<float> px(144, 0.3f);
    const auto d = compute_sift_like(px, 12);
    EXPECT_TRUE(d.zero_energy);
    for (float v : d.values) EXPECT_EQ(v, 0.0f);
}

TEST(SiftLike, VerticalEdgeUsesHorizontalGradientBins) {
    std::vector<float> px(144);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) px[y * 12 + x] = x < 6 ? 0.1f : 0.9f;
    const auto d = compute_sift_like(px, 12);
    ASSERT_FALSE(d.zero_energy);
    double norm = 0.0, mass_h = 0.0, mass = 0.0;
    for (std::size_t i = 0; i < kRawDim; ++i) {
        norm += d.values[i] * d.values[i];
        mass += d.values[i];
        if (i % 8 == 0) mass_h += d.values[i];  // orientation 0: gradient along +x
    }
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
    EXPECT_DOUBLE_EQ(mass_h, mass);
    // the edge sits between columns 5 and 6, i.e. in the middle two cell columns
    for (std::size_t c = 0; c < 16; ++c) {
        const std::size_t cx = c % 4;
        if (cx == 0 || cx == 3) {
            EXPECT_EQ(d.values[c * 8], 0.0f);
        }
    }
}

TEST(SiftLike, RandomPatchesAreUnitNormAndNonNegative) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int t = 0; t < 200; ++t) {
        std::vector<float> px(144);
        for (float& v : px) v = u(rng);
        const auto d = compute_sift_like(px, 12);
        ASSERT_FALSE(d.zero_energy);
        double n = 0.0;
        for (float v : d.values) {
            EXPECT_GE(v, 0.0f);
            n += static_cast<double>(v) * v;
        }
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
}

TEST(ExtractPatches, EveryDescriptorUnitOrFlagged) {
    GrayImage img = noise_image(48, 48, 6);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) img.at(x, y) = 0.5f;  // flat corner
    const PatchSet ps = extract_patches(img, PatchParams{});
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        double n = 0.0;
        for (float v : ps.raw.row(i)) n += static_cast<double>(v) * v;
        if (ps.zero_energy[i]) {
            ++flagged;
            EXPECT_EQ(n, 0.0);
        } else {
            EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
        }
    }
    EXPECT_GT(flagged, 0u);
}

namespace {

// Points (+-3 a_i, 0) and (0, +-b_i): the sample covariance is exactly
// diagonal with var0 > var1.
RowMatrix<float> axis_data(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    RowMatrix<float> m(0, kRawDim);
    for (std::size_t i = 0; i < n; ++i) {
        const float a = static_cast<float>(3.0 * u(rng)), b = static_cast<float>(u(rng));
        for (const auto& [x, y] : {std::pair{a, 0.0f}, {-a, 0.0f}, {0.0f, b}, {0.0f, -b}}) {
            std::vector<float> row(kRawDim, 0.0f);
            row[0] = x;
            row[1] = y;
            m.push_back(row);
        }
    }
    return m;
}

RowMatrix<float> full_rank_data(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    RowMatrix<float> m(0, kRawDim);
    std::vector<float> row(kRawDim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < kRawDim; ++d) row[d] = static_cast<float>(g(rng) * (1.0 + 0.02 * d) + (d % 3 ? 0.5 * row[0] : 0.0));
        m.push_back(row);
    }
    return m;
}

double orthonormality_error(const PcaProjection& p) {
    double err = 0.0;
    for (std::size_t i = 0; i < p.dim; ++i)
        for (std::size_t j = 0; j < p.dim; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < p.input_dim; ++c) s += p.row(i)[c] * p.row(j)[c];
            err = std::max(err, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
    return err;
}

}  // namespace

TEST(Pca, AxisAlignedDataRecoversAxesInOrder) {
    ScopedWarningCapture quiet;
    const auto pca = fit_pca(axis_data(500, 7), 2);
    ASSERT_EQ(pca.dim, 2u);
    EXPECT_NEAR(std::abs(pca.row(0)[0]), 1.0, 1e-6);
    EXPECT_NEAR(std::abs(pca.row(1)[1]), 1.0, 1e-6);
    EXPECT_LE(orthonormality_error(pca), 1e-5);
}

TEST(Pca, RankDeficientCompletesBasisAndWarns) {
    ScopedWarningCapture capture;
    std::size_t rank = 0;
    const auto pca = fit_pca(axis_data(300, 8), 8, &rank);
    EXPECT_EQ(rank, 2u);
    EXPECT_FALSE(capture.messages().empty());
    EXPECT_LE(orthonormality_error(pca), 1e-5);
}

TEST(Pca, CompleteBasisReconstructs) {
    const auto data = full_rank_data(600, 9);
    const auto pca = fit_pca(data, kRawDim);
    EXPECT_LE(orthonormality_error(pca), 1e-5);
    for (std::size_t i = 0; i < 5; ++i) {
        const auto y = pca.project<float>(data.row(i));
        for (std::size_t c = 0; c < kRawDim; ++c) {
            double x = pca.mean[c];
            for (std::size_t r = 0; r < kRawDim; ++r) x += pca.row(r)[c] * y[r];
            EXPECT_NEAR(x, data.row(i)[c], 1e-5);
        }
    }
}

TEST(Pca, MeanProjectsToZero) {
    const auto pca = fit_pca(full_rank_data(400, 10), 16);
    const auto y = pca.project<double>(pca.mean);
    for (double v : y) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Pca, IdentityProjectionIsIdentity) {
    PcaProjection p;
    p.dim = kRawDim;
    p.mean.assign(kRawDim, 0.0);
    p.basis.assign(kRawDim * kRawDim, 0.0);
    for (std::size_t i = 0; i < kRawDim; ++i) p.basis[i * kRawDim + i] = 1.0;
    std::vector<double> x(kRawDim);
    for (std::size_t i = 0; i < kRawDim; ++i) x[i] = std::sin(static_cast<double>(i));
    EXPECT_EQ(p.project<double>(x), x);
}

TEST(Pca, ProjectionMatchesNaiveDotProducts) {
    const auto data = full_rank_data(400, 11);
    const auto pca = fit_pca(data, 32);
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> raw(kRawDim);
        for (double& v : raw) v = u(rng);
        const auto y = pca.project<double>(raw);
        for (std::size_t r = 0; r < 32; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < kRawDim; ++c) s += pca.basis[r * kRawDim + c] * (raw[c] - pca.mean[c]);
            EXPECT_NEAR(y[r], s, 1e-6);
        }
    }
}

TEST(Pca, ProjectedSampleIsDecorrelated) {
    const auto data = full_rank_data(2000, 13);
    const std::size_t D = 24;
    const auto pca = fit_pca(data, D);
    std::vector<std::vector<double>> ys;
    for (std::size_t i = 0; i < data.rows(); ++i) ys.push_back(pca.project<float>(data.row(i)));
    std::vector<double> cov(D * D, 0.0);
    for (const auto& y : ys)
        for (std::size_t a = 0; a < D; ++a)
            for (std::size_t b = 0; b < D; ++b) cov[a * D + b] += y[a] * y[b] / static_cast<double>(ys.size());
    double max_diag = 0.0, max_off = 0.0;
    for (std::size_t a = 0; a < D; ++a)
        for (std::size_t b = 0; b < D; ++b)
            if (a == b)
                max_diag = std::max(max_diag, std::abs(cov[a * D + b]));
            else
                max_off = std::max(max_off, std::abs(cov[a * D + b]));
    EXPECT_LE(max_off, 1e-3 * max_diag);
    for (std::size_t a = 1; a < D; ++a) EXPECT_GE(cov[(a - 1) * D + a - 1], cov[a * D + a] - 1e-9);
}

TEST(Images, PgmRoundTripIsExact) {
    const auto dir = std::filesystem::temp_directory_path() / "fvdet_test_pgm";
    std::filesystem::create_directories(dir);
    GrayImage img(7, 5);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i * 7 % 256) / 255.0f;
    write_pgm(dir / "a.pgm", img);
    write_png(dir / "a.png", img);
    const GrayImage a = read_image(dir / "a.pgm");
    const GrayImage b = read_image(dir / "a.png");
    EXPECT_EQ(a.pixels, img.pixels);
    EXPECT_EQ(b.pixels, img.pixels);
    std::filesystem::remove_all(dir);
}
