// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fvdet/fvdet.hpp"
#include "oracles.hpp"

using namespace fvdet;

namespace {

// Two isotropic clusters in D dims: n0 points around c0, n1 around c1.
RowMatrix<float> two_clusters(std::size_t n0, std::size_t n1, double sigma, std::uint64_t seed, std::size_t D = 4) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sigma);
    RowMatrix<float> m(0, D);
    std::vector<float> row(D);
    for (std::size_t i = 0; i < n0 + n1; ++i) {
        const double c = i < n0 ? -5.0 : 5.0;
        for (float& v : row) v = static_cast<float>(c + g(rng));
        m.push_back(row);
    }
    return m;
}

}  // namespace

TEST(FitGmm, IdenticalPointsSingleComponent) {
    RowMatrix<float> data(0, 3);
    const std::vector<float> x{0.5f, -1.0f, 2.0f};
    for (int i = 0; i < 20; ++i) data.push_back(x);
    const GmmModel g = fit_gmm(data, 1, 3);
    ASSERT_EQ(g.K, 1u);
    for (std::size_t d = 0; d < 3; ++d) {
        EXPECT_DOUBLE_EQ(g.means[d], static_cast<double>(x[d]));
        EXPECT_DOUBLE_EQ(g.variances[d], g.variance_floor);
    }
    EXPECT_DOUBLE_EQ(g.priors[0], 1.0);
}

TEST(FitGmm, SeparatedClustersRecovered) {
    const double sigma = 0.7;
    const auto data = two_clusters(1500, 3500, sigma, 4);
    const GmmModel g = fit_gmm(data, 2, 11);
    const std::size_t lo = g.means[0] < g.means[g.D] ? 0 : 1;
    const std::size_t hi = 1 - lo;
    for (std::size_t d = 0; d < g.D; ++d) {
        EXPECT_NEAR(g.means[lo * g.D + d], -5.0, 0.1 * sigma);
        EXPECT_NEAR(g.means[hi * g.D + d], 5.0, 0.1 * sigma);
    }
    EXPECT_NEAR(g.priors[lo], 0.3, 0.05);
    EXPECT_NEAR(g.priors[hi], 0.7, 0.05);
}

TEST(FitGmm, LogLikelihoodNonDecreasing) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    RowMatrix<float> data(0, 6);
    std::vector<float> row(6);
    for (int i = 0; i < 2000; ++i) {
        const double shift = (i % 4) * 1.5;
        for (float& v : row) v = static_cast<float>(n(rng) + shift);
        data.push_back(row);
    }
    GmmFitTrace trace;
    GmmOptions opt;
    opt.tolerance = 0.0;
    opt.max_iterations = 60;
    const GmmModel g = fit_gmm(data, 5, 6, opt, &trace);
    ASSERT_EQ(trace.reseeded, 0u);
    ASSERT_GE(trace.log_likelihood.size(), 2u);
    for (std::size_t i = 1; i < trace.log_likelihood.size(); ++i)
        EXPECT_GE(trace.log_likelihood[i], trace.log_likelihood[i - 1] - 1e-12) << "iteration " << i;
}

TEST(FitGmm, InvariantsAndDeterminism) {
    const auto data = two_clusters(400, 400, 1.0, 7, 5);
    const GmmModel a = fit_gmm(data, 6, 42);
    const GmmModel b = fit_gmm(data, 6, 42);
    EXPECT_EQ(a.means, b.means);
    EXPECT_EQ(a.variances, b.variances);
    EXPECT_EQ(a.priors, b.priors);
    double s = 0.0;
    for (double p : a.priors) {
        EXPECT_GT(p, 0.0);
        s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    for (double v : a.variances) EXPECT_GE(v, a.variance_floor);
    EXPECT_GT(a.variance_floor, 0.0);
    EXPECT_NO_THROW(a.validate());
}

TEST(FitGmm, InsufficientData) {
    RowMatrix<float> data(0, 2);
    for (int i = 0; i < 40; ++i) data.push_back(std::vector<float>{static_cast<float>(i % 2), 0.0f});
    EXPECT_THROW(fit_gmm(data, 3, 1), Error);  // two distinct points, three components
    EXPECT_THROW(fit_gmm(data, 5, 1), Error);  // fewer than 10 K points
}

TEST(HardAssign, MeanOfComponent) {
    GmmModel g;
    g.K = 3;
    g.D = 2;
    g.means = {0, 0, 10, 0, 0, 10};
    g.variances.assign(6, 1.0);
    g.priors.assign(3, 1.0 / 3.0);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(hard_assign<double>(g, g.mean(k)), k);
}

TEST(HardAssign, TieGoesToLowerIndex) {
    GmmModel g;
    g.K = 2;
    g.D = 1;
    g.means = {-1.0, 1.0};
    g.variances = {1.0, 1.0};
    g.priors = {0.5, 0.5};
    const std::vector<double> x{0.0};
    EXPECT_EQ(hard_assign<double>(g, x), 0u);
    g.means = {1.0, -1.0};
    EXPECT_EQ(hard_assign<double>(g, x), 0u);
}

TEST(HardAssign, MatchesIndependentDensityLoop) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 2.0);
    for (int t = 0; t < 50; ++t) {
        const GmmModel g = oracle::random_gmm(7, 5, rng);
        for (int i = 0; i < 40; ++i) {
            std::vector<double> x(5);
            for (double& v : x) v = n(rng);
            EXPECT_EQ(hard_assign<double>(g, x), oracle::argmax_density(g, x));
        }
    }
}

TEST(HardAssign, SeparatedMeansMapToThemselves) {
    // separation of >= 6 sigma in every coordinate, equal priors
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> s(0.5, 1.0);
    GmmModel g;
    g.K = 8;
    g.D = 3;
    g.priors.assign(8, 1.0 / 8.0);
    for (std::size_t k = 0; k < 8; ++k)
        for (std::size_t d = 0; d < 3; ++d) {
            g.means.push_back(6.0 * static_cast<double>(k) * (1.0 + d));
            const double sd = s(rng);
            g.variances.push_back(sd * sd);
        }
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(hard_assign<double>(g, g.mean(k)), k);
}

TEST(Posteriors, SumToOne) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int t = 0; t < 20; ++t) {
        const GmmModel g = oracle::random_gmm(9, 4, rng);
        for (int i = 0; i < 50; ++i) {
            std::vector<double> x(4);
            for (double& v : x) v = n(rng) * (i % 5 == 0 ? 20.0 : 1.0);
            const auto p = posteriors<double>(g, x);
            double s = 0.0;
            for (double v : p) s += v;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}
