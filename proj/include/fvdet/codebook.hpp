// SPDX-License-Identifier: Apache-2.0
//
// Diagonal-covariance GMM visual vocabulary: k-means++ seeded EM training and
// hard assignment.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "fvdet/core.hpp"

namespace fvdet {

struct GmmModel {
    std::size_t K = 0;
    std::size_t D = 0;
    std::vector<double> means;      // K x D
    std::vector<double> variances;  // K x D
    std::vector<double> priors;     // K
    double variance_floor = 0.0;

    std::span<const double> mean(std::size_t k) const { return {means.data() + k * D, D}; }
    std::span<const double> variance(std::size_t k) const { return {variances.data() + k * D, D}; }

    /// log pi_k - (sum_d log sigma_kd^2 + D log 2 pi) / 2.
    double log_const(std::size_t k) const {
        double logdet = 0.0;
        for (std::size_t d = 0; d < D; ++d) logdet += std::log(variances[k * D + d]);
        return std::log(priors[k]) - 0.5 * (logdet + static_cast<double>(D) * std::log(2.0 * M_PI));
    }

    /// log pi_k + log N(x; mu_k, diag(sigma_k^2)).
    template <typename T>
    double log_joint(std::span<const T> x, std::size_t k) const {
        const double* mu = means.data() + k * D;
        const double* var = variances.data() + k * D;
        double quad = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double diff = static_cast<double>(x[d]) - mu[d];
            quad += diff * diff * (1.0 / var[d]);
        }
        return log_const(k) - 0.5 * quad;
    }

    void validate() const {
        if (K == 0 || D == 0) throw Error("GmmModel: empty model");
        if (means.size() != K * D || variances.size() != K * D || priors.size() != K)
            throw Error("GmmModel: inconsistent dimensions");
    }
};

/// GmmModel with per-component constants precomputed for repeated
/// evaluation. Produces exactly the values of GmmModel::log_joint.
class GmmScorer {
public:
    explicit GmmScorer(const GmmModel& g) : g_(g), inv_var_(g.K * g.D), log_const_(g.K) {
        for (std::size_t i = 0; i < inv_var_.size(); ++i) inv_var_[i] = 1.0 / g.variances[i];
        for (std::size_t k = 0; k < g.K; ++k) log_const_[k] = g.log_const(k);
    }

    const GmmModel& model() const { return g_; }

    template <typename T>
    double log_joint(std::span<const T> x, std::size_t k) const {
        const std::size_t D = g_.D;
        const double* mu = g_.means.data() + k * D;
        const double* iv = inv_var_.data() + k * D;
        double quad = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double diff = static_cast<double>(x[d]) - mu[d];
            quad += diff * diff * iv[d];
        }
        return log_const_[k] - 0.5 * quad;
    }

    /// Component with the largest log pi_k + log N(x); ties go to the lowest index.
    template <typename T>
    std::size_t assign(std::span<const T> x) const {
        std::size_t best = 0;
        double best_val = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < g_.K; ++k) {
            const double v = log_joint(x, k);
            if (v > best_val) {
                best_val = v;
                best = k;
            }
        }
        return best;
    }

    /// Posterior responsibilities (log-sum-exp) written to `out` (size K).
    template <typename T>
    double posteriors(std::span<const T> x, std::span<double> out) const {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < g_.K; ++k) {
            out[k] = log_joint(x, k);
            mx = std::max(mx, out[k]);
        }
        double s = 0.0;
        for (double v : out) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        for (double& v : out) v = std::exp(v - lse);
        return lse;
    }

private:
    const GmmModel& g_;
    std::vector<double> inv_var_;
    std::vector<double> log_const_;
};

/// Component with the largest log pi_k + log N(x); ties go to the lowest index.
template <typename T>
std::size_t hard_assign(const GmmModel& g, std::span<const T> x) {
    return GmmScorer(g).assign(x);
}

/// Posterior responsibilities of every component for x.
template <typename T>
std::vector<double> posteriors(const GmmModel& g, std::span<const T> x, double* log_likelihood = nullptr) {
    std::vector<double> p(g.K);
    const double lse = GmmScorer(g).posteriors(x, std::span<double>(p));
    if (log_likelihood) *log_likelihood = lse;
    return p;
}

struct GmmOptions {
    std::size_t max_iterations = 200;
    double tolerance = 1e-5;         // relative log-likelihood improvement
    double variance_floor_ratio = 1e-4;
};

namespace detail {

inline std::size_t count_distinct_rows(const RowMatrix<float>& data, std::size_t limit) {
    std::vector<std::size_t> idx(data.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto ra = data.row(a), rb = data.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    });
    std::size_t distinct = idx.empty() ? 0 : 1;
    for (std::size_t i = 1; i < idx.size() && distinct < limit; ++i) {
        const auto ra = data.row(idx[i - 1]), rb = data.row(idx[i]);
        if (!std::equal(ra.begin(), ra.end(), rb.begin())) ++distinct;
    }
    return distinct;
}

inline double sq_dist(std::span<const float> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace detail

/// k-means++ seeding: returns `k` row indices of `data`.
inline std::vector<std::size_t> kmeanspp_seed(const RowMatrix<float>& data, std::size_t k, Rng& rng) {
    const std::size_t n = data.rows();
    std::vector<std::size_t> centres{rng.index(n)};
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (centres.size() < k) {
        const auto c = data.row(centres.back());
        std::vector<double> cd(c.begin(), c.end());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], detail::sq_dist(data.row(i), cd));
            total += d2[i];
        }
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = rng.index(n);
        } else {
            double r = rng.uniform() * total;
            for (pick = 0; pick + 1 < n; ++pick) {
                r -= d2[pick];
                if (r < 0.0) break;
            }
        }
        centres.push_back(pick);
    }
    return centres;
}

struct GmmFitTrace {
    std::vector<double> log_likelihood;  // per EM iteration (mean per point)
    std::size_t reseeded = 0;
};

/// Fits a K-component diagonal GMM by EM from a k-means++ start.
inline GmmModel fit_gmm(const RowMatrix<float>& data, std::size_t K, std::uint64_t seed, const GmmOptions& opt = {},
                        GmmFitTrace* trace = nullptr) {
    const std::size_t n = data.rows();
    const std::size_t D = data.cols();
    if (K == 0) throw Error("fit_gmm: K must be positive");
    if (n < 10 * K) throw Error("fit_gmm: sample size must be at least 10*K");
    if (detail::count_distinct_rows(data, K) < K) throw Error("fit_gmm: insufficient data (fewer distinct points than K)");

    std::vector<double> global_mean(D, 0.0), global_var(D, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < D; ++d) global_mean[d] += data.row(i)[d];
    for (double& m : global_mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            const double diff = data.row(i)[d] - global_mean[d];
            global_var[d] += diff * diff;
        }
    double mean_var = 0.0;
    for (double& v : global_var) {
        v /= static_cast<double>(n);
        mean_var += v;
    }
    mean_var /= static_cast<double>(D);

    GmmModel g;
    g.K = K;
    g.D = D;
    g.variance_floor = std::max(opt.variance_floor_ratio * mean_var, 1e-12);
    g.means.assign(K * D, 0.0);
    g.variances.assign(K * D, 0.0);
    g.priors.assign(K, 0.0);

    Rng rng(seed);
    const auto seeds = kmeanspp_seed(data, K, rng);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d = 0; d < D; ++d) g.means[k * D + d] = data.row(seeds[k])[d];

    // hard partition around the seeds gives the starting variances and priors
    {
        std::vector<std::size_t> counts(K, 0);
        std::vector<double> sq(K * D, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = data.row(i);
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                const double dd = detail::sq_dist(x, g.mean(k));
                if (dd < bd) {
                    bd = dd;
                    best = k;
                }
            }
            ++counts[best];
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = x[d] - g.means[best * D + d];
                sq[best * D + d] += diff * diff;
            }
        }
        for (std::size_t k = 0; k < K; ++k) {
            g.priors[k] = std::max<double>(counts[k], 1.0) / static_cast<double>(n);
            for (std::size_t d = 0; d < D; ++d) {
                const double v = counts[k] > 1 ? sq[k * D + d] / static_cast<double>(counts[k]) : global_var[d];
                g.variances[k * D + d] = std::max(v, g.variance_floor);
            }
        }
        const double ps = std::accumulate(g.priors.begin(), g.priors.end(), 0.0);
        for (double& p : g.priors) p /= ps;
    }

    std::vector<double> resp(n * K);
    std::vector<double> point_ll(n);
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        // E-step
        double ll = 0.0;
        const GmmScorer scorer(g);
        for (std::size_t i = 0; i < n; ++i) {
            const double lse = scorer.posteriors(data.row(i), std::span<double>(resp.data() + i * K, K));
            point_ll[i] = lse;
            ll += lse;
        }
        ll /= static_cast<double>(n);
        if (trace) trace->log_likelihood.push_back(ll);
        if (it > 0 && (ll - prev) <= opt.tolerance * std::abs(prev)) break;
        prev = ll;

        // M-step
        std::vector<double> nk(K, 0.0);
        std::fill(g.means.begin(), g.means.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = data.row(i);
            for (std::size_t k = 0; k < K; ++k) {
                const double r = resp[i * K + k];
                if (r == 0.0) continue;
                nk[k] += r;
                for (std::size_t d = 0; d < D; ++d) g.means[k * D + d] += r * x[d];
            }
        }
        std::vector<bool> empty(K, false);
        for (std::size_t k = 0; k < K; ++k) {
            if (nk[k] < 1e-8) {
                empty[k] = true;
                continue;
            }
            for (std::size_t d = 0; d < D; ++d) g.means[k * D + d] /= nk[k];
        }
        std::fill(g.variances.begin(), g.variances.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = data.row(i);
            for (std::size_t k = 0; k < K; ++k) {
                const double r = resp[i * K + k];
                if (r == 0.0 || empty[k]) continue;
                for (std::size_t d = 0; d < D; ++d) {
                    const double diff = x[d] - g.means[k * D + d];
                    g.variances[k * D + d] += r * diff * diff;
                }
            }
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (empty[k]) continue;
            g.priors[k] = nk[k] / static_cast<double>(n);
            for (std::size_t d = 0; d < D; ++d)
                g.variances[k * D + d] = std::max(g.variances[k * D + d] / nk[k], g.variance_floor);
        }
        // re-seed empty components at the worst-explained points
        if (std::find(empty.begin(), empty.end(), true) != empty.end()) {
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return point_ll[a] < point_ll[b]; });
            std::size_t next = 0;
            for (std::size_t k = 0; k < K; ++k) {
                if (!empty[k]) continue;
                const auto x = data.row(order[next++ % n]);
                for (std::size_t d = 0; d < D; ++d) {
                    g.means[k * D + d] = x[d];
                    g.variances[k * D + d] = std::max(global_var[d], g.variance_floor);
                }
                g.priors[k] = 1.0 / static_cast<double>(n);
                if (trace) ++trace->reseeded;
            }
            const double ps = std::accumulate(g.priors.begin(), g.priors.end(), 0.0);
            for (double& p : g.priors) p /= ps;
            prev = -std::numeric_limits<double>::infinity();
        }
    }
    return g;
}

}  // namespace fvdet
