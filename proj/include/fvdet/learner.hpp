// SPDX-License-Identifier: Apache-2.0
//
// Linear classifiers over stacked FVs: averaged stochastic subgradient for
// the l2-regularized hinge loss, and regularized dual averaging (RDA) for
// the hinge loss with a group-lasso penalty over (bin, gaussian) groups.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fvdet/core.hpp"
#include "fvdet/encoder.hpp"

namespace fvdet {

struct LinearModel {
    int class_id = 0;
    std::string class_name;
    FvLayout layout;
    std::vector<double> w;
    double bias = 0.0;

    LinearModel() = default;
    explicit LinearModel(const FvLayout& l) : layout(l), w(l.size(), 0.0) {}

    std::size_t num_groups() const { return layout.groups(); }
    std::size_t group_size() const { return layout.block(); }
    std::span<const double> group(std::size_t g) const { return {w.data() + g * layout.block(), layout.block()}; }
    std::span<double> group(std::size_t g) { return {w.data() + g * layout.block(), layout.block()}; }
    /// Weights of one spatial bin (all K blocks).
    std::span<const double> bin_slice(std::size_t b) const {
        return {w.data() + layout.offset(b, 0), layout.K * layout.block()};
    }

    template <typename T>
    double decision(std::span<const T> x) const {
        return dot<double, T>(w, x) + bias;
    }
};

/// Groups with non-zero weight norm.
struct GaussianSupport {
    std::vector<std::uint8_t> active;  // one flag per (bin, gaussian) group
    std::size_t count = 0;

    double fraction() const { return active.empty() ? 0.0 : static_cast<double>(count) / active.size(); }
};

inline GaussianSupport gaussian_support(const LinearModel& m) {
    GaussianSupport s;
    s.active.assign(m.num_groups(), 0);
    for (std::size_t g = 0; g < m.num_groups(); ++g) {
        const auto wg = m.group(g);
        for (double v : wg)
            if (v != 0.0) {
                s.active[g] = 1;
                ++s.count;
                break;
            }
    }
    return s;
}

struct TrainConfig {
    double lambda_l2 = 1e-4;
    double lambda_group = 0.0;
    std::size_t mining_rounds = 3;
    std::size_t negatives_per_image = 2;
    double rda_gamma = 0.05;
    std::size_t rda_iterations = 20000;
    std::size_t rda_batch = 1;        // 0 = full batch
    std::size_t svm_epochs = 20;
    std::size_t svm_iterations = 0;   // overrides svm_epochs when > 0
    std::size_t monitor_every = 0;    // objective evaluation period (0 = off)
    std::uint64_t seed = 0;
};

/// Progress row: iteration, objective, active-group count.
struct TrainProgress {
    std::size_t iteration = 0;
    double objective = 0.0;
    std::size_t active_groups = 0;
    int class_id = -1;      // filled in by the mining loop
    std::size_t round = 0;  // mining round, likewise
};
using ProgressFn = std::function<void(const TrainProgress&)>;

/// Labelled example matrix: positives first, then negatives.
struct Examples {
    const RowMatrix<float>& positives;
    const RowMatrix<float>& negatives;

    std::size_t size() const { return positives.rows() + negatives.rows(); }
    std::span<const float> row(std::size_t i) const {
        return i < positives.rows() ? positives.row(i) : negatives.row(i - positives.rows());
    }
    double label(std::size_t i) const { return i < positives.rows() ? 1.0 : -1.0; }
    std::size_t dim() const { return positives.rows() ? positives.cols() : negatives.cols(); }
};

inline double mean_hinge(const Examples& ex, std::span<const double> w, double bias) {
    double loss = 0.0;
    for (std::size_t i = 0; i < ex.size(); ++i) {
        const double m = ex.label(i) * (dot<double, float>(w, ex.row(i)) + bias);
        if (m < 1.0) loss += 1.0 - m;
    }
    return loss / static_cast<double>(ex.size());
}

/// lambda ||w||^2 + mean hinge.
inline double svm_objective(const Examples& ex, std::span<const double> w, double bias, double lambda) {
    double sq = 0.0;
    for (double v : w) sq += v * v;
    return lambda * sq + mean_hinge(ex, w, bias);
}

/// mean hinge + lambda sum_g ||w_g||.
inline double group_lasso_objective(const Examples& ex, std::span<const double> w, double bias, double lambda,
                                    std::size_t group_size) {
    double pen = 0.0;
    for (std::size_t g = 0; g * group_size < w.size(); ++g) {
        double s = 0.0;
        for (std::size_t i = g * group_size; i < (g + 1) * group_size; ++i) s += w[i] * w[i];
        pen += std::sqrt(s);
    }
    return mean_hinge(ex, w, bias) + lambda * pen;
}

namespace detail {

inline void check_examples(const Examples& ex, std::size_t dim) {
    if (ex.positives.rows() == 0 || ex.negatives.rows() == 0) throw Error("training requires at least one positive and one negative");
    if (ex.positives.cols() != dim || ex.negatives.cols() != dim) throw Error("training: example dimension does not match layout");
}

}  // namespace detail

/// Averaged stochastic subgradient descent on lambda ||w||^2 + mean hinge.
/// Step 1/(2 lambda (t + t0)), uniform iterate averaging, i.i.d. sampling.
/// The returned model is the averaged iterate.
inline LinearModel train_svm_l2(const RowMatrix<float>& positives, const RowMatrix<float>& negatives, const FvLayout& layout,
                                const TrainConfig& cfg, const ProgressFn& progress = {}) {
    const std::size_t dim = layout.size();
    const Examples ex{positives, negatives};
    detail::check_examples(ex, dim);
    if (cfg.lambda_l2 <= 0.0) throw Error("train_svm_l2: lambda_l2 must be positive");
    const double lambda = cfg.lambda_l2;
    const std::size_t n = ex.size();
    const std::size_t iters = cfg.svm_iterations > 0 ? cfg.svm_iterations : cfg.svm_epochs * n;
    const double t0 = std::max(1.0, std::ceil(1.0 / (2.0 * lambda)));

    // w = a * v; sum of iterates S = P + B * v
    std::vector<double> v(dim, 0.0), P(dim, 0.0);
    double a = 1.0, B = 0.0;
    double b = 0.0, bias_sum = 0.0;
    Rng rng(cfg.seed);

    LinearModel avg(layout);
    const auto averaged = [&](std::size_t t, LinearModel& out) {
        for (std::size_t j = 0; j < dim; ++j) out.w[j] = (P[j] + B * v[j]) / static_cast<double>(t);
        out.bias = bias_sum / static_cast<double>(t);
    };

    for (std::size_t t = 1; t <= iters; ++t) {
        const std::size_t i = rng.index(n);
        const auto x = ex.row(i);
        const double y = ex.label(i);
        const double margin = y * (a * dot<double, float>(v, x) + b);
        const double eta = 1.0 / (2.0 * lambda * (static_cast<double>(t) + t0));
        a *= 1.0 - 2.0 * lambda * eta;
        if (margin < 1.0) {
            const double c = eta * y / a;
            for (std::size_t j = 0; j < dim; ++j) {
                const double d = c * x[j];
                v[j] += d;
                P[j] -= B * d;
            }
            b += eta * y;
        }
        B += a;
        bias_sum += b;
        if (a < 1e-100) {
            for (double& e : v) e *= a;
            B /= a;
            a = 1.0;
        }
        if (progress && cfg.monitor_every > 0 && (t % cfg.monitor_every == 0 || t == iters)) {
            averaged(t, avg);
            progress({t, svm_objective(ex, avg.w, avg.bias, lambda), gaussian_support(avg).count, -1, 0});
        }
    }
    averaged(std::max<std::size_t>(iters, 1), avg);
    return avg;
}

/// Per-iteration view of the RDA state, for monitoring and tests.
struct RdaState {
    std::size_t iteration = 0;
    std::span<const double> mean_subgradient;  // weights part of g-bar
    std::span<const double> w;
    double bias = 0.0;
};
using RdaObserver = std::function<void(const RdaState&)>;

/// Regularized dual averaging for mean hinge + lambda_group sum_g ||w_g||.
/// After t subgradients with running mean g-bar:
///   w_g = 0                                         if ||g-bar_g|| <= lambda
///   w_g = -(sqrt(t)/gamma) (1 - lambda/||g-bar_g||) g-bar_g   otherwise
/// and the bias (unregularized) is -(sqrt(t)/gamma) g-bar_b.
inline LinearModel train_group_lasso(const RowMatrix<float>& positives, const RowMatrix<float>& negatives,
                                     const FvLayout& layout, const TrainConfig& cfg, const ProgressFn& progress = {},
                                     const RdaObserver& observer = {}) {
    const std::size_t dim = layout.size();
    const Examples ex{positives, negatives};
    detail::check_examples(ex, dim);
    if (cfg.lambda_group < 0.0) throw Error("train_group_lasso: lambda_group must be non-negative");
    if (cfg.rda_gamma <= 0.0) throw Error("train_group_lasso: rda_gamma must be positive");
    const std::size_t n = ex.size();
    const std::size_t gs = layout.block();
    const std::size_t ng = layout.groups();
    const double lambda = cfg.lambda_group;

    std::vector<double> G(dim, 0.0);  // sum of subgradients (weights)
    double Gb = 0.0;
    std::vector<double> gbar(dim, 0.0);
    LinearModel model(layout);
    Rng rng(cfg.seed);
    std::vector<double> step(dim, 0.0);

    const auto update_w = [&](std::size_t t) {
        const double tt = static_cast<double>(t);
        const double scale = std::sqrt(tt) / cfg.rda_gamma;
        double wn2 = 0.0;
        for (std::size_t g = 0; g < ng; ++g) {
            double s = 0.0;
            for (std::size_t j = g * gs; j < (g + 1) * gs; ++j) {
                gbar[j] = G[j] / tt;
                s += gbar[j] * gbar[j];
            }
            const double nrm = std::sqrt(s);
            if (nrm <= lambda) {
                for (std::size_t j = g * gs; j < (g + 1) * gs; ++j) model.w[j] = 0.0;
            } else {
                const double c = -scale * (1.0 - lambda / nrm);
                for (std::size_t j = g * gs; j < (g + 1) * gs; ++j) {
                    model.w[j] = c * gbar[j];
                    wn2 += model.w[j] * model.w[j];
                }
            }
        }
        model.bias = -scale * (Gb / tt);
        if (std::sqrt(wn2) > 1e6 || !std::isfinite(wn2)) throw Error("train_group_lasso: rda_gamma too small (divergence)");
    };

    const std::size_t batch = cfg.rda_batch == 0 ? n : cfg.rda_batch;
    for (std::size_t t = 1; t <= cfg.rda_iterations; ++t) {
        std::fill(step.begin(), step.end(), 0.0);
        double step_b = 0.0;
        for (std::size_t s = 0; s < batch; ++s) {
            const std::size_t i = cfg.rda_batch == 0 ? s : rng.index(n);
            const auto x = ex.row(i);
            const double y = ex.label(i);
            if (y * model.decision(x) < 1.0) {
                for (std::size_t j = 0; j < dim; ++j) step[j] -= y * x[j];
                step_b -= y;
            }
        }
        const double inv_b = 1.0 / static_cast<double>(batch);
        for (std::size_t j = 0; j < dim; ++j) G[j] += step[j] * inv_b;
        Gb += step_b * inv_b;
        update_w(t);
        if (observer) observer({t, gbar, model.w, model.bias});
        if (progress && cfg.monitor_every > 0 && (t % cfg.monitor_every == 0 || t == cfg.rda_iterations))
            progress({t, group_lasso_objective(ex, model.w, model.bias, lambda, gs), gaussian_support(model).count, -1, 0});
    }
    return model;
}

/// Zeroes every feature outside the active groups.
inline void mask_features(RowMatrix<float>& m, const std::vector<std::uint8_t>& active, std::size_t group_size) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t g = 0; g < active.size(); ++g)
            if (!active[g]) std::fill_n(row.begin() + static_cast<std::ptrdiff_t>(g * group_size), group_size, 0.0f);
    }
}

}  // namespace fvdet
