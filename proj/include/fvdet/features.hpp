// SPDX-License-Identifier: Apache-2.0
//
// Dense multi-scale patch extraction, the 4x4x8 gradient-histogram patch
// descriptor, and PCA decorrelation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fvdet/core.hpp"
#include "fvdet/image.hpp"

namespace fvdet {

inline constexpr std::size_t kRawDim = 128;

struct PatchParams {
    int patch_size = 12;
    int step = 3;
    int num_scales = 15;
    double scale_factor = 1.2;
    bool root_sift = false;  // square-root the descriptor after normalization
};

struct PatchLocation {
    double center_x = 0.0;  // original-image continuous coordinates
    double center_y = 0.0;
    double scale = 1.0;     // scale_factor^level
    int level = 0;
};

/// Patches of one image, stored column-wise. `projected` is filled by
/// project_patches() once a PCA is available.
struct PatchSet {
    std::vector<PatchLocation> locations;
    RowMatrix<float> raw;
    RowMatrix<float> projected;
    std::vector<std::uint8_t> zero_energy;

    std::size_t size() const { return locations.size(); }
};

struct SiftDescriptor {
    std::array<float, kRawDim> values{};
    bool zero_energy = false;
};

/// Patches per axis at one scale for an image axis of `dim` pixels.
inline int grid_count(int dim, int patch_size, int step) {
    return dim < patch_size ? 0 : (dim - patch_size) / step + 1;
}

/// 4x4 spatial cells x 8 orientations of gradient magnitude, trilinearly
/// interpolated, l2-normalized, clamped at 0.2 and renormalized.
inline SiftDescriptor compute_sift_like(std::span<const float> pixels, int patch_size, bool root_sift = false) {
    if (patch_size < 4 || pixels.size() != static_cast<std::size_t>(patch_size) * patch_size)
        throw Error("compute_sift_like: patch must be square with side >= 4");
    constexpr int kCells = 4;
    constexpr int kOrient = 8;
    const int n = patch_size;
    const double cell = static_cast<double>(n) / kCells;
    const auto px = [&](int x, int y) { return static_cast<double>(pixels[static_cast<std::size_t>(y) * n + x]); };

    std::array<double, kRawDim> hist{};
    for (int y = 0; y < n; ++y) {
        const int ym = std::max(y - 1, 0), yp = std::min(y + 1, n - 1);
        const double v = (y + 0.5) / cell - 0.5;
        const int v0 = static_cast<int>(std::floor(v));
        const double fv = v - v0;
        for (int x = 0; x < n; ++x) {
            const int xm = std::max(x - 1, 0), xp = std::min(x + 1, n - 1);
            const double gx = (px(xp, y) - px(xm, y)) / (xp - xm);
            const double gy = (px(x, yp) - px(x, ym)) / (yp - ym);
            const double mag = std::hypot(gx, gy);
            if (mag == 0.0) continue;
            double theta = std::atan2(gy, gx);
            if (theta < 0) theta += 2.0 * M_PI;
            const double o = theta / (2.0 * M_PI / kOrient);
            int o0 = static_cast<int>(std::floor(o));
            const double fo = o - o0;
            o0 %= kOrient;
            const int o1 = (o0 + 1) % kOrient;

            const double u = (x + 0.5) / cell - 0.5;
            const int u0 = static_cast<int>(std::floor(u));
            const double fu = u - u0;
            for (int dv = 0; dv < 2; ++dv) {
                const int cy = v0 + dv;
                if (cy < 0 || cy >= kCells) continue;
                const double wv = dv ? fv : 1.0 - fv;
                for (int du = 0; du < 2; ++du) {
                    const int cx = u0 + du;
                    if (cx < 0 || cx >= kCells) continue;
                    const double w = mag * wv * (du ? fu : 1.0 - fu);
                    const std::size_t base = static_cast<std::size_t>(cy * kCells + cx) * kOrient;
                    hist[base + o0] += w * (1.0 - fo);
                    hist[base + o1] += w * fo;
                }
            }
        }
    }

    SiftDescriptor out;
    double norm = 0.0;
    for (double h : hist) norm += h * h;
    norm = std::sqrt(norm);
    if (norm <= 1e-12) {
        out.zero_energy = true;
        return out;
    }
    double renorm = 0.0;
    for (double& h : hist) {
        h = std::min(h / norm, 0.2);
        renorm += h * h;
    }
    renorm = std::sqrt(renorm);
    for (std::size_t i = 0; i < kRawDim; ++i) {
        double v = hist[i] / renorm;
        if (root_sift) v = std::sqrt(v);
        out.values[i] = static_cast<float>(v);
    }
    if (root_sift) {
        // sqrt of a unit-l2 non-negative vector has unit l1; restore unit l2
        double s = 0.0;
        for (float v : out.values) s += static_cast<double>(v) * v;
        s = std::sqrt(s);
        for (float& v : out.values) v = static_cast<float>(v / s);
    }
    return out;
}

/// Dense grid of patches over a scale pyramid. Level s resamples the image
/// by 1/scale_factor^s; levels smaller than one patch are skipped.
inline PatchSet extract_patches(const GrayImage& image, const PatchParams& params) {
    PatchSet set;
    set.raw.set_cols(kRawDim);
    const int p = params.patch_size;
    std::vector<float> buf(static_cast<std::size_t>(p) * p);
    for (int s = 0; s < params.num_scales; ++s) {
        const double scale = std::pow(params.scale_factor, s);
        const GrayImage level = resample(image, scale);
        if (level.empty()) continue;
        const int nx = grid_count(level.width, p, params.step);
        const int ny = grid_count(level.height, p, params.step);
        for (int gy = 0; gy < ny; ++gy) {
            for (int gx = 0; gx < nx; ++gx) {
                const int x0 = gx * params.step, y0 = gy * params.step;
                for (int j = 0; j < p; ++j)
                    for (int i = 0; i < p; ++i) buf[static_cast<std::size_t>(j) * p + i] = level.at(x0 + i, y0 + j);
                const SiftDescriptor d = compute_sift_like(buf, p, params.root_sift);
                set.locations.push_back({(x0 + 0.5 * p) * scale, (y0 + 0.5 * p) * scale, scale, s});
                set.raw.push_back(d.values);
                set.zero_energy.push_back(d.zero_energy ? 1 : 0);
            }
        }
    }
    return set;
}

/// Mean-centred orthonormal projection onto the leading principal axes.
struct PcaProjection {
    std::vector<double> mean;   // input_dim
    std::vector<double> basis;  // dim x input_dim, row-major
    std::size_t dim = 0;
    std::size_t input_dim = kRawDim;

    std::span<const double> row(std::size_t i) const { return {basis.data() + i * input_dim, input_dim}; }

    template <typename In, typename Out>
    void project(std::span<const In> raw, std::span<Out> out) const {
        for (std::size_t r = 0; r < dim; ++r) {
            const double* b = basis.data() + r * input_dim;
            double s = 0.0;
            for (std::size_t c = 0; c < input_dim; ++c) s += b[c] * (static_cast<double>(raw[c]) - mean[c]);
            out[r] = static_cast<Out>(s);
        }
    }

    template <typename In>
    std::vector<double> project(std::span<const In> raw) const {
        std::vector<double> out(dim);
        project<In, double>(raw, out);
        return out;
    }
};

/// Fits a PCA on the rows of `sample`. When the sample covariance has rank
/// below `dim` the basis is completed with an orthonormal complement and a
/// warning is emitted; the numerical rank is written to `rank_out`.
inline PcaProjection fit_pca(const RowMatrix<float>& sample, std::size_t dim, std::size_t* rank_out = nullptr) {
    const std::size_t n = sample.rows();
    const std::size_t in_dim = sample.cols();
    if (dim == 0 || dim > in_dim) throw Error("fit_pca: output dimension must be in [1, input dimension]");
    if (n <= dim) throw Error("fit_pca: sample size must exceed the output dimension");

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in_dim));
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = sample.row(i);
        for (std::size_t c = 0; c < in_dim; ++c) mean[static_cast<Eigen::Index>(c)] += r[c];
    }
    mean /= static_cast<double>(n);

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(in_dim));
    Eigen::VectorXd centred(static_cast<Eigen::Index>(in_dim));
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = sample.row(i);
        for (std::size_t c = 0; c < in_dim; ++c) centred[static_cast<Eigen::Index>(c)] = r[c] - mean[static_cast<Eigen::Index>(c)];
        cov.selfadjointView<Eigen::Lower>().rankUpdate(centred);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw Error("fit_pca: eigen-decomposition failed");
    const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
    const Eigen::MatrixXd& vectors = eig.eigenvectors();

    const double top = std::max(values[values.size() - 1], 0.0);
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < values.size(); ++i)
        if (values[i] > 1e-10 * std::max(top, 1e-300)) ++rank;
    if (rank_out) *rank_out = rank;
    if (rank < dim)
        warn("fit_pca: covariance rank " + std::to_string(rank) + " < " + std::to_string(dim) +
             "; completing basis with an orthonormal complement");

    PcaProjection pca;
    pca.dim = dim;
    pca.input_dim = in_dim;
    pca.mean.assign(mean.data(), mean.data() + mean.size());
    pca.basis.resize(dim * in_dim);
    for (std::size_t r = 0; r < dim; ++r) {
        const Eigen::Index col = static_cast<Eigen::Index>(in_dim - 1 - r);
        Eigen::VectorXd v = vectors.col(col);
        // sign convention: largest-magnitude coordinate is positive
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        for (std::size_t c = 0; c < in_dim; ++c) pca.basis[r * in_dim + c] = v[static_cast<Eigen::Index>(c)];
    }
    return pca;
}

/// Fills `set.projected` with basis * (raw - mean).
inline void project_patches(const PcaProjection& pca, PatchSet& set) {
    set.projected = RowMatrix<float>(set.size(), pca.dim);
    for (std::size_t i = 0; i < set.size(); ++i) pca.project<float, float>(set.raw.row(i), set.projected.row(i));
}

}  // namespace fvdet
