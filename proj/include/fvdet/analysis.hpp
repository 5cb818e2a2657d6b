// SPDX-License-Identifier: Apache-2.0
//
// Analysis experiments over trained detectors: per-patch scores, patch- and
// Gaussian-level pruning curves, per-Gaussian score surfaces on a 2D PCA
// plane, top-scoring patch retrieval and clustering of part appearances.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvdet/codebook.hpp"
#include "fvdet/core.hpp"
#include "fvdet/corpus.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/image.hpp"
#include "fvdet/learner.hpp"
#include "fvdet/training.hpp"

namespace fvdet {

// ---------------------------------------------------------------------------
// per-patch scores

/// <w_{bin,k}, phi / ||phi||> for a point-wise block phi of Gaussian k.
template <typename T>
double patch_score_block(const LinearModel& m, std::size_t bin, std::size_t k, const T* phi) {
    const std::size_t blk = m.layout.block();
    double nn = 0.0;
    for (std::size_t i = 0; i < blk; ++i) nn += static_cast<double>(phi[i]) * static_cast<double>(phi[i]);
    if (nn <= 0.0) return 0.0;
    const double* w = m.w.data() + m.layout.offset(bin, k);
    double s = 0.0;
    for (std::size_t i = 0; i < blk; ++i) s += w[i] * static_cast<double>(phi[i]);
    return s / std::sqrt(nn);
}

/// Score of descriptor x in spatial bin `bin`: the point-wise FV of x,
/// l2-normalized, against the bin's weights. `forced_k` overrides the hard
/// assignment.
template <typename T>
double patch_score(const GmmModel& g, const LinearModel& m, std::span<const T> x, std::size_t bin,
                   std::optional<std::size_t> forced_k = std::nullopt) {
    if (!(m.layout.K == g.K && m.layout.D == g.D)) throw Error("patch_score: model does not match GMM");
    if (bin >= m.layout.bins()) throw Error("patch_score: bin out of range");
    const std::size_t k = forced_k ? *forced_k : hard_assign(g, x);
    std::vector<double> phi(2 * g.D);
    encode_pointwise_block(g, x, k, phi);
    return patch_score_block(m, bin, k, phi.data());
}

enum class PatchScoreMode {
    normalized,  // sum over containing bins of <w_b, phi/||phi||>
    raw,         // sum over containing bins of <w_b, phi> / N_b (additive to the unnormalized window score)
};

inline std::string to_string(PatchScoreMode m) { return m == PatchScoreMode::raw ? "raw" : "normalized"; }

inline PatchScoreMode parse_patch_score_mode(const std::string& s) {
    if (s == "raw") return PatchScoreMode::raw;
    if (s == "normalized") return PatchScoreMode::normalized;
    throw Error("unknown patch score mode: " + s);
}

/// Per-entry dot products of one image against every bin of a model:
/// dots[i * bins + b] = <w_{b, k_i}, phi_i>, norms[i] = ||phi_i||.
struct PatchScoreTable {
    std::size_t bins = 0;
    std::vector<double> dots;
    std::vector<double> norms;

    PatchScoreTable(const ImageEncoding& enc, const LinearModel& m) : bins(enc.layout.bins()) {
        const std::size_t blk = enc.layout.block();
        dots.resize(enc.size() * bins);
        norms.resize(enc.size());
        for (std::size_t i = 0; i < enc.size(); ++i) {
            const float* phi = enc.values(i);
            double nn = 0.0;
            for (std::size_t j = 0; j < blk; ++j) nn += static_cast<double>(phi[j]) * phi[j];
            norms[i] = std::sqrt(nn);
            for (std::size_t b = 0; b < bins; ++b) {
                const double* w = m.w.data() + enc.layout.offset(b, enc.assignment[i]);
                double s = 0.0;
                for (std::size_t j = 0; j < blk; ++j) s += w[j] * static_cast<double>(phi[j]);
                dots[i * bins + b] = s;
            }
        }
    }
};

/// Entries of `enc` inside `win` (ascending) and their summed per-bin
/// contribution under `mode`.
inline void patch_contributions(const ImageEncoding& enc, const PatchScoreTable& table, const Window& win, PatchScoreMode mode,
                                std::vector<std::uint32_t>& entries, std::vector<double>& values) {
    entries.clear();
    values.clear();
    const std::size_t R = enc.layout.R;
    std::vector<std::size_t> counts(enc.layout.bins(), 0);
    WindowAccumulator::for_each_inside(enc, win, [&](std::size_t i) {
        entries.push_back(static_cast<std::uint32_t>(i));
        ++counts[0];
        ++counts[cell_bin(win, R, enc.cx[i], enc.cy[i])];
    });
    for (const std::uint32_t i : entries) {
        const std::size_t cell = cell_bin(win, R, enc.cx[i], enc.cy[i]);
        const double d0 = table.dots[i * table.bins];
        const double d1 = table.dots[i * table.bins + cell];
        if (mode == PatchScoreMode::raw) {
            values.push_back(d0 / static_cast<double>(counts[0]) + d1 / static_cast<double>(counts[cell]));
        } else {
            const double n = table.norms[i];
            values.push_back(n > 0.0 ? d0 / n + d1 / n : 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// pruning experiments

struct PruningCurve {
    std::vector<double> fractions;
    std::vector<double> ap;  // mAP per fraction
    std::vector<std::vector<double>> per_class_ap;
};

struct EvalOptions {
    double nms_threshold = 0.3;
    double iou_threshold = 0.5;
    ApMode ap_mode = ApMode::voc07_11point;
    std::size_t jobs = 1;
};

namespace detail {

inline std::vector<double> per_class_values(const ApReport& rep) {
    std::vector<double> v;
    for (const auto& a : rep.per_class) v.push_back(a ? *a : std::numeric_limits<double>::quiet_NaN());
    return v;
}

inline std::size_t pruned_count(double fraction, std::size_t n) {
    const auto d = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
    return std::min(d, n);
}

}  // namespace detail

/// For every candidate window, rank its patches by the absolute value of
/// their contribution, drop the lowest `fraction`, re-aggregate and
/// re-normalize the survivors, re-score, then per-class NMS and AP.
inline PruningCurve prune_patches_experiment(const Corpus& test, std::span<const LinearModel> models, std::vector<double> fractions,
                                             PatchScoreMode mode = PatchScoreMode::normalized, const EvalOptions& opt = {}) {
    if (models.empty()) throw Error("prune_patches_experiment: no models");
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (fractions[i] < 0.0 || fractions[i] > 1.0) throw Error("prune_patches_experiment: fraction outside [0, 1]");
        if (i > 0 && fractions[i] <= fractions[i - 1]) throw Error("prune_patches_experiment: fractions must be strictly increasing");
    }
    const std::size_t nf = fractions.size();
    // dets[f][image]
    std::vector<std::vector<std::vector<Detection>>> dets(nf, std::vector<std::vector<Detection>>(test.images.size()));
    parallel_for(test.images.size(), opt.jobs, [&](std::size_t img) {
        const ImageEncoding enc = test.encode(img);
        WindowAccumulator acc(enc.layout);
        std::vector<std::uint32_t> entries, order, subset;
        std::vector<double> values;
        std::vector<std::vector<Detection>> raw(nf);
        for (const LinearModel& m : models) {
            const PatchScoreTable table(enc, m);
            for (const Window& win : test.images[img].candidates) {
                patch_contributions(enc, table, win, mode, entries, values);
                order.resize(entries.size());
                for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<std::uint32_t>(j);
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::uint32_t a, std::uint32_t b) { return std::abs(values[a]) < std::abs(values[b]); });
                for (std::size_t f = 0; f < nf; ++f) {
                    const std::size_t drop = detail::pruned_count(fractions[f], entries.size());
                    subset.clear();
                    for (std::size_t j = drop; j < order.size(); ++j) subset.push_back(entries[order[j]]);
                    std::sort(subset.begin(), subset.end());
                    SparseFv fv = acc.accumulate(enc, win, nullptr, &subset);
                    normalize(fv, test.normalization);
                    Detection d;
                    d.window = win;
                    d.class_id = m.class_id;
                    d.image_id = static_cast<int>(img);
                    d.degenerate = fv.bin_counts[0] == 0;
                    d.score = d.degenerate ? m.bias : score(fv, m.w, m.bias);
                    raw[f].push_back(d);
                }
            }
        }
        for (std::size_t f = 0; f < nf; ++f) dets[f][img] = nms_per_class(raw[f], opt.nms_threshold);
    });
    PruningCurve curve;
    curve.fractions = std::move(fractions);
    const auto gt = test.ground_truth();
    std::size_t num_classes = 0;
    for (const auto& m : models) num_classes = std::max(num_classes, static_cast<std::size_t>(m.class_id) + 1);
    for (std::size_t f = 0; f < nf; ++f) {
        std::vector<Detection> all;
        for (const auto& d : dets[f]) all.insert(all.end(), d.begin(), d.end());
        const ApReport rep = evaluate_ap(all, gt, num_classes, opt.iou_threshold, opt.ap_mode);
        curve.ap.push_back(rep.mean_ap);
        curve.per_class_ap.push_back(detail::per_class_values(rep));
    }
    return curve;
}

struct GaussianPruningPoint {
    double lambda = 0.0;
    std::vector<std::size_t> active_groups;  // per class
    double active_fraction = 0.0;            // mean over classes
    double raw_ap = 0.0;                     // group-lasso model as trained
    double finetuned_ap = 0.0;               // l2 retrained on the selected groups
    std::vector<double> raw_per_class;
    std::vector<double> finetuned_per_class;
    bool skipped = false;  // some class had an empty support
};

struct GaussianPruningOptions {
    TrainConfig train;     // lambda_group is overridden per grid point
    MiningConfig mining;
    EvalOptions eval;
};

/// Group-lasso sweep. For each lambda, each class's group-lasso model is
/// trained by RDA on that class's `examples` (typically the final mined set
/// of the dense baseline), evaluated as is, then l2-finetuned with mining
/// on its support and evaluated again. Detection skips inactive groups.
/// At lambda 0 the baseline models in `examples` are used unchanged.
inline std::vector<GaussianPruningPoint> prune_gaussians_experiment(const Corpus& train, const Corpus& test,
                                                                     const std::vector<ClassSpec>& classes,
                                                                     const std::vector<MiningResult>& examples,
                                                                     const std::vector<double>& lambdas,
                                                                     const GaussianPruningOptions& opt,
                                                                     const std::function<void(const GaussianPruningPoint&)>& on_point = {}) {
    if (examples.size() != classes.size()) throw Error("prune_gaussians_experiment: one example set per class required");
    const auto gt = test.ground_truth();
    std::size_t num_classes = 0;
    for (const auto& c : classes) num_classes = std::max(num_classes, static_cast<std::size_t>(c.id) + 1);
    const DetectOptions dopt{opt.eval.nms_threshold, true, opt.eval.jobs};
    std::vector<GaussianPruningPoint> out;
    for (const double lambda : lambdas) {
        GaussianPruningPoint pt;
        pt.lambda = lambda;
        TrainConfig cfg = opt.train;
        cfg.lambda_group = lambda;
        std::vector<LinearModel> sparse(classes.size());
        std::vector<std::vector<std::uint8_t>> supports;
        double frac = 0.0;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            cfg.seed = opt.train.seed + static_cast<std::uint64_t>(classes[c].id);
            // lambda 0 is the unregularized end of the curve: the dense baseline itself
            sparse[c] = lambda == 0.0 ? examples[c].model
                                      : train_group_lasso(examples[c].positives, examples[c].negatives, train.layout, cfg);
            sparse[c].class_id = classes[c].id;
            sparse[c].class_name = classes[c].name;
            const GaussianSupport s = gaussian_support(sparse[c]);
            pt.active_groups.push_back(s.count);
            frac += s.fraction();
            if (s.count == 0) pt.skipped = true;
            supports.push_back(s.active);
        }
        pt.active_fraction = frac / static_cast<double>(classes.size());
        if (pt.skipped) {
            warn("prune_gaussians_experiment: lambda " + std::to_string(lambda) + " leaves an empty support; point skipped");
            out.push_back(pt);
            if (on_point) on_point(pt);
            continue;
        }
        const ApReport raw_rep =
            evaluate_ap(detect_corpus(test, std::span<const LinearModel>(sparse), dopt), gt, num_classes, opt.eval.iou_threshold,
                        opt.eval.ap_mode);
        pt.raw_ap = raw_rep.mean_ap;
        pt.raw_per_class = detail::per_class_values(raw_rep);

        TrainConfig ft = opt.train;
        const auto tuned = train_with_mining(train, classes, ft, opt.mining, &supports);
        std::vector<LinearModel> tuned_models;
        for (const auto& r : tuned) tuned_models.push_back(r.model);
        const ApReport ft_rep = evaluate_ap(detect_corpus(test, std::span<const LinearModel>(tuned_models), dopt), gt, num_classes,
                                            opt.eval.iou_threshold, opt.eval.ap_mode);
        pt.finetuned_ap = ft_rep.mean_ap;
        pt.finetuned_per_class = detail::per_class_values(ft_rep);
        out.push_back(pt);
        if (on_point) on_point(pt);
    }
    return out;
}

// ---------------------------------------------------------------------------
// score surfaces

struct ScoreSurface {
    std::size_t k = 0;
    std::size_t bin = 0;
    int class_id = 0;
    std::size_t G = 0;
    std::vector<double> mean;               // D, centre of the plane
    std::array<std::vector<double>, 2> axes;  // M_k rows, each D
    std::array<double, 2> sigma{};          // standard deviation along each axis
    std::vector<double> grid;               // G x G, row j = second axis, column i = first axis

    /// Plane coordinate of grid index i along axis a: -3 sigma .. 3 sigma.
    double coordinate(std::size_t a, std::size_t i) const {
        if (G == 1) return 0.0;
        return -3.0 * sigma[a] + 6.0 * sigma[a] * static_cast<double>(i) / static_cast<double>(G - 1);
    }
    double at(std::size_t i, std::size_t j) const { return grid[j * G + i]; }
};

/// Descriptors of the corpus hard-assigned to Gaussian k (at most `limit`,
/// taken in image then canonical order).
inline RowMatrix<float> gaussian_descriptors(const Corpus& corpus, std::size_t k, std::size_t limit = std::numeric_limits<std::size_t>::max()) {
    RowMatrix<float> out(0, corpus.gmm.D);
    const GmmScorer scorer(corpus.gmm);
    for (const auto& img : corpus.images) {
        for (const std::uint32_t i : detail::canonical_order(img.patches)) {
            const auto x = img.patches.projected.row(i);
            if (scorer.assign(x) != k) continue;
            out.push_back(x);
            if (out.rows() >= limit) return out;
        }
    }
    return out;
}

/// Evaluates patch_score with assignment forced to k over a G x G grid on
/// the plane spanned by `axes` through `mean`.
inline ScoreSurface score_surface_on_plane(const GmmModel& g, const LinearModel& m, std::size_t k, std::size_t bin, std::size_t G,
                                           std::vector<double> mean, std::array<std::vector<double>, 2> axes,
                                           std::array<double, 2> sigma) {
    if (G == 0) throw Error("score_surface: grid size must be positive");
    ScoreSurface s;
    s.k = k;
    s.bin = bin;
    s.class_id = m.class_id;
    s.G = G;
    s.mean = std::move(mean);
    s.axes = std::move(axes);
    s.sigma = sigma;
    s.grid.resize(G * G);
    std::vector<double> x(g.D);
    for (std::size_t j = 0; j < G; ++j) {
        const double v = s.coordinate(1, j);
        for (std::size_t i = 0; i < G; ++i) {
            const double u = s.coordinate(0, i);
            for (std::size_t d = 0; d < g.D; ++d) x[d] = s.mean[d] + (u * s.axes[0][d] + v * s.axes[1][d]);
            s.grid[j * G + i] = patch_score<double>(g, m, x, bin, k);
        }
    }
    return s;
}

/// 2D PCA of the descriptors assigned to Gaussian k, then the score of the
/// model's bin over +-3 sigma of that plane.
inline ScoreSurface score_surface(const RowMatrix<float>& descriptors_k, const GmmModel& g, const LinearModel& m, std::size_t k,
                                  std::size_t bin, std::size_t G = 64) {
    const std::size_t n = descriptors_k.rows();
    if (n < 3) throw Error("score_surface: insufficient support (fewer than 3 patches assigned to the Gaussian)");
    if (descriptors_k.cols() != g.D) throw Error("score_surface: descriptor dimension does not match GMM");
    const std::size_t D = g.D;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < D; ++d) mu[static_cast<Eigen::Index>(d)] += descriptors_k.row(i)[d];
    mu /= static_cast<double>(n);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
    Eigen::VectorXd c(static_cast<Eigen::Index>(D));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < D; ++d) c[static_cast<Eigen::Index>(d)] = descriptors_k.row(i)[d] - mu[static_cast<Eigen::Index>(d)];
        cov.noalias() += c * c.transpose();
    }
    cov /= static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    std::array<std::vector<double>, 2> axes;
    std::array<double, 2> sigma{};
    for (int a = 0; a < 2; ++a) {
        const Eigen::Index col = static_cast<Eigen::Index>(D) - 1 - a;
        Eigen::VectorXd v = es.eigenvectors().col(col);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        axes[static_cast<std::size_t>(a)].assign(v.data(), v.data() + v.size());
        sigma[static_cast<std::size_t>(a)] = std::sqrt(std::max(es.eigenvalues()[col], 0.0));
    }
    return score_surface_on_plane(g, m, k, bin, G, std::vector<double>(mu.data(), mu.data() + mu.size()), std::move(axes), sigma);
}

// ---------------------------------------------------------------------------
// top patches

struct PatchRecord {
    int image_id = 0;
    double center_x = 0.0;
    double center_y = 0.0;
    double scale = 1.0;
    int level = 0;
    double score = 0.0;
};

struct TopPatches {
    std::vector<PatchRecord> patches;
    bool short_list = false;  // fewer than n patches were assigned to the Gaussian
};

/// The n patches assigned to Gaussian k with the highest score in bin `bin`,
/// descending; ties by (image id, x, y).
inline TopPatches top_patches(const Corpus& corpus, const LinearModel& m, std::size_t k, std::size_t bin, std::size_t n = 36) {
    if (n == 0) throw Error("top_patches: n must be positive");
    const GmmScorer scorer(corpus.gmm);
    std::vector<PatchRecord> all;
    std::vector<double> phi(2 * corpus.gmm.D);
    for (std::size_t im = 0; im < corpus.images.size(); ++im) {
        const auto& ps = corpus.images[im].patches;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto x = ps.projected.row(i);
            if (scorer.assign(x) != k) continue;
            encode_pointwise_block(corpus.gmm, x, k, phi);
            const auto& loc = ps.locations[i];
            all.push_back({static_cast<int>(im), loc.center_x, loc.center_y, loc.scale, loc.level, patch_score_block(m, bin, k, phi.data())});
        }
    }
    std::sort(all.begin(), all.end(), [](const PatchRecord& a, const PatchRecord& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        if (a.center_x != b.center_x) return a.center_x < b.center_x;
        if (a.center_y != b.center_y) return a.center_y < b.center_y;
        return a.level < b.level;
    });
    TopPatches out;
    out.short_list = all.size() < n;
    all.resize(std::min(all.size(), n));
    out.patches = std::move(all);
    return out;
}

// ---------------------------------------------------------------------------
// k-means and part appearances

struct KMeansResult {
    std::size_t k = 0;
    std::vector<std::size_t> assignment;
    std::vector<double> centers;  // k x dim
    std::vector<std::size_t> counts;
    double objective = 0.0;       // sum of squared distances to the assigned centre
    std::size_t iterations = 0;
};

/// Lloyd's algorithm from a seeded k-means++ start. Nearest-centre ties go
/// to the lowest index; an empty cluster keeps its previous centre.
inline KMeansResult kmeans(const RowMatrix<float>& data, std::size_t k, std::uint64_t seed, std::size_t max_iterations = 100) {
    const std::size_t n = data.rows();
    const std::size_t dim = data.cols();
    if (k == 0 || n < k) throw Error("kmeans: need at least k points");
    KMeansResult r;
    r.k = k;
    Rng rng(seed);
    const auto seeds = kmeanspp_seed(data, k, rng);
    r.centers.resize(k * dim);
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t d = 0; d < dim; ++d) r.centers[c * dim + d] = data.row(seeds[c])[d];
    r.assignment.assign(n, k);
    const auto assign = [&]() {
        bool changed = false;
        r.objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double dd = detail::sq_dist(data.row(i), {r.centers.data() + c * dim, dim});
                if (dd < bd) {
                    bd = dd;
                    best = c;
                }
            }
            if (r.assignment[i] != best) changed = true;
            r.assignment[i] = best;
            r.objective += bd;
        }
        return changed;
    };
    assign();
    for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
        std::vector<double> sum(k * dim, 0.0);
        std::vector<std::size_t> cnt(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++cnt[r.assignment[i]];
            for (std::size_t d = 0; d < dim; ++d) sum[r.assignment[i] * dim + d] += data.row(i)[d];
        }
        for (std::size_t c = 0; c < k; ++c)
            if (cnt[c] > 0)
                for (std::size_t d = 0; d < dim; ++d) r.centers[c * dim + d] = sum[c * dim + d] / static_cast<double>(cnt[c]);
        if (!assign()) {
            ++r.iterations;
            break;
        }
    }
    r.counts.assign(k, 0);
    for (std::size_t a : r.assignment) ++r.counts[a];
    return r;
}

/// Bilinear raster of the rectangle `win` of `image` at size x size.
inline GrayImage raster_window(const GrayImage& image, const Window& win, int size) {
    GrayImage out(size, size);
    for (int j = 0; j < size; ++j)
        for (int i = 0; i < size; ++i)
            out.at(i, j) = image.sample(win.x + (i + 0.5) * win.w / size - 0.5, win.y + (j + 0.5) * win.h / size - 0.5);
    return out;
}

/// Sub-rectangle of a window for pyramid bin b (0 = the window itself).
inline Window bin_window(const Window& win, std::size_t R, std::size_t b) {
    if (b == 0) return win;
    const std::size_t row = (b - 1) / R, col = (b - 1) % R;
    const double cw = win.w / static_cast<double>(R), ch = win.h / static_cast<double>(R);
    return {win.x + static_cast<double>(col) * cw, win.y + static_cast<double>(row) * ch, cw, ch};
}

struct BinClusters {
    std::size_t bin = 0;
    KMeansResult kmeans;
    std::vector<GrayImage> mean_images;  // one per cluster; empty clusters stay black
    std::vector<std::uint8_t> empty;      // per cluster
};

struct PartClusters {
    int class_id = 0;
    std::vector<Detection> detections;  // the clustered detections, by descending score
    std::size_t clusters = 0;           // possibly reduced from the request
    std::vector<BinClusters> bins;      // R^2 + 1 entries
};

struct PartClusterOptions {
    std::size_t top_n = 200;
    std::size_t clusters = 6;
    int raster = 64;
    std::uint64_t seed = 0;
};

/// Clusters the top-scoring detections of one class per pyramid bin by the
/// bin's FV and averages each cluster's raster of that bin.
/// `load_image(i)` returns image i of the corpus.
inline PartClusters cluster_part_appearances(const Corpus& corpus, const std::function<GrayImage(std::size_t)>& load_image,
                                             std::vector<Detection> detections, int class_id, const PartClusterOptions& opt = {}) {
    PartClusters out;
    out.class_id = class_id;
    std::vector<Detection> own;
    for (const auto& d : detections)
        if (d.class_id == class_id) own.push_back(d);
    std::sort(own.begin(), own.end(), detail::score_order);
    if (own.size() > opt.top_n) own.resize(opt.top_n);
    if (own.empty()) throw Error("cluster_part_appearances: no detections of the class");
    out.clusters = opt.clusters;
    if (own.size() < opt.clusters) {
        warn("cluster_part_appearances: only " + std::to_string(own.size()) + " detections; reducing cluster count");
        out.clusters = own.size();
    }
    out.detections = own;

    const FvLayout& l = corpus.layout;
    const std::size_t bin_len = l.K * l.block();
    std::vector<RowMatrix<float>> feats(l.bins(), RowMatrix<float>(0, bin_len));
    std::vector<std::vector<GrayImage>> rasters(l.bins());
    std::vector<std::size_t> order(own.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return own[a].image_id < own[b].image_id; });
    std::vector<std::vector<float>> fvs(own.size());
    std::vector<std::vector<GrayImage>> crops(own.size());
    int current = -1;
    ImageEncoding enc;
    GrayImage image;
    for (const std::size_t di : order) {
        const Detection& d = own[di];
        if (d.image_id != current) {
            current = d.image_id;
            enc = corpus.encode(static_cast<std::size_t>(current));
            image = load_image(static_cast<std::size_t>(current));
        }
        WindowAccumulator acc(l);
        SparseFv fv = acc.accumulate(enc, d.window);
        normalize(fv, corpus.normalization);
        fvs[di].assign(l.size(), 0.0f);
        densify_into(fv, fvs[di]);
        for (std::size_t b = 0; b < l.bins(); ++b) crops[di].push_back(raster_window(image, bin_window(d.window, l.R, b), opt.raster));
    }
    for (std::size_t b = 0; b < l.bins(); ++b) {
        RowMatrix<float> data(0, bin_len);
        for (std::size_t di = 0; di < own.size(); ++di)
            data.push_back(std::span<const float>(fvs[di].data() + b * bin_len, bin_len));
        BinClusters bc;
        bc.bin = b;
        bc.kmeans = kmeans(data, out.clusters, opt.seed + b);
        for (std::size_t c = 0; c < out.clusters; ++c) {
            GrayImage mean(opt.raster, opt.raster);
            const std::size_t cnt = bc.kmeans.counts[c];
            bc.empty.push_back(cnt == 0 ? 1 : 0);
            if (cnt > 0) {
                for (std::size_t di = 0; di < own.size(); ++di) {
                    if (bc.kmeans.assignment[di] != c) continue;
                    for (std::size_t p = 0; p < mean.pixels.size(); ++p) mean.pixels[p] += crops[di][b].pixels[p];
                }
                for (float& p : mean.pixels) p /= static_cast<float>(cnt);
            }
            bc.mean_images.push_back(std::move(mean));
        }
        out.bins.push_back(std::move(bc));
    }
    return out;
}

}  // namespace fvdet
