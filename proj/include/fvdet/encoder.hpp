// SPDX-License-Identifier: Apache-2.0
//
// Point-wise Fisher Vector encoding with hard assignment, spatial-pyramid
// aggregation and the two normalization schemes (signed square root, and
// per-Gaussian intra-normalization).
//
// Two aggregation paths exist. aggregate() is the reference: it encodes each
// patch on the fly into a dense vector. WindowAccumulator works from an
// ImageEncoding computed once per image and only touches the blocks that
// receive patches. Both perform the same floating-point operations in the
// same order, so their outputs agree bit for bit. Patches are summed in a
// canonical order (level, centre y, centre x, descriptor) rather than storage
// order, which makes every encoding independent of how the patch set is
// permuted.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvdet/codebook.hpp"
#include "fvdet/core.hpp"
#include "fvdet/features.hpp"
#include "fvdet/geometry.hpp"

namespace fvdet {

/// Block structure of a stacked pyramid FV: bins x gaussians x (2 D).
struct FvLayout {
    std::size_t R = 4;
    std::size_t K = 64;
    std::size_t D = 64;

    std::size_t bins() const { return R * R + 1; }
    std::size_t block() const { return 2 * D; }
    std::size_t groups() const { return bins() * K; }
    std::size_t size() const { return groups() * block(); }
    std::size_t group(std::size_t bin, std::size_t k) const { return bin * K + k; }
    std::size_t offset(std::size_t bin, std::size_t k) const { return group(bin, k) * block(); }
    bool operator==(const FvLayout&) const = default;
};

enum class Normalization { raw, ssr, intra };

inline std::string to_string(Normalization n) {
    switch (n) {
        case Normalization::raw: return "raw";
        case Normalization::ssr: return "ssr";
        case Normalization::intra: return "intra";
    }
    return "raw";
}

inline Normalization parse_normalization(const std::string& s) {
    if (s == "raw") return Normalization::raw;
    if (s == "ssr") return Normalization::ssr;
    if (s == "intra") return Normalization::intra;
    throw Error("unknown normalization: " + s);
}

/// Statistics of one descriptor: a single non-zero 2D block at Gaussian k.
struct PointwiseFv {
    std::size_t k = 0;
    std::vector<double> values;  // first-order (D) then second-order (D)

    std::vector<double> densify(std::size_t K) const {
        std::vector<double> out(K * values.size(), 0.0);
        std::copy(values.begin(), values.end(), out.begin() + static_cast<std::ptrdiff_t>(k * values.size()));
        return out;
    }
};

/// First- and second-order statistics of x with respect to Gaussian k.
template <typename T>
void encode_pointwise_block(const GmmModel& g, std::span<const T> x, std::size_t k, std::span<double> out) {
    const std::size_t D = g.D;
    const double pi = g.priors[k];
    const double a1 = 1.0 / std::sqrt(pi);
    const double a2 = 1.0 / std::sqrt(2.0 * pi);
    const double* mu = g.means.data() + k * D;
    const double* var = g.variances.data() + k * D;
    for (std::size_t d = 0; d < D; ++d) {
        const double z = (static_cast<double>(x[d]) - mu[d]) / std::sqrt(var[d]);
        out[d] = a1 * z;
        out[D + d] = a2 * (z * z - 1.0);
    }
}

template <typename T>
PointwiseFv encode_pointwise(const GmmModel& g, std::span<const T> x) {
    PointwiseFv fv;
    fv.k = hard_assign(g, x);
    fv.values.resize(2 * g.D);
    encode_pointwise_block(g, x, fv.k, fv.values);
    return fv;
}

/// Index (1..R^2) of the R x R cell containing (cx, cy). Centres on an
/// internal boundary belong to the higher-index cell.
inline std::size_t cell_bin(const Window& win, std::size_t R, double cx, double cy) {
    const double rr = static_cast<double>(R);
    auto col = static_cast<std::ptrdiff_t>(std::floor((cx - win.x) * rr / win.w));
    auto row = static_cast<std::ptrdiff_t>(std::floor((cy - win.y) * rr / win.h));
    col = std::clamp<std::ptrdiff_t>(col, 0, static_cast<std::ptrdiff_t>(R) - 1);
    row = std::clamp<std::ptrdiff_t>(row, 0, static_cast<std::ptrdiff_t>(R) - 1);
    return 1 + static_cast<std::size_t>(row) * R + static_cast<std::size_t>(col);
}

/// Dense stacked FV of one window.
struct PyramidFv {
    FvLayout layout;
    std::vector<double> values;
    std::vector<std::size_t> bin_counts;
    Normalization tag = Normalization::raw;
    bool degenerate = false;

    PyramidFv() = default;
    explicit PyramidFv(const FvLayout& l) : layout(l), values(l.size(), 0.0), bin_counts(l.bins(), 0) {}

    std::span<double> block(std::size_t bin, std::size_t k) { return {values.data() + layout.offset(bin, k), layout.block()}; }
    std::span<const double> block(std::size_t bin, std::size_t k) const {
        return {values.data() + layout.offset(bin, k), layout.block()};
    }
    std::span<const double> bin(std::size_t b) const {
        return {values.data() + layout.offset(b, 0), layout.K * layout.block()};
    }
};

namespace detail {

// Shared arithmetic of both aggregation paths.
template <typename T>
inline void add_block(double* __restrict dst, const T* __restrict src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += static_cast<double>(src[i]);
}

inline double sum_squares(const double* v, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i] * v[i];
    return s;
}

inline double ssr(double v) { return v < 0.0 ? -std::sqrt(-v) : std::sqrt(v); }

inline bool canonical_less(const PatchSet& ps, std::uint32_t a, std::uint32_t b) {
    const auto& la = ps.locations[a];
    const auto& lb = ps.locations[b];
    if (la.level != lb.level) return la.level < lb.level;
    if (la.center_y != lb.center_y) return la.center_y < lb.center_y;
    if (la.center_x != lb.center_x) return la.center_x < lb.center_x;
    const auto ra = ps.projected.row(a);
    const auto rb = ps.projected.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
}

/// Indices (all patches, or `subset`) sorted into canonical order.
inline std::vector<std::uint32_t> canonical_order(const PatchSet& ps, const std::vector<std::uint32_t>* subset = nullptr) {
    std::vector<std::uint32_t> idx;
    if (subset) {
        idx = *subset;
    } else {
        idx.resize(ps.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return canonical_less(ps, a, b); });
    return idx;
}

}  // namespace detail

/// Reference aggregation: every patch whose centre lies in `win` (or, when
/// `subset` is given, every listed patch index in that set) contributes its
/// point-wise FV to bin 0 and to its R x R cell; each bin is the mean over its
/// own patch count.
inline PyramidFv aggregate(const GmmModel& g, const PatchSet& patches, const Window& win, std::size_t R,
                           const std::vector<std::uint32_t>* subset = nullptr) {
    if (R < 1) throw Error("aggregate: R must be >= 1");
    if (win.w <= 0 || win.h <= 0) throw Error("aggregate: degenerate window");
    if (patches.projected.cols() != g.D) throw Error("aggregate: descriptor dimension does not match GMM");
    const FvLayout layout{R, g.K, g.D};
    PyramidFv fv(layout);
    std::vector<double> pw(layout.block());
    std::vector<float> pwf(layout.block());
    const GmmScorer scorer(g);
    const auto visit = [&](std::size_t i) {
        const auto& loc = patches.locations[i];
        if (!win.contains(loc.center_x, loc.center_y)) return;
        const auto x = patches.projected.row(i);
        const std::size_t k = scorer.assign(x);
        encode_pointwise_block<float>(g, x, k, pw);
        std::copy(pw.begin(), pw.end(), pwf.begin());
        const std::size_t cell = cell_bin(win, R, loc.center_x, loc.center_y);
        detail::add_block(fv.values.data() + layout.offset(cell, k), pwf.data(), pwf.size());
        ++fv.bin_counts[0];
        ++fv.bin_counts[cell];
    };
    for (std::uint32_t i : detail::canonical_order(patches, subset)) visit(i);
    // bin 0 holds every patch of the window, i.e. the sum of the cells
    for (std::size_t k = 0; k < layout.K; ++k)
        for (std::size_t cell = 1; cell < layout.bins(); ++cell)
            detail::add_block(fv.values.data() + layout.offset(0, k), fv.values.data() + layout.offset(cell, k), layout.block());
    const std::size_t per_bin = layout.K * layout.block();
    for (std::size_t b = 0; b < layout.bins(); ++b) {
        if (fv.bin_counts[b] == 0) continue;
        const double n = static_cast<double>(fv.bin_counts[b]);
        double* v = fv.values.data() + b * per_bin;
        for (std::size_t i = 0; i < per_bin; ++i) v[i] /= n;
    }
    fv.degenerate = fv.bin_counts[0] == 0;
    return fv;
}

/// sign(v) sqrt|v| per entry, then l2 over the whole stacked vector.
inline PyramidFv normalize_ssr(PyramidFv fv) {
    if (fv.tag != Normalization::raw) throw Error("normalize_ssr: input must be raw");
    for (double& v : fv.values) v = detail::ssr(v);
    const double total = std::sqrt(detail::sum_squares(fv.values.data(), fv.values.size()));
    if (total > 0.0)
        for (double& v : fv.values) v /= total;
    else
        fv.degenerate = true;
    fv.tag = Normalization::ssr;
    return fv;
}

/// Per-bin intra-normalization: each Gaussian block to unit l2 (zero blocks
/// stay zero), each bin scaled by 1/sqrt(K), then, if `final_l2`, the whole
/// stacked vector l2-normalized.
inline PyramidFv normalize_intra(PyramidFv fv, bool final_l2 = true) {
    if (fv.tag != Normalization::raw) throw Error("normalize_intra: input must be raw");
    const FvLayout& l = fv.layout;
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(l.K));
    for (std::size_t b = 0; b < l.bins(); ++b) {
        for (std::size_t k = 0; k < l.K; ++k) {
            double* v = fv.values.data() + l.offset(b, k);
            const double n = std::sqrt(detail::sum_squares(v, l.block()));
            if (n <= 0.0) continue;
            for (std::size_t i = 0; i < l.block(); ++i) v[i] = v[i] / n * inv_sqrt_k;
        }
    }
    if (final_l2) {
        const double total = std::sqrt(detail::sum_squares(fv.values.data(), fv.values.size()));
        if (total > 0.0)
            for (double& v : fv.values) v /= total;
        else
            fv.degenerate = true;
    }
    fv.tag = Normalization::intra;
    return fv;
}

inline PyramidFv normalize(PyramidFv fv, Normalization scheme) {
    switch (scheme) {
        case Normalization::ssr: return normalize_ssr(std::move(fv));
        case Normalization::intra: return normalize_intra(std::move(fv));
        case Normalization::raw: return fv;
    }
    return fv;
}

/// Point-wise statistics of every patch of one image, computed once and
/// shared by all candidate windows. Entries are stored in canonical order;
/// `source[i]` is the index of entry i in the encoded PatchSet.
struct ImageEncoding {
    FvLayout layout;
    std::vector<std::uint32_t> source;
    std::vector<double> cx;
    std::vector<double> cy;
    std::vector<std::uint32_t> assignment;
    std::vector<float> pointwise;  // size() x block, stored in single precision
    // Runs of entries sharing (level, centre y), in storage order; within a
    // run centre x ascends. Lets a window visit only its own patches.
    std::vector<std::uint32_t> row_start;  // size = number of runs + 1
    std::vector<double> row_y;
    std::vector<std::uint32_t> level_rows;  // first run of each level; size = levels + 1

    std::size_t size() const { return assignment.size(); }
    const float* values(std::size_t i) const { return pointwise.data() + i * layout.block(); }
};

inline ImageEncoding encode_image(const GmmModel& g, const PatchSet& patches, std::size_t R) {
    if (patches.projected.cols() != g.D) throw Error("encode_image: descriptor dimension does not match GMM");
    ImageEncoding enc;
    enc.layout = {R, g.K, g.D};
    const std::size_t n = patches.size();
    enc.cx.resize(n);
    enc.cy.resize(n);
    enc.assignment.resize(n);
    enc.pointwise.resize(n * enc.layout.block());
    enc.source = detail::canonical_order(patches);
    const GmmScorer scorer(g);
    std::vector<double> pw(enc.layout.block());
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t src = enc.source[i];
        enc.cx[i] = patches.locations[src].center_x;
        enc.cy[i] = patches.locations[src].center_y;
        const auto x = patches.projected.row(src);
        const std::size_t k = scorer.assign(x);
        enc.assignment[i] = static_cast<std::uint32_t>(k);
        encode_pointwise_block<float>(g, x, k, pw);
        std::copy(pw.begin(), pw.end(), enc.pointwise.begin() + static_cast<std::ptrdiff_t>(i * enc.layout.block()));
    }
    int prev_level = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int level = patches.locations[enc.source[i]].level;
        const bool new_level = i == 0 || level != prev_level;
        if (new_level) enc.level_rows.push_back(static_cast<std::uint32_t>(enc.row_y.size()));
        if (new_level || enc.cy[i] != enc.row_y.back()) {
            enc.row_start.push_back(static_cast<std::uint32_t>(i));
            enc.row_y.push_back(enc.cy[i]);
        }
        prev_level = level;
    }
    enc.row_start.push_back(static_cast<std::uint32_t>(n));
    enc.level_rows.push_back(static_cast<std::uint32_t>(enc.row_y.size()));
    return enc;
}

/// Block-sparse window FV produced by WindowAccumulator. `groups` lists the
/// accumulated (bin, gaussian) groups in ascending order.
struct SparseFv {
    FvLayout layout;
    std::vector<std::uint32_t> groups;
    std::vector<double> values;  // groups.size() x block
    std::vector<std::uint32_t> bin_counts;
    std::size_t skipped_blocks = 0;  // non-empty groups left out by an activity mask
    Normalization tag = Normalization::raw;
    bool degenerate = false;

    PyramidFv densify() const {
        PyramidFv fv(layout);
        for (std::size_t j = 0; j < groups.size(); ++j)
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(j * layout.block()), layout.block(),
                        fv.values.begin() + static_cast<std::ptrdiff_t>(groups[j] * layout.block()));
        for (std::size_t b = 0; b < layout.bins(); ++b) fv.bin_counts[b] = bin_counts[b];
        fv.tag = tag;
        fv.degenerate = degenerate;
        return fv;
    }
};

/// Reusable per-thread workspace for window aggregation.
class WindowAccumulator {
public:
    explicit WindowAccumulator(const FvLayout& layout)
        : layout_(layout), buffer_(layout.size(), 0.0), counts_(layout.groups(), 0) {}

    /// Aggregates the patches of `enc` whose centres fall in `win`. With an
    /// `active` mask, inactive groups are counted but not accumulated.
    /// `subset`, when given, restricts to those patch indices (ascending).
    SparseFv accumulate(const ImageEncoding& enc, const Window& win, const std::vector<std::uint8_t>* active = nullptr,
                        const std::vector<std::uint32_t>* subset = nullptr) {
        if (!(enc.layout == layout_)) throw Error("WindowAccumulator: layout mismatch");
        const std::size_t blk = layout_.block();
        const std::size_t R = layout_.R;
        SparseFv out;
        out.layout = layout_;
        out.bin_counts.assign(layout_.bins(), 0);
        touched_.clear();
        const auto visit = [&](std::size_t i) {
            const std::size_t k = enc.assignment[i];
            const std::size_t cell = cell_bin(win, R, enc.cx[i], enc.cy[i]);
            const std::size_t g0 = layout_.group(0, k);
            const std::size_t g1 = layout_.group(cell, k);
            if (counts_[g0]++ == 0) touched_.push_back(static_cast<std::uint32_t>(g0));
            if (counts_[g1]++ == 0) touched_.push_back(static_cast<std::uint32_t>(g1));
            if (!active || (*active)[g0] || (*active)[g1]) detail::add_block(buffer_.data() + g1 * blk, enc.values(i), blk);
            ++out.bin_counts[0];
            ++out.bin_counts[cell];
        };
        if (subset) {
            for (std::uint32_t i : *subset)
                if (win.contains(enc.cx[i], enc.cy[i])) visit(i);
        } else {
            for_each_inside(enc, win, visit);
        }
        std::sort(touched_.begin(), touched_.end());
        // bin 0 as the sum of the cells, in cell order (untouched cells are zero)
        for (const std::uint32_t g0 : touched_) {
            if (g0 >= layout_.K) break;
            if (active && !(*active)[g0]) continue;
            for (std::size_t cell = 1; cell < layout_.bins(); ++cell) {
                const std::size_t g1 = layout_.group(cell, g0);
                if (counts_[g1]) detail::add_block(buffer_.data() + g0 * blk, buffer_.data() + g1 * blk, blk);
            }
        }
        out.groups.reserve(touched_.size());
        out.values.reserve(touched_.size() * blk);
        for (const std::uint32_t grp : touched_) {
            double* v = buffer_.data() + static_cast<std::size_t>(grp) * blk;
            counts_[grp] = 0;
            if (active && !(*active)[grp]) {
                std::fill_n(v, blk, 0.0);
                ++out.skipped_blocks;
                continue;
            }
            const double n = static_cast<double>(out.bin_counts[grp / layout_.K]);
            out.groups.push_back(grp);
            for (std::size_t i = 0; i < blk; ++i) {
                out.values.push_back(v[i] / n);
                v[i] = 0.0;
            }
        }
        out.degenerate = out.bin_counts[0] == 0;
        return out;
    }

    const FvLayout& layout() const { return layout_; }

    /// Calls fn(i) for every entry of `enc` whose centre lies in `win`, in
    /// storage order.
    template <typename Fn>
    static void for_each_inside(const ImageEncoding& enc, const Window& win, Fn&& fn) {
        const double x1 = win.x + win.w;
        const double y1 = win.y + win.h;
        for (std::size_t l = 0; l + 1 < enc.level_rows.size(); ++l) {
            const auto first = enc.row_y.begin() + enc.level_rows[l];
            const auto last = enc.row_y.begin() + enc.level_rows[l + 1];
            auto r = std::lower_bound(first, last, win.y);
            for (; r != last && *r < y1; ++r) {
                const auto ri = static_cast<std::size_t>(r - enc.row_y.begin());
                const auto xb = enc.cx.begin() + enc.row_start[ri];
                const auto xe = enc.cx.begin() + enc.row_start[ri + 1];
                for (auto it = std::lower_bound(xb, xe, win.x); it != xe && *it < x1; ++it)
                    fn(static_cast<std::size_t>(it - enc.cx.begin()));
            }
        }
    }

private:
    FvLayout layout_;
    std::vector<double> buffer_;
    std::vector<std::uint32_t> counts_;
    std::vector<std::uint32_t> touched_;
};

/// Normalizes a block-sparse FV with the same arithmetic as the dense path.
/// Groups skipped by an activity mask are only supported for raw and intra
/// (their contribution to the intra final norm is 1/K each).
inline void normalize(SparseFv& fv, Normalization scheme) {
    if (fv.tag != Normalization::raw) throw Error("normalize: input must be raw");
    fv.tag = scheme;
    if (scheme == Normalization::raw) return;
    const std::size_t blk = fv.layout.block();
    double total_sq = 0.0;
    if (scheme == Normalization::ssr) {
        if (fv.skipped_blocks > 0) throw Error("normalize: SSR needs every group accumulated");
        for (double& v : fv.values) v = detail::ssr(v);
        total_sq = detail::sum_squares(fv.values.data(), fv.values.size());
    } else {
        const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(fv.layout.K));
        for (std::size_t j = 0; j < fv.groups.size(); ++j) {
            double* v = fv.values.data() + j * blk;
            const double n = std::sqrt(detail::sum_squares(v, blk));
            if (n <= 0.0) continue;
            for (std::size_t i = 0; i < blk; ++i) v[i] = v[i] / n * inv_sqrt_k;
        }
        total_sq = detail::sum_squares(fv.values.data(), fv.values.size());
        total_sq += static_cast<double>(fv.skipped_blocks) / static_cast<double>(fv.layout.K);
    }
    const double total = std::sqrt(total_sq);
    if (total > 0.0)
        for (double& v : fv.values) v /= total;
    else
        fv.degenerate = true;
}

/// <w, fv> + bias over the accumulated groups.
inline double score(const SparseFv& fv, std::span<const double> w, double bias) {
    const std::size_t blk = fv.layout.block();
    double s = 0.0;
    for (std::size_t j = 0; j < fv.groups.size(); ++j) {
        const double* wb = w.data() + static_cast<std::size_t>(fv.groups[j]) * blk;
        const double* v = fv.values.data() + j * blk;
        for (std::size_t i = 0; i < blk; ++i) s += wb[i] * v[i];
    }
    return s + bias;
}

inline double score(const PyramidFv& fv, std::span<const double> w, double bias) {
    double s = 0.0;
    for (std::size_t i = 0; i < fv.values.size(); ++i) s += w[i] * fv.values[i];
    return s + bias;
}

}  // namespace fvdet
