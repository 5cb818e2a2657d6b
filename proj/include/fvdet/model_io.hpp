// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary model container.
//
//   magic    8 bytes  "FVDETMD1"
//   version  u32
//   sections, each: tag (4 bytes), payload length (u64), payload
//     "CONF"  u32 length, config snapshot text
//     "PCA "  u32 input_dim, u32 dim, f32 mean[input_dim], f32 basis[dim * input_dim]
//     "GMM "  u32 K, u32 D, f32 variance_floor, f32 means[K * D], f32 variances[K * D], f32 priors[K]
//     "LMOD"  i32 class id, u32 name length, name, u32 R, u32 K, u32 D,
//             u32 n = (R^2 + 1) * 2KD + 1, f32 values[n] (weights, then bias)
//
// All integers and floats are little-endian. Models are rounded to single
// precision by canonicalize(); a canonical container survives save/load
// unchanged, so save -> load -> save is byte-identical.

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvdet/codebook.hpp"
#include "fvdet/core.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/features.hpp"
#include "fvdet/learner.hpp"

namespace fvdet {

inline constexpr std::array<char, 8> kModelMagic{'F', 'V', 'D', 'E', 'T', 'M', 'D', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

struct ModelContainer {
    std::uint32_t version = kModelVersion;
    std::string config;  // snapshot of the configuration that produced the model
    std::optional<PcaProjection> pca;
    std::optional<GmmModel> gmm;
    std::vector<LinearModel> models;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "model container I/O assumes a little-endian host");

class Writer {
public:
    void u32(std::uint32_t v) { raw(&v, 4); }
    void i32(std::int32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f32(double v) {
        const float f = static_cast<float>(v);
        raw(&f, 4);
    }
    void bytes(const std::string& s) { raw(s.data(), s.size()); }
    template <typename T>
    void f32s(const std::vector<T>& v) {
        for (const T x : v) f32(static_cast<double>(x));
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    std::vector<unsigned char> buf;
};

class Reader {
public:
    explicit Reader(std::span<const unsigned char> data) : data_(data) {}

    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::int32_t i32() { return get<std::int32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f32() {
        const float f = get<float>();
        if (!std::isfinite(f)) throw Error("model container: non-finite value");
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<double> f32s(std::size_t n) {
        need(n * 4);
        std::vector<double> v(n);
        for (double& x : v) x = f32();
        return v;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    Reader sub(std::size_t n) {
        need(n);
        Reader r(data_.subspan(pos_, n));
        pos_ += n;
        return r;
    }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n) const {
        if (n > remaining()) throw Error("model container: truncated data");
    }
    std::span<const unsigned char> data_;
    std::size_t pos_ = 0;
};

inline void section(Writer& out, const char (&tag)[5], const Writer& payload) {
    out.raw(tag, 4);
    out.u64(payload.buf.size());
    out.raw(payload.buf.data(), payload.buf.size());
}

inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void round_all(std::vector<double>& v) {
    for (double& x : v) x = round_f32(x);
}

}  // namespace detail

/// Rounds every stored number to single precision (what the container keeps).
inline void canonicalize(PcaProjection& p) {
    detail::round_all(p.mean);
    detail::round_all(p.basis);
}
inline void canonicalize(GmmModel& g) {
    detail::round_all(g.means);
    detail::round_all(g.variances);
    detail::round_all(g.priors);
    g.variance_floor = detail::round_f32(g.variance_floor);
}
inline void canonicalize(LinearModel& m) {
    detail::round_all(m.w);
    m.bias = detail::round_f32(m.bias);
}
inline void canonicalize(ModelContainer& c) {
    if (c.pca) canonicalize(*c.pca);
    if (c.gmm) canonicalize(*c.gmm);
    for (auto& m : c.models) canonicalize(m);
}

/// Dimensional consistency between the sections present.
inline void validate(const ModelContainer& c) {
    if (c.pca) {
        const auto& p = *c.pca;
        if (p.dim == 0 || p.dim > p.input_dim) throw Error("model container: invalid PCA dimensions");
        if (p.mean.size() != p.input_dim || p.basis.size() != p.dim * p.input_dim) throw Error("model container: PCA array sizes inconsistent");
    }
    if (c.gmm) {
        const auto& g = *c.gmm;
        g.validate();
        if (c.pca && c.pca->dim != g.D) throw Error("model container: PCA dimension does not match GMM dimension");
        for (double p : g.priors)
            if (!(p > 0.0)) throw Error("model container: GMM priors must be positive");
        for (double v : g.variances)
            if (!(v > 0.0)) throw Error("model container: GMM variances must be positive");
    }
    for (const auto& m : c.models) {
        if (!c.gmm) throw Error("model container: linear model without GMM");
        if (m.layout.K != c.gmm->K || m.layout.D != c.gmm->D) throw Error("model container: linear model does not match GMM");
        if (m.layout.R == 0 || m.w.size() != m.layout.size()) throw Error("model container: weight length inconsistent with layout");
    }
}

inline std::vector<unsigned char> serialize(const ModelContainer& c) {
    validate(c);
    detail::Writer out;
    out.raw(kModelMagic.data(), kModelMagic.size());
    out.u32(c.version);
    {
        detail::Writer s;
        s.u32(static_cast<std::uint32_t>(c.config.size()));
        s.bytes(c.config);
        detail::section(out, "CONF", s);
    }
    if (c.pca) {
        detail::Writer s;
        s.u32(static_cast<std::uint32_t>(c.pca->input_dim));
        s.u32(static_cast<std::uint32_t>(c.pca->dim));
        s.f32s(c.pca->mean);
        s.f32s(c.pca->basis);
        detail::section(out, "PCA ", s);
    }
    if (c.gmm) {
        detail::Writer s;
        s.u32(static_cast<std::uint32_t>(c.gmm->K));
        s.u32(static_cast<std::uint32_t>(c.gmm->D));
        s.f32(c.gmm->variance_floor);
        s.f32s(c.gmm->means);
        s.f32s(c.gmm->variances);
        s.f32s(c.gmm->priors);
        detail::section(out, "GMM ", s);
    }
    for (const auto& m : c.models) {
        detail::Writer s;
        s.i32(m.class_id);
        s.u32(static_cast<std::uint32_t>(m.class_name.size()));
        s.bytes(m.class_name);
        s.u32(static_cast<std::uint32_t>(m.layout.R));
        s.u32(static_cast<std::uint32_t>(m.layout.K));
        s.u32(static_cast<std::uint32_t>(m.layout.D));
        s.u32(static_cast<std::uint32_t>(m.w.size() + 1));
        s.f32s(m.w);
        s.f32(m.bias);
        detail::section(out, "LMOD", s);
    }
    return std::move(out.buf);
}

inline ModelContainer deserialize(std::span<const unsigned char> data) {
    if (data.size() < kModelMagic.size() || std::memcmp(data.data(), kModelMagic.data(), kModelMagic.size()) != 0)
        throw Error("model container: bad magic");
    detail::Reader in(data.subspan(kModelMagic.size()));
    ModelContainer c;
    c.version = in.u32();
    if (c.version != kModelVersion) throw Error("model container: unsupported version " + std::to_string(c.version));
    bool have_conf = false;
    while (in.remaining() > 0) {
        const std::string tag = in.bytes(4);
        const std::uint64_t len = in.u64();
        if (len > in.remaining()) throw Error("model container: truncated section " + tag);
        detail::Reader s = in.sub(static_cast<std::size_t>(len));
        if (tag == "CONF") {
            if (have_conf) throw Error("model container: duplicate CONF section");
            c.config = s.bytes(s.u32());
            have_conf = true;
        } else if (tag == "PCA ") {
            if (c.pca) throw Error("model container: duplicate PCA section");
            PcaProjection p;
            p.input_dim = s.u32();
            p.dim = s.u32();
            if (p.dim == 0 || p.dim > p.input_dim || p.input_dim > 4096) throw Error("model container: invalid PCA dimensions");
            p.mean = s.f32s(p.input_dim);
            p.basis = s.f32s(p.dim * p.input_dim);
            c.pca = std::move(p);
        } else if (tag == "GMM ") {
            if (c.gmm) throw Error("model container: duplicate GMM section");
            GmmModel g;
            g.K = s.u32();
            g.D = s.u32();
            if (g.K == 0 || g.D == 0 || g.K > 65536 || g.D > 4096) throw Error("model container: invalid GMM dimensions");
            g.variance_floor = s.f32();
            g.means = s.f32s(g.K * g.D);
            g.variances = s.f32s(g.K * g.D);
            g.priors = s.f32s(g.K);
            c.gmm = std::move(g);
        } else if (tag == "LMOD") {
            LinearModel m;
            m.class_id = s.i32();
            m.class_name = s.bytes(s.u32());
            m.layout.R = s.u32();
            m.layout.K = s.u32();
            m.layout.D = s.u32();
            const std::uint32_t n = s.u32();
            if (m.layout.R == 0 || m.layout.R > 64 || m.layout.K > 65536 || m.layout.D > 4096 || n != m.layout.size() + 1)
                throw Error("model container: weight length inconsistent with layout");
            m.w = s.f32s(m.layout.size());
            m.bias = s.f32();
            c.models.push_back(std::move(m));
        } else {
            throw Error("model container: unknown section '" + tag + "'");
        }
        if (s.remaining() != 0) throw Error("model container: section " + tag + " has trailing bytes");
    }
    if (!have_conf) throw Error("model container: missing CONF section");
    validate(c);
    return c;
}

inline void save_model(const std::filesystem::path& path, const ModelContainer& c) {
    const auto bytes = serialize(c);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Loads and validates a container. With `expected_config`, the stored
/// snapshot must match it exactly.
inline ModelContainer load_model(const std::filesystem::path& path, const std::string* expected_config = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ModelContainer c = deserialize(bytes);
    if (expected_config && c.config != *expected_config)
        throw Error("model container " + path.string() + ": stored config snapshot differs from the config in use");
    return c;
}

}  // namespace fvdet
