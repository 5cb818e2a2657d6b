// SPDX-License-Identifier: Apache-2.0
//
// Grayscale image type, bilinear resampling and file IO (PGM, PNG, JPEG).

#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "fvdet/core.hpp"

namespace fvdet {

/// Row-major grayscale image with intensities in [0,1].
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    GrayImage() = default;
    GrayImage(int w, int h, float fill = 0.0f) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {
        if (w < 1 || h < 1) throw Error("GrayImage: dimensions must be positive");
    }

    bool empty() const { return pixels.empty(); }
    float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    float clamped(int x, int y) const {
        return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
    }

    /// Bilinear sample at continuous pixel-center coordinates, border-clamped.
    float sample(double x, double y) const {
        x = std::clamp(x, 0.0, static_cast<double>(width - 1));
        y = std::clamp(y, 0.0, static_cast<double>(height - 1));
        const int x0 = static_cast<int>(x);
        const int y0 = static_cast<int>(y);
        const int x1 = std::min(x0 + 1, width - 1);
        const int y1 = std::min(y0 + 1, height - 1);
        const double fx = x - x0;
        const double fy = y - y0;
        const double top = at(x0, y0) * (1 - fx) + at(x1, y0) * fx;
        const double bot = at(x0, y1) * (1 - fx) + at(x1, y1) * fx;
        return static_cast<float>(top * (1 - fy) + bot * fy);
    }

    /// Copy of the rectangle [x, x+w) x [y, y+h); pixels outside are border-clamped.
    GrayImage crop(int x, int y, int w, int h) const {
        GrayImage out(w, h);
        for (int j = 0; j < h; ++j)
            for (int i = 0; i < w; ++i) out.at(i, j) = clamped(x + i, y + j);
        return out;
    }
};

/// Downsamples by `scale` (> 0) with bilinear interpolation. The output has
/// floor(dim / scale) pixels per axis; output pixel centers map to
/// (i + 0.5) * scale - 0.5 in the source.
inline GrayImage resample(const GrayImage& src, double scale) {
    const int w = static_cast<int>(std::floor(src.width / scale + 1e-9));
    const int h = static_cast<int>(std::floor(src.height / scale + 1e-9));
    if (w < 1 || h < 1) return {};
    if (scale == 1.0) return src;
    GrayImage out(w, h);
    for (int j = 0; j < h; ++j) {
        const double sy = (j + 0.5) * scale - 0.5;
        for (int i = 0; i < w; ++i) out.at(i, j) = src.sample((i + 0.5) * scale - 0.5, sy);
    }
    return out;
}

/// Resizes to an exact raster (used for appearance averaging).
inline GrayImage resize_to(const GrayImage& src, int w, int h) {
    GrayImage out(w, h);
    const double sx = static_cast<double>(src.width) / w;
    const double sy = static_cast<double>(src.height) / h;
    for (int j = 0; j < h; ++j)
        for (int i = 0; i < w; ++i) out.at(i, j) = src.sample((i + 0.5) * sx - 0.5, (j + 0.5) * sy - 0.5);
    return out;
}

namespace detail {

inline void skip_pnm_space(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline GrayImage from_bytes(int w, int h, const unsigned char* bytes, double maxval = 255.0) {
    GrayImage img(w, h);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i] / maxval);
    return img;
}

inline std::vector<unsigned char> to_bytes(const GrayImage& img) {
    std::vector<unsigned char> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

inline std::string lower_ext(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image: " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw Error("unsupported PGM (expected P5): " + path.string());
    int w = 0, h = 0, maxval = 0;
    detail::skip_pnm_space(in);
    in >> w;
    detail::skip_pnm_space(in);
    in >> h;
    detail::skip_pnm_space(in);
    in >> maxval;
    in.get();
    if (!in || w < 1 || h < 1 || maxval < 1 || maxval > 255) throw Error("malformed PGM header: " + path.string());
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw Error("truncated PGM: " + path.string());
    return detail::from_bytes(w, h, bytes.data(), maxval);
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write image: " + path.string());
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    const auto bytes = detail::to_bytes(img);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline GrayImage read_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw Error("cannot read PNG " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_GRAY;
    std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
        png_image_free(&image);
        throw Error("cannot decode PNG " + path.string() + ": " + image.message);
    }
    return detail::from_bytes(static_cast<int>(image.width), static_cast<int>(image.height), bytes.data());
}

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_GRAY;
    const auto bytes = detail::to_bytes(img);
    if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
        throw Error("cannot write PNG " + path.string() + ": " + image.message);
}

namespace detail {

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

}  // namespace detail

inline GrayImage read_jpeg(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!file) throw Error("cannot open image: " + path.string());
    jpeg_decompress_struct cinfo{};
    detail::JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = [](j_common_ptr info) {
        auto* mgr = reinterpret_cast<detail::JpegErrorManager*>(info->err);
        (*info->err->format_message)(info, mgr->message);
        std::longjmp(mgr->jump, 1);
    };
    std::vector<unsigned char> bytes;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw Error("cannot decode JPEG " + path.string() + ": " + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_GRAYSCALE;
    jpeg_start_decompress(&cinfo);
    const int w = static_cast<int>(cinfo.output_width);
    const int h = static_cast<int>(cinfo.output_height);
    bytes.resize(static_cast<std::size_t>(w) * h);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = bytes.data() + static_cast<std::size_t>(cinfo.output_scanline) * w;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return detail::from_bytes(w, h, bytes.data());
}

/// Reads PGM (P5), PNG or JPEG by extension.
inline GrayImage read_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error("missing image: " + path.string());
    const std::string ext = detail::lower_ext(path);
    if (ext == ".pgm") return read_pgm(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
    throw Error("unsupported image format: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const GrayImage& img) {
    const std::string ext = detail::lower_ext(path);
    if (ext == ".png") return write_png(path, img);
    write_pgm(path, img);
}

}  // namespace fvdet
