// SPDX-License-Identifier: Apache-2.0
//
// Dataset index: JSONL and VOC-XML ingestion, and the procedural synthetic
// dataset used for desk-scale experiments.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include "fvdet/core.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/image.hpp"

namespace fvdet {

namespace fs = std::filesystem;

struct ImageRecord {
    fs::path image;  // absolute or relative to the working directory
    int width = 0;
    int height = 0;
    std::vector<Object> objects;
    std::string split = "train";

    bool operator==(const ImageRecord&) const = default;
};

struct DatasetIndex {
    fs::path root;
    std::vector<std::string> class_names;  // sorted; index = class id
    std::vector<ImageRecord> records;

    int class_id(const std::string& name) const {
        const auto it = std::find(class_names.begin(), class_names.end(), name);
        return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
    }

    /// Records with the given split tag, class table shared.
    DatasetIndex subset(const std::string& split) const {
        DatasetIndex out{root, class_names, {}};
        for (const auto& r : records)
            if (r.split == split) out.records.push_back(r);
        return out;
    }

    std::vector<std::vector<Object>> ground_truth() const {
        std::vector<std::vector<Object>> gt;
        for (const auto& r : records) gt.push_back(r.objects);
        return gt;
    }
};

enum class AnnotationFormat { jsonl, voc_xml };

namespace detail {

struct RawObject {
    std::string cls;
    Window box;
    bool difficult = false;
};

struct RawRecord {
    fs::path image;
    std::vector<RawObject> objects;
    std::string split;
    std::string where;  // for error messages
};

inline DatasetIndex finalize_index(const fs::path& root, std::vector<RawRecord> raws) {
    std::set<std::string> names;
    for (const auto& r : raws)
        for (const auto& o : r.objects) names.insert(o.cls);
    DatasetIndex index;
    index.root = root;
    index.class_names.assign(names.begin(), names.end());
    for (auto& r : raws) {
        if (!fs::exists(r.image)) throw Error(r.where + ": missing image " + r.image.string());
        const GrayImage img = read_image(r.image);
        ImageRecord rec;
        rec.image = r.image;
        rec.width = img.width;
        rec.height = img.height;
        rec.split = r.split.empty() ? "train" : r.split;
        for (const auto& o : r.objects) {
            const Window& b = o.box;
            if (b.w < 1 || b.h < 1 || b.x < 0 || b.y < 0 || b.x + b.w > img.width || b.y + b.h > img.height)
                throw Error(r.where + ": bbox [" + std::to_string(b.x) + "," + std::to_string(b.y) + "," + std::to_string(b.w) +
                            "," + std::to_string(b.h) + "] exceeds image bounds " + std::to_string(img.width) + "x" +
                            std::to_string(img.height));
            rec.objects.push_back({index.class_id(o.cls), b, o.difficult});
        }
        index.records.push_back(std::move(rec));
    }
    return index;
}

inline std::vector<RawRecord> parse_jsonl(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open annotation file: " + file.string());
    const fs::path base = file.parent_path();
    std::vector<RawRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = file.string() + ":" + std::to_string(lineno);
        try {
            const auto j = nlohmann::json::parse(line);
            RawRecord r;
            r.where = where;
            r.image = base / j.at("image").get<std::string>();
            r.split = j.value("split", std::string());
            for (const auto& o : j.at("objects")) {
                const auto bb = o.at("bbox");
                if (!bb.is_array() || bb.size() != 4) throw Error("bbox must be [x, y, w, h]");
                r.objects.push_back({o.at("class").get<std::string>(),
                                     {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()},
                                     o.value("difficult", false)});
            }
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw Error(where + ": malformed record: " + e.what());
        } catch (const Error& e) {
            throw Error(where + ": malformed record: " + e.what());
        }
    }
    return out;
}

inline std::map<std::string, std::string> voc_splits(const fs::path& root) {
    std::map<std::string, std::string> split;
    for (const std::string s : {"train", "trainval", "val", "test"}) {
        std::ifstream in(root / "ImageSets" / "Main" / (s + ".txt"));
        std::string id;
        while (in >> id) split[id] = (s == "test") ? "test" : "train";
    }
    return split;
}

inline std::vector<RawRecord> parse_voc(const fs::path& root) {
    const fs::path ann_dir = root / "Annotations";
    if (!fs::is_directory(ann_dir)) throw Error("VOC root lacks an Annotations directory: " + root.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ann_dir))
        if (e.path().extension() == ".xml") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    const auto splits = voc_splits(root);
    std::vector<RawRecord> out;
    namespace pt = boost::property_tree;
    for (const auto& f : files) {
        pt::ptree tree;
        try {
            pt::read_xml(f.string(), tree);
            const auto& ann = tree.get_child("annotation");
            RawRecord r;
            r.where = f.string();
            r.image = root / "JPEGImages" / ann.get<std::string>("filename");
            const auto it = splits.find(f.stem().string());
            r.split = it == splits.end() ? "train" : it->second;
            for (const auto& [key, node] : ann) {
                if (key != "object") continue;
                const double xmin = node.get<double>("bndbox.xmin");
                const double ymin = node.get<double>("bndbox.ymin");
                const double xmax = node.get<double>("bndbox.xmax");
                const double ymax = node.get<double>("bndbox.ymax");
                // VOC boxes are 1-based and inclusive
                r.objects.push_back({node.get<std::string>("name"), {xmin - 1, ymin - 1, xmax - xmin + 1, ymax - ymin + 1},
                                     node.get<int>("difficult", 0) != 0});
            }
            out.push_back(std::move(r));
        } catch (const pt::ptree_error& e) {
            throw Error(f.string() + ": malformed VOC annotation: " + e.what());
        }
    }
    return out;
}

}  // namespace detail

/// Builds an index from a JSONL file (or a directory containing
/// annotations.jsonl), or from a VOC-style directory.
inline DatasetIndex ingest(const fs::path& root, AnnotationFormat format) {
    if (!fs::exists(root)) throw Error("dataset root does not exist: " + root.string());
    if (format == AnnotationFormat::jsonl) {
        const fs::path file = fs::is_directory(root) ? root / "annotations.jsonl" : root;
        return detail::finalize_index(fs::is_directory(root) ? root : root.parent_path(), detail::parse_jsonl(file));
    }
    return detail::finalize_index(root, detail::parse_voc(root));
}

inline AnnotationFormat parse_format(const std::string& s) {
    if (s == "jsonl") return AnnotationFormat::jsonl;
    if (s == "voc-xml" || s == "voc") return AnnotationFormat::voc_xml;
    throw Error("unknown annotation format: " + s);
}

/// Writes `index` as JSONL with image paths relative to the file's directory.
inline void write_jsonl(const DatasetIndex& index, const fs::path& file) {
    std::ofstream out(file);
    if (!out) throw Error("cannot write " + file.string());
    const fs::path base = file.parent_path();
    for (const auto& r : index.records) {
        nlohmann::ordered_json j;
        j["image"] = fs::relative(r.image, base).generic_string();
        j["split"] = r.split;
        auto objs = nlohmann::ordered_json::array();
        for (const auto& o : r.objects) {
            nlohmann::ordered_json jo;
            jo["class"] = index.class_names.at(static_cast<std::size_t>(o.class_id));
            jo["bbox"] = {o.box.x, o.box.y, o.box.w, o.box.h};
            if (o.difficult) jo["difficult"] = true;
            objs.push_back(jo);
        }
        j["objects"] = objs;
        out << j.dump() << '\n';
    }
}

/// Parameters of the procedural dataset.
struct SynthSpec {
    int width = 128;
    int height = 128;
    int min_size = 48;
    int max_size = 80;
    int max_objects = 2;
    std::size_t num_test = 0;      // the last num_test images are tagged "test"
    double pixel_noise = 0.06;
    int distractors = 2;           // clutter shapes per image (upper bound)
    std::vector<std::string> classes{"checker", "stripes"};
};

namespace detail {

inline double smooth_noise(const std::vector<double>& coarse, int cw, int ch, double u, double v) {
    u = std::clamp(u, 0.0, cw - 1.0);
    v = std::clamp(v, 0.0, ch - 1.0);
    const int x0 = std::min(static_cast<int>(u), cw - 2), y0 = std::min(static_cast<int>(v), ch - 2);
    const double fx = u - x0, fy = v - y0;
    const auto at = [&](int x, int y) { return coarse[static_cast<std::size_t>(y) * cw + x]; };
    return (at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx) * (1 - fy) + (at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx) * fy;
}

// Texture value in [-1, 1] of a class family at object-local coordinates.
struct Texture {
    int family = 0;  // 0: checkerboard, 1: stripes, other: blotches
    double period = 8.0;
    double angle = 0.0;
    double phase = 0.0;

    double operator()(double x, double y) const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = c * x + s * y, v = -s * x + c * y;
        if (family == 0) {
            const long a = static_cast<long>(std::floor(u / period + phase));
            const long b = static_cast<long>(std::floor(v / period));
            return ((a + b) & 1) ? 1.0 : -1.0;
        }
        if (family == 1) return std::sin(2.0 * M_PI * (u / period + phase)) >= 0 ? 1.0 : -1.0;
        return std::sin(u / period * 2.1 + phase) * std::cos(v / period * 1.7);
    }
};

inline bool inside_shape(int family, double nx, double ny) {
    // nx, ny in [-1, 1] relative to the box; checkers are ellipses, stripes rectangles
    if (family == 0) return nx * nx + ny * ny <= 1.0;
    return std::abs(nx) <= 1.0 && std::abs(ny) <= 1.0;
}

inline void paint(GrayImage& img, const Window& box, int family, const Texture& tex, double base, double contrast) {
    const double cx = box.x + box.w / 2, cy = box.y + box.h / 2;
    for (int y = static_cast<int>(box.y); y < static_cast<int>(box.y + box.h); ++y)
        for (int x = static_cast<int>(box.x); x < static_cast<int>(box.x + box.w); ++x) {
            const double nx = (x + 0.5 - cx) / (box.w / 2), ny = (y + 0.5 - cy) / (box.h / 2);
            if (!inside_shape(family, nx, ny)) continue;
            img.at(x, y) = static_cast<float>(base + contrast * tex(x - cx, y - cy));
        }
}

}  // namespace detail

/// Renders one synthetic image and its objects.
inline GrayImage render_synthetic(const SynthSpec& spec, Rng& rng, std::vector<Object>& objects) {
    GrayImage img(spec.width, spec.height);
    // background: low-frequency intensity field
    const int cw = 6, ch = 6;
    std::vector<double> coarse(static_cast<std::size_t>(cw) * ch);
    for (double& c : coarse) c = rng.uniform(0.3, 0.7);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            img.at(x, y) = static_cast<float>(detail::smooth_noise(coarse, cw, ch, x * (cw - 1.0) / img.width, y * (ch - 1.0) / img.height));

    // clutter: small blotchy textures and plain shapes
    const int nclutter = static_cast<int>(rng.index(static_cast<std::size_t>(spec.distractors) + 1));
    for (int i = 0; i < nclutter; ++i) {
        const double sz = rng.uniform(16, 40);
        const Window box{std::floor(rng.uniform(0, spec.width - sz)), std::floor(rng.uniform(0, spec.height - sz)), std::floor(sz),
                         std::floor(sz)};
        detail::Texture tex{2, rng.uniform(3, 8), rng.uniform(0, M_PI), rng.uniform(0, 1)};
        detail::paint(img, box, rng.uniform() < 0.5 ? 0 : 1, tex, rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.25));
    }

    objects.clear();
    const int nobj = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_objects)));
    for (int attempt = 0; attempt < 50 && static_cast<int>(objects.size()) < nobj; ++attempt) {
        const double side = rng.uniform(spec.min_size, spec.max_size);
        const double aspect = rng.uniform(0.8, 1.25);
        const double w = std::floor(std::min<double>(side * std::sqrt(aspect), spec.width));
        const double h = std::floor(std::min<double>(side / std::sqrt(aspect), spec.height));
        if (w < spec.min_size || h < spec.min_size) continue;
        const Window box{std::floor(rng.uniform(0, spec.width - w + 1)), std::floor(rng.uniform(0, spec.height - h + 1)), w, h};
        bool overlaps = false;
        for (const auto& o : objects)
            if (iou(o.box, box) > 0.0) overlaps = true;
        if (overlaps) continue;
        const int cls = static_cast<int>(rng.index(spec.classes.size()));
        const int family = cls % 2;
        detail::Texture tex{family, rng.uniform(5, 10), rng.uniform(0, M_PI), rng.uniform(0, 1)};
        detail::paint(img, box, family, tex, rng.uniform(0.35, 0.65), rng.uniform(0.15, 0.3));
        objects.push_back({cls, box, false});
    }

    for (float& p : img.pixels) p = static_cast<float>(std::clamp(p + spec.pixel_noise * rng.normal(), 0.0, 1.0));
    return img;
}

/// Writes `num_images` PGM images and annotations.jsonl under out_root.
/// Deterministic given seed.
inline DatasetIndex generate_synthetic(const fs::path& out_root, std::size_t num_images, std::uint64_t seed, const SynthSpec& spec = {}) {
    if (spec.classes.empty()) throw Error("generate_synthetic: at least one class required");
    fs::create_directories(out_root / "images");
    DatasetIndex index;
    index.root = out_root;
    index.class_names = spec.classes;
    std::sort(index.class_names.begin(), index.class_names.end());
    SynthSpec sorted = spec;
    sorted.classes = index.class_names;
    for (std::size_t i = 0; i < num_images; ++i) {
        Rng rng(seed * 0x9e3779b97f4a7c15ULL + i + 1);
        ImageRecord rec;
        const GrayImage img = render_synthetic(sorted, rng, rec.objects);
        char name[32];
        std::snprintf(name, sizeof(name), "%06zu.pgm", i);
        rec.image = out_root / "images" / name;
        write_pgm(rec.image, img);
        rec.width = img.width;
        rec.height = img.height;
        rec.split = i + spec.num_test >= num_images ? "test" : "train";
        index.records.push_back(std::move(rec));
    }
    write_jsonl(index, out_root / "annotations.jsonl");
    return index;
}

}  // namespace fvdet
