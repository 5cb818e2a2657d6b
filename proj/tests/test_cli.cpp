// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fvdet/fvdet.hpp"

using namespace fvdet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_root() { return fs::temp_directory_path() / ("fvdet_test_cli_" + std::to_string(::getpid())); }

struct ScratchCleanup : ::testing::Environment {
    void TearDown() override { fs::remove_all(scratch_root()); }
};
const auto* const cleanup = ::testing::AddGlobalTestEnvironment(new ScratchCleanup);

fs::path scratch(const std::string& name) {
    const fs::path p = scratch_root() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    f << s;
}

template <typename F>
std::string error_of(F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

// Small end-to-end configuration on a synthetic dataset.
Config small_config(const fs::path& dataset) {
    Config c;
    for (const char* kv : {"scales=4", "D=8", "K=4", "R=2", "pca_sample=4000", "gmm_sample=3000", "gmm_max_iterations=30",
                           "candidates=150", "mining_rounds=1", "svm_epochs=10", "monitor_every=0", "rda_iterations=2000",
                           "prune_fractions=0,0.5,1", "lambda_grid=0,0.001", "surface_grid=8", "surface_gaussians=0,1",
                           "top_n=5", "part_top=12", "part_clusters=2", "raster=16", "seed=3"})
        c.set_assignment(kv);
    c.set("dataset", dataset.string());
    return c;
}

class SmallRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new fs::path(scratch("data"));
        SynthSpec spec;
        spec.width = spec.height = 96;
        spec.min_size = 40;
        spec.max_size = 64;
        spec.max_objects = 1;
        spec.num_test = 6;
        generate_synthetic(*data_, 18, 5, spec);
    }
    static void TearDownTestSuite() {
        delete data_;
        data_ = nullptr;
    }
    static fs::path* data_;
};
fs::path* SmallRun::data_ = nullptr;

}  // namespace

// --- config ---------------------------------------------------------------

TEST(Config, DefaultsFollowReferenceSetup) {
    const Config c;
    EXPECT_EQ(c.count("patch_size"), 12u);
    EXPECT_EQ(c.count("step"), 3u);
    EXPECT_EQ(c.count("scales"), 15u);
    EXPECT_EQ(c.real("scale_factor"), 1.2);
    EXPECT_EQ(c.count("D"), 64u);
    EXPECT_EQ(c.count("K"), 64u);
    EXPECT_EQ(c.count("R"), 4u);
    EXPECT_EQ(c.real("nms"), 0.3);
    EXPECT_EQ(c.count("mining_rounds"), 3u);
    EXPECT_EQ(c.count("negatives_per_image"), 2u);
    EXPECT_EQ(c.count("candidates"), 1500u);
}

TEST(Config, ParsesCommentsAndWhitespace) {
    const Config c = Config::parse("# header\n  K = 16  # inline\n\nnormalization=ssr\nprune_fractions = 0, 0.5 ,1\n");
    EXPECT_EQ(c.count("K"), 16u);
    EXPECT_EQ(c.str("normalization"), "ssr");
    EXPECT_EQ(c.reals("prune_fractions"), (std::vector<double>{0, 0.5, 1}));
}

TEST(Config, ErrorsNameKeyAndLine) {
    EXPECT_NE(error_of([] { Config::parse("K=4\nbogus=1\n", "x.cfg"); }).find("x.cfg:2"), std::string::npos);
    EXPECT_NE(error_of([] { Config::parse("K=4\nbogus=1\n"); }).find("bogus"), std::string::npos);
    EXPECT_THROW(Config::parse("K=four"), Error);
    EXPECT_THROW(Config::parse("K=-1"), Error);
    EXPECT_THROW(Config::parse("nms=abc"), Error);
    EXPECT_THROW(Config::parse("normalization=l1"), Error);
    EXPECT_THROW(Config::parse("root_sift=maybe"), Error);
    EXPECT_THROW(Config::parse("just a line"), Error);
}

TEST(Config, CanonicalIsSortedAndSelective) {
    Config c;
    c.set("K", "8");
    EXPECT_EQ(c.canonical({"K", "D", "K"}), "D=64\nK=8\n");
}

// --- dataset --------------------------------------------------------------

TEST(Ingest, EmptyAnnotationFileGivesEmptyIndex) {
    const fs::path d = scratch("empty");
    spit(d / "annotations.jsonl", "");
    const DatasetIndex idx = ingest(d, AnnotationFormat::jsonl);
    EXPECT_TRUE(idx.records.empty());
    EXPECT_TRUE(idx.class_names.empty());
}

TEST(Ingest, RejectsOutOfBoundsBox) {
    const fs::path d = scratch("oob");
    write_pgm(d / "a.pgm", GrayImage(40, 30));
    spit(d / "annotations.jsonl", R"({"image": "a.pgm", "objects": [{"class": "x", "bbox": [10, 10, 31, 5]}]})" "\n");
    const std::string e = error_of([&] { ingest(d, AnnotationFormat::jsonl); });
    EXPECT_NE(e.find("exceeds image bounds"), std::string::npos) << e;
    EXPECT_NE(e.find("annotations.jsonl:1"), std::string::npos) << e;
}

TEST(Ingest, MalformedRecordAndMissingImage) {
    const fs::path d = scratch("bad");
    write_pgm(d / "a.pgm", GrayImage(40, 30));
    spit(d / "annotations.jsonl", "{\"image\": \"a.pgm\", \"objects\": []}\n{\"image\": \"a.pgm\", \"objects\": [{\"bbox\": [1,2]}]}\n");
    EXPECT_NE(error_of([&] { ingest(d, AnnotationFormat::jsonl); }).find("annotations.jsonl:2"), std::string::npos);
    spit(d / "annotations.jsonl", "{\"image\": \"nope.pgm\", \"objects\": []}\n");
    EXPECT_NE(error_of([&] { ingest(d, AnnotationFormat::jsonl); }).find("nope.pgm"), std::string::npos);
}

TEST(Ingest, VocXmlAndJsonlAgree) {
    const fs::path d = scratch("voc");
    fs::create_directories(d / "Annotations");
    fs::create_directories(d / "JPEGImages");
    fs::create_directories(d / "ImageSets" / "Main");
    write_png(d / "JPEGImages" / "001.png", GrayImage(60, 50));
    write_png(d / "JPEGImages" / "002.png", GrayImage(80, 40));
    spit(d / "Annotations" / "001.xml", R"(<annotation><filename>001.png</filename>
  <object><name>dog</name><difficult>0</difficult><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>20</xmax><ymax>30</ymax></bndbox></object>
  <object><name>cat</name><difficult>1</difficult><bndbox><xmin>11</xmin><ymin>5</ymin><xmax>60</xmax><ymax>50</ymax></bndbox></object>
</annotation>)");
    spit(d / "Annotations" / "002.xml", R"(<annotation><filename>002.png</filename>
  <object><name>cat</name><bndbox><xmin>5</xmin><ymin>3</ymin><xmax>44</xmax><ymax>22</ymax></bndbox></object>
</annotation>)");
    spit(d / "ImageSets" / "Main" / "test.txt", "002\n");
    // hand conversion: 1-based inclusive corners -> [x, y, w, h]
    spit(d / "annotations.jsonl",
         R"({"image": "JPEGImages/001.png", "split": "train", "objects": [{"class": "dog", "bbox": [0, 0, 20, 30]}, {"class": "cat", "bbox": [10, 4, 50, 46], "difficult": true}]})"
         "\n"
         R"({"image": "JPEGImages/002.png", "split": "test", "objects": [{"class": "cat", "bbox": [4, 2, 40, 20]}]})"
         "\n");
    const DatasetIndex a = ingest(d, AnnotationFormat::voc_xml);
    const DatasetIndex b = ingest(d, AnnotationFormat::jsonl);
    EXPECT_EQ(a.class_names, (std::vector<std::string>{"cat", "dog"}));
    EXPECT_EQ(a.class_names, b.class_names);
    ASSERT_EQ(a.records.size(), 2u);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(a.records[1].split, "test");
    EXPECT_TRUE(a.records[0].objects[1].difficult);
}

TEST(Synthetic, DeterministicAndConsistent) {
    const fs::path a = scratch("synth_a"), b = scratch("synth_b");
    SynthSpec spec;
    spec.num_test = 3;
    const DatasetIndex ia = generate_synthetic(a, 10, 42, spec);
    const DatasetIndex ib = generate_synthetic(b, 10, 42, spec);
    EXPECT_EQ(slurp(a / "annotations.jsonl"), slurp(b / "annotations.jsonl"));
    for (const auto& r : ia.records) EXPECT_EQ(slurp(r.image), slurp(b / "images" / r.image.filename()));
    // re-ingesting the written annotations gives the same objects per class
    const DatasetIndex back = ingest(a, AnnotationFormat::jsonl);
    ASSERT_EQ(back.records.size(), 10u);
    std::map<int, int> want, got;
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(back.records[i].objects, ia.records[i].objects);
        for (const auto& o : ia.records[i].objects) ++want[o.class_id];
        for (const auto& o : back.records[i].objects) ++got[o.class_id];
    }
    EXPECT_EQ(want, got);
    EXPECT_EQ(want.size(), 2u);
    EXPECT_EQ(back.subset("test").records.size(), 3u);
    EXPECT_EQ(ib.class_names, (std::vector<std::string>{"checker", "stripes"}));
}

// --- model container and pipeline -----------------------------------------

TEST_F(SmallRun, CachingAndModelContainer) {
    const fs::path out = scratch("run");
    Config cfg = small_config(*data_);
    {
        Pipeline p(cfg, out, nullptr);
        p.run_all();
        for (const auto& s : pipeline_stages()) EXPECT_EQ(p.status().at(s.name), StageStatus::computed) << s.name;
        EXPECT_TRUE(fs::exists(out / "ap_report.csv"));
        EXPECT_TRUE(fs::exists(out / "manifest.json"));
    }
    const std::string ap = slurp(out / "ap_report.csv");
    {
        Pipeline p(cfg, out, nullptr);
        p.run_all();
        for (const auto& s : pipeline_stages()) EXPECT_EQ(p.status().at(s.name), StageStatus::cached) << s.name;
    }

    // container round trip
    const ModelContainer c = load_model(out / "model.fvm");
    ASSERT_TRUE(c.pca && c.gmm);
    ASSERT_EQ(c.models.size(), 2u);
    save_model(out / "copy.fvm", c);
    EXPECT_EQ(slurp(out / "copy.fvm"), slurp(out / "model.fvm"));
    const ModelContainer c2 = load_model(out / "copy.fvm");
    EXPECT_EQ(c2.config, c.config);

    const std::string bytes = slurp(out / "model.fvm");
    for (const std::size_t pos : {std::size_t{0}, std::size_t{5}, std::size_t{8}}) {
        std::string bad = bytes;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x5a);
        spit(out / "bad.fvm", bad);
        EXPECT_THROW(load_model(out / "bad.fvm"), Error) << "byte " << pos;
    }
    for (const std::size_t len : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        spit(out / "short.fvm", bytes.substr(0, len));
        EXPECT_THROW(load_model(out / "short.fvm"), Error) << "length " << len;
    }
    const std::string other = "K=5\n";
    EXPECT_THROW(load_model(out / "model.fvm", &other), Error);
    ModelContainer wrong = c;
    wrong.models[0].w.pop_back();
    EXPECT_THROW(save_model(out / "wrong.fvm", wrong), Error);

    // loaded models reproduce detections exactly
    DetectorConfig dc;
    {
        Pipeline p(cfg, out, nullptr);
        dc = p.detector_config();
    }
    const GrayImage img = read_image(*data_ / "images" / "000000.pgm");
    for (std::size_t m = 0; m < 2; ++m) {
        const auto a = score_windows(img, c.models[m], *c.gmm, *c.pca, dc);
        const auto b = score_windows(img, c2.models[m], *c2.gmm, *c2.pca, dc);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a[j].score, b[j].score);
    }

    // K change: gmm and downstream recomputed, sample and pca not
    cfg.set("K", "3");
    {
        Pipeline p(cfg, out, nullptr);
        p.run("detect");
        EXPECT_EQ(p.status().at("sample"), StageStatus::cached);
        EXPECT_EQ(p.status().at("pca"), StageStatus::cached);
        EXPECT_EQ(p.status().at("gmm"), StageStatus::computed);
        EXPECT_EQ(p.status().at("train"), StageStatus::computed);
        EXPECT_EQ(p.status().at("detect"), StageStatus::computed);
        EXPECT_EQ(p.gmm().K, 3u);
    }
    // back to the original config: everything recomputes to identical bytes
    cfg.set("K", "4");
    {
        Pipeline p(cfg, out, nullptr);
        p.run("evaluate");
    }
    EXPECT_EQ(slurp(out / "ap_report.csv"), ap);
}

TEST_F(SmallRun, StageFailureNamesTheStage) {
    const fs::path out = scratch("fail");
    Config cfg = small_config(*data_);
    cfg.set("train_split", "nothing");
    Pipeline p(cfg, out, nullptr);
    try {
        p.run("pca");
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "sample");
    }
}

TEST_F(SmallRun, OutputDirectoryIsLocked) {
    const fs::path out = scratch("locked");
    const Pipeline p(small_config(*data_), out, nullptr);
    EXPECT_THROW(Pipeline(small_config(*data_), out, nullptr), Error);
}

// --- binary ---------------------------------------------------------------

TEST(Binary, SynthIngestAndErrors) {
    const fs::path d = scratch("bin");
    const std::string exe = FVDET_CLI_PATH;
    const auto run = [&](const std::string& args) {
        const int rc = std::system((exe + " " + args + " > " + (d / "stdout.txt").string() + " 2> " + (d / "stderr.txt").string()).c_str());
        return WEXITSTATUS(rc);
    };
    EXPECT_EQ(run("synth --out " + (d / "ds").string() + " --images 6 --test 2 --seed 1"), 0);
    EXPECT_TRUE(fs::exists(d / "ds" / "annotations.jsonl"));
    EXPECT_EQ(run("ingest " + (d / "ds").string()), 0);
    EXPECT_NE(slurp(d / "stdout.txt").find("6 images"), std::string::npos);
    EXPECT_NE(slurp(d / "stdout.txt").find("split test: 2 images"), std::string::npos);

    spit(d / "bad.cfg", "K=4\nnot_a_key=3\n");
    EXPECT_EQ(run("pca --config " + (d / "bad.cfg").string() + " --out " + (d / "o").string()), 1);
    EXPECT_NE(slurp(d / "stderr.txt").find("not_a_key"), std::string::npos);
    EXPECT_EQ(run("model info " + (d / "missing.fvm").string()), 1);
    EXPECT_NE(run("no-such-command"), 0);
}
