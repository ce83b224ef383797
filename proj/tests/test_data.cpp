#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "dfar/pipeline.hpp"
#include "dfar/synthetic.hpp"

using namespace dfar;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dfar_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Sequence tiny_sequence(int len, int w = 24, int h = 16) {
    Sequence s;
    s.id = "tiny";
    for (int i = 0; i < len; ++i) s.frames.push_back(cv::Mat(h, w, CV_8U, cv::Scalar(i * 10)));
    s.boxes.resize(static_cast<std::size_t>(len));
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(ClipSampling, Examples) {
    EXPECT_EQ(clip_indices(10, 0, 2), (std::vector<int>{0, 0, 0, 1, 2}));
    EXPECT_EQ(clip_indices(10, 5, 2), (std::vector<int>{3, 4, 5, 6, 7}));
    EXPECT_EQ(clip_indices(10, 9, 2), (std::vector<int>{7, 8, 9, 9, 9}));
}

TEST(ClipSampling, PaddingLawExhaustive) {
    for (int len = 1; len <= 8; ++len)
        for (int R = 0; R <= 3; ++R)
            for (int t = 0; t < len; ++t) {
                const auto idx = clip_indices(len, t, R);
                ASSERT_EQ(static_cast<int>(idx.size()), 2 * R + 1);
                EXPECT_EQ(idx[static_cast<std::size_t>(R)], t);
                for (int k = -R; k <= R; ++k) {
                    const int want = (t + k < 0 || t + k >= len) ? t : t + k;
                    EXPECT_EQ(idx[static_cast<std::size_t>(k + R)], want);
                }
                const Sequence s = tiny_sequence(len);
                const VideoClip c = sample_clip(s, t, R);
                ASSERT_EQ(static_cast<int>(c.frames.size()), 2 * R + 1);
                EXPECT_EQ(c.target_index, R);
                EXPECT_EQ(c.frame_index, t);
                for (int k = 0; k < 2 * R + 1; ++k)
                    EXPECT_EQ(c.frames[static_cast<std::size_t>(k)].at<uchar>(0, 0), idx[static_cast<std::size_t>(k)] * 10);
            }
}

TEST(ClipSampling, OutOfRangeTargetThrows) {
    EXPECT_THROW(clip_indices(5, 5, 2), std::out_of_range);
    EXPECT_THROW(clip_indices(5, -1, 2), std::out_of_range);
    EXPECT_THROW(sample_clip(tiny_sequence(3), 3, 1), std::out_of_range);
}

TEST(Resize, ScalesBoxesPerAxis) {
    Sequence s;
    s.id = "r";
    s.frames = {cv::Mat(512, 640, CV_8U, cv::Scalar(7))};
    s.boxes = {{{100, 100, 150, 150}}};
    const VideoClip c = resize_clip(sample_clip(s, 0, 0), 544);
    EXPECT_EQ(c.frames[0].rows, 544);
    EXPECT_EQ(c.frames[0].cols, 544);
    ASSERT_EQ(c.boxes.size(), 1u);
    EXPECT_DOUBLE_EQ(c.boxes[0].x1, 85);
    EXPECT_DOUBLE_EQ(c.boxes[0].y1, 106.25);
    EXPECT_DOUBLE_EQ(c.boxes[0].x2, 127.5);
    EXPECT_DOUBLE_EQ(c.boxes[0].y2, 159.375);
}

TEST(Resize, SameSizeIsUnchanged) {
    Sequence s;
    s.id = "r";
    s.frames = {cv::Mat(544, 544, CV_8U, cv::Scalar(7))};
    s.boxes = {{{10.5, 20.25, 30, 40}}};
    const VideoClip c = resize_clip(sample_clip(s, 0, 0), 544);
    EXPECT_EQ(c.boxes, s.boxes[0]);
}

TEST(Resize, TinyBoxStaysValid) {
    Sequence s;
    s.id = "r";
    s.frames = {cv::Mat(512, 640, CV_8U, cv::Scalar(7))};
    s.boxes = {{{10, 10, 11, 11}}};
    const VideoClip c = resize_clip(sample_clip(s, 0, 0), 544);
    for (const Box& b : c.boxes) EXPECT_TRUE(b.valid());
}

TEST(Resize, SizeMustBeMultipleOfEight) {
    const VideoClip c = sample_clip(tiny_sequence(2), 0, 0);
    EXPECT_THROW(resize_clip(c, 100), std::invalid_argument);
    EXPECT_THROW(resize_clip(c, 0), std::invalid_argument);
}

TEST(Resize, UniformScalingPreservesIou) {
    std::mt19937_64 g(3);
    std::uniform_real_distribution<double> U(0, 200);
    Sequence s;
    s.id = "u";
    s.frames = {cv::Mat(256, 256, CV_8U, cv::Scalar(0))};
    for (int n = 0; n < 30; ++n) {
        const double x = U(g), y = U(g), u = U(g), v = U(g);
        s.boxes = {{{x, y, x + 5 + U(g) / 4, y + 5 + U(g) / 4}, {u, v, u + 5 + U(g) / 4, v + 5 + U(g) / 4}}};
        const VideoClip c = resize_clip(sample_clip(s, 0, 0), 544);
        ASSERT_EQ(c.boxes.size(), 2u);
        EXPECT_NEAR(iou(c.boxes[0], c.boxes[1]), iou(s.boxes[0][0], s.boxes[0][1]), 1e-12);
    }
}

TEST(FrameTensor, ScalesByBitDepth) {
    cv::Mat a(2, 3, CV_8U, cv::Scalar(255)), b(2, 3, CV_16U, cv::Scalar(65535));
    a.at<uchar>(1, 2) = 51;
    const auto ta = frame_tensor<double>(a), tb = frame_tensor<double>(b);
    EXPECT_EQ(ta.shape(), (Shape{1, 2, 3}));
    EXPECT_DOUBLE_EQ(ta.at(0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(ta.at(0, 1, 2), 0.2);
    EXPECT_DOUBLE_EQ(tb.at(0, 1, 1), 1.0);
}

TEST(Loader, EmptyAnnotationsLoad) {
    TempDir d("empty_ann");
    Sequence s = tiny_sequence(3);
    s.id = "a";
    write_sequence(d.path / "a", s);
    const auto seqs = load_dataset(d.path);
    ASSERT_EQ(seqs.size(), 1u);
    EXPECT_EQ(seqs[0].size(), 3);
    for (const auto& f : seqs[0].boxes) EXPECT_TRUE(f.empty());
}

TEST(Loader, SortedById) {
    TempDir d("sorted");
    for (const char* id : {"c", "a", "b"}) write_sequence(d.path / id, tiny_sequence(1));
    const auto seqs = load_dataset(d.path);
    ASSERT_EQ(seqs.size(), 3u);
    EXPECT_EQ(seqs[0].id, "a");
    EXPECT_EQ(seqs[2].id, "c");
}

TEST(Loader, RowForMissingFrameNamesTheRow) {
    TempDir d("bad_frame");
    write_sequence(d.path / "s", tiny_sequence(2));
    std::ofstream(d.path / "s" / "annotations.csv") << "frame_index,x1,y1,x2,y2\n0,1,1,4,4\n7,1,1,4,4\n";
    try {
        load_dataset(d.path);
        FAIL();
    } catch (const DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("annotations.csv:3"), std::string::npos) << e.what();
    }
}

TEST(Loader, MalformedRowsReportFileAndLine) {
    TempDir d("malformed");
    write_sequence(d.path / "s", tiny_sequence(2));
    const char* bad[] = {"0,1,1,4\n", "0,1,x,4,4\n", "0,5,1,4,4\n", "0,1,1,40,4\n", "zero,1,1,4,4\n"};
    for (const char* row : bad) {
        std::ofstream(d.path / "s" / "annotations.csv") << "frame_index,x1,y1,x2,y2\n" << row;
        try {
            load_sequence(d.path / "s");
            FAIL() << row;
        } catch (const DatasetError& e) {
            EXPECT_NE(std::string(e.what()).find("annotations.csv:2"), std::string::npos) << e.what();
        }
    }
}

TEST(Loader, MissingFrameIsAnError) {
    TempDir d("gap");
    write_sequence(d.path / "s", tiny_sequence(3));
    fs::remove(d.path / "s" / "frames" / "000001.png");
    EXPECT_THROW(load_sequence(d.path / "s"), DatasetError);
    EXPECT_THROW(load_dataset(d.path / "nope"), DatasetError);
}

TEST(Loader, SixteenBitFrames) {
    TempDir d("u16");
    Sequence s;
    s.id = "w";
    s.frames = {cv::Mat(8, 8, CV_16U, cv::Scalar(40000))};
    s.boxes = {{{1, 1, 3, 3}}};
    write_sequence(d.path / "w", s);
    const auto back = load_sequence(d.path / "w");
    EXPECT_EQ(back.frames[0].depth(), CV_16U);
    EXPECT_EQ(back.frames[0].at<ushort>(4, 4), 40000);
}

TEST(Synthetic, RoundTripThroughDisk) {
    TempDir d("roundtrip");
    SyntheticSpec spec;
    spec.num_train = 2;
    spec.num_test = 1;
    spec.frames = 6;
    spec.size = 64;
    spec.seed = 11;
    const auto made = generate_synthetic_dataset(spec, d.path);
    const auto train = load_dataset(d.path / "train"), test = load_dataset(d.path / "test");
    ASSERT_EQ(train.size(), 2u);
    ASSERT_EQ(test.size(), 1u);
    for (int i = 0; i < 2; ++i) {
        EXPECT_EQ(train[static_cast<std::size_t>(i)].boxes, made[static_cast<std::size_t>(i)].boxes);
        for (int f = 0; f < 6; ++f)
            EXPECT_EQ(cv::norm(train[static_cast<std::size_t>(i)].frames[static_cast<std::size_t>(f)],
                               made[static_cast<std::size_t>(i)].frames[static_cast<std::size_t>(f)], cv::NORM_INF),
                      0.0);
    }
    EXPECT_EQ(test[0].boxes, made[2].boxes);
}

TEST(Synthetic, SameSeedIsByteIdentical) {
    TempDir a("det_a"), b("det_b");
    SyntheticSpec spec;
    spec.num_train = 1;
    spec.num_test = 1;
    spec.frames = 4;
    spec.size = 64;
    spec.seed = 5;
    generate_synthetic_dataset(spec, a.path);
    generate_synthetic_dataset(spec, b.path);
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a.path)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), a.path);
        EXPECT_EQ(slurp(e.path()), slurp(b.path / rel)) << rel;
        ++files;
    }
    EXPECT_EQ(files, 2 * (4 + 1));
    SyntheticSpec other = spec;
    other.seed = 6;
    EXPECT_NE(generate_sequence(spec, 0, "x").boxes, generate_sequence(other, 0, "x").boxes);
}

TEST(Synthetic, ConstantVelocityPlusJitter) {
    SyntheticSpec spec;
    spec.frames = 32;
    spec.size = 256;   // room for 32 frames at 4 px/frame without reflecting
    spec.speed_min = spec.speed_max = 4;
    spec.direction_deg = 0;
    spec.jitter = 0.25;
    spec.seed = 2;
    SyntheticTarget tg;
    const Sequence s = generate_sequence(spec, 0, "v", &tg);
    ASSERT_EQ(tg.cx.size(), 32u);
    double total = 0;
    for (int f = 1; f < 32; ++f) {
        const double dx = tg.cx[static_cast<std::size_t>(f)] - tg.cx[static_cast<std::size_t>(f - 1)];
        EXPECT_NEAR(dx, 4.0, 6 * spec.jitter);
        EXPECT_NEAR(tg.cy[static_cast<std::size_t>(f)], tg.cy[0], 12 * spec.jitter);
        total += dx;
    }
    EXPECT_NEAR(total / 31, 4.0, 0.1);
    // Box is the centre +- 3 sigma.
    const Box& b = s.boxes[10][0];
    EXPECT_NEAR(b.cx(), tg.cx[10], 0.01);
    EXPECT_NEAR(b.width(), 6 * tg.sigma, 0.02);
}

TEST(Synthetic, ZeroAmplitudeStillAnnotated) {
    SyntheticSpec spec;
    spec.amplitude_min = spec.amplitude_max = 0;
    spec.frames = 4;
    spec.size = 64;
    const Sequence s = generate_sequence(spec, 0, "neg");
    for (const auto& f : s.boxes) EXPECT_EQ(f.size(), 1u);
}

TEST(Synthetic, InvalidSpecsRejected) {
    SyntheticSpec s;
    s.sigma_min = s.sigma_max = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    SyntheticSpec fast;
    fast.speed_max = 5;   // 128 / 32 = 4 px/frame is the limit
    EXPECT_THROW(fast.validate(), std::invalid_argument);
    SyntheticSpec odd;
    odd.size = 100;
    EXPECT_THROW(odd.validate(), std::invalid_argument);
    EXPECT_NO_THROW(SyntheticSpec{}.validate());
}

TEST(Synthetic, SpecParser) {
    std::istringstream ok("# comment\nnum_train = 3\nspeed_max=2.5\nseed = 42\ndirection_deg = 90\n");
    const SyntheticSpec s = parse_synthetic_spec(ok);
    EXPECT_EQ(s.num_train, 3);
    EXPECT_EQ(s.speed_max, 2.5);
    EXPECT_EQ(s.seed, 42u);
    ASSERT_TRUE(s.direction_deg.has_value());
    EXPECT_EQ(*s.direction_deg, 90);
    std::istringstream bad_key("colour = 3\n"), bad_val("\nsigma_min = abc\n");
    EXPECT_THROW(parse_synthetic_spec(bad_key, "spec"), std::invalid_argument);
    try {
        parse_synthetic_spec(bad_val, "spec");
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("spec:2"), std::string::npos);
    }
}

TEST(Prepare, ResizesFramesAndBoxes) {
    Sequence s;
    s.id = "p";
    s.frames = {cv::Mat(32, 64, CV_8U, cv::Scalar(100)), cv::Mat(32, 64, CV_8U, cv::Scalar(200))};
    s.boxes = {{{8, 8, 16, 16}}, {}};
    const auto p = prepare_sequence<float>(s, 64);
    ASSERT_EQ(p.size(), 2);
    EXPECT_EQ(p.frames[0].shape(), (Shape{1, 64, 64}));
    EXPECT_EQ(p.boxes[0][0], (Box{8, 16, 16, 32}));
    EXPECT_TRUE(p.boxes[1].empty());
    EXPECT_EQ(p.width, 64);
    EXPECT_EQ(p.height, 32);
}
