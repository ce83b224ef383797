#include <gtest/gtest.h>

#include "dfar/backbone.hpp"

using namespace dfar;

namespace {

std::vector<Var<float>> random_frames(int n, int h, int w, Rng& rng) {
    std::vector<Var<float>> frames;
    for (int i = 0; i < n; ++i) frames.push_back(constant(Tensor<float>::uniform({1, h, w}, 0.f, 1.f, rng)));
    return frames;
}

}  // namespace

TEST(Backbone, FullResolutionShape) {
    Rng rng(1);
    Backbone<float> net(BackboneConfig{}, rng);
    NoGradGuard ng;
    auto feats = net.extract_features(random_frames(5, 544, 544, rng));
    ASSERT_EQ(feats.size(), 5u);
    for (const auto& f : feats) EXPECT_EQ(f.shape(), (Shape{64, 68, 68}));
}

TEST(Backbone, ShapeLawOnRectangularInput) {
    Rng rng(2);
    Backbone<float> net(BackboneConfig{}, rng);
    NoGradGuard ng;
    for (auto [h, w] : {std::pair{8, 8}, {16, 40}, {128, 96}}) {
        auto f = net(random_frames(1, h, w, rng)[0]);
        EXPECT_EQ(f.shape(), (Shape{64, h / 8, w / 8}));
    }
}

TEST(Backbone, IdenticalFramesGiveIdenticalFeatures) {
    Rng rng(3);
    Backbone<float> net(BackboneConfig{}, rng);
    NoGradGuard ng;
    auto frame = random_frames(1, 32, 32, rng)[0];
    auto feats = net.extract_features({frame, frame});
    EXPECT_EQ(max_abs_diff(feats[0].value(), feats[1].value()), 0.f);
}

TEST(Backbone, ZeroFrameGivesBiasResponse) {
    Rng rng(4);
    Backbone<float> net(BackboneConfig{}, rng);
    ParamList<float> params;
    net.collect("backbone", params);
    for (auto& [name, p] : params)
        if (name.ends_with("/bias")) {
            Rng brng(9);
            p.mutable_value() = Tensor<float>::uniform(p.shape(), -0.5f, 0.5f, brng);
        }
    NoGradGuard ng;
    auto a = net(constant(Tensor<float>::zeros({1, 32, 32})));
    auto b = net(constant(Tensor<float>::zeros({1, 32, 32})));
    EXPECT_EQ(max_abs_diff(a.value(), b.value()), 0.f);
    EXPECT_GT(a.value().max_abs(), 0.f);
}

TEST(Backbone, PermutingFramesPermutesFeatures) {
    Rng rng(5);
    Backbone<float> net(BackboneConfig{}, rng);
    NoGradGuard ng;
    auto frames = random_frames(5, 24, 16, rng);
    auto feats = net.extract_features(frames);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<Var<float>> permuted;
    for (int i : perm) permuted.push_back(frames[static_cast<std::size_t>(i)]);
    auto pfeats = net.extract_features(permuted);
    for (std::size_t k = 0; k < perm.size(); ++k)
        EXPECT_EQ(max_abs_diff(pfeats[k].value(), feats[static_cast<std::size_t>(perm[k])].value()), 0.f);
}

TEST(Backbone, RejectsNonDivisibleInput) {
    Rng rng(6);
    Backbone<float> net(BackboneConfig{}, rng);
    EXPECT_THROW(net(constant(Tensor<float>::zeros({1, 30, 32}))), ResizeRequiredError);
    EXPECT_THROW(net(constant(Tensor<float>::zeros({3, 32, 32}))), ShapeError);
}

TEST(Backbone, ParameterNamesFollowPathScheme) {
    Rng rng(7);
    Backbone<float> net(BackboneConfig{}, rng);
    ParamList<float> params;
    net.collect("backbone", params);
    ASSERT_EQ(params.size(), 12u);
    EXPECT_EQ(params.front().first, "backbone/level1/conv_s1/weight");
    EXPECT_EQ(params.back().first, "backbone/level3/conv_s2/bias");
    EXPECT_EQ(params.back().second.value().numel(), 64u);
}

TEST(Backbone, InputKernelsStartZeroSum) {
    Rng rng(6);
    Backbone<double> net(BackboneConfig{}, rng);
    ParamList<double> params;
    net.collect("backbone", params);
    const auto& w = params.front().second.value();
    ASSERT_EQ(params.front().first, "backbone/level1/conv_s1/weight");
    for (int o = 0; o < w.shape()[0]; ++o) {
        double sum = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) sum += w.at(o, 0, i, j);
        EXPECT_NEAR(sum, 0.0, 1e-12) << o;
    }
    // A brightness offset leaves the interior first-layer response unchanged.
    Rng xr(7);
    const auto x = Tensor<double>::uniform({1, 8, 8}, 0.0, 0.5, xr);
    auto shifted = x;
    for (auto& v : shifted.vec()) v += 0.4;
    NoGradGuard ng;
    const auto& conv_w = params[0].second;
    const auto& conv_b = params[1].second;
    const ConvSpec s = ConvSpec::same(1, w.shape()[0], 3);
    const auto a = conv2d(constant(x), conv_w, conv_b, s).value(), b = conv2d(constant(shifted), conv_w, conv_b, s).value();
    for (int c = 0; c < a.channels(); ++c)
        for (int y = 1; y < 7; ++y)
            for (int xx = 1; xx < 7; ++xx) EXPECT_NEAR(a.at(c, y, xx), b.at(c, y, xx), 1e-12);
}
