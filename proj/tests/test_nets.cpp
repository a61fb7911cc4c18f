#include <gtest/gtest.h>

#include <algorithm>

#include "adm/nets.hpp"
#include "grad_suite.hpp"

using namespace adm;

namespace {

Tensor<float> randn_f(Shape s, Rng& rng) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor<float>::from(std::move(s), std::move(v));
}

double sort_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST(CtocNet, OutputShapeAndParameterNames) {
    Rng rng(1);
    const auto net = CtocNet<float>::init({4, 8, 2}, rng);
    const auto y = net.forward(randn_f({2, 4, 16, 12}, rng));
    EXPECT_EQ(y.shape(), (Shape{2, 1, 16, 12}));
    for (const char* n : {"ctoc/enc0/w", "ctoc/enc1/in/gamma", "ctoc/res1/conv1/b", "ctoc/dec1/w", "ctoc/head/b"})
        EXPECT_TRUE(net.params().contains(n)) << n;
    EXPECT_FALSE(net.params().contains("ctoc/res2/conv0/w"));
    EXPECT_EQ(net.params().get("ctoc/enc1/w").shape(), (Shape{8, 4, 3, 3}));
    EXPECT_EQ(net.params().get("ctoc/head/w").shape(), (Shape{1, 2, 3, 3}));
}

TEST(CtocNet, RejectsBadInputsAndConfigs) {
    Rng rng(2);
    const auto net = CtocNet<float>::init({4, 4, 1}, rng);
    EXPECT_THROW(net.forward(randn_f({1, 3, 8, 8}, rng)), ConfigError);
    EXPECT_THROW(net.forward(randn_f({1, 4, 10, 8}, rng)), ConfigError);
    EXPECT_THROW(CtocNet<float>::init({4, 2, 1}, rng), ConfigError);
    EXPECT_THROW(CtocNet<float>::init({4, 8, 0}, rng), ConfigError);
    EXPECT_THROW(CtocNet<float>::init({1, 8, 1}, rng), ConfigError);
}

TEST(CtocNet, LossGradientMatchesFiniteDifferences) {
    for (const auto& c : adm::testing::gradient_cases()) {
        if (c.name != "ctoc_loss") continue;
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
            const auto r = c.run(seed);
            EXPECT_TRUE(r.passed()) << r.max_rel_err();
            EXPECT_LE(static_cast<double>(r.skipped()),
                      adm::testing::kMaxSkippedFraction * static_cast<double>(r.checked() + r.skipped()));
        }
    }
}

TEST(CtocNet, InitializationIsDeterministic) {
    Rng a(3), b(3);
    const auto n1 = CtocNet<float>::init({4, 8, 1}, a), n2 = CtocNet<float>::init({4, 8, 1}, b);
    for (std::size_t i = 0; i < n1.params().entries().size(); ++i)
        EXPECT_EQ(n1.params().entries()[i].second.vec(), n2.params().entries()[i].second.vec());
}

TEST(DrNet, EncodeDecodeShapes) {
    Rng rng(4);
    const auto dr = DrNet<float>::init(DrConfig{4}, rng);
    const auto z = dr.encode(randn_f({2, 4, 7, 5}, rng));
    EXPECT_EQ(z.shape(), (Shape{2, 3, 7, 5}));
    EXPECT_EQ(dr.decode(z).shape(), (Shape{2, 4, 7, 5}));
    EXPECT_THROW(dr.encode(randn_f({2, 3, 7, 5}, rng)), ConfigError);
    EXPECT_THROW(dr.decode(randn_f({2, 4, 7, 5}, rng)), ConfigError);
}

TEST(DrNet, DecoderActsPerPixel) {
    // Every decoder layer is 1x1: changing one pixel's code changes only that
    // pixel's reconstruction.
    Rng rng(5);
    const auto dr = DrNet<double>::init(DrConfig{2}, rng);
    auto z = adm::testing::randn({1, 3, 4, 4}, rng);
    const auto y0 = dr.decode(z).vec();
    z.data()[5] += 0.5;
    const auto y1 = dr.decode(z).vec();
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t p = 0; p < 16; ++p) {
            if (p == 5) EXPECT_NE(y0[c * 16 + p], y1[c * 16 + p]);
            else EXPECT_EQ(y0[c * 16 + p], y1[c * 16 + p]);
        }
}

TEST(DeNet, ResponsibilitiesAreDistributions) {
    Rng rng(6);
    const auto de = DeNet<float>::init({7, 6, 8, 0.5}, rng);
    for (const bool train : {false, true}) {
        const auto f = de.forward(randn_f({50, 7}, rng), train, rng);
        ASSERT_EQ(f.shape(), (Shape{50, 6}));
        for (std::size_t n = 0; n < 50; ++n) {
            double s = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                EXPECT_GE(f.vec()[n * 6 + c], 0.0f);
                s += f.vec()[n * 6 + c];
            }
            EXPECT_NEAR(s, 1.0, 1e-5);
        }
    }
    EXPECT_THROW(de.forward(randn_f({5, 6}, rng), false, rng), ConfigError);
    EXPECT_THROW(DeNet<float>::init({7, 0, 8, 0.5}, rng), ConfigError);
}

TEST(DeNet, EvaluationModeIsDeterministic) {
    Rng rng(7);
    const auto de = DeNet<float>::init({3, 2, 8, 0.5}, rng);
    const auto z = randn_f({10, 3}, rng);
    Rng r1(1), r2(99);
    EXPECT_EQ(de.forward(z, false, r1).vec(), de.forward(z, false, r2).vec());
}

TEST(MaskedMedian, MatchesSortOracle) {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<double> v(n);
        std::vector<std::uint8_t> m(n);
        std::vector<double> sel;
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = std::round(rng.normal() * 4.0);  // frequent ties
            m[i] = rng.uniform() < 0.6;
            if (m[i]) sel.push_back(v[i]);
        }
        if (sel.empty()) {
            EXPECT_THROW(masked_median<double>(v, m), DataError);
            continue;
        }
        EXPECT_EQ(masked_median<double>(v, m), sort_median(sel));
    }
}

TEST(CtocInput, ReplacesOnlyTheTargetChannel) {
    const std::vector<float> img{1, 2, 3, 4, 10, 20, 30, 40};
    const std::vector<std::uint8_t> mask{0, 1, 1, 1};
    const auto out = build_ctoc_input<float>(img, mask, 2, 1);
    EXPECT_EQ(std::vector<float>(out.begin(), out.begin() + 4), std::vector<float>(img.begin(), img.begin() + 4));
    for (std::size_t p = 4; p < 8; ++p) EXPECT_EQ(out[p], 30.0f);
    EXPECT_THROW(build_ctoc_input<float>(img, mask, 2, 2), ConfigError);
    EXPECT_THROW(build_ctoc_input<float>(img, mask, 3, 0), ConfigError);
}

TEST(ParamSet, CloneIsDeepAndCastPreservesOrder) {
    Rng rng(9);
    auto net = DrNet<float>::init(DrConfig{2}, rng);
    auto copy = net.params().clone();
    const_cast<Tensor<float>&>(copy.get("dr/enc0/w")).data()[0] += 1.0f;
    EXPECT_NE(copy.get("dr/enc0/w").vec()[0], net.params().get("dr/enc0/w").vec()[0]);

    const auto d = net.params().cast<double>();
    ASSERT_EQ(d.entries().size(), net.params().entries().size());
    for (std::size_t i = 0; i < d.entries().size(); ++i) {
        EXPECT_EQ(d.entries()[i].first, net.params().entries()[i].first);
        EXPECT_TRUE(d.entries()[i].second.requires_grad());
        const auto& a = d.entries()[i].second.vec();
        const auto& b = net.params().entries()[i].second.vec();
        for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(static_cast<float>(a[k]), b[k]);
    }
    EXPECT_EQ(d.numel(), net.params().numel());
    EXPECT_THROW(net.params().get("nope"), ConfigError);
}

TEST(ParamSet, GradientsReachEveryParameter) {
    Rng rng(10);
    auto de = DeNet<double>::init({3, 2, 8, 0.5}, rng);
    const auto z = adm::testing::randn({6, 3}, rng);
    Rng drop(1);
    adm::testing::probe(de.forward(z, true, drop), 3).backward();
    for (const auto& [name, t] : de.params().entries()) {
        ASSERT_TRUE(t.has_grad()) << name;
        double s = 0.0;
        for (const double g : const_cast<Tensor<double>&>(t).grad()) s += std::abs(g);
        EXPECT_GT(s, 0.0) << name;
    }
}
