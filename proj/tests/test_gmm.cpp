#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "adm/gmm.hpp"
#include "grad_suite.hpp"
#include "oracles.hpp"

using namespace adm;

namespace {

using oracle::softmax_vec;
using oracle::random_spd;
using oracle::random_params;

void expect_case_passes(const std::string& name) {
    for (const auto& c : adm::testing::gradient_cases())
        if (c.name == name) {
            for (std::uint64_t seed = 1; seed <= 10; ++seed) {
                const auto r = c.run(seed);
                EXPECT_TRUE(r.passed()) << name << " seed " << seed << ": " << r.max_rel_err();
            }
            return;
        }
    FAIL() << name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Eigenvalue clamp
// ---------------------------------------------------------------------------

TEST(Clamp, AlwaysPositiveDefiniteIncludingRankDeficientInputs) {
    Rng rng(1);
    const double eps = 1e-6;
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 1000; ++t) {
        const Matrix s = oracle::random_symmetric_mixed(7, rng, t);
        const auto r = clamp_covariance(s, eps);
        const auto e = sym_eig(r.pd);
        worst = std::min(worst, e.values.back());
        EXPECT_NO_THROW(Cholesky{r.pd});
        for (const double v : r.clamped_eigenvalues) EXPECT_GE(v, eps);
    }
    EXPECT_GE(worst, eps - 1e-9);
}

TEST(Clamp, LeavesWellConditionedMatricesUnchanged) {
    Rng rng(2);
    const auto s = random_spd(5, rng, 1.0);
    const auto r = clamp_covariance(s, 1e-6);
    EXPECT_EQ(r.pd.max_abs_diff(s), 0.0);
    for (const bool c : r.was_clamped) EXPECT_FALSE(c);
}

TEST(Clamp, RaisesOnlyTheSmallEigenvalues) {
    Matrix s(3);
    s(0, 0) = 2.0;
    s(1, 1) = 1e-9;
    s(2, 2) = -0.5;
    const auto r = clamp_covariance(s, 1e-3);
    EXPECT_NEAR(r.pd(0, 0), 2.0, 1e-12);
    EXPECT_NEAR(r.pd(1, 1), 1e-3, 1e-12);
    EXPECT_NEAR(r.pd(2, 2), 1e-3, 1e-12);
    EXPECT_EQ(std::count(r.was_clamped.begin(), r.was_clamped.end(), true), 2);
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

TEST(Energy, MatchesNaiveDirectEvaluation) {
    Rng rng(3);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto p = random_params(7, 6, rng);
        const auto z = oracle::draw_near(p, rng);
        const double e = energy(z, p)[0];
        const double ref = oracle::naive_energy(z, p);
        worst = std::max(worst, std::abs(e - ref));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Energy, StableFarFromEveryComponent) {
    Rng rng(4);
    const auto p = random_params(3, 2, rng);
    const std::vector<double> z{1e3, -1e3, 1e3};
    const auto e = energy(z, p);
    EXPECT_TRUE(std::isfinite(e[0]));
    EXPECT_GT(e[0], 1e4);
}

TEST(Energy, GradientMatchesFiniteDifferences) { expect_case_passes("energy_op"); }

TEST(Energy, SingleGaussianReducesToClosedForm) {
    Matrix cov = Matrix::identity(2);
    cov(0, 0) = 4.0;
    const auto p = finalize_params({1.0}, {{1.0, -1.0}}, {cov}, {false}, {});
    const std::vector<double> z{3.0, 0.0};
    const double maha = 4.0 / 4.0 + 1.0;
    const double ref = 0.5 * (2.0 * std::log(2.0 * std::numbers::pi) + std::log(4.0) + maha);
    EXPECT_NEAR(energy(z, p)[0], ref, 1e-12);
}

// ---------------------------------------------------------------------------
// Parameter estimation
// ---------------------------------------------------------------------------

TEST(EstimateParams, MatchesBruteForceMstep) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const std::size_t N = 50, d = 7, C = 6;
        std::vector<double> z(N * d), logits(N * C);
        for (auto& v : z) v = rng.normal();
        for (auto& v : logits) v = 2.0 * rng.normal();
        const auto f = softmax_vec(logits, C);
        GmmOptions raw;
        raw.clamp = false;
        raw.singular_rcond = 0.0;
        const auto p = estimate_params(z, f, N, d, C, raw);
        const auto ref = oracle::brute_force_mstep(z, f, N, d, C);
        const double worst = oracle::mstep_max_abs_diff(p, ref);
        EXPECT_LT(worst, 1e-6);
    }
}

TEST(EstimateParams, FractionsSumToOneAndSizesMismatchThrow) {
    Rng rng(6);
    const std::size_t N = 20, d = 2, C = 3;
    std::vector<double> z(N * d), logits(N * C);
    for (auto& v : z) v = rng.normal();
    for (auto& v : logits) v = rng.normal();
    const auto p = estimate_params(z, softmax_vec(logits, C), N, d, C);
    EXPECT_NEAR(std::accumulate(p.pi.begin(), p.pi.end(), 0.0), 1.0, 1e-12);
    EXPECT_THROW(estimate_params(z, logits, N, d, C + 1), ConfigError);
    EXPECT_THROW(estimate_params({}, {}, 0, d, C), DataError);
}

TEST(EstimateParams, DegenerateComponentFallsBackToBatchMeanAndEpsIdentity) {
    const std::size_t N = 4, d = 2, C = 2;
    const std::vector<double> z{0, 0, 1, 0, 0, 1, 1, 1};
    const std::vector<double> f{1, 0, 1, 0, 1, 0, 1, 0};
    const auto p = estimate_params(z, f, N, d, C);
    EXPECT_TRUE(p.degenerate[1]);
    EXPECT_FALSE(p.degenerate[0]);
    EXPECT_EQ(p.pi[1], 0.0);
    EXPECT_DOUBLE_EQ(p.mu[1][0], 0.5);
    EXPECT_NEAR(p.cov[1](0, 0), p.eps, 1e-18);
    EXPECT_TRUE(std::isfinite(energy(z, p)[0]));
}

TEST(EstimateParams, UnclampedCollapsedCovarianceIsReportedSingular) {
    const std::size_t N = 6, d = 2, C = 1;
    std::vector<double> z;
    for (std::size_t n = 0; n < N; ++n) {
        z.push_back(static_cast<double>(n));
        z.push_back(2.0 * static_cast<double>(n));  // all points on a line
    }
    const std::vector<double> f(N, 1.0);
    GmmOptions raw;
    raw.clamp = false;
    EXPECT_THROW(estimate_params(z, f, N, d, C, raw), SingularityError);
    const auto clamped = estimate_params(z, f, N, d, C);
    EXPECT_GE(clamped.min_eigenvalue(), clamped.eps);
    EXPECT_LT(clamped.min_raw_eigenvalue(), 1e-9);
}

TEST(BatchStats, MergeEqualsOnePassExactly) {
    Rng rng(7);
    const std::size_t N = 300, d = 7, C = 6;
    std::vector<double> z(N * d), logits(N * C);
    for (auto& v : z) v = static_cast<float>(rng.normal());
    for (auto& v : logits) v = rng.normal();
    const auto f0 = softmax_vec(logits, C);
    std::vector<double> f(f0.begin(), f0.end());
    for (auto& v : f) v = static_cast<float>(v);  // features are 32-bit in training

    BatchStats one(d, C), a(d, C), b(d, C), c(d, C);
    one.accumulate(z, f);
    auto part = [&](std::size_t lo, std::size_t hi, BatchStats& s) {
        s.accumulate(std::span<const double>(z).subspan(lo * d, (hi - lo) * d),
                     std::span<const double>(f).subspan(lo * C, (hi - lo) * C));
    };
    part(0, 97, a);
    part(97, 211, b);
    part(211, N, c);
    BatchStats merged = c;
    merged.merge(a);
    merged.merge(b);
    EXPECT_TRUE(merged == one);

    const auto p1 = freeze(one), p2 = freeze(merged);
    for (std::size_t k = 0; k < C; ++k) {
        EXPECT_EQ(p1.pi[k], p2.pi[k]);
        EXPECT_EQ(p1.mu[k], p2.mu[k]);
        EXPECT_EQ(p1.cov_raw[k].max_abs_diff(p2.cov_raw[k]), 0.0);
    }

    // Same estimates as the direct M-step up to rounding.
    const auto direct = estimate_params(z, f, N, d, C);
    for (std::size_t k = 0; k < C; ++k) {
        EXPECT_NEAR(p1.pi[k], direct.pi[k], 1e-12);
        for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(p1.mu[k][i], direct.mu[k][i], 1e-10);
        EXPECT_LT(p1.cov_raw[k].max_abs_diff(direct.cov_raw[k]), 1e-9);
    }
}

TEST(BatchStats, FreezeWithoutSamplesThrows) {
    BatchStats s(3, 2);
    EXPECT_THROW(freeze(s), DataError);
    EXPECT_THROW(s.accumulate(std::vector<double>(3), std::vector<double>(3)), ConfigError);
}

// ---------------------------------------------------------------------------
// Penalty and fused objective
// ---------------------------------------------------------------------------

TEST(Penalty, SumsInverseDiagonals) {
    Matrix a = Matrix::identity(2), b = Matrix::identity(2);
    a(0, 0) = 2.0;
    b(1, 1) = 0.25;
    const auto p = finalize_params({0.5, 0.5}, {{0, 0}, {1, 1}}, {a, b}, {false, false}, {});
    EXPECT_DOUBLE_EQ(penalty_loss(p).value, 0.5 + 1.0 + 1.0 + 4.0);
}

TEST(GmmObjective, GradientsMatchFiniteDifferences) {
    expect_case_passes("gmm_objective");
    expect_case_passes("gmm_objective_unclamped");
}

TEST(GmmObjective, LossDecomposesIntoWeightedTerms) {
    Rng rng(8);
    const std::size_t N = 40, d = 3, C = 2;
    auto z = adm::testing::randn({N, d}, rng);
    auto f = softmax_rows(adm::testing::randn({N, C}, rng));
    GmmObjectiveOptions o;
    o.energy_weight = 0.3;
    o.penalty_weight = 0.01;
    const auto obj = gmm_objective(z, f, o);
    EXPECT_NEAR(obj.loss.item(), 0.3 * obj.mean_energy + 0.01 * obj.penalty, 1e-12);
    std::vector<double> zd(z.data().begin(), z.data().end());
    const auto E = energy(zd, obj.params);
    EXPECT_NEAR(obj.mean_energy, std::accumulate(E.begin(), E.end(), 0.0) / N, 1e-10);
}

TEST(GmmObjective, ClampedGradientAgreesWithUnclampedWhenNothingIsClamped) {
    Rng rng(9);
    const std::size_t N = 30, d = 3, C = 2;
    auto z1 = adm::testing::randn({N, d}, rng);
    auto l1 = adm::testing::randn({N, C}, rng);
    auto z2 = z1.clone(true), l2 = l1.clone(true);
    z1.set_requires_grad(true);
    l1.set_requires_grad(true);
    GmmObjectiveOptions on, off;
    off.gmm.clamp = false;
    gmm_objective(z1, softmax_rows(l1), on).loss.backward();
    gmm_objective(z2, softmax_rows(l2), off).loss.backward();
    for (std::size_t i = 0; i < z1.numel(); ++i) EXPECT_NEAR(z1.grad()[i], z2.grad()[i], 1e-12);
    for (std::size_t i = 0; i < l1.numel(); ++i) EXPECT_NEAR(l1.grad()[i], l2.grad()[i], 1e-12);
}

TEST(GmmObjective, ClampedDirectionReceivesNoGradient) {
    // Points on the x axis: the y-variance is clamped, so moving a point's y
    // coordinate changes the loss only through the unclamped directions.
    const std::size_t N = 8;
    std::vector<double> zv;
    for (std::size_t n = 0; n < N; ++n) {
        zv.push_back(static_cast<double>(n) - 3.5);
        zv.push_back(0.0);
    }
    auto z = Tensor<double>::from({N, 2}, zv, true);
    auto f = Tensor<double>::full({N, 1}, 1.0);
    const auto obj = gmm_objective(z, f, {});
    EXPECT_TRUE(obj.params.was_clamped[0][1]);
    obj.loss.backward();
    for (std::size_t n = 0; n < N; ++n) EXPECT_TRUE(std::isfinite(z.grad()[2 * n + 1]));
}
