#pragma once

// Covariance-singularity comparison of three density-estimation models:
// unconstrained (baseline), diagonal penalty, and eigenvalue clamp.

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "adm/data.hpp"
#include "adm/gmm.hpp"
#include "adm/nets.hpp"
#include "adm/training.hpp"

namespace adm {

enum class DemoMode { baseline, penalty, clamped };

inline const char* demo_mode_name(DemoMode m) {
    switch (m) {
        case DemoMode::baseline: return "baseline";
        case DemoMode::penalty: return "penalty";
        case DemoMode::clamped: return "clamped";
    }
    return "?";
}

inline DemoMode parse_demo_mode(const std::string& s) {
    for (DemoMode m : {DemoMode::baseline, DemoMode::penalty, DemoMode::clamped})
        if (s == demo_mode_name(m)) return m;
    throw ConfigError("unknown singularity-demo mode '" + s + "'");
}

struct SingularityDemoConfig {
    DemoMode mode = DemoMode::clamped;
    std::size_t epochs = 150;
    std::size_t points_per_epoch = 1024;
    std::size_t batch_size = 256;
    std::size_t mixtures = 6;
    /// Out-of-plane spread at epoch 0 and its per-epoch decay factor.
    double sigma0 = 0.1;
    double decay = 0.9;
    double lr = 1e-3;
    double eps = 1e-6;
    double penalty_weight = 1e-5;
    std::uint64_t seed = 1;
    /// Run ADM_dr-style joint learning on phantoms instead of the synthetic
    /// collapsing feature set.
    bool organic = false;
    double organic_lambda = 1.0;

    void validate() const {
        if (epochs < 1 || points_per_epoch < 1 || batch_size < 1 || mixtures < 1)
            throw ConfigError("singularity-demo: counts must be >= 1");
        if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("singularity-demo: decay must be in (0,1]");
        if (!(sigma0 >= 0.0)) throw ConfigError("singularity-demo: sigma0 must be >= 0");
    }
};

struct DemoEpoch {
    std::size_t epoch = 0;
    double energy = 0.0, penalty = 0.0, total = 0.0;
    double min_eig_raw = 0.0;       // smallest eigenvalue before any clamp
    double min_eig = 0.0;           // smallest eigenvalue of the covariances used
    std::array<double, 3> spectrum{};  // three smallest raw eigenvalues of the worst component, ascending
    std::string status = "ok";
};

struct SingularityDemoResult {
    DemoMode mode = DemoMode::clamped;
    std::string status = "completed";  // completed | singular | non_finite
    std::string message;
    std::size_t epochs_completed = 0;
    double min_eig_raw = std::numeric_limits<double>::infinity();
    double min_eig = std::numeric_limits<double>::infinity();
    std::vector<DemoEpoch> curve;

    bool failed() const { return status != "completed"; }

    std::string csv() const {
        std::string s = "epoch,mode,energy,penalty,total,min_eig_raw,min_eig,eig0,eig1,eig2,status\n";
        char buf[512];
        for (const auto& r : curve) {
            std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.6e,%.6e,%.6e,%.6e,%.6e,%s\n", r.epoch,
                          demo_mode_name(mode), r.energy, r.penalty, r.total, r.min_eig_raw, r.min_eig, r.spectrum[0],
                          r.spectrum[1], r.spectrum[2], r.status.c_str());
            s += buf;
        }
        return s;
    }

    nlohmann::json to_json() const {
        return {{"mode", demo_mode_name(mode)},
                {"status", status},
                {"message", message},
                {"epochs_completed", epochs_completed},
                {"min_eig_raw", min_eig_raw},
                {"min_eig", min_eig}};
    }
};

namespace detail {

/// Points from three in-plane clusters embedded in 3-D along a tilted plane,
/// plus out-of-plane noise of the given spread.
inline std::vector<float> plane_points(std::size_t n, double sigma, Rng& rng) {
    static constexpr double centres[3][2] = {{-1.0, 0.0}, {1.0, 0.5}, {0.0, -1.0}};
    // Orthonormal in-plane basis u, v and normal w (w = (1,-1,1)/sqrt 3).
    const double s2 = std::sqrt(2.0), s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
    const double u[3] = {1.0 / s2, 1.0 / s2, 0.0};
    const double v[3] = {-1.0 / s6, 1.0 / s6, 2.0 / s6};
    const double w[3] = {1.0 / s3, -1.0 / s3, 1.0 / s3};
    std::vector<float> z(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = rng.below(3);
        const double a = centres[k][0] + 0.3 * rng.normal();
        const double b = centres[k][1] + 0.3 * rng.normal();
        const double o = sigma * rng.normal();
        for (std::size_t j = 0; j < 3; ++j) z[3 * i + j] = static_cast<float>(a * u[j] + b * v[j] + o * w[j]);
    }
    return z;
}

inline void record_spectrum(DemoEpoch& row, const GmmParams& diag) {
    for (std::size_t c = 0; c < diag.components(); ++c) {
        const auto& ev = diag.eigenvalues[c];
        if (ev.back() < row.min_eig_raw) {
            row.min_eig_raw = ev.back();
            for (std::size_t j = 0; j < 3 && j < ev.size(); ++j) row.spectrum[j] = ev[ev.size() - 1 - j];
        }
    }
}

}  // namespace detail

/// Trains only the density-estimation network on features that collapse onto
/// a plane. The baseline and penalty models stop as soon as a covariance can
/// no longer be inverted; the clamped model runs every epoch.
inline SingularityDemoResult run_singularity_demo(const SingularityDemoConfig& cfg) {
    cfg.validate();
    SingularityDemoResult res;
    res.mode = cfg.mode;
    Rng init_rng(detail::derive_seed(cfg.seed, 11));
    Rng rng(detail::derive_seed(cfg.seed, 12));

    GmmObjectiveOptions go;
    go.gmm.eps = cfg.eps;
    go.gmm.clamp = cfg.mode == DemoMode::clamped;
    go.penalty_weight = cfg.mode == DemoMode::penalty ? cfg.penalty_weight : 0.0;
    GmmOptions diag_opt;  // clamp on: always succeeds, exposes the raw spectrum
    diag_opt.eps = cfg.eps;

    // Organic mode trains DR jointly on phantoms; the plain mode DE alone.
    std::optional<DrNet<float>> dr;
    std::vector<MultiContrastSample> phantoms;
    DeConfig dcfg;
    dcfg.mixtures = cfg.mixtures;
    dcfg.z_dim = DrConfig::features;
    if (cfg.organic) {
        PhantomConfig pc;
        pc.seed = cfg.seed;
        pc.n_train = 16;
        pc.n_val = 0;
        pc.n_test = 0;
        pc.anomaly_rate = 0.0;
        auto ds = generate(pc);
        phantoms = normalize_all(ds.train, compute_normalization(ds.train));
        dr = DrNet<float>::init(DrConfig{pc.contrasts}, init_rng);
    }
    DeNet<float> de = DeNet<float>::init(dcfg, init_rng);
    Adam adam_de(cfg.lr), adam_dr(cfg.lr);

    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        DemoEpoch row;
        row.epoch = e + 1;
        row.min_eig_raw = row.min_eig = std::numeric_limits<double>::infinity();
        std::vector<double> en, pen, tot;
        try {
            if (cfg.organic) {
                JointOptions jo;
                jo.variant = Variant::adm_dr;
                jo.lambda = cfg.organic_lambda;
                jo.penalty_weight = go.penalty_weight;
                jo.gmm = go.gmm;
                const auto order = detail::shuffled(phantoms.size(), rng);
                for (std::size_t s = 0; s < order.size(); s += 8) {
                    std::vector<const MultiContrastSample*> ptrs;
                    for (std::size_t k = s; k < std::min(order.size(), s + 8); ++k) ptrs.push_back(&phantoms[order[k]]);
                    const auto b = make_batch<float>(ptrs);
                    {
                        // Diagnostic pass on the same features, without gradients.
                        Rng probe = rng;
                        auto dr_inf = DrNet<float>(dr->config(), dr->params().clone());
                        dr_inf.params().set_requires_grad(false);
                        auto de_inf = DeNet<float>(de.config(), de.params().clone());
                        de_inf.params().set_requires_grad(false);
                        const auto z = gather_pixels(dr_inf.encode(b.tensor()), b.pixels);
                        const auto f = de_inf.forward(z, true, probe);
                        const std::vector<double> zd(z.data().begin(), z.data().end()), fd(f.data().begin(), f.data().end());
                        detail::record_spectrum(row, estimate_params(zd, fd, b.pixels.size(), 3, cfg.mixtures, diag_opt));
                    }
                    auto t = joint_loss(&*dr, de, Tensor<float>{}, b, jo, true, rng);
                    t.loss.backward();
                    adam_dr.step(dr->params());
                    adam_de.step(de.params());
                    row.min_eig = std::min(row.min_eig, t.params.min_eigenvalue());
                    en.push_back(t.energy);
                    pen.push_back(t.penalty);
                    tot.push_back(t.loss.item());
                }
            } else {
                const double sigma = cfg.sigma0 * std::pow(cfg.decay, static_cast<double>(e));
                const auto pts = detail::plane_points(cfg.points_per_epoch, sigma, rng);
                for (std::size_t s = 0; s < cfg.points_per_epoch; s += cfg.batch_size) {
                    const std::size_t n = std::min(cfg.batch_size, cfg.points_per_epoch - s);
                    const auto z = Tensor<float>::from(
                        {n, 3}, std::vector<float>(pts.begin() + static_cast<long>(3 * s),
                                                   pts.begin() + static_cast<long>(3 * (s + n))));
                    const auto f = de.forward(z, true, rng);
                    const std::vector<double> zd(z.data().begin(), z.data().end()), fd(f.data().begin(), f.data().end());
                    detail::record_spectrum(row, estimate_params(zd, fd, n, 3, cfg.mixtures, diag_opt));
                    auto obj = gmm_objective(z, f, go);
                    obj.loss.backward();
                    adam_de.step(de.params());
                    row.min_eig = std::min(row.min_eig, obj.params.min_eigenvalue());
                    en.push_back(obj.mean_energy);
                    pen.push_back(obj.penalty);
                    tot.push_back(obj.loss.item());
                }
            }
        } catch (const SingularityError& ex) {
            row.status = "singular";
            res.status = "singular";
            res.message = ex.what();
        } catch (const NumericError& ex) {
            row.status = "non_finite";
            res.status = "non_finite";
            res.message = ex.what();
        }
        row.energy = en.empty() ? std::numeric_limits<double>::quiet_NaN() : detail::mean_of(en);
        row.penalty = pen.empty() ? std::numeric_limits<double>::quiet_NaN() : detail::mean_of(pen);
        row.total = tot.empty() ? std::numeric_limits<double>::quiet_NaN() : detail::mean_of(tot);
        if (row.status != "ok") {
            // Partial epoch: report only the terms of completed batches.
            row.energy = row.penalty = row.total = std::numeric_limits<double>::quiet_NaN();
        }
        res.min_eig_raw = std::min(res.min_eig_raw, row.min_eig_raw);
        if (std::isfinite(row.min_eig)) res.min_eig = std::min(res.min_eig, row.min_eig);
        res.curve.push_back(row);
        if (row.status != "ok") break;
        res.epochs_completed = e + 1;
    }
    return res;
}

}  // namespace adm
