#pragma once

// Multi-contrast samples, the MCAD container format, synthetic phantom
// generation with injected lesions, and dataset manifests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adm/binary_io.hpp"
#include "adm/error.hpp"
#include "adm/metrics.hpp"
#include "adm/rng.hpp"

namespace adm {

using Mask = std::vector<std::uint8_t>;

struct MultiContrastSample {
    std::string id;
    std::size_t contrasts = 0, height = 0, width = 0;
    std::vector<float> image;  // [C][H][W]
    Mask brain_mask;           // empty when no mask is stored
    std::optional<Mask> label;

    std::size_t pixels() const { return height * width; }
    bool has_stored_mask() const { return !brain_mask.empty(); }

    std::span<const float> channel(std::size_t c) const {
        return std::span<const float>(image).subspan(c * pixels(), pixels());
    }

    std::size_t lesion_pixels() const {
        if (!label) return 0;
        return static_cast<std::size_t>(std::count(label->begin(), label->end(), std::uint8_t{1}));
    }

    void validate() const {
        if (image.size() != contrasts * pixels()) throw DataError(id + ": image size does not match dims");
        for (const float v : image)
            if (!std::isfinite(v)) throw DataError(id + ": non-finite intensity");
        if (has_stored_mask() && brain_mask.size() != pixels()) throw DataError(id + ": mask size mismatch");
        if (label) {
            if (label->size() != pixels()) throw DataError(id + ": label size mismatch");
            const Mask brain = has_stored_mask() ? brain_mask : Mask{};
            for (std::size_t i = 0; i < pixels(); ++i)
                if ((*label)[i] && !brain.empty() && !brain[i]) throw DataError(id + ": label outside brain mask");
        }
    }
};

/// Brain pixels: the stored mask if present, otherwise every pixel where some
/// contrast is non-zero (all-zero pixels are background).
inline Mask background_mask(const MultiContrastSample& s) {
    if (s.has_stored_mask()) return s.brain_mask;
    Mask m(s.pixels(), 0);
    for (std::size_t c = 0; c < s.contrasts; ++c) {
        const auto ch = s.channel(c);
        for (std::size_t i = 0; i < m.size(); ++i)
            if (ch[i] != 0.0f) m[i] = 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// MCAD container
// ---------------------------------------------------------------------------

namespace mcad {
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kHasLabel = 1;
inline constexpr std::uint8_t kHasMask = 2;
}  // namespace mcad

inline std::vector<std::uint8_t> encode_sample(const MultiContrastSample& s) {
    s.validate();
    io::Writer w;
    w.bytes("MCAD", 4);
    w.u32(mcad::kVersion);
    w.u32(static_cast<std::uint32_t>(s.contrasts));
    w.u32(static_cast<std::uint32_t>(s.height));
    w.u32(static_cast<std::uint32_t>(s.width));
    w.u8((s.label ? mcad::kHasLabel : 0) | (s.has_stored_mask() ? mcad::kHasMask : 0));
    for (const float v : s.image) w.f32(v);
    if (s.has_stored_mask()) w.bytes(s.brain_mask.data(), s.brain_mask.size());
    if (s.label) w.bytes(s.label->data(), s.label->size());
    return w.buffer();
}

inline MultiContrastSample decode_sample(std::vector<std::uint8_t> bytes, std::string id = {}) {
    io::Reader r(std::move(bytes));
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::string(magic, 4) != "MCAD") {
        if (std::string(magic, 4) == "DACM") throw FormatError("MCAD: foreign byte order", 0);
        throw FormatError("MCAD: bad magic", 0);
    }
    const std::size_t vpos = r.offset();
    if (r.u32("version") != mcad::kVersion) throw FormatError("MCAD: unsupported version", vpos);
    MultiContrastSample s;
    s.id = std::move(id);
    const std::size_t dpos = r.offset();
    s.contrasts = r.u32("contrast count");
    s.height = r.u32("height");
    s.width = r.u32("width");
    if (s.contrasts == 0 || s.height == 0 || s.width == 0 || s.contrasts > 64 || s.height > 8192 || s.width > 8192)
        throw FormatError("MCAD: implausible dims", dpos);
    const std::size_t fpos = r.offset();
    const std::uint8_t flags = r.u8("flags");
    if (flags & ~(mcad::kHasLabel | mcad::kHasMask)) throw FormatError("MCAD: unknown flag bits", fpos);
    s.image.resize(s.contrasts * s.pixels());
    r.need(4 * s.image.size(), "image payload");
    for (auto& v : s.image) v = r.f32("image payload");
    auto read_mask = [&](const char* what) {
        Mask m(s.pixels());
        r.bytes(m.data(), m.size(), what);
        for (const auto b : m)
            if (b > 1) throw FormatError(std::string("MCAD: non-binary ") + what, r.offset());
        return m;
    };
    if (flags & mcad::kHasMask) s.brain_mask = read_mask("mask");
    if (flags & mcad::kHasLabel) s.label = read_mask("label");
    if (!r.at_end()) throw FormatError("MCAD: trailing bytes", r.offset());
    try {
        s.validate();
    } catch (const DataError& e) {
        throw FormatError(std::string("MCAD: ") + e.what(), 0);
    }
    return s;
}

inline void save_sample(const MultiContrastSample& s, const std::string& path) {
    io::Writer w;
    const auto b = encode_sample(s);
    w.bytes(b.data(), b.size());
    w.save(path);
}

inline MultiContrastSample load_sample(const std::string& path) {
    return decode_sample(io::read_file(path), std::filesystem::path(path).stem().string());
}

// ---------------------------------------------------------------------------
// Phantom generation
// ---------------------------------------------------------------------------

struct PhantomConfig {
    std::size_t height = 64, width = 64;
    std::size_t contrasts = 4;
    std::size_t n_tissues = 3;
    std::size_t n_train = 40, n_val = 12, n_test = 24;
    /// Per-tissue, per-contrast mean and per-pixel standard deviation.
    std::vector<std::vector<double>> tissue_mean{
        {0.30, 0.80, 0.55, 0.40}, {0.55, 0.55, 0.70, 0.60}, {0.80, 0.35, 0.40, 0.80}};
    std::vector<std::vector<double>> tissue_std{
        {0.04, 0.04, 0.04, 0.04}, {0.04, 0.04, 0.04, 0.04}, {0.04, 0.04, 0.04, 0.04}};
    /// Lesion intensities: each contrast alone resembles some tissue, the
    /// combination matches none.
    std::vector<double> lesion_mean{0.80, 0.80, 0.55, 0.60};
    std::vector<double> lesion_std{0.05, 0.05, 0.05, 0.05};
    /// Fraction of test images carrying a lesion. Validation images all carry
    /// one whenever this is positive.
    double anomaly_rate = 0.5;
    double lesion_radius_min = 3.0, lesion_radius_max = 9.0;
    std::uint64_t seed = 1;

    void validate() const;
};

inline void to_json(nlohmann::json& j, const PhantomConfig& c) {
    j = {{"height", c.height},
         {"width", c.width},
         {"contrasts", c.contrasts},
         {"n_tissues", c.n_tissues},
         {"n_train", c.n_train},
         {"n_val", c.n_val},
         {"n_test", c.n_test},
         {"tissue_mean", c.tissue_mean},
         {"tissue_std", c.tissue_std},
         {"lesion_mean", c.lesion_mean},
         {"lesion_std", c.lesion_std},
         {"anomaly_rate", c.anomaly_rate},
         {"lesion_radius_min", c.lesion_radius_min},
         {"lesion_radius_max", c.lesion_radius_max},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomConfig& c) {
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) j.at(k).get_to(v);
    };
    get("height", c.height);
    get("width", c.width);
    get("contrasts", c.contrasts);
    get("n_tissues", c.n_tissues);
    get("n_train", c.n_train);
    get("n_val", c.n_val);
    get("n_test", c.n_test);
    get("tissue_mean", c.tissue_mean);
    get("tissue_std", c.tissue_std);
    get("lesion_mean", c.lesion_mean);
    get("lesion_std", c.lesion_std);
    get("anomaly_rate", c.anomaly_rate);
    get("lesion_radius_min", c.lesion_radius_min);
    get("lesion_radius_max", c.lesion_radius_max);
    get("seed", c.seed);
}

/// Separation of the lesion signature from the nearest tissue: the largest,
/// over contrast pairs, of the smallest joint standardized distance to any
/// tissue; and the smallest, over contrasts, marginal standardized distance.
struct SignatureCheck {
    double best_pair_joint_distance = 0.0;
    double best_marginal_distance = 0.0;
    bool feasible() const { return best_pair_joint_distance >= 3.0 && best_marginal_distance <= 1.0; }
};

inline SignatureCheck check_signature(const PhantomConfig& c) {
    SignatureCheck r;
    r.best_marginal_distance = std::numeric_limits<double>::infinity();
    for (std::size_t ch = 0; ch < c.contrasts; ++ch)
        for (std::size_t k = 0; k < c.n_tissues; ++k)
            r.best_marginal_distance = std::min(
                r.best_marginal_distance, std::abs(c.lesion_mean[ch] - c.tissue_mean[k][ch]) / c.tissue_std[k][ch]);
    for (std::size_t a = 0; a < c.contrasts; ++a)
        for (std::size_t b = a + 1; b < c.contrasts; ++b) {
            double nearest = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < c.n_tissues; ++k) {
                const double da = (c.lesion_mean[a] - c.tissue_mean[k][a]) / c.tissue_std[k][a];
                const double db = (c.lesion_mean[b] - c.tissue_mean[k][b]) / c.tissue_std[k][b];
                nearest = std::min(nearest, std::hypot(da, db));
            }
            r.best_pair_joint_distance = std::max(r.best_pair_joint_distance, nearest);
        }
    return r;
}

inline void PhantomConfig::validate() const {
    if (height < 16 || width < 16) throw ConfigError("phantom: size must be at least 16x16");
    if (height % 4 || width % 4) throw ConfigError("phantom: size must be divisible by 4");
    if (contrasts < 2) throw ConfigError("phantom: need at least two contrasts");
    if (n_tissues < 1) throw ConfigError("phantom: need at least one tissue");
    if (tissue_mean.size() != n_tissues || tissue_std.size() != n_tissues)
        throw ConfigError("phantom: tissue tables must have n_tissues rows");
    for (std::size_t k = 0; k < n_tissues; ++k) {
        if (tissue_mean[k].size() != contrasts || tissue_std[k].size() != contrasts)
            throw ConfigError("phantom: tissue tables must have one column per contrast");
        for (std::size_t c = 0; c < contrasts; ++c)
            if (!(tissue_std[k][c] > 0.0) || !(tissue_mean[k][c] > 0.0))
                throw ConfigError("phantom: tissue means and stds must be positive");
    }
    if (lesion_mean.size() != contrasts || lesion_std.size() != contrasts)
        throw ConfigError("phantom: lesion signature must have one entry per contrast");
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0)) throw ConfigError("phantom: anomaly_rate must be in [0,1]");
    if (!(lesion_radius_min >= 1.0 && lesion_radius_max >= lesion_radius_min))
        throw ConfigError("phantom: invalid lesion radius range");
    if (n_train < 1) throw ConfigError("phantom: need at least one training sample");
}

enum class Role { train, validation, test };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::train: return "train";
        case Role::validation: return "validation";
        case Role::test: return "test";
    }
    return "?";
}

inline Role parse_role(const std::string& s) {
    if (s == "train") return Role::train;
    if (s == "validation") return Role::validation;
    if (s == "test") return Role::test;
    throw ConfigError("unknown split '" + s + "'");
}

struct Dataset {
    std::vector<MultiContrastSample> train, validation, test;
    nlohmann::json manifest;

    const std::vector<MultiContrastSample>& split(Role r) const {
        switch (r) {
            case Role::train: return train;
            case Role::validation: return validation;
            case Role::test: return test;
        }
        throw ConfigError("bad role");
    }
    std::vector<MultiContrastSample>& split(Role r) {
        return const_cast<std::vector<MultiContrastSample>&>(std::as_const(*this).split(r));
    }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL);
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return x;
}

/// Unit-variance noise with a 3x3 binomial smoothing; every pixel has the same
/// marginal variance.
inline std::vector<double> smooth_noise(std::size_t H, std::size_t W, Rng& rng) {
    const std::size_t Hp = H + 2, Wp = W + 2;
    std::vector<double> white(Hp * Wp);
    for (auto& v : white) v = rng.normal();
    static constexpr double k[3] = {0.25, 0.5, 0.25};
    // Sum of squared kernel weights: (6/16)^2.
    const double norm = 1.0 / 0.375;
    std::vector<double> out(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double s = 0.0;
            for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) s += k[dy] * k[dx] * white[(y + dy) * Wp + x + dx];
            out[y * W + x] = s * norm;
        }
    return out;
}

inline double gauss_logpdf(double x, double m, double s) {
    const double z = (x - m) / s;
    return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
}

struct GeneratedSample {
    MultiContrastSample sample;
    std::vector<int> tissue;  // per pixel, -1 outside the brain
};

inline GeneratedSample generate_one(const PhantomConfig& cfg, Rng& rng, bool anomalous, std::string id) {
    const std::size_t H = cfg.height, W = cfg.width;
    GeneratedSample g;
    auto& s = g.sample;
    s.id = std::move(id);
    s.contrasts = cfg.contrasts;
    s.height = H;
    s.width = W;

    // Brain outline: perturbed ellipse.
    const double cx = 0.5 * static_cast<double>(W - 1) + rng.uniform(-2.0, 2.0);
    const double cy = 0.5 * static_cast<double>(H - 1) + rng.uniform(-2.0, 2.0);
    const double rx = static_cast<double>(W) * rng.uniform(0.36, 0.44);
    const double ry = static_cast<double>(H) * rng.uniform(0.38, 0.46);
    std::array<double, 3> amp{}, phase{};
    for (std::size_t i = 0; i < 3; ++i) {
        amp[i] = rng.uniform(-0.05, 0.05);
        phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    std::vector<double> rho(H * W);
    s.brain_mask.assign(H * W, 0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double dx = (static_cast<double>(x) - cx) / rx, dy = (static_cast<double>(y) - cy) / ry;
            const double theta = std::atan2(dy, dx);
            double boundary = 1.0;
            for (std::size_t i = 0; i < 3; ++i) boundary += amp[i] * std::cos(static_cast<double>(i + 2) * theta + phase[i]);
            rho[y * W + x] = std::hypot(dx, dy) / boundary;
            s.brain_mask[y * W + x] = rho[y * W + x] <= 1.0 ? 1 : 0;
        }

    // Tissue partition: radial coordinate plus a few smooth bumps, split at
    // in-mask terciles (quantiles for n_tissues classes).
    std::vector<double> field(rho);
    for (int j = 0; j < 5; ++j) {
        const double bx = rng.uniform(0.0, static_cast<double>(W)), by = rng.uniform(0.0, static_cast<double>(H));
        const double a = rng.uniform(-0.25, 0.25), sg = rng.uniform(4.0, 10.0);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double d2 = (static_cast<double>(x) - bx) * (static_cast<double>(x) - bx) +
                                  (static_cast<double>(y) - by) * (static_cast<double>(y) - by);
                field[y * W + x] += a * std::exp(-d2 / (2.0 * sg * sg));
            }
    }
    std::vector<double> inside;
    for (std::size_t i = 0; i < H * W; ++i)
        if (s.brain_mask[i]) inside.push_back(field[i]);
    std::sort(inside.begin(), inside.end());
    std::vector<double> cuts;
    for (std::size_t k = 1; k < cfg.n_tissues; ++k) cuts.push_back(inside[k * inside.size() / cfg.n_tissues]);
    g.tissue.assign(H * W, -1);
    for (std::size_t i = 0; i < H * W; ++i) {
        if (!s.brain_mask[i]) continue;
        int k = 0;
        while (static_cast<std::size_t>(k) < cuts.size() && field[i] >= cuts[static_cast<std::size_t>(k)]) ++k;
        g.tissue[i] = k;
    }

    // Lesion: ellipse centred on an interior brain pixel.
    Mask lesion(H * W, 0);
    if (anomalous) {
        std::vector<std::size_t> centres;
        for (std::size_t i = 0; i < H * W; ++i)
            if (rho[i] <= 0.6) centres.push_back(i);
        if (centres.empty()) throw DataError("phantom: brain too small for a lesion");
        const std::size_t c0 = centres[rng.below(centres.size())];
        const double lx = static_cast<double>(c0 % W), ly = static_cast<double>(c0 / W);
        const double ra = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double rb = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double ang = rng.uniform(0.0, std::numbers::pi);
        const double ca = std::cos(ang), sa = std::sin(ang);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double dx = static_cast<double>(x) - lx, dy = static_cast<double>(y) - ly;
                const double u = (dx * ca + dy * sa) / ra, v = (-dx * sa + dy * ca) / rb;
                if (u * u + v * v <= 1.0 && s.brain_mask[y * W + x]) lesion[y * W + x] = 1;
            }
        s.label = lesion;
    }

    s.image.assign(cfg.contrasts * H * W, 0.0f);
    for (std::size_t c = 0; c < cfg.contrasts; ++c) {
        const auto noise = smooth_noise(H, W, rng);
        for (std::size_t i = 0; i < H * W; ++i) {
            if (!s.brain_mask[i]) continue;
            const auto k = static_cast<std::size_t>(g.tissue[i]);
            const double m = lesion[i] ? cfg.lesion_mean[c] : cfg.tissue_mean[k][c];
            const double sd = lesion[i] ? cfg.lesion_std[c] : cfg.tissue_std[k][c];
            float v = static_cast<float>(m + sd * noise[i]);
            // Exact zeros are reserved for background.
            if (v == 0.0f) v = 1e-6f;
            s.image[c * H * W + i] = v;
        }
    }
    return g;
}

inline std::vector<double> histogram(std::span<const double> v, double lo, double hi, std::size_t bins) {
    std::vector<double> h(bins, 0.0);
    for (const double x : v) {
        auto b = static_cast<long>((x - lo) / (hi - lo) * static_cast<double>(bins));
        b = std::clamp<long>(b, 0, static_cast<long>(bins) - 1);
        h[static_cast<std::size_t>(b)] += 1.0;
    }
    for (auto& x : h) x /= std::max<double>(1.0, static_cast<double>(v.size()));
    return h;
}

inline double overlap(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return s;
}

}  // namespace detail

/// Generates train (normal only), validation (lesion in every image) and test
/// (mixed) splits, then runs the generation-time checks: mask heuristic,
/// histogram-overlap geometry of the lesions, and the Bayes-optimal per-pixel
/// likelihood-ratio AUC. The results land in the manifest.
inline Dataset generate(const PhantomConfig& cfg) {
    cfg.validate();
    const auto sig = check_signature(cfg);
    if (cfg.anomaly_rate > 0.0 && !sig.feasible())
        throw DataError("phantom: lesion signature infeasible (joint distance " +
                        std::to_string(sig.best_pair_joint_distance) + ", marginal distance " +
                        std::to_string(sig.best_marginal_distance) + ")");

    Rng master(cfg.seed);
    const std::size_t n_test_anom =
        static_cast<std::size_t>(std::llround(cfg.anomaly_rate * static_cast<double>(cfg.n_test)));
    std::vector<std::uint8_t> test_anom(cfg.n_test, 0);
    std::fill_n(test_anom.begin(), n_test_anom, 1);
    for (std::size_t i = cfg.n_test; i > 1; --i) std::swap(test_anom[i - 1], test_anom[master.below(i)]);

    Dataset ds;
    std::vector<double> tissue_count(cfg.n_tissues, 0.0);
    bool mask_agrees = true;
    auto make = [&](Role role, std::size_t i, bool anomalous) {
        Rng rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(role) + 1, i));
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%04zu", role_name(role), i);
        auto g = detail::generate_one(cfg, rng, anomalous, buf);
        for (const int t : g.tissue)
            if (t >= 0) tissue_count[static_cast<std::size_t>(t)] += 1.0;
        MultiContrastSample unmasked = g.sample;
        unmasked.brain_mask.clear();
        mask_agrees = mask_agrees && background_mask(unmasked) == g.sample.brain_mask;
        ds.split(role).push_back(std::move(g.sample));
    };
    for (std::size_t i = 0; i < cfg.n_train; ++i) make(Role::train, i, false);
    for (std::size_t i = 0; i < cfg.n_val; ++i) make(Role::validation, i, cfg.anomaly_rate > 0.0);
    for (std::size_t i = 0; i < cfg.n_test; ++i) make(Role::test, i, test_anom[i] != 0);

    nlohmann::json m;
    m["format_version"] = 1;
    m["config"] = cfg;
    m["normalization"] = nullptr;
    nlohmann::json samples = nlohmann::json::array();
    for (Role r : {Role::train, Role::validation, Role::test})
        for (const auto& s : ds.split(r))
            samples.push_back({{"id", s.id},
                               {"file", s.id + ".mcad"},
                               {"role", role_name(r)},
                               {"has_label", s.label.has_value()},
                               {"lesion_pixels", s.lesion_pixels()}});
    m["samples"] = samples;

    nlohmann::json oracle;
    oracle["mask_heuristic_agrees"] = mask_agrees;
    oracle["signature_joint_distance"] = sig.best_pair_joint_distance;
    oracle["signature_marginal_distance"] = sig.best_marginal_distance;

    // Bayes-optimal per-pixel score log p_lesion(x) - log p_normal(x) with the
    // generator's own distributions and tissue priors.
    double tissue_total = 0.0;
    for (const double t : tissue_count) tissue_total += t;
    auto bayes_score = [&](const MultiContrastSample& s, std::size_t i) {
        double les = 0.0;
        std::vector<double> comp(cfg.n_tissues);
        for (std::size_t c = 0; c < cfg.contrasts; ++c)
            les += detail::gauss_logpdf(s.image[c * s.pixels() + i], cfg.lesion_mean[c], cfg.lesion_std[c]);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < cfg.n_tissues; ++k) {
            comp[k] = std::log(tissue_count[k] / tissue_total);
            for (std::size_t c = 0; c < cfg.contrasts; ++c)
                comp[k] += detail::gauss_logpdf(s.image[c * s.pixels() + i], cfg.tissue_mean[k][c], cfg.tissue_std[k][c]);
            mx = std::max(mx, comp[k]);
        }
        double z = 0.0;
        for (const double v : comp) z += std::exp(v - mx);
        return les - (mx + std::log(z));
    };
    for (Role r : {Role::validation, Role::test}) {
        std::vector<double> sc;
        std::vector<std::uint8_t> lab;
        for (const auto& s : ds.split(r))
            for (std::size_t i = 0; i < s.pixels(); ++i) {
                if (!s.brain_mask[i]) continue;
                sc.push_back(bayes_score(s, i));
                lab.push_back(s.label ? (*s.label)[i] : 0);
            }
        const std::string key = std::string("bayes_auc_") + role_name(r);
        try {
            oracle[key] = roc_auc(sc, lab);
        } catch (const UndefinedMetricError&) {
            oracle[key] = nullptr;
        }
    }

    // Histogram geometry: lesion vs nearest tissue per contrast, lesion vs all
    // normal tissue per contrast pair.
    std::vector<std::vector<double>> lesion_vals(cfg.contrasts), normal_vals(cfg.contrasts);
    std::vector<std::vector<std::vector<double>>> tissue_vals(cfg.n_tissues,
                                                                std::vector<std::vector<double>>(cfg.contrasts));
    for (Role r : {Role::train, Role::validation, Role::test})
        for (const auto& s : ds.split(r)) {
            // Tissue identity is not stored; recover it as the most likely tissue.
            for (std::size_t i = 0; i < s.pixels(); ++i) {
                if (!s.brain_mask[i]) continue;
                const bool les = s.label && (*s.label)[i];
                std::size_t best = 0;
                double bl = -std::numeric_limits<double>::infinity();
                if (!les)
                    for (std::size_t k = 0; k < cfg.n_tissues; ++k) {
                        double l = 0.0;
                        for (std::size_t c = 0; c < cfg.contrasts; ++c)
                            l += detail::gauss_logpdf(s.image[c * s.pixels() + i], cfg.tissue_mean[k][c],
                                                      cfg.tissue_std[k][c]);
                        if (l > bl) {
                            bl = l;
                            best = k;
                        }
                    }
                for (std::size_t c = 0; c < cfg.contrasts; ++c) {
                    const double v = s.image[c * s.pixels() + i];
                    if (les) {
                        lesion_vals[c].push_back(v);
                    } else {
                        normal_vals[c].push_back(v);
                        tissue_vals[best][c].push_back(v);
                    }
                }
            }
        }
    if (!lesion_vals[0].empty()) {
        std::vector<double> lo(cfg.contrasts), hi(cfg.contrasts);
        for (std::size_t c = 0; c < cfg.contrasts; ++c) {
            lo[c] = std::min(*std::min_element(lesion_vals[c].begin(), lesion_vals[c].end()),
                             *std::min_element(normal_vals[c].begin(), normal_vals[c].end()));
            hi[c] = std::max(*std::max_element(lesion_vals[c].begin(), lesion_vals[c].end()),
                             *std::max_element(normal_vals[c].begin(), normal_vals[c].end())) + 1e-9;
        }
        double best1d = 0.0;
        nlohmann::json ov1 = nlohmann::json::array();
        for (std::size_t c = 0; c < cfg.contrasts; ++c) {
            std::size_t nearest = 0;
            for (std::size_t k = 1; k < cfg.n_tissues; ++k)
                if (std::abs(cfg.lesion_mean[c] - cfg.tissue_mean[k][c]) <
                    std::abs(cfg.lesion_mean[c] - cfg.tissue_mean[nearest][c]))
                    nearest = k;
            const double o = detail::overlap(detail::histogram(lesion_vals[c], lo[c], hi[c], 50),
                                             detail::histogram(tissue_vals[nearest][c], lo[c], hi[c], 50));
            ov1.push_back(o);
            best1d = std::max(best1d, o);
        }
        double best2d = 1.0;
        const std::size_t bins = 25;
        for (std::size_t a = 0; a < cfg.contrasts; ++a)
            for (std::size_t b = a + 1; b < cfg.contrasts; ++b) {
                auto hist2 = [&](const std::vector<double>& va, const std::vector<double>& vb) {
                    std::vector<double> h(bins * bins, 0.0);
                    for (std::size_t i = 0; i < va.size(); ++i) {
                        auto ia = static_cast<long>((va[i] - lo[a]) / (hi[a] - lo[a]) * bins);
                        auto ib = static_cast<long>((vb[i] - lo[b]) / (hi[b] - lo[b]) * bins);
                        ia = std::clamp<long>(ia, 0, bins - 1);
                        ib = std::clamp<long>(ib, 0, bins - 1);
                        h[static_cast<std::size_t>(ia) * bins + static_cast<std::size_t>(ib)] += 1.0;
                    }
                    for (auto& x : h) x /= static_cast<double>(va.size());
                    return h;
                };
                best2d = std::min(best2d, detail::overlap(hist2(lesion_vals[a], lesion_vals[b]),
                                                          hist2(normal_vals[a], normal_vals[b])));
            }
        oracle["overlap_1d"] = ov1;
        oracle["overlap_1d_max"] = best1d;
        oracle["overlap_2d_min"] = best2d;
        if (best1d < 0.2 || best2d > 0.05)
            throw DataError("phantom: lesion geometry check failed (1-D overlap " + std::to_string(best1d) +
                            ", 2-D overlap " + std::to_string(best2d) + ")");
    }
    m["oracle"] = oracle;
    ds.manifest = std::move(m);
    return ds;
}

/// Writes one MCAD file per sample plus manifest.json.
inline void write_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (Role r : {Role::train, Role::validation, Role::test})
        for (const auto& s : ds.split(r)) save_sample(s, (std::filesystem::path(dir) / (s.id + ".mcad")).string());
    std::ofstream out(std::filesystem::path(dir) / "manifest.json");
    out << ds.manifest.dump(2) << '\n';
    if (!out) throw Error("cannot write manifest in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
    const auto mpath = std::filesystem::path(dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw DataError("no manifest.json in " + dir);
    Dataset ds;
    try {
        ds.manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest parse error: ") + e.what());
    }
    for (const auto& e : ds.manifest.at("samples")) {
        auto s = load_sample((std::filesystem::path(dir) / e.at("file").get<std::string>()).string());
        s.id = e.at("id").get<std::string>();
        const Role r = parse_role(e.at("role").get<std::string>());
        if (r == Role::train && s.label) throw DataError("training sample " + s.id + " carries a label");
        ds.split(r).push_back(std::move(s));
    }
    return ds;
}

}  // namespace adm
