#pragma once

// Normalization, augmentation, the two training stages (CtoC translation
// pretraining, then joint DR + DE learning), variants, and checkpointing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adm/bundle.hpp"
#include "adm/data.hpp"
#include "adm/gmm.hpp"
#include "adm/nets.hpp"
#include "adm/ops.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

struct TrainConfig {
    double lambda = 0.0005;
    std::size_t epochs_ctoc = 12;
    std::size_t epochs_joint = 12;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::size_t mixtures = 6;
    double eps = 1e-6;
    std::uint64_t seed = 1;
    double aug_lo = 0.9, aug_hi = 1.1;
    std::size_t base_channels = 32;
    std::size_t n_resblocks = 4;
    /// Weight of the diagonal penalty in the de_penalty variant.
    double penalty_weight = 1e-5;
    /// Cycle translation targets deterministically instead of sampling them.
    bool round_robin_targets = false;
    /// Estimate the frozen mixture from the final epoch's batches instead of a
    /// separate full pass.
    bool freeze_from_last_epoch = false;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (mixtures < 1) throw ConfigError("train: gmm-k must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
        if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
        if (!(aug_lo > 0.0 && aug_lo <= 1.0 && aug_hi >= 1.0))
            throw ConfigError("train: augmentation range must satisfy 0 < lo <= 1 <= hi");
        if (epochs_joint < 1) throw ConfigError("train: epochs_joint must be >= 1");
        CtocConfig{4, base_channels, n_resblocks}.validate();
    }

    /// Epoch counts of the original BraTS-style and ISLES-style regimes.
    static TrainConfig paper_brats() {
        TrainConfig c;
        c.epochs_ctoc = c.epochs_joint = 50;
        return c;
    }
    static TrainConfig paper_isles() {
        TrainConfig c;
        c.lambda = 0.005;
        c.epochs_ctoc = c.epochs_joint = 200;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lambda", c.lambda},
         {"epochs_ctoc", c.epochs_ctoc},
         {"epochs_joint", c.epochs_joint},
         {"batch_size", c.batch_size},
         {"lr", c.lr},
         {"mixtures", c.mixtures},
         {"eps", c.eps},
         {"seed", c.seed},
         {"aug_lo", c.aug_lo},
         {"aug_hi", c.aug_hi},
         {"base_channels", c.base_channels},
         {"n_resblocks", c.n_resblocks},
         {"penalty_weight", c.penalty_weight},
         {"round_robin_targets", c.round_robin_targets},
         {"freeze_from_last_epoch", c.freeze_from_last_epoch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) j.at(k).get_to(v);
    };
    get("lambda", c.lambda);
    get("epochs_ctoc", c.epochs_ctoc);
    get("epochs_joint", c.epochs_joint);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("mixtures", c.mixtures);
    get("eps", c.eps);
    get("seed", c.seed);
    get("aug_lo", c.aug_lo);
    get("aug_hi", c.aug_hi);
    get("base_channels", c.base_channels);
    get("n_resblocks", c.n_resblocks);
    get("penalty_weight", c.penalty_weight);
    get("round_robin_targets", c.round_robin_targets);
    get("freeze_from_last_epoch", c.freeze_from_last_epoch);
}

// ---------------------------------------------------------------------------
// Normalization and augmentation
// ---------------------------------------------------------------------------

/// Per-contrast mean and standard deviation over brain pixels of the whole
/// training set, rounded to f32 (the stored precision).
inline Normalization compute_normalization(const std::vector<MultiContrastSample>& train) {
    if (train.empty()) throw DataError("normalize: empty training set");
    const std::size_t C = train.front().contrasts;
    std::vector<ExactSum> s1(C), s2(C);
    std::uint64_t n = 0;
    for (const auto& s : train) {
        if (s.contrasts != C) throw DataError("normalize: inconsistent contrast counts");
        const Mask m = background_mask(s);
        for (std::size_t i = 0; i < s.pixels(); ++i) {
            if (!m[i]) continue;
            ++n;
            for (std::size_t c = 0; c < C; ++c) {
                const double v = s.image[c * s.pixels() + i];
                s1[c].add(v);
                s2[c].add_product(v, v);
            }
        }
    }
    if (n == 0) throw DataError("normalize: no brain pixels in training set");
    Normalization out;
    for (std::size_t c = 0; c < C; ++c) {
        const double mean = s1[c].value() / static_cast<double>(n);
        const double var = s2[c].value() / static_cast<double>(n) - mean * mean;
        if (!(var > 1e-12)) throw DataError("normalize: contrast " + std::to_string(c) + " has zero variance");
        out.mean.push_back(static_cast<float>(mean));
        out.std.push_back(static_cast<float>(std::sqrt(var)));
    }
    return out;
}

/// (x - mean) / std on brain pixels, 0 on background. The brain mask becomes
/// explicit because normalized brain pixels may be exactly 0.
inline MultiContrastSample apply_normalization(const MultiContrastSample& s, const Normalization& nrm) {
    if (nrm.mean.size() != s.contrasts) throw DataError("normalize: statistics do not match contrast count");
    MultiContrastSample out = s;
    out.brain_mask = background_mask(s);
    const std::size_t P = s.pixels();
    for (std::size_t c = 0; c < s.contrasts; ++c)
        for (std::size_t i = 0; i < P; ++i) {
            float& v = out.image[c * P + i];
            v = out.brain_mask[i] ? (v - nrm.mean[c]) / nrm.std[c] : 0.0f;
        }
    return out;
}

inline std::vector<MultiContrastSample> normalize_all(const std::vector<MultiContrastSample>& v,
                                                      const Normalization& nrm) {
    std::vector<MultiContrastSample> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(apply_normalization(s, nrm));
    return out;
}

/// Multiplies each contrast by a factor drawn from U(lo, hi).
inline std::vector<float> augment(const MultiContrastSample& s, double lo, double hi, Rng& rng) {
    std::vector<float> out(s.image);
    const std::size_t P = s.pixels();
    for (std::size_t c = 0; c < s.contrasts; ++c) {
        const auto k = static_cast<float>(lo == hi ? lo : rng.uniform(lo, hi));
        for (std::size_t i = 0; i < P; ++i) out[c * P + i] *= k;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batches and losses (templated so gradient checks can run in double)
// ---------------------------------------------------------------------------

template <class T>
struct Batch {
    std::size_t B = 0, C = 0, H = 0, W = 0;
    std::vector<T> x;                  // [B,C,H,W]
    std::vector<Mask> masks;           // per sample
    std::vector<std::size_t> pixels;   // brain pixels as b*H*W + p
    std::vector<std::size_t> targets;  // CtoC translation target per sample

    std::size_t hw() const { return H * W; }
    Tensor<T> tensor() const { return Tensor<T>::from({B, C, H, W}, x); }
};

template <class T>
Batch<T> make_batch(const std::vector<const MultiContrastSample*>& samples,
                    const std::vector<std::vector<float>>& images) {
    Batch<T> b;
    b.B = samples.size();
    b.C = samples.front()->contrasts;
    b.H = samples.front()->height;
    b.W = samples.front()->width;
    for (std::size_t i = 0; i < b.B; ++i) {
        const auto& s = *samples[i];
        if (s.contrasts != b.C || s.height != b.H || s.width != b.W) throw DataError("batch: inconsistent sample dims");
        b.x.insert(b.x.end(), images[i].begin(), images[i].end());
        b.masks.push_back(background_mask(s));
        for (std::size_t p = 0; p < b.hw(); ++p)
            if (b.masks.back()[p]) b.pixels.push_back(i * b.hw() + p);
    }
    if (b.pixels.empty()) throw DataError("batch: no brain pixels");
    b.targets.assign(b.B, 0);
    return b;
}

template <class T>
Batch<T> make_batch(const std::vector<const MultiContrastSample*>& samples) {
    std::vector<std::vector<float>> imgs;
    for (const auto* s : samples) imgs.push_back(s->image);
    return make_batch<T>(samples, imgs);
}

/// Median-filled CtoC inputs for (sample, target) pairs, stacked [n,C,H,W].
template <class T>
Tensor<T> ctoc_inputs(const Batch<T>& b, const std::vector<std::pair<std::size_t, std::size_t>>& cases) {
    const std::size_t sz = b.C * b.hw();
    std::vector<T> x;
    x.reserve(cases.size() * sz);
    for (const auto& [i, t] : cases) {
        const auto in = build_ctoc_input<T>(std::span<const T>(b.x).subspan(i * sz, sz), b.masks[i], b.C, t);
        x.insert(x.end(), in.begin(), in.end());
    }
    return Tensor<T>::from({cases.size(), b.C, b.H, b.W}, std::move(x));
}

/// Translation loss: mean squared error of the synthesized target contrast
/// over brain pixels, one target per sample.
template <class T>
Tensor<T> ctoc_loss(const CtocNet<T>& net, const Batch<T>& b) {
    std::vector<std::pair<std::size_t, std::size_t>> cases;
    std::vector<T> target(b.B * b.hw());
    for (std::size_t i = 0; i < b.B; ++i) {
        cases.emplace_back(i, b.targets[i]);
        std::copy_n(b.x.begin() + static_cast<long>((i * b.C + b.targets[i]) * b.hw()), b.hw(),
                    target.begin() + static_cast<long>(i * b.hw()));
    }
    const auto pred = net.forward(ctoc_inputs(b, cases));
    return masked_mse(pred, Tensor<T>::from({b.B, 1, b.H, b.W}, std::move(target)), b.pixels);
}

/// Z_ct = |x_t - G_ct(x with channel t median-filled)| for every target t;
/// [B,C,H,W] without graph history, 0 on background.
template <class T>
Tensor<T> ctoc_features(const CtocNet<T>& net, const Batch<T>& b, std::size_t chunk = 16) {
    std::vector<std::pair<std::size_t, std::size_t>> cases;
    for (std::size_t i = 0; i < b.B; ++i)
        for (std::size_t t = 0; t < b.C; ++t) cases.emplace_back(i, t);
    std::vector<T> z(b.B * b.C * b.hw(), T(0));
    for (std::size_t start = 0; start < cases.size(); start += chunk) {
        const std::vector<std::pair<std::size_t, std::size_t>> part(
            cases.begin() + static_cast<long>(start),
            cases.begin() + static_cast<long>(std::min(cases.size(), start + chunk)));
        const auto pred = net.forward(ctoc_inputs(b, part));
        for (std::size_t k = 0; k < part.size(); ++k) {
            const auto [i, t] = part[k];
            const std::size_t off = (i * b.C + t) * b.hw();
            for (std::size_t p = 0; p < b.hw(); ++p)
                if (b.masks[i][p]) z[off + p] = std::abs(b.x[off + p] - pred.data()[k * b.hw() + p]);
        }
    }
    return Tensor<T>::from({b.B, b.C, b.H, b.W}, std::move(z));
}

template <class T>
struct JointTerms {
    Tensor<T> loss;
    double reconstruction = 0.0;
    double energy = 0.0;
    double penalty = 0.0;
    GmmParams params;
    Tensor<T> z, f;  // gathered features [N,d] and responsibilities [N,C]
};

struct JointOptions {
    Variant variant = Variant::adm;
    double lambda = 0.0005;
    double penalty_weight = 0.0;
    GmmOptions gmm;
};

/// One batch of the joint objective: DR reconstruction MSE plus
/// lambda * mean energy under the mixture estimated from this batch's own
/// features and responsibilities. `zct` is the frozen CtoC feature tensor
/// (undefined when the variant has no CtoC branch).
template <class T>
JointTerms<T> joint_loss(const DrNet<T>* dr, const DeNet<T>& de, const Tensor<T>& zct, const Batch<T>& b,
                         const JointOptions& opt, bool train, Rng& rng) {
    JointTerms<T> out;
    Tensor<T> rec;
    Tensor<T> zmap;
    if (dr) {
        const auto x = b.tensor();
        const auto zdr = dr->encode(x);
        rec = masked_mse(dr->decode(zdr), x, b.pixels);
        out.reconstruction = rec.item();
        zmap = zct.defined() ? concat_channels(zct, zdr) : zdr;
    } else {
        if (!zct.defined()) throw ConfigError("joint_loss: variant needs at least one feature branch");
        zmap = zct;
    }
    auto z = gather_pixels(zmap, b.pixels);
    // Without joint optimization the density estimator sees the features as
    // constants and the DR branch learns from reconstruction only.
    const auto z_de = opt.variant == Variant::adm_woj ? z.detach() : z;
    const auto f = de.forward(z_de, train, rng);
    GmmObjectiveOptions go;
    go.gmm = opt.gmm;
    go.energy_weight = opt.lambda;
    go.penalty_weight = opt.lambda * opt.penalty_weight;
    auto obj = gmm_objective(z_de, f, go);
    out.energy = obj.mean_energy;
    out.penalty = obj.penalty;
    out.params = std::move(obj.params);
    out.loss = rec.defined() ? add(rec, obj.loss) : obj.loss;
    out.z = z;
    out.f = f;
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// Applies one update from the accumulated gradients, then clears them.
    void step(ParamSet<float>& p) {
        auto ent = p.tensors();  // handles share storage with p
        if (m_.empty()) {
            for (auto& t : ent) {
                m_.emplace_back(t.numel(), 0.0f);
                v_.emplace_back(t.numel(), 0.0f);
            }
        }
        ++t_;
        const auto c1 = static_cast<float>(1.0 - std::pow(b1_, static_cast<double>(t_)));
        const auto c2 = static_cast<float>(1.0 - std::pow(b2_, static_cast<double>(t_)));
        const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
        const auto lr = static_cast<float>(lr_), eps = static_cast<float>(eps_);
        for (std::size_t k = 0; k < ent.size(); ++k) {
            auto& t = ent[k];
            auto g = t.grad();
            auto w = t.data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                const float mh = m[i] / c1, vh = v[i] / c2;
                w[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
            std::fill(g.begin(), g.end(), 0.0f);
        }
    }

    std::uint64_t steps() const { return t_; }

    void save(TensorArchive& a, const std::string& prefix, const ParamSet<float>& p) const {
        a.put_u64(prefix + "t", {t_});
        if (m_.empty()) return;
        std::size_t k = 0;
        for (const auto& [n, t] : p.entries()) {
            a.put(prefix + "m/" + n, {static_cast<std::uint32_t>(t.numel())}, m_[k]);
            a.put(prefix + "v/" + n, {static_cast<std::uint32_t>(t.numel())}, v_[k]);
            ++k;
        }
    }

    void load(const TensorArchive& a, const std::string& prefix, const ParamSet<float>& p) {
        t_ = a.get_u64(prefix + "t").at(0);
        m_.clear();
        v_.clear();
        if (t_ == 0) return;
        for (const auto& [n, t] : p.entries()) {
            m_.push_back(a.values(prefix + "m/" + n, t.numel()));
            v_.push_back(a.values(prefix + "v/" + n, t.numel()));
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct TrainReport {
    std::string variant;
    std::string status = "completed";  // completed | singularity | numeric_failure | interrupted
    std::string message;
    std::vector<double> ctoc_loss;
    std::vector<double> joint_reconstruction, joint_energy, joint_penalty, joint_total;
    /// Smallest covariance eigenvalue seen in each joint epoch, before and
    /// after the clamp.
    std::vector<double> joint_min_eig_raw, joint_min_eig;
    double wall_seconds = 0.0;
    std::vector<double> final_pi;
    std::vector<std::vector<double>> final_eigenvalues;
    std::size_t z_dim = 0;

    bool ok() const { return status == "completed"; }

    nlohmann::json to_json() const {
        return {{"variant", variant},
                {"status", status},
                {"message", message},
                {"z_dim", z_dim},
                {"ctoc_loss", ctoc_loss},
                {"joint_reconstruction", joint_reconstruction},
                {"joint_energy", joint_energy},
                {"joint_penalty", joint_penalty},
                {"joint_total", joint_total},
                {"joint_min_eig_raw", joint_min_eig_raw},
                {"joint_min_eig", joint_min_eig},
                {"wall_seconds", wall_seconds},
                {"final_pi", final_pi},
                {"final_eigenvalues", final_eigenvalues}};
    }
};

struct TrainOptions {
    /// Written after every epoch when non-empty.
    std::string checkpoint_path;
    /// Continue from checkpoint_path if it exists.
    bool resume = false;
    /// Stop with status "interrupted" after this many epochs in this call
    /// (0 = no limit). Used to exercise resume.
    std::size_t max_epochs_this_run = 0;
    /// Start stage 2 from an already trained CtoC instead of training one.
    std::optional<CtocNet<float>> pretrained_ctoc;
    /// Stage-1 loss curve belonging to pretrained_ctoc, copied into the report.
    std::vector<double> pretrained_ctoc_loss;
};

struct TrainResult {
    std::optional<AdmModel> model;
    TrainReport report;
};

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return mix_seed(seed, stream, 0x5eed); }

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (const double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Numeric fingerprint of everything that must match for a checkpoint to be
/// resumable.
inline std::vector<double> config_fingerprint(const TrainConfig& c, Variant v, std::size_t n_train) {
    return {c.lambda,
            static_cast<double>(c.epochs_ctoc),
            static_cast<double>(c.epochs_joint),
            static_cast<double>(c.batch_size),
            c.lr,
            static_cast<double>(c.mixtures),
            c.eps,
            static_cast<double>(c.seed),
            c.aug_lo,
            c.aug_hi,
            static_cast<double>(c.base_channels),
            static_cast<double>(c.n_resblocks),
            c.penalty_weight,
            c.round_robin_targets ? 1.0 : 0.0,
            c.freeze_from_last_epoch ? 1.0 : 0.0,
            static_cast<double>(v),
            static_cast<double>(n_train)};
}

inline GmmOptions gmm_options(const TrainConfig& c, Variant v) {
    GmmOptions g;
    g.eps = c.eps;
    g.clamp = !(v == Variant::de_baseline || v == Variant::de_penalty);
    return g;
}

}  // namespace detail

/// Feature tensor [N,d] for scoring or freezing: frozen networks, no dropout.
inline Tensor<float> inference_features(const AdmModel& m, const Batch<float>& b) {
    Tensor<float> zct;
    if (m.ctoc) zct = ctoc_features(*m.ctoc, b);
    Tensor<float> zmap = zct;
    if (m.dr) {
        const auto zdr = m.dr->encode(b.tensor());
        zmap = zct.defined() ? concat_channels(zct, zdr) : zdr;
    }
    return gather_pixels(zmap, b.pixels);
}

/// A copy whose parameters record no autograd history.
inline AdmModel inference_copy(const AdmModel& m) {
    AdmModel c = m;
    if (c.ctoc) {
        c.ctoc = CtocNet<float>(c.ctoc->config(), c.ctoc->params().clone());
        c.ctoc->params().set_requires_grad(false);
    }
    if (c.dr) {
        c.dr = DrNet<float>(c.dr->config(), c.dr->params().clone());
        c.dr->params().set_requires_grad(false);
    }
    c.de = DeNet<float>(c.de.config(), c.de.params().clone());
    c.de.params().set_requires_grad(false);
    return c;
}

/// Stage 1 on its own: trains a CtoC network on normalized normal samples.
/// Returns the network and per-epoch losses.
inline std::pair<CtocNet<float>, std::vector<double>> train_ctoc(const std::vector<MultiContrastSample>& train,
                                                                 const TrainConfig& cfg, Rng& init_rng, Rng& rng,
                                                                 std::size_t first_epoch = 0,
                                                                 std::optional<CtocNet<float>> start = {},
                                                                 Adam* adam_state = nullptr,
                                                                 const std::function<bool(std::size_t, const CtocNet<float>&, const Adam&,
                                                                                          const std::vector<double>&)>& on_epoch = {},
                                                                 std::vector<double> losses = {}) {
    const std::size_t C = train.front().contrasts;
    CtocNet<float> net = start ? *start : CtocNet<float>::init({C, cfg.base_channels, cfg.n_resblocks}, init_rng);
    Adam local(cfg.lr);
    Adam& adam = adam_state ? *adam_state : local;
    for (std::size_t e = first_epoch; e < cfg.epochs_ctoc; ++e) {
        const auto order = detail::shuffled(train.size(), rng);
        std::vector<double> batch_losses;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            std::vector<const MultiContrastSample*> ptrs;
            std::vector<std::vector<float>> imgs;
            std::vector<std::size_t> targets;
            for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) {
                ptrs.push_back(&train[order[k]]);
                imgs.push_back(augment(train[order[k]], cfg.aug_lo, cfg.aug_hi, rng));
                targets.push_back(cfg.round_robin_targets ? (e * train.size() + k) % C
                                                          : static_cast<std::size_t>(rng.below(C)));
            }
            auto b = make_batch<float>(ptrs, imgs);
            b.targets = targets;
            const auto loss = ctoc_loss(net, b);
            loss.backward();
            adam.step(net.params());
            batch_losses.push_back(loss.item());
        }
        losses.push_back(detail::mean_of(batch_losses));
        if (on_epoch && !on_epoch(e + 1, net, adam, losses)) break;
    }
    return {std::move(net), std::move(losses)};
}

/// Two-stage training of the chosen variant on raw (un-normalized) splits.
/// The returned model has passed through a save/load cycle, so scoring it in
/// memory and scoring a reloaded bundle give identical results.
inline TrainResult train_variant(Variant variant, const std::vector<MultiContrastSample>& raw_train,
                                 const TrainConfig& cfg, const TrainOptions& opt = {}) {
    cfg.validate();
    if (raw_train.empty()) throw DataError("train: empty training split");
    for (const auto& s : raw_train)
        if (s.label) throw DataError("train: training sample " + s.id + " carries an anomaly label");
    const auto t0 = std::chrono::steady_clock::now();

    TrainResult res;
    auto& rep = res.report;
    rep.variant = variant_name(variant);

    AdmModel m;
    m.variant = variant;
    m.contrasts = raw_train.front().contrasts;
    m.ctoc_cfg = {m.contrasts, cfg.base_channels, cfg.n_resblocks};
    m.gmm_opt = detail::gmm_options(cfg, variant);
    m.norm = compute_normalization(raw_train);
    const auto train = normalize_all(raw_train, m.norm);
    m.de_cfg.z_dim = (uses_ctoc(variant) ? m.contrasts : 0) + (uses_dr(variant) ? DrConfig::features : 0);
    m.de_cfg.mixtures = cfg.mixtures;
    rep.z_dim = m.de_cfg.z_dim;

    Rng init_rng(detail::derive_seed(cfg.seed, 1));
    Rng rng(detail::derive_seed(cfg.seed, 2));

    // Networks are initialized in a fixed order regardless of resume.
    std::optional<CtocNet<float>> ctoc;
    if (uses_ctoc(variant)) ctoc = CtocNet<float>::init(m.ctoc_cfg, init_rng);
    std::optional<DrNet<float>> dr;
    if (uses_dr(variant)) dr = DrNet<float>::init(DrConfig{m.contrasts}, init_rng);
    DeNet<float> de = DeNet<float>::init(m.de_cfg, init_rng);

    Adam adam_ctoc(cfg.lr), adam_dr(cfg.lr), adam_de(cfg.lr);
    std::size_t stage = 0, epoch = 0;  // epochs completed within `stage`
    const auto fingerprint = detail::config_fingerprint(cfg, variant, raw_train.size());

    auto save_checkpoint = [&]() {
        if (opt.checkpoint_path.empty()) return;
        TensorArchive a;
        a.put_f64("ckpt/config", fingerprint);
        a.put_u64("ckpt/position", {stage, epoch});
        const auto st = rng.state();
        a.put_u64("ckpt/rng", std::vector<std::uint64_t>(st.begin(), st.end()));
        if (ctoc) {
            put_params(a, ctoc->params());
            adam_ctoc.save(a, "adam_ctoc/", ctoc->params());
        }
        if (dr) {
            put_params(a, dr->params());
            adam_dr.save(a, "adam_dr/", dr->params());
        }
        put_params(a, de.params());
        adam_de.save(a, "adam_de/", de.params());
        a.put_f64("report/ctoc_loss", rep.ctoc_loss);
        a.put_f64("report/joint_reconstruction", rep.joint_reconstruction);
        a.put_f64("report/joint_energy", rep.joint_energy);
        a.put_f64("report/joint_penalty", rep.joint_penalty);
        a.put_f64("report/joint_total", rep.joint_total);
        a.put_f64("report/joint_min_eig_raw", rep.joint_min_eig_raw);
        a.put_f64("report/joint_min_eig", rep.joint_min_eig);
        const std::string tmp = opt.checkpoint_path + ".tmp";
        a.save(tmp);
        std::filesystem::rename(tmp, opt.checkpoint_path);
    };

    if (opt.resume && !opt.checkpoint_path.empty() && std::filesystem::exists(opt.checkpoint_path)) {
        const auto a = TensorArchive::load(opt.checkpoint_path);
        if (a.get_f64("ckpt/config") != fingerprint)
            throw ConfigError("checkpoint " + opt.checkpoint_path + " was written with a different configuration");
        const auto pos = a.get_u64("ckpt/position");
        stage = pos.at(0);
        epoch = pos.at(1);
        const auto st = a.get_u64("ckpt/rng");
        rng.set_state({st.at(0), st.at(1), st.at(2), st.at(3)});
        if (ctoc) {
            ctoc = CtocNet<float>(m.ctoc_cfg, get_params(a, ctoc->params()));
            adam_ctoc.load(a, "adam_ctoc/", ctoc->params());
        }
        if (dr) {
            dr = DrNet<float>(DrConfig{m.contrasts}, get_params(a, dr->params()));
            adam_dr.load(a, "adam_dr/", dr->params());
        }
        de = DeNet<float>(m.de_cfg, get_params(a, de.params()));
        adam_de.load(a, "adam_de/", de.params());
        rep.ctoc_loss = a.get_f64("report/ctoc_loss");
        rep.joint_reconstruction = a.get_f64("report/joint_reconstruction");
        rep.joint_energy = a.get_f64("report/joint_energy");
        rep.joint_penalty = a.get_f64("report/joint_penalty");
        rep.joint_total = a.get_f64("report/joint_total");
        rep.joint_min_eig_raw = a.get_f64("report/joint_min_eig_raw");
        rep.joint_min_eig = a.get_f64("report/joint_min_eig");
    }

    std::size_t epochs_run = 0;
    auto budget_left = [&]() { return opt.max_epochs_this_run == 0 || epochs_run < opt.max_epochs_this_run; };
    auto finish = [&](const char* status, std::string msg) {
        rep.status = status;
        rep.message = std::move(msg);
        rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return res;
    };

    try {
        // Stage 1: contrast translation.
        if (stage == 0) {
            if (ctoc && opt.pretrained_ctoc) {
                ctoc = CtocNet<float>(m.ctoc_cfg, opt.pretrained_ctoc->params().clone());
                rep.ctoc_loss = opt.pretrained_ctoc_loss;
            } else if (ctoc) {
                bool stopped = false;
                auto r = train_ctoc(train, cfg, init_rng, rng, epoch, ctoc, &adam_ctoc,
                                    [&](std::size_t done, const CtocNet<float>& net, const Adam&,
                                        const std::vector<double>& losses) {
                                        ctoc = net;
                                        rep.ctoc_loss = losses;
                                        epoch = done;
                                        ++epochs_run;
                                        save_checkpoint();
                                        if (!budget_left() && done < cfg.epochs_ctoc) {
                                            stopped = true;
                                            return false;
                                        }
                                        return true;
                                    },
                                    rep.ctoc_loss);
                ctoc = std::move(r.first);
                rep.ctoc_loss = std::move(r.second);
                if (stopped) return finish("interrupted", "stopped after " + std::to_string(epochs_run) + " epochs");
            }
            stage = 1;
            epoch = 0;
            save_checkpoint();
        }

        // Stage 2: joint DR + DE with frozen CtoC.
        std::optional<CtocNet<float>> frozen;
        if (ctoc) {
            frozen = CtocNet<float>(m.ctoc_cfg, ctoc->params().clone());
            frozen->params().set_requires_grad(false);
        }
        JointOptions jo;
        jo.variant = variant;
        jo.lambda = cfg.lambda;
        jo.penalty_weight = variant == Variant::de_penalty ? cfg.penalty_weight : 0.0;
        jo.gmm = m.gmm_opt;
        std::optional<BatchStats> tail;
        while (epoch < cfg.epochs_joint) {
            if (!budget_left())
                return finish("interrupted", "stopped after " + std::to_string(epochs_run) + " epochs");
            const bool last = epoch + 1 == cfg.epochs_joint;
            if (last && cfg.freeze_from_last_epoch) tail.emplace(m.de_cfg.z_dim, m.de_cfg.mixtures);
            const auto order = detail::shuffled(train.size(), rng);
            std::vector<double> rec, en, pen, tot;
            double min_raw = std::numeric_limits<double>::infinity(), min_pd = min_raw;
            for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
                std::vector<const MultiContrastSample*> ptrs;
                std::vector<std::vector<float>> imgs;
                for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) {
                    ptrs.push_back(&train[order[k]]);
                    imgs.push_back(augment(train[order[k]], cfg.aug_lo, cfg.aug_hi, rng));
                }
                const auto b = make_batch<float>(ptrs, imgs);
                const Tensor<float> zct = frozen ? ctoc_features(*frozen, b) : Tensor<float>{};
                auto terms = joint_loss(dr ? &*dr : nullptr, de, zct, b, jo, true, rng);
                terms.loss.backward();
                if (dr) adam_dr.step(dr->params());
                adam_de.step(de.params());
                rec.push_back(terms.reconstruction);
                en.push_back(terms.energy);
                pen.push_back(terms.penalty);
                tot.push_back(terms.loss.item());
                min_raw = std::min(min_raw, terms.params.min_raw_eigenvalue());
                min_pd = std::min(min_pd, terms.params.min_eigenvalue());
                if (tail) {
                    std::vector<double> zd(terms.z.data().begin(), terms.z.data().end());
                    std::vector<double> fd(terms.f.data().begin(), terms.f.data().end());
                    tail->accumulate(zd, fd);
                }
            }
            rep.joint_reconstruction.push_back(detail::mean_of(rec));
            rep.joint_energy.push_back(detail::mean_of(en));
            rep.joint_penalty.push_back(detail::mean_of(pen));
            rep.joint_total.push_back(detail::mean_of(tot));
            rep.joint_min_eig_raw.push_back(min_raw);
            rep.joint_min_eig.push_back(min_pd);
            ++epochs_run;
            ++epoch;
            save_checkpoint();
        }

        // Frozen mixture from the trained, dropout-free networks.
        if (ctoc) m.ctoc = *ctoc;
        if (dr) m.dr = *dr;
        m.de = de;
        const auto inf = inference_copy(m);
        BatchStats stats(m.de_cfg.z_dim, m.de_cfg.mixtures);
        if (tail) {
            stats = *tail;
        } else {
            Rng unused(0);
            for (std::size_t s = 0; s < train.size(); s += cfg.batch_size) {
                std::vector<const MultiContrastSample*> ptrs;
                for (std::size_t k = s; k < std::min(train.size(), s + cfg.batch_size); ++k) ptrs.push_back(&train[k]);
                const auto b = make_batch<float>(ptrs);
                const auto z = inference_features(inf, b);
                const auto f = inf.de.forward(z, false, unused);
                std::vector<double> zd(z.data().begin(), z.data().end());
                std::vector<double> fd(f.data().begin(), f.data().end());
                stats.accumulate(zd, fd);
            }
        }
        m.gmm = freeze(stats, m.gmm_opt);
        res.model = canonicalize(m);
        rep.final_pi = res.model->gmm->pi;
        rep.final_eigenvalues = res.model->gmm->clamped_eigenvalues;
    } catch (const SingularityError& e) {
        return finish("singularity", e.what());
    } catch (const NumericError& e) {
        return finish("numeric_failure", e.what());
    }
    return finish("completed", "");
}

}  // namespace adm
