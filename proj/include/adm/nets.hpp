#pragma once

// The three networks: contrast-to-contrast translation (CtoC), dimension
// reduction encoder/decoder (DR), and the density-estimation responsibility
// network (DE).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adm/error.hpp"
#include "adm/ops.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Ordered, named parameter tensors.
template <class T>
class ParamSet {
public:
    void add(std::string name, Tensor<T> t) {
        t.set_requires_grad(true);
        entries_.emplace_back(std::move(name), std::move(t));
    }

    const Tensor<T>& get(const std::string& name) const {
        for (const auto& [n, t] : entries_)
            if (n == name) return t;
        throw ConfigError("unknown parameter " + name);
    }

    bool contains(const std::string& name) const {
        return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& e : entries_) out.push_back(e.second);
        return out;
    }

    void zero_grad() {
        for (auto& e : entries_) e.second.zero_grad();
    }

    /// Inference copies switch this off so forward passes record no graph.
    void set_requires_grad(bool v) {
        for (auto& e : entries_) e.second.set_requires_grad(v);
    }

    /// Deep copy with fresh leaves.
    ParamSet clone() const {
        ParamSet p;
        for (const auto& [n, t] : entries_) p.add(n, t.clone(true));
        return p;
    }

    /// Same names, values converted to another scalar type.
    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> p;
        for (const auto& [n, t] : entries_) p.add(n, tensor_cast<U>(t, true));
        return p;
    }

    std::size_t numel() const {
        std::size_t s = 0;
        for (const auto& e : entries_) s += e.second.numel();
        return s;
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

namespace init {

enum class Gain { relu, tanh };

/// He-uniform for ReLU layers, Xavier-uniform for tanh/linear layers.
template <class T>
Tensor<T> uniform_weight(Shape shape, std::size_t fan_in, std::size_t fan_out, Gain gain, Rng& rng) {
    const double bound = gain == Gain::relu ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                            : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
void conv(ParamSet<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Gain gain,
          Rng& rng) {
    p.add(name + "/w", uniform_weight<T>({cout, cin, k, k}, cin * k * k, cout * k * k, gain, rng));
    p.add(name + "/b", Tensor<T>::zeros({cout}));
}

template <class T>
void deconv(ParamSet<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Gain gain,
            Rng& rng) {
    p.add(name + "/w", uniform_weight<T>({cin, cout, k, k}, cin * k * k, cout * k * k, gain, rng));
    p.add(name + "/b", Tensor<T>::zeros({cout}));
}

template <class T>
void norm(ParamSet<T>& p, const std::string& name, std::size_t c) {
    p.add(name + "/gamma", Tensor<T>::full({c}, T(1)));
    p.add(name + "/beta", Tensor<T>::zeros({c}));
}

template <class T>
void fc(ParamSet<T>& p, const std::string& name, std::size_t din, std::size_t dout, Gain gain, Rng& rng) {
    p.add(name + "/w", uniform_weight<T>({dout, din}, din, dout, gain, rng));
    p.add(name + "/b", Tensor<T>::zeros({dout}));
}

}  // namespace init

// ---------------------------------------------------------------------------
// CtoC
// ---------------------------------------------------------------------------

struct CtocConfig {
    std::size_t contrasts = 4;
    std::size_t base_channels = 32;
    std::size_t n_resblocks = 4;

    void validate() const {
        if (n_resblocks < 1) throw ConfigError("CtocConfig: n_resblocks must be >= 1");
        if (base_channels < 4) throw ConfigError("CtocConfig: base_channels must be >= 4");
        if (contrasts < 2) throw ConfigError("CtocConfig: need at least two contrasts");
    }

    /// Width preset with 256-channel residual blocks.
    static CtocConfig wide(std::size_t contrasts = 4) { return {contrasts, 256, 4}; }

    static constexpr std::size_t downsample = 4;
};

/// Encoder (two stride-2 convs) -> residual blocks -> decoder (two stride-2
/// transposed convs) -> 3x3 single-channel head. Conv layers are followed by
/// instance norm and ReLU except the head.
template <class T>
class CtocNet {
public:
    CtocNet() = default;
    CtocNet(CtocConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) { cfg_.validate(); }

    static CtocNet init(const CtocConfig& cfg, Rng& rng) {
        cfg.validate();
        using init::Gain;
        const std::size_t b = cfg.base_channels, h1 = b / 2, h2 = std::max<std::size_t>(1, b / 4);
        ParamSet<T> p;
        init::conv(p, "ctoc/enc0", cfg.contrasts, h1, 3, Gain::relu, rng);
        init::norm(p, "ctoc/enc0/in", h1);
        init::conv(p, "ctoc/enc1", h1, b, 3, Gain::relu, rng);
        init::norm(p, "ctoc/enc1/in", b);
        for (std::size_t r = 0; r < cfg.n_resblocks; ++r) {
            const std::string n = "ctoc/res" + std::to_string(r);
            init::conv(p, n + "/conv0", b, b, 3, Gain::relu, rng);
            init::norm(p, n + "/in0", b);
            init::conv(p, n + "/conv1", b, b, 3, Gain::relu, rng);
            init::norm(p, n + "/in1", b);
        }
        init::deconv(p, "ctoc/dec0", b, h1, 3, Gain::relu, rng);
        init::norm(p, "ctoc/dec0/in", h1);
        init::deconv(p, "ctoc/dec1", h1, h2, 3, Gain::relu, rng);
        init::norm(p, "ctoc/dec1/in", h2);
        init::conv(p, "ctoc/head", h2, 1, 3, Gain::tanh, rng);
        return CtocNet(cfg, std::move(p));
    }

    const CtocConfig& config() const { return cfg_; }
    const ParamSet<T>& params() const { return params_; }
    ParamSet<T>& params() { return params_; }

    /// xin [B,C,H,W] -> synthesized target contrast [B,1,H,W].
    Tensor<T> forward(const Tensor<T>& xin) const {
        if (xin.rank() != 4 || xin.dim(1) != cfg_.contrasts)
            throw ConfigError("ctoc_forward: expected [B," + std::to_string(cfg_.contrasts) + ",H,W], got " +
                              shape_str(xin.shape()));
        if (xin.dim(2) % CtocConfig::downsample || xin.dim(3) % CtocConfig::downsample)
            throw ConfigError("ctoc_forward: H and W must be divisible by " +
                              std::to_string(CtocConfig::downsample) + ", got " + shape_str(xin.shape()));
        auto block = [&](const Tensor<T>& x, const std::string& conv, const std::string& norm, std::size_t stride,
                         bool act) {
            auto y = conv2d(x, w(conv + "/w"), w(conv + "/b"), stride, 1);
            y = instance_norm(y, w(norm + "/gamma"), w(norm + "/beta"));
            return act ? relu(y) : y;
        };
        auto h = block(xin, "ctoc/enc0", "ctoc/enc0/in", 2, true);
        h = block(h, "ctoc/enc1", "ctoc/enc1/in", 2, true);
        for (std::size_t r = 0; r < cfg_.n_resblocks; ++r) {
            const std::string n = "ctoc/res" + std::to_string(r);
            auto y = block(h, n + "/conv0", n + "/in0", 1, true);
            y = block(y, n + "/conv1", n + "/in1", 1, false);
            h = add(h, y);
        }
        for (const char* dec : {"ctoc/dec0", "ctoc/dec1"}) {
            const std::string d = dec;
            h = conv_transpose2d(h, w(d + "/w"), w(d + "/b"), 2, 1, 1);
            h = relu(instance_norm(h, w(d + "/in/gamma"), w(d + "/in/beta")));
        }
        return conv2d(h, w("ctoc/head/w"), w("ctoc/head/b"), 1, 1);
    }

private:
    const Tensor<T>& w(const std::string& n) const { return params_.get(n); }

    CtocConfig cfg_;
    ParamSet<T> params_;
};

/// Median of `values` at the selected indices; mean of the two middle values
/// for an even count.
template <class T>
double masked_median(std::span<const T> values, std::span<const std::uint8_t> mask) {
    std::vector<T> v;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (mask[i]) v.push_back(values[i]);
    if (v.empty()) throw DataError("median over an empty brain mask");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
    return 0.5 * (lower + upper);
}

/// Copies image [C,H,W] (channel-major) and replaces channel `target` with a
/// constant image holding the masked median of that channel.
template <class T>
std::vector<T> build_ctoc_input(std::span<const T> image, std::span<const std::uint8_t> mask, std::size_t contrasts,
                                std::size_t target) {
    if (target >= contrasts) throw ConfigError("build_ctoc_input: target contrast out of range");
    const std::size_t hw = mask.size();
    if (image.size() != contrasts * hw) throw ConfigError("build_ctoc_input: image/mask size mismatch");
    const double m = masked_median(image.subspan(target * hw, hw), mask);
    std::vector<T> out(image.begin(), image.end());
    std::fill_n(out.begin() + static_cast<long>(target * hw), hw, static_cast<T>(m));
    return out;
}

// ---------------------------------------------------------------------------
// DR
// ---------------------------------------------------------------------------

struct DrConfig {
    std::size_t contrasts = 4;
    static constexpr std::size_t features = 3;
};

/// G_dr: Conv3x3(C,16)-tanh-Conv3x3(16,8)-tanh-Conv3x3(8,3).
/// F_dr: Conv1x1(3,8)-tanh-Conv1x1(8,16)-tanh-Conv1x1(16,C).
template <class T>
class DrNet {
public:
    DrNet() = default;
    DrNet(DrConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {}

    static DrNet init(const DrConfig& cfg, Rng& rng) {
        using init::Gain;
        ParamSet<T> p;
        init::conv(p, "dr/enc0", cfg.contrasts, 16, 3, Gain::tanh, rng);
        init::conv(p, "dr/enc1", 16, 8, 3, Gain::tanh, rng);
        init::conv(p, "dr/enc2", 8, DrConfig::features, 3, Gain::tanh, rng);
        init::conv(p, "dr/dec0", DrConfig::features, 8, 1, Gain::tanh, rng);
        init::conv(p, "dr/dec1", 8, 16, 1, Gain::tanh, rng);
        init::conv(p, "dr/dec2", 16, cfg.contrasts, 1, Gain::tanh, rng);
        return DrNet(cfg, std::move(p));
    }

    const DrConfig& config() const { return cfg_; }
    const ParamSet<T>& params() const { return params_; }
    ParamSet<T>& params() { return params_; }

    /// x [B,C,H,W] -> Z_dr [B,3,H,W]
    Tensor<T> encode(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.contrasts)
            throw ConfigError("dr_forward: expected [B," + std::to_string(cfg_.contrasts) + ",H,W], got " +
                              shape_str(x.shape()));
        auto h = tanh(conv2d(x, w("dr/enc0/w"), w("dr/enc0/b"), 1, 1));
        h = tanh(conv2d(h, w("dr/enc1/w"), w("dr/enc1/b"), 1, 1));
        return conv2d(h, w("dr/enc2/w"), w("dr/enc2/b"), 1, 1);
    }

    /// Z_dr [B,3,H,W] -> X_dr [B,C,H,W]; every layer is 1x1.
    Tensor<T> decode(const Tensor<T>& z) const {
        if (z.rank() != 4 || z.dim(1) != DrConfig::features)
            throw ConfigError("dr_reconstruct: expected [B,3,H,W], got " + shape_str(z.shape()));
        auto h = tanh(conv2d(z, w("dr/dec0/w"), w("dr/dec0/b"), 1, 0));
        h = tanh(conv2d(h, w("dr/dec1/w"), w("dr/dec1/b"), 1, 0));
        return conv2d(h, w("dr/dec2/w"), w("dr/dec2/b"), 1, 0);
    }

private:
    const Tensor<T>& w(const std::string& n) const { return params_.get(n); }

    DrConfig cfg_;
    ParamSet<T> params_;
};

// ---------------------------------------------------------------------------
// DE
// ---------------------------------------------------------------------------

struct DeConfig {
    std::size_t z_dim = 7;
    std::size_t mixtures = 6;
    std::size_t hidden = 8;
    double dropout = 0.5;

    void validate() const {
        if (mixtures < 1) throw ConfigError("DeConfig: need at least one mixture component");
        if (z_dim < 1) throw ConfigError("DeConfig: z_dim must be >= 1");
    }
};

/// FC(z_dim,8)-tanh-Dropout(0.5)-FC(8,C)-softmax.
template <class T>
class DeNet {
public:
    DeNet() = default;
    DeNet(DeConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) { cfg_.validate(); }

    static DeNet init(const DeConfig& cfg, Rng& rng) {
        cfg.validate();
        ParamSet<T> p;
        init::fc(p, "de/fc0", cfg.z_dim, cfg.hidden, init::Gain::tanh, rng);
        init::fc(p, "de/fc1", cfg.hidden, cfg.mixtures, init::Gain::tanh, rng);
        return DeNet(cfg, std::move(p));
    }

    const DeConfig& config() const { return cfg_; }
    const ParamSet<T>& params() const { return params_; }
    ParamSet<T>& params() { return params_; }

    /// z [N,z_dim] -> responsibilities [N,C].
    Tensor<T> forward(const Tensor<T>& z, bool train, Rng& rng) const {
        if (z.rank() != 2 || z.dim(1) != cfg_.z_dim)
            throw ConfigError("de_forward: expected [N," + std::to_string(cfg_.z_dim) + "], got " +
                              shape_str(z.shape()));
        auto h = tanh(dense(z, params_.get("de/fc0/w"), params_.get("de/fc0/b")));
        h = dropout(h, cfg_.dropout, train, rng);
        return softmax_rows(dense(h, params_.get("de/fc1/w"), params_.get("de/fc1/b")));
    }

private:
    DeConfig cfg_;
    ParamSet<T> params_;
};

}  // namespace adm
