#pragma once

// ADMB archives of named f32 tensors, and the scoreable model they carry.

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adm/binary_io.hpp"
#include "adm/error.hpp"
#include "adm/gmm.hpp"
#include "adm/nets.hpp"

namespace adm {

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

/// Ordered collection of named f32 tensors with a little-endian binary form:
/// "ADMB", u32 version, u32 tensor count, then per tensor u32 name length,
/// name bytes, u32 rank, rank x u32 dims, f32 payload.
class TensorArchive {
public:
    static constexpr std::uint32_t kVersion = 1;

    void put(std::string name, std::vector<std::uint32_t> dims, std::vector<float> data) {
        std::size_t n = 1;
        for (const auto d : dims) n *= d;
        if (n != data.size()) throw ConfigError("archive: payload size mismatch for " + name);
        if (contains(name)) throw ConfigError("archive: duplicate tensor " + name);
        entries_.push_back({std::move(name), std::move(dims), std::move(data)});
    }

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        std::vector<std::uint32_t> dims;
        for (const auto d : t.shape()) dims.push_back(static_cast<std::uint32_t>(d));
        std::vector<float> v(t.data().begin(), t.data().end());
        put(name, std::move(dims), std::move(v));
    }

    void put_scalars(const std::string& name, const std::vector<float>& v) {
        put(name, {static_cast<std::uint32_t>(v.size())}, v);
    }

    /// Stores doubles exactly as four 16-bit chunks each.
    void put_f64(const std::string& name, const std::vector<double>& v) {
        std::vector<float> out;
        out.reserve(4 * v.size());
        for (const double x : v) {
            const auto bits = std::bit_cast<std::uint64_t>(x);
            for (int k = 0; k < 4; ++k) out.push_back(static_cast<float>((bits >> (16 * k)) & 0xffffu));
        }
        put(name, {static_cast<std::uint32_t>(v.size()), 4}, std::move(out));
    }

    void put_u64(const std::string& name, const std::vector<std::uint64_t>& v) {
        std::vector<double> d;
        for (const auto x : v) d.push_back(std::bit_cast<double>(x));
        put_f64(name, d);
    }

    bool contains(const std::string& name) const { return find(name) != nullptr; }

    const NamedTensor& get(const std::string& name) const {
        if (const auto* e = find(name)) return *e;
        throw FormatError("archive: missing tensor " + name, 0);
    }

    const std::vector<float>& values(const std::string& name, std::size_t expected) const {
        const auto& e = get(name);
        if (e.data.size() != expected)
            throw FormatError("archive: tensor " + name + " has " + std::to_string(e.data.size()) +
                                  " values, expected " + std::to_string(expected),
                              0);
        return e.data;
    }

    std::vector<double> get_f64(const std::string& name) const {
        const auto& e = get(name);
        if (e.dims.size() != 2 || e.dims[1] != 4) throw FormatError("archive: " + name + " is not an f64 tensor", 0);
        std::vector<double> out(e.dims[0]);
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint64_t bits = 0;
            for (int k = 0; k < 4; ++k) {
                const float chunk = e.data[4 * i + static_cast<std::size_t>(k)];
                if (!(chunk >= 0.0f && chunk <= 65535.0f) || chunk != static_cast<float>(static_cast<std::uint32_t>(chunk)))
                    throw FormatError("archive: corrupt f64 chunk in " + name, 0);
                bits |= static_cast<std::uint64_t>(chunk) << (16 * k);
            }
            out[i] = std::bit_cast<double>(bits);
        }
        return out;
    }

    std::vector<std::uint64_t> get_u64(const std::string& name) const {
        std::vector<std::uint64_t> out;
        for (const double d : get_f64(name)) out.push_back(std::bit_cast<std::uint64_t>(d));
        return out;
    }

    template <class T>
    Tensor<T> tensor(const std::string& name, bool requires_grad = false) const {
        const auto& e = get(name);
        Shape s(e.dims.begin(), e.dims.end());
        std::vector<T> v(e.data.begin(), e.data.end());
        return Tensor<T>::from(std::move(s), std::move(v), requires_grad);
    }

    const std::vector<NamedTensor>& entries() const { return entries_; }

    std::vector<std::uint8_t> encode() const {
        io::Writer w;
        w.bytes("ADMB", 4);
        w.u32(kVersion);
        w.u32(static_cast<std::uint32_t>(entries_.size()));
        for (const auto& e : entries_) {
            w.u32(static_cast<std::uint32_t>(e.name.size()));
            w.bytes(e.name.data(), e.name.size());
            w.u32(static_cast<std::uint32_t>(e.dims.size()));
            for (const auto d : e.dims) w.u32(d);
            for (const float v : e.data) w.f32(v);
        }
        return w.buffer();
    }

    static TensorArchive decode(std::vector<std::uint8_t> bytes) {
        io::Reader r(std::move(bytes));
        char magic[4];
        r.bytes(magic, 4, "magic");
        const std::string m(magic, 4);
        if (m == "BMDA") throw FormatError("ADMB: foreign byte order", 0);
        if (m != "ADMB") throw FormatError("ADMB: bad magic", 0);
        const std::size_t vpos = r.offset();
        if (r.u32("version") != kVersion) throw FormatError("ADMB: unsupported version", vpos);
        const std::uint32_t count = r.u32("tensor count");
        TensorArchive a;
        for (std::uint32_t t = 0; t < count; ++t) {
            const std::size_t start = r.offset();
            const std::uint32_t len = r.u32("name length");
            if (len == 0 || len > 4096) throw FormatError("ADMB: implausible name length", start);
            std::string name(len, '\0');
            r.bytes(name.data(), len, "name");
            const std::size_t rpos = r.offset();
            const std::uint32_t rank = r.u32("rank");
            if (rank > 8) throw FormatError("ADMB: implausible rank", rpos);
            std::vector<std::uint32_t> dims(rank);
            std::uint64_t n = 1;
            for (auto& d : dims) {
                d = r.u32("dims");
                n *= d;
                if (n > (std::uint64_t{1} << 32)) throw FormatError("ADMB: implausible tensor size", rpos);
            }
            r.need(4 * n, "payload");
            std::vector<float> data(n);
            for (auto& v : data) v = r.f32("payload");
            if (a.contains(name)) throw FormatError("ADMB: duplicate tensor " + name, start);
            a.entries_.push_back({std::move(name), std::move(dims), std::move(data)});
        }
        if (!r.at_end()) throw FormatError("ADMB: trailing bytes", r.offset());
        return a;
    }

    void save(const std::string& path) const {
        io::Writer w;
        const auto b = encode();
        w.bytes(b.data(), b.size());
        w.save(path);
    }

    static TensorArchive load(const std::string& path) { return decode(io::read_file(path)); }

private:
    const NamedTensor* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<NamedTensor> entries_;
};

template <class T>
void put_params(TensorArchive& a, const ParamSet<T>& p) {
    for (const auto& [n, t] : p.entries()) a.put(n, t);
}

/// Rebuilds a parameter set with the names of `like`, values from the archive.
template <class T>
ParamSet<T> get_params(const TensorArchive& a, const ParamSet<T>& like, const std::string& prefix = {}) {
    ParamSet<T> p;
    for (const auto& [n, t] : like.entries()) {
        auto v = a.tensor<T>(prefix + n, true);
        if (v.shape() != t.shape()) throw FormatError("archive: shape mismatch for " + prefix + n, 0);
        p.add(n, std::move(v));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class Variant { adm, adm_ct, adm_dr, adm_woj, de_baseline, de_penalty };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::adm: return "adm";
        case Variant::adm_ct: return "adm_ct";
        case Variant::adm_dr: return "adm_dr";
        case Variant::adm_woj: return "adm_woj";
        case Variant::de_baseline: return "de_baseline";
        case Variant::de_penalty: return "de_penalty";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::adm, Variant::adm_ct, Variant::adm_dr, Variant::adm_woj, Variant::de_baseline,
                      Variant::de_penalty})
        if (s == variant_name(v)) return v;
    throw ConfigError("unknown variant '" + s + "'");
}

inline bool uses_ctoc(Variant v) { return v != Variant::adm_dr; }
inline bool uses_dr(Variant v) { return v != Variant::adm_ct; }

struct Normalization {
    std::vector<float> mean, std;
};

/// Everything needed to score a sample.
struct AdmModel {
    Variant variant = Variant::adm;
    std::size_t contrasts = 4;
    CtocConfig ctoc_cfg;
    DeConfig de_cfg;
    GmmOptions gmm_opt;
    std::optional<CtocNet<float>> ctoc;
    std::optional<DrNet<float>> dr;
    DeNet<float> de;
    Normalization norm;
    std::optional<GmmParams> gmm;

    std::size_t z_dim() const { return (ctoc ? contrasts : 0) + (dr ? DrConfig::features : 0); }
};

namespace detail {

inline std::vector<float> gmm_vector(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// Header tensors plus all network parameters and, when present, the frozen
/// mixture (fractions, means, unclamped covariances, degenerate flags).
inline TensorArchive to_archive(const AdmModel& m) {
    TensorArchive a;
    a.put_scalars("meta/variant", {static_cast<float>(m.variant)});
    a.put_scalars("meta/contrasts", {static_cast<float>(m.contrasts)});
    a.put_scalars("meta/ctoc", {static_cast<float>(m.ctoc_cfg.base_channels), static_cast<float>(m.ctoc_cfg.n_resblocks)});
    a.put_scalars("meta/de", {static_cast<float>(m.de_cfg.z_dim), static_cast<float>(m.de_cfg.mixtures),
                              static_cast<float>(m.de_cfg.hidden), static_cast<float>(m.de_cfg.dropout)});
    a.put_f64("meta/gmm", {m.gmm_opt.eps, m.gmm_opt.clamp ? 1.0 : 0.0, m.gmm_opt.singular_rcond});
    a.put_scalars("norm/mean", m.norm.mean);
    a.put_scalars("norm/std", m.norm.std);
    if (m.ctoc) put_params(a, m.ctoc->params());
    if (m.dr) put_params(a, m.dr->params());
    put_params(a, m.de.params());
    if (m.gmm) {
        const auto& g = *m.gmm;
        const auto C = static_cast<std::uint32_t>(g.components()), d = static_cast<std::uint32_t>(g.dim);
        std::vector<float> mu, cov, deg;
        for (std::size_t c = 0; c < C; ++c) {
            mu.insert(mu.end(), g.mu[c].begin(), g.mu[c].end());
            cov.insert(cov.end(), g.cov_raw[c].values().begin(), g.cov_raw[c].values().end());
            deg.push_back(g.degenerate[c] ? 1.0f : 0.0f);
        }
        a.put("gmm/pi", {C}, detail::gmm_vector(g.pi));
        a.put("gmm/mu", {C, d}, std::move(mu));
        a.put("gmm/cov", {C, d, d}, std::move(cov));
        a.put("gmm/degenerate", {C}, std::move(deg));
    }
    return a;
}

inline AdmModel from_archive(const TensorArchive& a) {
    AdmModel m;
    const auto v = a.values("meta/variant", 1)[0];
    if (!(v >= 0.0f && v <= static_cast<float>(Variant::de_penalty))) throw FormatError("bundle: bad variant", 0);
    m.variant = static_cast<Variant>(static_cast<int>(v));
    m.contrasts = static_cast<std::size_t>(a.values("meta/contrasts", 1)[0]);
    const auto& cc = a.values("meta/ctoc", 2);
    m.ctoc_cfg = {m.contrasts, static_cast<std::size_t>(cc[0]), static_cast<std::size_t>(cc[1])};
    const auto& dc = a.values("meta/de", 4);
    m.de_cfg = {static_cast<std::size_t>(dc[0]), static_cast<std::size_t>(dc[1]), static_cast<std::size_t>(dc[2]),
                static_cast<double>(dc[3])};
    const auto go = a.get_f64("meta/gmm");
    if (go.size() != 3) throw FormatError("bundle: bad gmm options", 0);
    m.gmm_opt = {go[0], go[1] != 0.0, go[2]};
    m.norm.mean = a.values("norm/mean", m.contrasts);
    m.norm.std = a.values("norm/std", m.contrasts);

    // Shapes come from freshly initialized networks; values from the archive.
    Rng dummy(0);
    try {
        if (uses_ctoc(m.variant))
            m.ctoc = CtocNet<float>(m.ctoc_cfg, get_params(a, CtocNet<float>::init(m.ctoc_cfg, dummy).params()));
        if (uses_dr(m.variant)) {
            const DrConfig dcfg{m.contrasts};
            m.dr = DrNet<float>(dcfg, get_params(a, DrNet<float>::init(dcfg, dummy).params()));
        }
        m.de = DeNet<float>(m.de_cfg, get_params(a, DeNet<float>::init(m.de_cfg, dummy).params()));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("bundle: ") + e.what(), 0);
    }
    if (m.z_dim() != m.de_cfg.z_dim) throw FormatError("bundle: z_dim does not match variant", 0);

    if (a.contains("gmm/pi")) {
        const std::size_t C = m.de_cfg.mixtures, d = m.de_cfg.z_dim;
        const auto& pi = a.values("gmm/pi", C);
        const auto& mu = a.values("gmm/mu", C * d);
        const auto& cov = a.values("gmm/cov", C * d * d);
        const auto& deg = a.values("gmm/degenerate", C);
        std::vector<double> pid(pi.begin(), pi.end());
        std::vector<std::vector<double>> mud(C);
        std::vector<Matrix> covd;
        std::vector<bool> degd(C);
        for (std::size_t c = 0; c < C; ++c) {
            mud[c].assign(mu.begin() + static_cast<long>(c * d), mu.begin() + static_cast<long>((c + 1) * d));
            covd.push_back(Matrix::from(d, std::vector<double>(cov.begin() + static_cast<long>(c * d * d),
                                                               cov.begin() + static_cast<long>((c + 1) * d * d))));
            degd[c] = deg[c] != 0.0f;
        }
        m.gmm = finalize_params(std::move(pid), std::move(mud), std::move(covd), std::move(degd), m.gmm_opt);
    }
    return m;
}

inline void save_bundle(const AdmModel& m, const std::string& path) { to_archive(m).save(path); }
inline AdmModel load_bundle(const std::string& path) { return from_archive(TensorArchive::load(path)); }

/// The model as it will be seen after a save/load cycle: every stored quantity
/// rounded to f32 and the mixture rebuilt from the rounded values.
inline AdmModel canonicalize(const AdmModel& m) { return from_archive(TensorArchive::decode(to_archive(m).encode())); }

}  // namespace adm
