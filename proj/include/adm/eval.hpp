#pragma once

// Anomaly score maps, pooled and per-image metrics, and score-map export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adm/bundle.hpp"
#include "adm/data.hpp"
#include "adm/metrics.hpp"
#include "adm/training.hpp"

namespace adm {

/// Per-pixel energy; pixels outside `mask` are excluded and hold 0.
struct ScoreMap {
    std::string id;
    std::size_t height = 0, width = 0;
    std::vector<float> energy;
    Mask mask;

    bool excluded(std::size_t i) const { return !mask[i]; }

    friend bool operator==(const ScoreMap& a, const ScoreMap& b) {
        return a.height == b.height && a.width == b.width && a.mask == b.mask &&
               std::equal(a.energy.begin(), a.energy.end(), b.energy.begin(), b.energy.end(),
                          [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
    }
};

/// Scores one raw sample with the frozen model: normalization, frozen
/// feature networks, then energies under the frozen mixture.
inline ScoreMap score(const AdmModel& model, const MultiContrastSample& raw) {
    if (!model.gmm) throw UsageError("score: bundle has no frozen mixture parameters");
    if (raw.contrasts != model.contrasts)
        throw DataError("score: sample " + raw.id + " has " + std::to_string(raw.contrasts) + " contrasts, model expects " +
                        std::to_string(model.contrasts));
    const auto inf = inference_copy(model);
    const auto s = apply_normalization(raw, model.norm);
    ScoreMap map;
    map.id = raw.id;
    map.height = raw.height;
    map.width = raw.width;
    map.mask = s.brain_mask;
    map.energy.assign(raw.pixels(), 0.0f);
    if (std::none_of(map.mask.begin(), map.mask.end(), [](std::uint8_t v) { return v != 0; })) return map;
    const auto b = make_batch<float>({&s});
    const auto z = inference_features(inf, b);
    const std::vector<double> zd(z.data().begin(), z.data().end());
    const auto E = energy(zd, *model.gmm);
    for (std::size_t k = 0; k < b.pixels.size(); ++k) map.energy[b.pixels[k]] = static_cast<float>(E[k]);
    return map;
}

inline std::vector<ScoreMap> score_all(const AdmModel& model, const std::vector<MultiContrastSample>& samples) {
    std::vector<ScoreMap> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(score(model, s));
    return out;
}

/// In-mask pixels of all maps, with labels (0 where a sample has no label).
struct PixelSet {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
};

inline PixelSet pool(const std::vector<ScoreMap>& maps, const std::vector<MultiContrastSample>& samples) {
    if (maps.size() != samples.size()) throw ConfigError("pool: maps and samples differ in count");
    PixelSet p;
    for (std::size_t k = 0; k < maps.size(); ++k) {
        const auto& m = maps[k];
        const auto& s = samples[k];
        for (std::size_t i = 0; i < m.energy.size(); ++i) {
            if (m.excluded(i)) continue;
            p.scores.push_back(m.energy[i]);
            p.labels.push_back(s.label ? (*s.label)[i] : 0);
        }
    }
    return p;
}

struct MetricsReport {
    double auc = 0.0;
    ThresholdMetrics at;

    nlohmann::json to_json() const {
        return {{"auc", auc},
                {"precision", at.precision},
                {"recall", at.recall},
                {"f1", at.f1},
                {"threshold", at.threshold},
                {"counts", {{"tp", at.counts.tp}, {"fp", at.counts.fp}, {"tn", at.counts.tn}, {"fn", at.counts.fn}}},
                {"precision_undefined", at.precision_undefined}};
    }
};

/// Pooled AUC on `target`, threshold chosen by best F1 on `validation`, then
/// precision/recall/F1 on `target` at that threshold.
inline MetricsReport evaluate(const PixelSet& validation, const PixelSet& target) {
    MetricsReport r;
    r.auc = roc_auc(target.scores, target.labels);
    const auto best = best_f1(validation.scores, validation.labels);
    r.at = precision_recall_at(best.threshold, target.scores, target.labels);
    return r;
}

struct SizeRecord {
    std::string id;
    std::size_t lesion_pixels = 0;
    double auc = 0.0;
};

struct SizeAnalysis {
    std::vector<SizeRecord> records;
    std::vector<std::string> skipped;  // labeled images lacking one class in-mask

    nlohmann::json to_json() const {
        nlohmann::json recs = nlohmann::json::array();
        for (const auto& r : records) recs.push_back({{"id", r.id}, {"lesion_pixels", r.lesion_pixels}, {"auc", r.auc}});
        return {{"records", recs}, {"skipped", skipped}};
    }
};

/// Per-image AUC against lesion size for labeled images.
inline SizeAnalysis auc_by_size(const std::vector<ScoreMap>& maps, const std::vector<MultiContrastSample>& samples) {
    SizeAnalysis out;
    for (std::size_t k = 0; k < maps.size(); ++k) {
        const auto& s = samples[k];
        if (!s.label) continue;
        const auto px = pool({maps[k]}, {s});
        std::size_t pos = 0;
        for (const auto l : px.labels) pos += l;
        if (pos == 0 || pos == px.labels.size()) {
            out.skipped.push_back(s.id);
            continue;
        }
        out.records.push_back({s.id, pos, roc_auc(px.scores, px.labels)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// 8-bit quantization: min-max over in-mask pixels to 0..255, excluded pixels
/// 0; a constant map quantizes to all zeros.
inline std::vector<std::uint8_t> quantize(const ScoreMap& m) {
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < m.energy.size(); ++i)
        if (!m.excluded(i)) {
            lo = std::min(lo, m.energy[i]);
            hi = std::max(hi, m.energy[i]);
        }
    std::vector<std::uint8_t> q(m.energy.size(), 0);
    if (!(hi > lo)) return q;
    const double range = static_cast<double>(hi) - static_cast<double>(lo);
    for (std::size_t i = 0; i < q.size(); ++i)
        if (!m.excluded(i))
            q[i] = static_cast<std::uint8_t>(std::lround((static_cast<double>(m.energy[i]) - lo) / range * 255.0));
    return q;
}

struct Pgm {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> encode_pgm(const Pgm& p) {
    const std::string header = "P5\n" + std::to_string(p.width) + " " + std::to_string(p.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), p.pixels.begin(), p.pixels.end());
    return out;
}

inline Pgm decode_pgm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
        if (start == pos) throw FormatError("PGM: truncated header", start);
        return std::string(bytes.begin() + static_cast<long>(start), bytes.begin() + static_cast<long>(pos));
    };
    if (token() != "P5") throw FormatError("PGM: not a binary graymap", 0);
    Pgm p;
    try {
        p.width = std::stoul(token());
        p.height = std::stoul(token());
        if (token() != "255") throw FormatError("PGM: only maxval 255 is supported", pos);
    } catch (const std::logic_error&) {
        throw FormatError("PGM: malformed header", pos);
    }
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() < pos || bytes.size() - pos != p.width * p.height)
        throw FormatError("PGM: payload size does not match header", pos);
    p.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return p;
}

inline void export_map(const ScoreMap& m, const std::string& path) {
    const auto bytes = encode_pgm({m.width, m.height, quantize(m)});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write " + path);
}

inline Pgm read_pgm(const std::string& path) { return decode_pgm(io::read_file(path)); }

/// Score maps persist as single-channel MCAD files carrying the mask.
inline MultiContrastSample to_sample(const ScoreMap& m) {
    MultiContrastSample s;
    s.id = m.id;
    s.contrasts = 1;
    s.height = m.height;
    s.width = m.width;
    s.image = m.energy;
    s.brain_mask = m.mask;
    return s;
}

inline ScoreMap from_sample(const MultiContrastSample& s) {
    if (s.contrasts != 1 || !s.has_stored_mask()) throw FormatError("score map: expected one channel with a mask", 0);
    return {s.id, s.height, s.width, s.image, s.brain_mask};
}

inline void save_score_map(const ScoreMap& m, const std::string& path) { save_sample(to_sample(m), path); }
inline ScoreMap load_score_map(const std::string& path) { return from_sample(load_sample(path)); }

}  // namespace adm
