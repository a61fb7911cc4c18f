#pragma once

// Pixel-level detection metrics. Positive class = anomaly; a pixel is
// predicted anomalous when score >= threshold.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "adm/error.hpp"

namespace adm {

/// Area under the ROC curve via the Mann-Whitney statistic with midranks for
/// tied scores.
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ConfigError("roc_auc: scores/labels length mismatch");
    const std::size_t n = scores.size();
    std::size_t npos = 0;
    for (const auto l : labels) npos += l ? 1 : 0;
    const std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) throw UndefinedMetricError("roc_auc: need both positive and negative samples");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        // Ranks are 1-based; ties share the average rank.
        const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]]) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double p = static_cast<double>(npos), q = static_cast<double>(nneg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
}

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::uint64_t total() const { return tp + fp + tn + fn; }
};

struct ThresholdMetrics {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    ConfusionCounts counts;
    bool precision_undefined = false;  // no predicted positives; precision reported as 0
    bool recall_undefined = false;     // no positives in the labels; recall reported as 0
};

inline ThresholdMetrics precision_recall_at(double threshold, std::span<const double> scores,
                                            std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ConfigError("precision_recall_at: length mismatch");
    ThresholdMetrics m;
    m.threshold = threshold;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (labels[i])
            (pred ? m.counts.tp : m.counts.fn)++;
        else
            (pred ? m.counts.fp : m.counts.tn)++;
    }
    const auto& c = m.counts;
    if (c.tp + c.fp == 0)
        m.precision_undefined = true;
    else
        m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn == 0)
        m.recall_undefined = true;
    else
        m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    m.f1 = (2 * c.tp + c.fp + c.fn) == 0
               ? 0.0
               : 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    return m;
}

struct BestF1 {
    double threshold = 0.0;
    double f1 = 0.0;
};

/// Sweeps every distinct score as a threshold and returns the one maximizing
/// F1; among equal F1 values the lowest threshold wins.
inline BestF1 best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ConfigError("best_f1: length mismatch");
    std::uint64_t npos = 0;
    for (const auto l : labels) npos += l ? 1 : 0;
    if (npos == 0 || npos == labels.size())
        throw UndefinedMetricError("best_f1: need both positive and negative samples");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // F1 = 2TP / (2TP + FP + FN); compare as exact fractions.
    std::uint64_t best_num = 0, best_den = 1;
    double best_t = scores[order.front()];
    std::uint64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            (labels[order[i]] ? tp : fp)++;
            ++i;
        }
        const std::uint64_t num = 2 * tp, den = 2 * tp + fp + (npos - tp);
        // Descending sweep: ">=" moves ties toward the lower threshold.
        if (static_cast<__uint128_t>(num) * best_den >= static_cast<__uint128_t>(best_num) * den) {
            best_num = num;
            best_den = den;
            best_t = t;
        }
    }
    return {best_t, static_cast<double>(best_num) / static_cast<double>(best_den)};
}

}  // namespace adm
