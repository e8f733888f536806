// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "weightedkv/error.hpp"
#include "weightedkv/numerics.hpp"

namespace wkv {

/// Coefficients of a two-value convex combination.
struct MergeWeights {
    double left = 0.5;
    double right = 0.5;

    [[nodiscard]] bool valid(double tol = 1e-12) const {
        return left >= 0.0 && right >= 0.0 && std::abs(left + right - 1.0) <= tol;
    }

    friend bool operator==(const MergeWeights&, const MergeWeights&) = default;
};

/// Exact replacement value for dropping key 0 and folding values 0 and 1
/// into a single slot that keeps key 1.
///
/// The result is exact for this query only: attention over
/// [k1, k2, ..., k_{t-1}] with values [v~, v2, ..., v_{t-1}] reproduces the
/// uncompressed output for `query`. Any other query sees a perturbed output.
/// With p = softmax(q K^T / sqrt(d)) and r = exp((q.k0 - q.k1)/sqrt(d)):
///
///   v~ = (1 - p0) (r v0 + v1) - r * sum_{i>=2} p_i v_i
///
/// To merge slots (j, j+1) of a longer cache, pass the keys/values rotated so
/// that j and j+1 come first; the order of the remaining tokens does not
/// matter.
inline Vec ideal_merge(std::span<const double> query, const std::vector<Vec>& keys, const std::vector<Vec>& values) {
    detail::require(keys.size() >= 2, "ideal_merge: need at least 2 tokens");
    detail::require(keys.size() == values.size(), "ideal_merge: keys/values length mismatch");
    const std::size_t d = query.size();
    detail::require(d > 0, "ideal_merge: empty query");

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vec logits(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        detail::require(keys[i].size() == d && values[i].size() == d, "ideal_merge: dimension mismatch");
        logits[i] = dot(query, keys[i]) * scale;
    }
    const Vec p = softmax(logits);
    const double ratio = std::exp(logits[0] - logits[1]);

    Vec merged(d);
    for (std::size_t c = 0; c < d; ++c) {
        double tail = 0.0;
        for (std::size_t i = 2; i < keys.size(); ++i) {
            tail += p[i] * values[i][c];
        }
        merged[c] = (1.0 - p[0]) * (ratio * values[0][c] + values[1][c]) - ratio * tail;
    }
    return merged;
}

/// Two-logit softmax of (q.k1, q.k2)/sqrt(d): the normalised approximation
/// of the ideal merge when the tail terms are dropped.
inline MergeWeights approx_merge_weights(std::span<const double> query, std::span<const double> k1,
                                         std::span<const double> k2) {
    detail::require(query.size() == k1.size() && k1.size() == k2.size() && !query.empty(),
                    "approx_merge_weights: dimension mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    const double l1 = dot(query, k1) * scale;
    const double l2 = dot(query, k2) * scale;
    // Logistic of the difference; never exponentiates a positive number.
    const double diff = l1 - l2;
    MergeWeights w;
    if (diff >= 0.0) {
        const double e = std::exp(-diff);
        w.left = 1.0 / (1.0 + e);
        w.right = e / (1.0 + e);
    } else {
        const double e = std::exp(diff);
        w.left = e / (1.0 + e);
        w.right = 1.0 / (1.0 + e);
    }
    return w;
}

inline Vec convex_combine(const MergeWeights& w, std::span<const double> v1, std::span<const double> v2) {
    detail::require(v1.size() == v2.size(), "convex_combine: length mismatch");
    detail::require(w.valid(), "convex_combine: weights are not a convex pair");
    Vec out(v1.size());
    for (std::size_t c = 0; c < v1.size(); ++c) {
        out[c] = w.left * v1[c] + w.right * v2[c];
        // Pin to the source interval against rounding.
        const auto [lo, hi] = std::minmax(v1[c], v2[c]);
        out[c] = std::clamp(out[c], lo, hi);
    }
    return out;
}

/// Folds full_weights[merged_slot] into its right neighbour, drops the slot,
/// and returns the cosine similarity with merged_weights.
inline double attention_perturbation(std::span<const double> full_weights, std::span<const double> merged_weights,
                                     std::size_t merged_slot) {
    detail::require(merged_slot + 1 < full_weights.size(), "attention_perturbation: merged slot has no right neighbour");
    detail::require(merged_weights.size() + 1 == full_weights.size(), "attention_perturbation: length mismatch after fold");
    Vec folded;
    folded.reserve(merged_weights.size());
    for (std::size_t i = 0; i < full_weights.size(); ++i) {
        if (i == merged_slot) {
            continue;
        }
        folded.push_back(i == merged_slot + 1 ? full_weights[i] + full_weights[merged_slot] : full_weights[i]);
    }
    return cosine_similarity(folded, merged_weights);
}

}  // namespace wkv
