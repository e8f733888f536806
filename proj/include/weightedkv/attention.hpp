// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "weightedkv/error.hpp"
#include "weightedkv/numerics.hpp"

namespace wkv {

/// Single-head KV cache plus the per-slot bookkeeping used by score-based
/// policies.
///
/// Slot i holds one key row, one value row, the attention mass accumulated
/// over every step it was attended (acc_scores), the number of such steps
/// (counts), and the original token index it stands for. After a merge the
/// surviving slot keeps the position of the right-hand token.
struct CacheState {
    Mat keys;
    Mat values;
    Vec acc_scores;
    Vec counts;
    std::vector<std::size_t> positions;

    [[nodiscard]] std::size_t size() const noexcept { return positions.size(); }
    [[nodiscard]] bool empty() const noexcept { return positions.empty(); }
    [[nodiscard]] std::size_t head_dim() const noexcept { return keys.cols(); }

    /// acc_scores[i] / counts[i]; zero for a slot that was never attended.
    [[nodiscard]] double average_score(std::size_t slot) const {
        return counts[slot] > 0.0 ? acc_scores[slot] / counts[slot] : 0.0;
    }

    [[nodiscard]] Vec average_scores() const {
        Vec out(size());
        for (std::size_t i = 0; i < size(); ++i) {
            out[i] = average_score(i);
        }
        return out;
    }

    /// Removes every per-slot record of `slot`.
    void erase_slot(std::size_t slot) {
        detail::require(slot < size(), "CacheState::erase_slot: slot out of range");
        keys.erase_row(slot);
        values.erase_row(slot);
        acc_scores.erase(acc_scores.begin() + static_cast<std::ptrdiff_t>(slot));
        counts.erase(counts.begin() + static_cast<std::ptrdiff_t>(slot));
        positions.erase(positions.begin() + static_cast<std::ptrdiff_t>(slot));
    }
};

/// One decode step as seen by a single head.
struct AttentionStep {
    std::size_t step_index = 0;  // position of the newest cached token
    Vec query;
    Vec new_key;
    Vec new_value;
    Vec weights;  // over cache slots, after the append
    Vec output;
};

/// Appends a token. The accumulated score and count start at zero; attend()
/// adds the first observation.
inline void append(CacheState& cache, std::span<const double> key, std::span<const double> value,
                   std::size_t position) {
    detail::require(!key.empty() && key.size() == value.size(), "append: key/value dimension mismatch");
    if (!cache.empty()) {
        detail::require(key.size() == cache.head_dim(),
                        "append: expected head dimension " + std::to_string(cache.head_dim()) + ", got " +
                            std::to_string(key.size()));
        detail::require(position > cache.positions.back(),
                        "append: position " + std::to_string(position) + " not after last retained position " +
                            std::to_string(cache.positions.back()));
    } else if (cache.keys.cols() != 0) {
        detail::require(key.size() == cache.keys.cols(), "append: dimension mismatch");
    }
    cache.keys.append_row(key);
    cache.values.append_row(value);
    cache.acc_scores.push_back(0.0);
    cache.counts.push_back(0.0);
    cache.positions.push_back(position);
}

/// softmax(q K^T / sqrt(d)) and its weighted sum of value rows. Updates the
/// cache bookkeeping: acc_scores += weights, counts += 1.
inline AttentionStep attend(CacheState& cache, std::span<const double> query) {
    detail::require(!cache.empty(), "attend: empty cache");
    detail::require(query.size() == cache.head_dim(), "attend: query dimension mismatch");

    AttentionStep step;
    step.step_index = cache.positions.back();
    step.query.assign(query.begin(), query.end());
    step.new_key = cache.keys.row_vec(cache.size() - 1);
    step.new_value = cache.values.row_vec(cache.size() - 1);
    step.weights = softmax(scaled_scores(query, cache.keys, query.size()));

    step.output.assign(cache.head_dim(), 0.0);
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const double w = step.weights[i];
        const auto v = cache.values.row(i);
        for (std::size_t c = 0; c < v.size(); ++c) {
            step.output[c] += w * v[c];
        }
        cache.acc_scores[i] += w;
        cache.counts[i] += 1.0;
    }
    return step;
}

/// Uncompressed causal attention: output t attends over tokens 0..t.
inline std::vector<Vec> full_attention_reference(const std::vector<Vec>& queries, const std::vector<Vec>& keys,
                                                 const std::vector<Vec>& values) {
    detail::require(queries.size() == keys.size() && keys.size() == values.size(),
                    "full_attention_reference: length mismatch");
    std::vector<Vec> outputs;
    outputs.reserve(queries.size());
    Vec logits;
    for (std::size_t t = 0; t < queries.size(); ++t) {
        const std::size_t d = queries[t].size();
        detail::require(d > 0 && keys[t].size() == d && values[t].size() == d,
                        "full_attention_reference: dimension mismatch at step " + std::to_string(t));
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        logits.resize(t + 1);
        for (std::size_t i = 0; i <= t; ++i) {
            logits[i] = dot(queries[t], keys[i]) * scale;
        }
        const Vec weights = softmax(logits);
        Vec out(d, 0.0);
        for (std::size_t i = 0; i <= t; ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                out[c] += weights[i] * values[i][c];
            }
        }
        outputs.push_back(std::move(out));
    }
    return outputs;
}

}  // namespace wkv
