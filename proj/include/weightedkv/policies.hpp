// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>

#include "weightedkv/attention.hpp"
#include "weightedkv/error.hpp"
#include "weightedkv/merge.hpp"

namespace wkv {

enum class PolicyKind { FullKV, StreamingLLM, H2O, TOVA, CaM, WeightedKV, EvictionVariant };

inline constexpr std::array<PolicyKind, 7> kAllPolicies = {
    PolicyKind::FullKV, PolicyKind::StreamingLLM, PolicyKind::H2O,           PolicyKind::TOVA,
    PolicyKind::CaM,    PolicyKind::WeightedKV,   PolicyKind::EvictionVariant};

inline std::string_view to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::FullKV: return "FullKV";
        case PolicyKind::StreamingLLM: return "StreamingLLM";
        case PolicyKind::H2O: return "H2O";
        case PolicyKind::TOVA: return "TOVA";
        case PolicyKind::CaM: return "CaM";
        case PolicyKind::WeightedKV: return "WeightedKV";
        case PolicyKind::EvictionVariant: return "EvictionVariant";
    }
    return "?";
}

inline PolicyKind parse_policy(std::string_view name) {
    for (PolicyKind kind : kAllPolicies) {
        if (to_string(kind) == name) {
            return kind;
        }
    }
    if (name == "Eviction") {
        return PolicyKind::EvictionVariant;
    }
    throw Error("unknown policy '" + std::string(name) + "'");
}

inline constexpr std::size_t kUnlimitedBudget = std::numeric_limits<std::size_t>::max();

struct PolicyConfig {
    PolicyKind kind = PolicyKind::WeightedKV;
    // max retained slots m
    std::size_t budget = kUnlimitedBudget;
    // leading slots never compressed
    std::size_t sink_count = 4;
    // trailing slots never compressed (the newest slot is always excluded)
    std::size_t recent_count = 0;
    std::uint64_t rng_seed = 42;
    // CaM spreads a discarded value over this many following slots
    std::size_t cam_window = 4;

    void validate() const {
        detail::require(budget >= 2, "PolicyConfig: budget must be at least 2");
        detail::require(cam_window >= 1, "PolicyConfig: cam_window must be positive");
        if (budget != kUnlimitedBudget) {
            detail::require(sink_count + recent_count + 1 <= budget,
                            "PolicyConfig: sinks (" + std::to_string(sink_count) + ") + recent (" +
                                std::to_string(recent_count) + ") + 1 exceeds budget " + std::to_string(budget));
        }
    }
};

/// One compression decision, in slot coordinates of the cache before it was
/// applied. `merged_into` is evicted_slot + 1 whenever present.
struct CompressionEvent {
    std::size_t step = 0;
    std::size_t evicted_slot = 0;
    std::size_t evicted_position = 0;
    std::optional<std::size_t> merged_into;
    std::optional<std::size_t> merged_into_position;
    std::optional<MergeWeights> weights;

    friend bool operator==(const CompressionEvent&, const CompressionEvent&) = default;
};

namespace detail {

/// Slots eligible for compression: [sink_count, size - recent_count - 1).
struct SlotRange {
    std::size_t begin = 0;
    std::size_t end = 0;
};

inline SlotRange compressible_range(std::size_t cache_size, const PolicyConfig& config) {
    const std::size_t protected_tail = config.recent_count + 1;
    require(cache_size >= config.sink_count + protected_tail + 1,
            "no compressible slot (cache size " + std::to_string(cache_size) + ", sinks " +
                std::to_string(config.sink_count) + ", recent " + std::to_string(config.recent_count) + ")");
    return {config.sink_count, cache_size - protected_tail};
}

/// First index of the minimum of score(i) over the range.
template <typename Score>
std::size_t argmin_in(SlotRange range, Score&& score) {
    std::size_t best = range.begin;
    double best_value = score(range.begin);
    for (std::size_t i = range.begin + 1; i < range.end; ++i) {
        const double v = score(i);
        if (v < best_value) {
            best = i;
            best_value = v;
        }
    }
    return best;
}

inline CompressionEvent evict_slot(CacheState& cache, std::size_t slot) {
    CompressionEvent event;
    event.evicted_slot = slot;
    event.evicted_position = cache.positions.at(slot);
    cache.erase_slot(slot);
    return event;
}

}  // namespace detail

/// Slot with the minimum average attention score a/n among compressible
/// slots; ties go to the smallest index.
inline std::size_t weightedkv_select(const CacheState& cache, const PolicyConfig& config) {
    const auto range = detail::compressible_range(cache.size(), config);
    return detail::argmin_in(range, [&](std::size_t i) { return cache.average_score(i); });
}

/// Merge weights from the two slots' average scores. Computed as
/// a_j n_{j+1} : a_{j+1} n_j so that rational score schedules produce
/// correctly rounded weights. A pair that never received attention falls back
/// to the plain mean.
inline MergeWeights average_score_weights(const CacheState& cache, std::size_t j) {
    const double left = cache.acc_scores[j] * cache.counts[j + 1];
    const double right = cache.acc_scores[j + 1] * cache.counts[j];
    const double total = left + right;
    if (!(total > 0.0)) {
        return {0.5, 0.5};
    }
    return {left / total, right / total};
}

/// Folds value j into value j+1 weighted by average attention, then drops
/// slot j's key and bookkeeping. The survivor keeps its own scores, count and
/// position.
inline CompressionEvent weightedkv_compress(CacheState& cache, std::size_t j) {
    detail::require(j + 1 < cache.size(), "weightedkv_compress: slot has no right neighbour");
    const MergeWeights w = average_score_weights(cache, j);
    const Vec merged = convex_combine(w, cache.values.row(j), cache.values.row(j + 1));
    std::copy(merged.begin(), merged.end(), cache.values.row(j + 1).begin());
    const std::size_t survivor = cache.positions[j + 1];
    CompressionEvent event = detail::evict_slot(cache, j);
    event.merged_into = j + 1;
    event.merged_into_position = survivor;
    event.weights = w;
    return event;
}

/// Same selection and key handling as weightedkv_compress, but value j is
/// dropped instead of merged.
inline CompressionEvent eviction_variant_compress(CacheState& cache, std::size_t j) {
    detail::require(j + 1 < cache.size(), "eviction_variant_compress: slot has no right neighbour");
    return detail::evict_slot(cache, j);
}

/// Drops the oldest slot outside the sink region.
inline CompressionEvent streamingllm_compress(CacheState& cache, const PolicyConfig& config) {
    const auto range = detail::compressible_range(cache.size(), config);
    return detail::evict_slot(cache, range.begin);
}

/// Drops the compressible slot with the smallest cumulative attention.
inline CompressionEvent h2o_compress(CacheState& cache, const PolicyConfig& config) {
    const auto range = detail::compressible_range(cache.size(), config);
    const std::size_t j = detail::argmin_in(range, [&](std::size_t i) { return cache.acc_scores[i]; });
    return detail::evict_slot(cache, j);
}

/// Drops the compressible slot with the smallest weight from the step that
/// just overflowed the budget.
inline CompressionEvent tova_compress(CacheState& cache, const PolicyConfig& config,
                                      std::span<const double> last_step_weights) {
    detail::require(last_step_weights.size() == cache.size(), "tova_compress: weights do not cover the cache");
    const auto range = detail::compressible_range(cache.size(), config);
    const std::size_t j = detail::argmin_in(range, [&](std::size_t i) { return last_step_weights[i]; });
    return detail::evict_slot(cache, j);
}

/// Uniform double in [0, 1) from the top 53 bits of one generator draw.
inline double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Comparison baseline after the two-sentence description of CaM: select as
/// H2O does, then with probability clamp(a/n, 0, 1) add v_j / cam_window to
/// each of the next min(cam_window, remaining) value rows; otherwise discard
/// v_j. The key is always removed. Not a faithful port of the original
/// method; its merge probability law is a stand-in.
inline CompressionEvent cam_compress(CacheState& cache, const PolicyConfig& config, std::mt19937_64& rng) {
    const auto range = detail::compressible_range(cache.size(), config);
    const std::size_t j = detail::argmin_in(range, [&](std::size_t i) { return cache.acc_scores[i]; });
    const double keep_probability = std::clamp(cache.average_score(j), 0.0, 1.0);
    const double threshold = 1.0 - keep_probability;
    const double draw = uniform_unit(rng);

    const bool merge = draw >= threshold && keep_probability > 0.0;
    std::optional<std::size_t> survivor;
    if (merge) {
        const Vec source = cache.values.row_vec(j);
        const std::size_t last = std::min(cache.size() - 1, j + config.cam_window);
        const double scale = 1.0 / static_cast<double>(config.cam_window);
        for (std::size_t r = j + 1; r <= last; ++r) {
            auto row = cache.values.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) {
                row[c] += source[c] * scale;
            }
        }
        survivor = cache.positions[j + 1];
    }
    CompressionEvent event = detail::evict_slot(cache, j);
    if (merge) {
        event.merged_into = j + 1;
        event.merged_into_position = survivor;
    }
    return event;
}

/// Holds a cache at its budget after every attend() call. Owns the RNG that
/// CaM draws from, so one enforcer belongs to exactly one cache.
class BudgetEnforcer {
public:
    explicit BudgetEnforcer(PolicyConfig config) : config_(config), rng_(config.rng_seed) { config_.validate(); }

    [[nodiscard]] const PolicyConfig& config() const noexcept { return config_; }

    /// Called after attend(); the cache holds at most budget + 1 slots.
    /// Performs at most one compression and returns it.
    std::optional<CompressionEvent> enforce(CacheState& cache, std::span<const double> last_step_weights) {
        if (cache.size() <= config_.budget) {
            return std::nullopt;
        }
        detail::require(cache.size() == config_.budget + 1,
                        "enforce_budget: cache holds " + std::to_string(cache.size()) + " slots, budget " +
                            std::to_string(config_.budget) + " allows one overflow at most");
        const std::size_t step = cache.positions.back();
        CompressionEvent event;
        switch (config_.kind) {
            case PolicyKind::FullKV:
                throw Error("FullKV cannot enforce budget");
            case PolicyKind::StreamingLLM:
                event = streamingllm_compress(cache, config_);
                break;
            case PolicyKind::H2O:
                event = h2o_compress(cache, config_);
                break;
            case PolicyKind::TOVA:
                event = tova_compress(cache, config_, last_step_weights);
                break;
            case PolicyKind::CaM:
                event = cam_compress(cache, config_, rng_);
                break;
            case PolicyKind::WeightedKV:
                event = weightedkv_compress(cache, weightedkv_select(cache, config_));
                break;
            case PolicyKind::EvictionVariant:
                event = eviction_variant_compress(cache, weightedkv_select(cache, config_));
                break;
        }
        event.step = step;
        return event;
    }

private:
    PolicyConfig config_;
    std::mt19937_64 rng_;
};

/// Stateless form for policies that draw no randomness. CaM needs a
/// BudgetEnforcer to carry its generator across calls.
inline std::optional<CompressionEvent> enforce_budget(CacheState& cache, const PolicyConfig& config,
                                                      std::span<const double> last_step_weights) {
    detail::require(config.kind != PolicyKind::CaM, "enforce_budget: CaM requires a BudgetEnforcer");
    BudgetEnforcer enforcer(config);
    return enforcer.enforce(cache, last_step_weights);
}

}  // namespace wkv
