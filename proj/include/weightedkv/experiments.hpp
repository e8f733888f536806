// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "weightedkv/attention.hpp"
#include "weightedkv/error.hpp"
#include "weightedkv/merge.hpp"
#include "weightedkv/numerics.hpp"
#include "weightedkv/policies.hpp"
#include "weightedkv/toy_model.hpp"
#include "weightedkv/trace_io.hpp"

namespace wkv {

/// One scalar measurement. An empty optional prints as "all" and marks an
/// aggregate over that axis.
struct MetricRow {
    std::string experiment;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> step;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> head;
    std::string policy;
    std::string metric;
    double value = 0.0;
};

inline constexpr const char* kCsvHeader = "experiment,seed,step,layer,head,policy,metric,value";

namespace detail {

template <typename T>
std::string axis(const std::optional<T>& v) {
    return v ? std::to_string(*v) : std::string("all");
}

}  // namespace detail

inline void write_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << kCsvHeader << '\n';
    for (const auto& r : rows) {
        detail::require(std::isfinite(r.value), "metric '" + r.metric + "' is not finite");
        os << r.experiment << ',' << detail::axis(r.seed) << ',' << detail::axis(r.step) << ','
           << detail::axis(r.layer) << ',' << detail::axis(r.head) << ',' << r.policy << ',' << r.metric << ','
           << format_double(r.value) << '\n';
    }
    detail::require(static_cast<bool>(os), "write_csv: write failed");
}

enum class TraceSource { ToyModel, IsotropicGaussian, LowRankValues, PeakedAttention };

struct ExperimentConfig {
    ToyModelConfig model;  // its seed is replaced by each run seed
    std::vector<std::uint64_t> seeds{1};
    std::vector<PolicyConfig> policies;
    TraceSource source = TraceSource::ToyModel;
    SyntheticOptions synthetic;
    std::string token_file;  // used when model.sequence_source is FileTokens
    std::size_t steps = 256;
    // perturbation study
    std::size_t merge_step = 100;
    std::size_t window = 800;
    // ideal-merge sweep
    std::size_t sweep_points = 16;
    std::size_t threads = 1;

    void validate() const {
        detail::require(!seeds.empty(), "ExperimentConfig: at least one seed required");
        detail::require(threads >= 1, "ExperimentConfig: threads must be positive");
        model.validate();
        for (const auto& p : policies) {
            p.validate();
        }
    }
};

/// Runs fn(seed) for every seed on a small worker pool and concatenates the
/// per-seed results in seed-list order, so output never depends on
/// scheduling.
inline std::vector<MetricRow> for_each_seed(const ExperimentConfig& config,
                                            const std::function<std::vector<MetricRow>(std::uint64_t)>& fn) {
    const std::size_t n = config.seeds.size();
    std::vector<std::vector<MetricRow>> per_seed(n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                per_seed[i] = fn(config.seeds[i]);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };
    const std::size_t workers = std::min(config.threads, n);
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    std::vector<MetricRow> rows;
    for (auto& chunk : per_seed) {
        rows.insert(rows.end(), std::make_move_iterator(chunk.begin()), std::make_move_iterator(chunk.end()));
    }
    return rows;
}

inline std::shared_ptr<const ToyModel> model_for_seed(const ExperimentConfig& config, std::uint64_t seed) {
    ToyModelConfig mc = config.model;
    mc.seed = seed;
    return init_model(mc);
}

inline std::vector<std::int64_t> tokens_for_seed(const ExperimentConfig& config, std::uint64_t seed,
                                                 std::size_t count) {
    if (config.model.sequence_source == SequenceSource::FileTokens) {
        auto tokens = load_token_file(config.token_file);
        if (tokens.size() > count) {
            tokens.resize(count);
        }
        return tokens;
    }
    return random_tokens(count, config.model.vocab, seed);
}

inline QKVTrace trace_for_seed(const ExperimentConfig& config, std::uint64_t seed) {
    switch (config.source) {
        case TraceSource::ToyModel:
            return generate_trace(model_for_seed(config, seed), tokens_for_seed(config, seed, config.steps));
        case TraceSource::IsotropicGaussian:
            return synthetic_qkv(SyntheticKind::IsotropicGaussian, config.steps, config.model.d_head, seed,
                                 config.synthetic);
        case TraceSource::LowRankValues:
            return synthetic_qkv(SyntheticKind::LowRankValues, config.steps, config.model.d_head, seed,
                                 config.synthetic);
        case TraceSource::PeakedAttention:
            return synthetic_qkv(SyntheticKind::PeakedAttention, config.steps, config.model.d_head, seed,
                                 config.synthetic);
    }
    throw Error("unknown trace source");
}

struct SampleStats {
    double mean = 0.0;
    double variance = 0.0;  // population variance
    double stddev = 0.0;
};

inline SampleStats sample_stats(std::span<const double> xs) {
    SampleStats s;
    if (xs.empty()) {
        return s;
    }
    for (double x : xs) {
        s.mean += x;
    }
    s.mean /= static_cast<double>(xs.size());
    for (double x : xs) {
        s.variance += (x - s.mean) * (x - s.mean);
    }
    s.variance /= static_cast<double>(xs.size());
    s.stddev = std::sqrt(s.variance);
    return s;
}

// ---------------------------------------------------------------------------
// Spectrum

/// Normalized singular values of every head's stacked K and V.
///
/// Rows per seed: for each (layer, head) and index i, sigma_k_i and
/// sigma_v_i; then the same metrics averaged over heads (layer = head =
/// all). A final seed = all block averages the per-seed means.
inline std::vector<MetricRow> run_spectrum(const ExperimentConfig& config) {
    config.validate();
    const std::string name = "spectrum";
    auto rows = for_each_seed(config, [&](std::uint64_t seed) {
        const QKVTrace trace = trace_for_seed(config, seed);
        detail::require(trace.steps() >= trace.d_head, "spectrum: sequence of " + std::to_string(trace.steps()) +
                                                            " steps is shorter than head dimension " +
                                                            std::to_string(trace.d_head));
        std::vector<MetricRow> out;
        const std::size_t d = trace.d_head;
        Vec mean_k(d, 0.0), mean_v(d, 0.0);
        const double heads_total = static_cast<double>(trace.layers * trace.heads);
        for (std::size_t l = 0; l < trace.layers; ++l) {
            for (std::size_t h = 0; h < trace.heads; ++h) {
                const Vec sk = normalized_spectrum(trace.key_matrix(l, h));
                const Vec sv = normalized_spectrum(trace.value_matrix(l, h));
                for (std::size_t i = 0; i < d; ++i) {
                    out.push_back({name, seed, std::nullopt, l, h, "none", "sigma_k_" + std::to_string(i), sk[i]});
                    out.push_back({name, seed, std::nullopt, l, h, "none", "sigma_v_" + std::to_string(i), sv[i]});
                    mean_k[i] += sk[i] / heads_total;
                    mean_v[i] += sv[i] / heads_total;
                }
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none",
                           "sigma_k_" + std::to_string(i), mean_k[i]});
            out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none",
                           "sigma_v_" + std::to_string(i), mean_v[i]});
        }
        return out;
    });

    // Cross-seed average of the per-seed head averages.
    const std::size_t d = config.model.d_head;
    Vec total(2 * d, 0.0);
    for (const auto& r : rows) {
        if (!r.layer) {
            const bool is_k = r.metric.rfind("sigma_k_", 0) == 0;
            const std::size_t i = std::stoul(r.metric.substr(8));
            total[(is_k ? 0 : d) + i] += r.value / static_cast<double>(config.seeds.size());
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        rows.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, "none",
                        "sigma_k_" + std::to_string(i), total[i]});
        rows.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, "none",
                        "sigma_v_" + std::to_string(i), total[d + i]});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Perturbation after a single merge

/// Slot with the smallest (or largest) average attention among every slot
/// that has a right neighbour. Ties go to the smallest index.
inline std::size_t extreme_average_slot(const CacheState& cache, bool highest) {
    detail::require(cache.size() >= 2, "extreme_average_slot: cache needs at least 2 slots");
    std::size_t best = 0;
    double best_value = cache.average_score(0);
    for (std::size_t i = 1; i + 1 < cache.size(); ++i) {
        const double v = cache.average_score(i);
        if (highest ? v > best_value : v < best_value) {
            best = i;
            best_value = v;
        }
    }
    return best;
}

struct PerturbationSeries {
    // [follow-up step][layer * heads + head]
    std::vector<Vec> cosine_lowest;
    std::vector<Vec> cosine_highest;
};

/// Decodes merge_step tokens with full attention, then forks three decoders:
/// untouched, one WeightedKV merge of the lowest-average slot per head, and
/// one merge of the highest-average slot per head. All three continue on the
/// same tokens; each step compares attention weights of the forks with the
/// untouched run, after folding the merged slot into its neighbour.
inline PerturbationSeries perturbation_series(std::shared_ptr<const ToyModel> model,
                                              const std::vector<std::int64_t>& tokens, std::size_t merge_step,
                                              std::size_t window) {
    detail::require(merge_step >= 2, "perturb: merge step must leave at least two cached tokens");
    detail::require(tokens.size() >= merge_step + window,
                    "window overflow: need " + std::to_string(merge_step + window) + " tokens, have " +
                        std::to_string(tokens.size()));
    const auto& cfg = model->config;
    const std::size_t n_heads = cfg.layers * cfg.heads;

    Decoder full(model);
    for (std::size_t t = 0; t < merge_step; ++t) {
        full.step(tokens[t]);
    }
    Decoder low = full;
    Decoder high = full;
    std::vector<std::size_t> low_slot(n_heads), high_slot(n_heads);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::size_t idx = l * cfg.heads + h;
            low_slot[idx] = extreme_average_slot(full.cache(l, h), false);
            high_slot[idx] = extreme_average_slot(full.cache(l, h), true);
            weightedkv_compress(low.cache(l, h), low_slot[idx]);
            weightedkv_compress(high.cache(l, h), high_slot[idx]);
        }
    }

    PerturbationSeries series;
    series.cosine_lowest.reserve(window);
    series.cosine_highest.reserve(window);
    for (std::size_t t = merge_step; t < merge_step + window; ++t) {
        const DecodeOutput f = full.step(tokens[t]);
        const DecodeOutput lo = low.step(tokens[t]);
        const DecodeOutput hi = high.step(tokens[t]);
        Vec cl(n_heads), ch(n_heads);
        for (std::size_t i = 0; i < n_heads; ++i) {
            cl[i] = attention_perturbation(f.heads[i].attention.weights, lo.heads[i].attention.weights, low_slot[i]);
            ch[i] = attention_perturbation(f.heads[i].attention.weights, hi.heads[i].attention.weights, high_slot[i]);
        }
        series.cosine_lowest.push_back(std::move(cl));
        series.cosine_highest.push_back(std::move(ch));
    }
    return series;
}

/// Rows per seed: cosine for every (follow-up step, layer, head) under
/// policies merge_lowest and merge_highest, then mean_cosine per policy.
/// Cross-seed rows (seed = all): per step mean/var/std over seeds and heads,
/// and overall mean/var/std of the per-seed means.
inline std::vector<MetricRow> run_perturbation(const ExperimentConfig& config) {
    config.validate();
    const std::string name = "perturb";
    const std::size_t layers = config.model.layers;
    const std::size_t heads = config.model.heads;
    auto rows = for_each_seed(config, [&](std::uint64_t seed) {
        const auto model = model_for_seed(config, seed);
        const auto tokens = tokens_for_seed(config, seed, config.merge_step + config.window);
        const PerturbationSeries s = perturbation_series(model, tokens, config.merge_step, config.window);
        std::vector<MetricRow> out;
        double sum_low = 0.0, sum_high = 0.0;
        for (std::size_t w = 0; w < config.window; ++w) {
            const std::size_t step = config.merge_step + w;
            for (std::size_t l = 0; l < layers; ++l) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double lo = s.cosine_lowest[w][l * heads + h];
                    const double hi = s.cosine_highest[w][l * heads + h];
                    out.push_back({name, seed, step, l, h, "merge_lowest", "cosine", lo});
                    out.push_back({name, seed, step, l, h, "merge_highest", "cosine", hi});
                    sum_low += lo;
                    sum_high += hi;
                }
            }
        }
        const double count = static_cast<double>(config.window * layers * heads);
        out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "merge_lowest", "mean_cosine",
                       sum_low / count});
        out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "merge_highest", "mean_cosine",
                       sum_high / count});
        return out;
    });

    for (const char* policy : {"merge_lowest", "merge_highest"}) {
        std::vector<Vec> per_step(config.window);
        Vec per_seed_means;
        for (const auto& r : rows) {
            if (r.policy != policy) {
                continue;
            }
            if (r.step) {
                per_step[*r.step - config.merge_step].push_back(r.value);
            } else {
                per_seed_means.push_back(r.value);
            }
        }
        std::vector<MetricRow> agg;
        for (std::size_t w = 0; w < config.window; ++w) {
            const SampleStats st = sample_stats(per_step[w]);
            const std::size_t step = config.merge_step + w;
            agg.push_back({name, std::nullopt, step, std::nullopt, std::nullopt, policy, "mean_cosine", st.mean});
            agg.push_back({name, std::nullopt, step, std::nullopt, std::nullopt, policy, "var_cosine", st.variance});
            agg.push_back({name, std::nullopt, step, std::nullopt, std::nullopt, policy, "std_cosine", st.stddev});
        }
        const SampleStats st = sample_stats(per_seed_means);
        agg.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, policy, "mean_cosine", st.mean});
        agg.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, policy, "var_cosine", st.variance});
        agg.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, policy, "std_cosine", st.stddev});
        rows.insert(rows.end(), agg.begin(), agg.end());
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Output divergence from full attention

/// FullKV is the identity policy and always runs unbounded.
inline PolicyConfig effective_policy(PolicyConfig p) {
    if (p.kind == PolicyKind::FullKV) {
        p.budget = kUnlimitedBudget;
    }
    return p;
}

/// Rows per seed: l2 and cos between each policy's final-layer attention
/// output and the uncompressed run's, for every (step, head); then mean_l2
/// and mean_cos per policy. Cross-seed rows average the per-seed means.
inline std::vector<MetricRow> run_policy_divergence(const ExperimentConfig& config) {
    config.validate();
    detail::require(config.policies.size() >= 2, "diverge: at least two policies required");
    const std::string name = "diverge";
    const std::size_t last_layer = config.model.layers - 1;
    const std::size_t heads = config.model.heads;
    auto rows = for_each_seed(config, [&](std::uint64_t seed) {
        const auto model = model_for_seed(config, seed);
        const auto tokens = tokens_for_seed(config, seed, config.steps);
        Decoder reference(model);
        std::vector<Decoder> runs;
        for (const auto& p : config.policies) {
            runs.emplace_back(model, effective_policy(p));
        }
        // [policy][step * heads + head] -> (l2, cos)
        std::vector<Vec> l2(runs.size()), cs(runs.size());
        for (std::int64_t token : tokens) {
            const DecodeOutput ref = reference.step(token);
            for (std::size_t p = 0; p < runs.size(); ++p) {
                const DecodeOutput got = runs[p].step(token);
                for (std::size_t h = 0; h < heads; ++h) {
                    const auto& a = got.heads[last_layer * heads + h].attention.output;
                    const auto& b = ref.heads[last_layer * heads + h].attention.output;
                    l2[p].push_back(l2_distance(a, b));
                    cs[p].push_back(cosine_similarity(a, b));
                }
            }
        }
        std::vector<MetricRow> out;
        for (std::size_t p = 0; p < runs.size(); ++p) {
            const std::string policy(to_string(config.policies[p].kind));
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                for (std::size_t h = 0; h < heads; ++h) {
                    out.push_back({name, seed, t, last_layer, h, policy, "l2", l2[p][t * heads + h]});
                    out.push_back({name, seed, t, last_layer, h, policy, "cos", cs[p][t * heads + h]});
                }
            }
            out.push_back({name, seed, std::nullopt, last_layer, std::nullopt, policy, "mean_l2",
                           sample_stats(l2[p]).mean});
            out.push_back({name, seed, std::nullopt, last_layer, std::nullopt, policy, "mean_cos",
                           sample_stats(cs[p]).mean});
        }
        return out;
    });

    std::vector<MetricRow> agg;
    for (const auto& p : config.policies) {
        const std::string policy(to_string(p.kind));
        for (const char* metric : {"mean_l2", "mean_cos"}) {
            Vec xs;
            for (const auto& r : rows) {
                if (r.policy == policy && r.metric == metric) {
                    xs.push_back(r.value);
                }
            }
            agg.push_back({name, std::nullopt, std::nullopt, last_layer, std::nullopt, policy, metric,
                           sample_stats(xs).mean});
        }
    }
    rows.insert(rows.end(), agg.begin(), agg.end());
    return rows;
}

/// Picks the seed = all summary value for (policy, metric).
inline double summary_value(const std::vector<MetricRow>& rows, std::string_view policy, std::string_view metric) {
    for (const auto& r : rows) {
        if (!r.seed && !r.step && r.policy == policy && r.metric == metric) {
            return r.value;
        }
    }
    throw Error("no summary row for " + std::string(policy) + "/" + std::string(metric));
}

// ---------------------------------------------------------------------------
// Toy compression trace with a budget of four

/// Average attention of every cached slot, in tenths, after each step's
/// append. Tokens are labelled 1..8. Step 5 is the reference merge
/// (v2 at 0.1 merges into v3 at 0.5); steps 6-8 are chosen so the cache ends
/// at {v3, v6, v7, v8} with v3 and v6 each built from three tokens.
struct Fig3Step {
    std::size_t step;
    std::vector<int> tenths;
};

inline const std::vector<Fig3Step>& fig3_schedule() {
    static const std::vector<Fig3Step> schedule = {
        {1, {10}},
        {2, {9, 1}},
        {3, {9, 1, 5}},
        {4, {9, 1, 5, 8}},
        {5, {9, 1, 5, 8, 7}},
        {6, {6, 5, 2, 6, 8}},
        {7, {6, 5, 3, 7, 9}},
        {8, {2, 5, 6, 7, 8}},
    };
    return schedule;
}

struct Fig3Result {
    std::vector<CompressionEvent> events;
    CacheState final_cache;
};

/// Replays the schedule through WeightedKV with budget 4 and no protected
/// slots. Each slot's history is expressed as ten observations so that
/// a/n is exactly the tabulated tenth. Value v_i is the i-th unit vector, so
/// a merged row shows which tokens it absorbed.
inline Fig3Result replay_fig3() {
    PolicyConfig config;
    config.kind = PolicyKind::WeightedKV;
    config.budget = 4;
    config.sink_count = 0;
    config.recent_count = 0;
    config.validate();

    constexpr std::size_t kTokens = 8;
    Fig3Result result;
    CacheState& cache = result.final_cache;
    for (const auto& row : fig3_schedule()) {
        Vec unit(kTokens, 0.0);
        unit[row.step - 1] = 1.0;
        append(cache, unit, unit, row.step);
        detail::require(row.tenths.size() == cache.size(), "fig3 schedule does not match cache size at step " +
                                                               std::to_string(row.step));
        for (std::size_t i = 0; i < cache.size(); ++i) {
            cache.acc_scores[i] = row.tenths[i];
            cache.counts[i] = 10.0;
        }
        if (cache.size() > config.budget) {
            CompressionEvent e = weightedkv_compress(cache, weightedkv_select(cache, config));
            e.step = row.step;
            result.events.push_back(e);
        }
    }
    return result;
}

/// Runs the replay and checks it; throws Error on any mismatch.
inline std::vector<MetricRow> run_fig3_golden() {
    const Fig3Result r = replay_fig3();
    const std::string name = "golden-fig3";
    std::vector<MetricRow> rows;
    for (const auto& e : r.events) {
        rows.push_back({name, 0, e.step, 0, 0, "WeightedKV", "evicted_position", double(e.evicted_position)});
        rows.push_back({name, 0, e.step, 0, 0, "WeightedKV", "merged_into_position",
                        double(e.merged_into_position.value_or(0))});
        rows.push_back({name, 0, e.step, 0, 0, "WeightedKV", "w_left", e.weights->left});
        rows.push_back({name, 0, e.step, 0, 0, "WeightedKV", "w_right", e.weights->right});
    }
    for (std::size_t i = 0; i < r.final_cache.size(); ++i) {
        const auto v = r.final_cache.values.row(i);
        const auto sources = std::count_if(v.begin(), v.end(), [](double x) { return x > 0.0; });
        rows.push_back({name, 0, 8, 0, 0, "WeightedKV", "retained_position_" + std::to_string(i),
                        double(r.final_cache.positions[i])});
        rows.push_back({name, 0, 8, 0, 0, "WeightedKV", "merged_sources_" + std::to_string(i), double(sources)});
    }

    detail::require(!r.events.empty() && r.events.front().step == 5, "golden-fig3: first compression not at step 5");
    const auto& first = r.events.front();
    detail::require(first.evicted_position == 2 && first.merged_into_position == 3,
                    "golden-fig3: step 5 did not merge v2 into v3");
    detail::require(first.weights->left == 1.0 / 6.0 && first.weights->right == 5.0 / 6.0,
                    "golden-fig3: step 5 weights are not (1/6, 5/6)");
    const std::vector<std::size_t> expected{3, 6, 7, 8};
    detail::require(r.final_cache.positions == expected, "golden-fig3: final cache is not {v3, v6, v7, v8}");
    return rows;
}

// ---------------------------------------------------------------------------
// Ideal merge exactness and approximation gap

struct IdealCase {
    Vec query;
    std::vector<Vec> keys;
    std::vector<Vec> values;
};

inline IdealCase random_ideal_case(std::size_t t, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    auto vec = [&] {
        Vec v(d);
        for (double& x : v) {
            x = g(rng);
        }
        return v;
    };
    IdealCase c;
    c.query = vec();
    for (std::size_t i = 0; i < t; ++i) {
        c.keys.push_back(vec());
        c.values.push_back(vec());
    }
    return c;
}

/// Attention output for one query over explicit key/value lists.
inline Vec attention_output(std::span<const double> query, const std::vector<Vec>& keys,
                            const std::vector<Vec>& values) {
    const Mat k = Mat::from_rows(keys);
    const Vec w = softmax(scaled_scores(query, k, query.size()));
    Vec out(query.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] += w[i] * values[i][c];
        }
    }
    return out;
}

/// ||o(after substitution) - o(before)|| / ||o(before)||.
inline double ideal_substitution_error(const IdealCase& c) {
    const Vec before = attention_output(c.query, c.keys, c.values);
    const Vec merged = ideal_merge(c.query, c.keys, c.values);
    std::vector<Vec> keys(c.keys.begin() + 1, c.keys.end());
    std::vector<Vec> values(c.values.begin() + 1, c.values.end());
    values.front() = merged;
    const Vec after = attention_output(c.query, keys, values);
    return l2_distance(after, before) / std::max(norm(before), 1e-300);
}

/// ||ideal_merge - convex_combine(approx_merge_weights)||.
inline double approximation_gap(const IdealCase& c) {
    const Vec ideal = ideal_merge(c.query, c.keys, c.values);
    const Vec approx = convex_combine(approx_merge_weights(c.query, c.keys[0], c.keys[1]), c.values[0], c.values[1]);
    return l2_distance(ideal, approx);
}

/// Softmax weight of token 0 for the case's query.
inline double evicted_weight(const IdealCase& c) {
    return softmax(scaled_scores(c.query, Mat::from_rows(c.keys), c.query.size()))[0];
}

/// Moves key 0 along the query so its logit becomes `logit`.
inline void set_evicted_logit(IdealCase& c, double logit) {
    const double d = static_cast<double>(c.query.size());
    const double current = dot(c.query, c.keys[0]) / std::sqrt(d);
    const double qq = dot(c.query, c.query);
    const double alpha = (logit - current) * std::sqrt(d) / qq;
    for (std::size_t i = 0; i < c.keys[0].size(); ++i) {
        c.keys[0][i] += alpha * c.query[i];
    }
}

inline const std::vector<std::size_t>& ideal_grid_lengths() {
    static const std::vector<std::size_t> t{2, 3, 4, 8, 16, 32, 64};
    return t;
}
inline const std::vector<std::size_t>& ideal_grid_dims() {
    static const std::vector<std::size_t> d{2, 4, 8, 16, 32};
    return d;
}

/// Length-16, width-8 sweep: the evicted token's logit starts 2 above the
/// largest other logit and drops by 0.5 per point. Returns (weight, gap)
/// pairs in sweep order.
inline std::vector<std::pair<double, double>> approximation_sweep(std::uint64_t seed, std::size_t points) {
    IdealCase c = random_ideal_case(16, 8, seed * 7919 + 1);
    const double scale = 1.0 / std::sqrt(8.0);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < c.keys.size(); ++i) {
        top = std::max(top, dot(c.query, c.keys[i]) * scale);
    }
    std::vector<std::pair<double, double>> out;
    for (std::size_t p = 0; p < points; ++p) {
        set_evicted_logit(c, top + 2.0 - 0.5 * static_cast<double>(p));
        out.emplace_back(evicted_weight(c), approximation_gap(c));
    }
    return out;
}

inline bool non_increasing(const std::vector<std::pair<double, double>>& sweep) {
    for (std::size_t i = 1; i < sweep.size(); ++i) {
        if (sweep[i].second > sweep[i - 1].second * (1.0 + 1e-12)) {
            return false;
        }
    }
    return true;
}

/// Rows per seed: ideal_rel_err and approx_gap at every grid point (metric
/// suffix /t=<t>/d=<d>), max_ideal_rel_err, then the sweep as
/// sweep_weight/<i> and sweep_gap/<i> plus sweep_monotone (1 or 0).
/// Cross-seed rows: max_ideal_rel_err and monotone_fraction.
inline std::vector<MetricRow> run_ideal_check(const ExperimentConfig& config) {
    config.validate();
    const std::string name = "ideal-check";
    auto rows = for_each_seed(config, [&](std::uint64_t seed) {
        std::vector<MetricRow> out;
        double worst = 0.0;
        for (std::size_t t : ideal_grid_lengths()) {
            for (std::size_t d : ideal_grid_dims()) {
                const IdealCase c = random_ideal_case(t, d, seed * 1000003 + t * 101 + d);
                const double err = ideal_substitution_error(c);
                worst = std::max(worst, err);
                const std::string suffix = "/t=" + std::to_string(t) + "/d=" + std::to_string(d);
                out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none", "ideal_rel_err" + suffix,
                               err});
                out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none", "approx_gap" + suffix,
                               approximation_gap(c)});
            }
        }
        out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none", "max_ideal_rel_err", worst});
        const auto sweep = approximation_sweep(seed, config.sweep_points);
        for (std::size_t i = 0; i < sweep.size(); ++i) {
            out.push_back({name, seed, i, std::nullopt, std::nullopt, "none", "sweep_weight", sweep[i].first});
            out.push_back({name, seed, i, std::nullopt, std::nullopt, "none", "sweep_gap", sweep[i].second});
        }
        out.push_back({name, seed, std::nullopt, std::nullopt, std::nullopt, "none", "sweep_monotone",
                       non_increasing(sweep) ? 1.0 : 0.0});
        return out;
    });
    double worst = 0.0, monotone = 0.0;
    for (const auto& r : rows) {
        if (r.metric == "max_ideal_rel_err") {
            worst = std::max(worst, r.value);
        } else if (r.metric == "sweep_monotone") {
            monotone += r.value / static_cast<double>(config.seeds.size());
        }
    }
    rows.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, "none", "max_ideal_rel_err", worst});
    rows.push_back({name, std::nullopt, std::nullopt, std::nullopt, std::nullopt, "none", "monotone_fraction", monotone});
    return rows;
}

// ---------------------------------------------------------------------------
// Trace replay

/// Applies one policy to every (layer, head) of a recorded trace. Heads are
/// replayed independently on the recorded q/k/v. Rows per (step, layer,
/// head): cache_size, l2 and cos against uncompressed attention on the same
/// records, and evicted_position whenever a compression happens.
inline std::vector<MetricRow> run_replay(const QKVTrace& trace, const PolicyConfig& policy) {
    const PolicyConfig effective = effective_policy(policy);
    effective.validate();
    const std::string name = "replay";
    const std::string policy_name(to_string(policy.kind));
    std::vector<MetricRow> rows;
    for (std::size_t l = 0; l < trace.layers; ++l) {
        for (std::size_t h = 0; h < trace.heads; ++h) {
            std::vector<Vec> qs, ks, vs;
            for (std::size_t s = 0; s < trace.steps(); ++s) {
                const auto& r = trace.at(s, l, h);
                qs.push_back(r.q);
                ks.push_back(r.k);
                vs.push_back(r.v);
            }
            const auto reference = full_attention_reference(qs, ks, vs);
            PolicyConfig per_head = effective;
            per_head.rng_seed += l * trace.heads + h;
            BudgetEnforcer enforcer(per_head);
            CacheState cache;
            for (std::size_t s = 0; s < trace.steps(); ++s) {
                append(cache, ks[s], vs[s], s);
                const AttentionStep st = attend(cache, qs[s]);
                const auto event = enforcer.enforce(cache, st.weights);
                rows.push_back({name, policy.rng_seed, s, l, h, policy_name, "cache_size", double(cache.size())});
                rows.push_back({name, policy.rng_seed, s, l, h, policy_name, "l2", l2_distance(st.output, reference[s])});
                rows.push_back(
                    {name, policy.rng_seed, s, l, h, policy_name, "cos", cosine_similarity(st.output, reference[s])});
                if (event) {
                    rows.push_back(
                        {name, policy.rng_seed, s, l, h, policy_name, "evicted_position", double(event->evicted_position)});
                }
            }
        }
    }
    return rows;
}

}  // namespace wkv
