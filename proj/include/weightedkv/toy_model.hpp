// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "weightedkv/attention.hpp"
#include "weightedkv/error.hpp"
#include "weightedkv/numerics.hpp"
#include "weightedkv/policies.hpp"

namespace wkv {

enum class SequenceSource { RandomTokens, FileTokens };

struct ToyModelConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t d_head = 16;
    std::size_t vocab = 256;
    std::uint64_t seed = 0;
    SequenceSource sequence_source = SequenceSource::RandomTokens;
    double rope_base = 10000.0;

    [[nodiscard]] std::size_t d_model() const noexcept { return heads * d_head; }

    void validate() const {
        detail::require(layers >= 1 && heads >= 1 && d_head >= 1 && vocab >= 1,
                        "ToyModelConfig: all counts must be at least 1");
        detail::require(d_head % 2 == 0, "ToyModelConfig: d_head must be even for rotary positions");
        detail::require(rope_base > 1.0, "ToyModelConfig: rope_base must exceed 1");
    }
};

/// Per-layer projections, all d_model x d_model. Rows [h*d_head, (h+1)*d_head)
/// of wq/wk/wv belong to head h.
struct LayerWeights {
    Mat wq;
    Mat wk;
    Mat wv;
    Mat wo;
    Mat wff;
};

struct ToyModel {
    ToyModelConfig config;
    Mat embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
};

/// Seeded random weights. Embedding rows ~ N(0, 1); every projection entry
/// ~ N(0, 1/d_model). Draw order is embedding, then per layer wq, wk, wv, wo,
/// wff, each row-major, all from one mt19937_64 stream.
inline std::shared_ptr<const ToyModel> init_model(const ToyModelConfig& config) {
    config.validate();
    auto model = std::make_shared<ToyModel>();
    model->config = config;
    const std::size_t dm = config.d_model();

    std::mt19937_64 rng(config.seed);
    auto fill = [&](std::size_t rows, std::size_t cols, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        Mat m(rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                m(r, c) = dist(rng);
            }
        }
        return m;
    };

    model->embedding = fill(config.vocab, dm, 1.0);
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(dm));
    for (std::size_t l = 0; l < config.layers; ++l) {
        LayerWeights w;
        w.wq = fill(dm, dm, proj_std);
        w.wk = fill(dm, dm, proj_std);
        w.wv = fill(dm, dm, proj_std);
        w.wo = fill(dm, dm, proj_std);
        w.wff = fill(dm, dm, proj_std);
        model->layers.push_back(std::move(w));
    }
    return model;
}

/// rows [row_begin, row_begin + out_dim) of m times x.
inline Vec matvec_rows(const Mat& m, std::span<const double> x, std::size_t row_begin, std::size_t out_dim) {
    Vec out(out_dim);
    for (std::size_t r = 0; r < out_dim; ++r) {
        out[r] = dot(m.row(row_begin + r), x);
    }
    return out;
}

inline Vec rms_norm(std::span<const double> x) {
    double ms = dot(x, x) / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    Vec out(x.begin(), x.end());
    for (double& v : out) {
        v *= inv;
    }
    return out;
}

/// Rotary position encoding: each pair (x[2i], x[2i+1]) is rotated by
/// position * base^(-2i/d).
inline void apply_rotary(std::span<double> x, std::size_t position, double base) {
    const std::size_t d = x.size();
    for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double theta =
            static_cast<double>(position) * std::pow(base, -static_cast<double>(i) / static_cast<double>(d));
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double x0 = x[i];
        const double x1 = x[i + 1];
        x[i] = x0 * c - x1 * s;
        x[i + 1] = x0 * s + x1 * c;
    }
}

inline std::vector<std::int64_t> random_tokens(std::size_t count, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::int64_t> dist(0, static_cast<std::int64_t>(vocab) - 1);
    std::vector<std::int64_t> out(count);
    for (auto& t : out) {
        t = dist(rng);
    }
    return out;
}

struct HeadStep {
    AttentionStep attention;  // carries q, k, v and the resulting weights/output
    std::optional<CompressionEvent> event;
};

struct DecodeOutput {
    std::size_t step = 0;
    std::vector<HeadStep> heads;  // layer-major: index layer * heads + head
    Vec hidden;                   // residual stream after the last layer
};

/// Runs the toy stack one token at a time. Every (layer, head) owns an
/// independent cache and, if a policy is given, an independent enforcer.
///
/// Per layer: u = rms_norm(x); q, k, v = W u per head with rotary q and k;
/// attention through the cache; x += W_o [o_0 ... o_H]; then
/// x += tanh(W_ff rms_norm(x)).
class Decoder {
public:
    explicit Decoder(std::shared_ptr<const ToyModel> model, std::optional<PolicyConfig> policy = std::nullopt)
        : model_(std::move(model)) {
        detail::require(model_ != nullptr, "Decoder: null model");
        const auto& cfg = model_->config;
        caches_.resize(cfg.layers * cfg.heads);
        if (policy) {
            // Each head draws from its own CaM stream: seed + head index.
            enforcers_.reserve(caches_.size());
            for (std::size_t i = 0; i < caches_.size(); ++i) {
                PolicyConfig per_head = *policy;
                per_head.rng_seed += i;
                enforcers_.emplace_back(per_head);
            }
        }
    }

    [[nodiscard]] const ToyModel& model() const noexcept { return *model_; }
    [[nodiscard]] std::size_t steps_taken() const noexcept { return step_; }

    CacheState& cache(std::size_t layer, std::size_t head) { return caches_.at(layer * model_->config.heads + head); }
    [[nodiscard]] const CacheState& cache(std::size_t layer, std::size_t head) const {
        return caches_.at(layer * model_->config.heads + head);
    }

    DecodeOutput step(std::int64_t token) {
        const auto& cfg = model_->config;
        detail::require(token >= 0 && static_cast<std::size_t>(token) < cfg.vocab,
                        "token id " + std::to_string(token) + " out of vocabulary of " + std::to_string(cfg.vocab));
        const std::size_t dm = cfg.d_model();
        const std::size_t dh = cfg.d_head;

        DecodeOutput out;
        out.step = step_;
        out.heads.reserve(cfg.layers * cfg.heads);
        Vec x = model_->embedding.row_vec(static_cast<std::size_t>(token));

        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const LayerWeights& w = model_->layers[l];
            const Vec u = rms_norm(x);
            Vec concat(dm);
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                Vec q = matvec_rows(w.wq, u, h * dh, dh);
                Vec k = matvec_rows(w.wk, u, h * dh, dh);
                Vec v = matvec_rows(w.wv, u, h * dh, dh);
                apply_rotary(q, step_, cfg.rope_base);
                apply_rotary(k, step_, cfg.rope_base);

                const std::size_t idx = l * cfg.heads + h;
                CacheState& c = caches_[idx];
                append(c, k, v, step_);
                HeadStep hs;
                hs.attention = attend(c, q);
                if (!enforcers_.empty()) {
                    hs.event = enforcers_[idx].enforce(c, hs.attention.weights);
                }
                std::copy(hs.attention.output.begin(), hs.attention.output.end(),
                          concat.begin() + static_cast<std::ptrdiff_t>(h * dh));
                out.heads.push_back(std::move(hs));
            }
            const Vec attn_out = matvec_rows(w.wo, concat, 0, dm);
            for (std::size_t i = 0; i < dm; ++i) {
                x[i] += attn_out[i];
            }
            const Vec ff = matvec_rows(w.wff, rms_norm(x), 0, dm);
            for (std::size_t i = 0; i < dm; ++i) {
                x[i] += std::tanh(ff[i]);
            }
        }
        out.hidden = std::move(x);
        ++step_;
        return out;
    }

private:
    std::shared_ptr<const ToyModel> model_;
    std::vector<CacheState> caches_;
    std::vector<BudgetEnforcer> enforcers_;
    std::size_t step_ = 0;
};

struct HeadQKV {
    Vec q;
    Vec k;
    Vec v;

    friend bool operator==(const HeadQKV&, const HeadQKV&) = default;
};

/// Projected q/k/v for every (step, layer, head); rectangular by
/// construction.
struct QKVTrace {
    std::size_t layers = 1;
    std::size_t heads = 1;
    std::size_t d_head = 0;
    std::vector<std::int64_t> token_ids;  // one per step; -1 for synthetic streams
    std::vector<HeadQKV> records;         // step-major, then layer, then head

    [[nodiscard]] std::size_t steps() const noexcept { return token_ids.size(); }

    [[nodiscard]] const HeadQKV& at(std::size_t step, std::size_t layer, std::size_t head) const {
        return records.at((step * layers + layer) * heads + head);
    }
    HeadQKV& at(std::size_t step, std::size_t layer, std::size_t head) {
        return records.at((step * layers + layer) * heads + head);
    }

    /// Keys (or values) of one head stacked by step.
    [[nodiscard]] Mat key_matrix(std::size_t layer, std::size_t head) const { return stack(layer, head, &HeadQKV::k); }
    [[nodiscard]] Mat value_matrix(std::size_t layer, std::size_t head) const {
        return stack(layer, head, &HeadQKV::v);
    }

    friend bool operator==(const QKVTrace&, const QKVTrace&) = default;

private:
    [[nodiscard]] Mat stack(std::size_t layer, std::size_t head, Vec HeadQKV::*field) const {
        Mat m(0, d_head);
        for (std::size_t s = 0; s < steps(); ++s) {
            m.append_row(at(s, layer, head).*field);
        }
        return m;
    }
};

/// Runs the model over token_ids and records every projection. With a policy,
/// later layers see the outputs of compressed attention below them.
inline QKVTrace generate_trace(std::shared_ptr<const ToyModel> model, const std::vector<std::int64_t>& token_ids,
                               const std::optional<PolicyConfig>& policy = std::nullopt) {
    detail::require(!token_ids.empty(), "generate_trace: empty token sequence");
    const auto& cfg = model->config;
    QKVTrace trace;
    trace.layers = cfg.layers;
    trace.heads = cfg.heads;
    trace.d_head = cfg.d_head;
    trace.token_ids = token_ids;
    trace.records.reserve(token_ids.size() * cfg.layers * cfg.heads);

    Decoder decoder(std::move(model), policy);
    for (std::int64_t token : token_ids) {
        DecodeOutput out = decoder.step(token);
        for (auto& hs : out.heads) {
            trace.records.push_back(
                {std::move(hs.attention.query), std::move(hs.attention.new_key), std::move(hs.attention.new_value)});
        }
    }
    return trace;
}

enum class SyntheticKind { IsotropicGaussian, LowRankValues, PeakedAttention };

struct SyntheticOptions {
    // LowRankValues: rank of the value subspace and additive noise scale
    std::size_t rank = 2;
    double noise = 0.0;
    // PeakedAttention: the token every later query concentrates on
    std::size_t peak_index = 0;
};

/// Single-layer, single-head stream.
///
/// LowRankValues draws v_t = sum_r c_{t,r} b_r + noise * e_t with a fixed
/// Gaussian basis b. PeakedAttention aligns every query from peak_index on
/// with one unit direction u, gives the peak key a logit of at least
/// ln(steps) + 1 along u, and projects every other key orthogonal to u, so
/// the peak token keeps more than half the attention mass.
inline QKVTrace synthetic_qkv(SyntheticKind kind, std::size_t steps, std::size_t d, std::uint64_t seed,
                              const SyntheticOptions& options = {}) {
    detail::require(steps >= 1, "synthetic_qkv: steps must be at least 1");
    detail::require(d >= 1, "synthetic_qkv: d must be at least 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto gaussian_vec = [&] {
        Vec v(d);
        for (double& x : v) {
            x = gauss(rng);
        }
        return v;
    };

    QKVTrace trace;
    trace.d_head = d;
    trace.token_ids.assign(steps, -1);
    trace.records.resize(steps);

    switch (kind) {
        case SyntheticKind::IsotropicGaussian:
            for (auto& r : trace.records) {
                r = {gaussian_vec(), gaussian_vec(), gaussian_vec()};
            }
            break;
        case SyntheticKind::LowRankValues: {
            detail::require(options.rank >= 1 && options.rank <= d, "synthetic_qkv: rank must lie in [1, d]");
            detail::require(options.noise >= 0.0, "synthetic_qkv: noise must be non-negative");
            std::vector<Vec> basis;
            for (std::size_t r = 0; r < options.rank; ++r) {
                basis.push_back(gaussian_vec());
            }
            for (auto& rec : trace.records) {
                rec.q = gaussian_vec();
                rec.k = gaussian_vec();
                rec.v.assign(d, 0.0);
                for (const Vec& b : basis) {
                    const double coeff = gauss(rng);
                    for (std::size_t c = 0; c < d; ++c) {
                        rec.v[c] += coeff * b[c];
                    }
                }
                if (options.noise > 0.0) {
                    for (double& x : rec.v) {
                        x += options.noise * gauss(rng);
                    }
                }
            }
            break;
        }
        case SyntheticKind::PeakedAttention: {
            detail::require(d >= 2, "synthetic_qkv: peaked attention needs d >= 2");
            detail::require(options.peak_index < steps, "synthetic_qkv: peak_index beyond sequence");
            Vec u = gaussian_vec();
            const double un = norm(u);
            for (double& x : u) {
                x /= un;
            }
            const double lift = std::log(static_cast<double>(std::max<std::size_t>(steps, 2))) + 1.0;
            std::uniform_real_distribution<double> query_scale(1.0, 2.0);
            for (std::size_t t = 0; t < steps; ++t) {
                auto& rec = trace.records[t];
                if (t == options.peak_index) {
                    rec.k = u;
                    for (double& x : rec.k) {
                        x *= std::sqrt(static_cast<double>(d)) * lift;
                    }
                } else {
                    rec.k = gaussian_vec();
                    const double along = dot(rec.k, u);
                    for (std::size_t c = 0; c < d; ++c) {
                        rec.k[c] -= along * u[c];
                    }
                }
                if (t >= options.peak_index) {
                    const double s = query_scale(rng);
                    rec.q = u;
                    for (double& x : rec.q) {
                        x *= s;
                    }
                } else {
                    rec.q = gaussian_vec();
                }
                rec.v = gaussian_vec();
            }
            break;
        }
    }
    return trace;
}

}  // namespace wkv
