// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "weightedkv/toy_model.hpp"
#include "weightedkv/trace_io.hpp"

using wkv::Vec;

namespace {

wkv::ToyModelConfig small_config(std::uint64_t seed) {
    wkv::ToyModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_head = 8;
    c.vocab = 32;
    c.seed = seed;
    return c;
}

}  // namespace

TEST(InitModel, SameSeedSameWeights) {
    const auto a = wkv::init_model(small_config(5));
    const auto b = wkv::init_model(small_config(5));
    EXPECT_EQ(a->embedding, b->embedding);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(a->layers[l].wq, b->layers[l].wq);
        EXPECT_EQ(a->layers[l].wff, b->layers[l].wff);
    }
}

TEST(InitModel, DifferentSeedsDiffer) {
    const auto a = wkv::init_model(small_config(5));
    const auto b = wkv::init_model(small_config(6));
    EXPECT_FALSE(a->embedding == b->embedding);
    EXPECT_FALSE(a->layers[0].wk == b->layers[0].wk);
}

TEST(InitModel, ProjectionScaleMatchesFanIn) {
    wkv::ToyModelConfig c;
    c.layers = 10;
    c.heads = 2;
    c.d_head = 8;
    c.vocab = 4;
    c.seed = 7;
    const auto m = wkv::init_model(c);
    // 10 layers x 5 matrices x 256 entries of N(0, 1/16).
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& w : m->layers) {
        for (const wkv::Mat* mat : {&w.wq, &w.wk, &w.wv, &w.wo, &w.wff}) {
            for (std::size_t r = 0; r < 16; ++r)
                for (std::size_t col = 0; col < 16; ++col) {
                    sum += (*mat)(r, col);
                    sq += (*mat)(r, col) * (*mat)(r, col);
                    ++n;
                }
        }
    }
    const double var = 1.0 / 16.0;
    const double mean = sum / n;
    EXPECT_LE(std::abs(mean), 3.0 * std::sqrt(var / n));
    // Sample variance of a Gaussian has standard error var * sqrt(2 / n).
    EXPECT_NEAR(sq / n, var, 3.0 * var * std::sqrt(2.0 / n));
}

TEST(InitModel, RejectsOddHeadWidth) {
    auto c = small_config(1);
    c.d_head = 7;
    EXPECT_THROW(wkv::init_model(c), wkv::Error);
}

TEST(Rotary, PreservesNormAndIsIdentityAtZero) {
    Vec x{1.0, 2.0, -3.0, 0.5};
    const Vec orig = x;
    wkv::apply_rotary(x, 0, 10000.0);
    EXPECT_EQ(x, orig);
    wkv::apply_rotary(x, 37, 10000.0);
    EXPECT_NEAR(wkv::norm(x), wkv::norm(orig), 1e-12);
    // First pair turns by exactly 37 radians.
    EXPECT_NEAR(x[0], std::cos(37.0) - 2.0 * std::sin(37.0), 1e-12);
}

TEST(GenerateTrace, SingleTokenShape) {
    const auto m = wkv::init_model(small_config(2));
    const auto t = wkv::generate_trace(m, {3});
    EXPECT_EQ(t.steps(), 1u);
    EXPECT_EQ(t.records.size(), 4u);
    for (const auto& r : t.records) {
        EXPECT_EQ(r.q.size(), 8u);
        EXPECT_TRUE(wkv::all_finite(r.k));
    }
}

TEST(GenerateTrace, UnboundedFullKVMatchesNoPolicy) {
    const auto m = wkv::init_model(small_config(2));
    const auto tokens = wkv::random_tokens(40, 32, 2);
    wkv::PolicyConfig p;
    p.kind = wkv::PolicyKind::FullKV;
    EXPECT_EQ(wkv::generate_trace(m, tokens), wkv::generate_trace(m, tokens, p));
}

TEST(GenerateTrace, FirstLayerKeysMatchIndependentProjection) {
    wkv::ToyModelConfig c;
    c.seed = 3;
    const auto m = wkv::init_model(c);
    const auto tokens = wkv::random_tokens(64, c.vocab, 3);
    const auto trace = wkv::generate_trace(m, tokens);
    const std::size_t dm = c.d_model();
    for (std::size_t s = 0; s < tokens.size(); ++s) {
        const auto e = m->embedding.row(static_cast<std::size_t>(tokens[s]));
        double ms = 0.0;
        for (std::size_t i = 0; i < dm; ++i) ms += e[i] * e[i];
        const double inv = 1.0 / std::sqrt(ms / dm + 1e-6);
        Vec k(c.d_head, 0.0);
        for (std::size_t r = 0; r < c.d_head; ++r)
            for (std::size_t i = 0; i < dm; ++i) k[r] += m->layers[0].wk(r, i) * e[i] * inv;
        for (std::size_t i = 0; i < c.d_head; i += 2) {
            const double th = s * std::pow(10000.0, -double(i) / c.d_head);
            const double a = k[i], b = k[i + 1];
            k[i] = a * std::cos(th) - b * std::sin(th);
            k[i + 1] = a * std::sin(th) + b * std::cos(th);
        }
        const Vec& got = trace.at(s, 0, 0).k;
        for (std::size_t i = 0; i < c.d_head; ++i) EXPECT_NEAR(got[i], k[i], 1e-12) << "step " << s;
    }
}

TEST(GenerateTrace, TokenOutsideVocabularyThrows) {
    const auto m = wkv::init_model(small_config(2));
    EXPECT_THROW(wkv::generate_trace(m, {1, 32}), wkv::Error);
    EXPECT_THROW(wkv::generate_trace(m, {-1}), wkv::Error);
    EXPECT_THROW(wkv::generate_trace(m, {}), wkv::Error);
}

TEST(GenerateTrace, RepeatedRunsAreIdentical) {
    const auto m = wkv::init_model(small_config(9));
    const auto tokens = wkv::random_tokens(30, 32, 9);
    wkv::PolicyConfig p;
    p.kind = wkv::PolicyKind::CaM;
    p.budget = 8;
    p.sink_count = 1;
    p.recent_count = 2;
    EXPECT_EQ(wkv::generate_trace(m, tokens, p), wkv::generate_trace(m, tokens, p));
}

TEST(Decoder, PolicyCapsEveryHeadCache) {
    const auto m = wkv::init_model(small_config(4));
    wkv::PolicyConfig p;
    p.kind = wkv::PolicyKind::WeightedKV;
    p.budget = 6;
    p.sink_count = 1;
    p.recent_count = 1;
    wkv::Decoder dec(m, p);
    for (auto tok : wkv::random_tokens(20, 32, 4)) dec.step(tok);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t h = 0; h < 2; ++h) {
            EXPECT_EQ(dec.cache(l, h).size(), 6u);
            EXPECT_EQ(dec.cache(l, h).positions.front(), 0u);
            EXPECT_EQ(dec.cache(l, h).positions.back(), 19u);
        }
}

TEST(Synthetic, LowRankValuesHaveRankTwo) {
    wkv::SyntheticOptions o;
    o.rank = 2;
    const auto t = wkv::synthetic_qkv(wkv::SyntheticKind::LowRankValues, 64, 16, 5, o);
    const Vec s = wkv::normalized_spectrum(t.value_matrix(0, 0));
    EXPECT_GT(s[1], 1e-6);
    for (std::size_t i = 2; i < s.size(); ++i) EXPECT_LE(s[i], 1e-10);
}

TEST(Synthetic, IsotropicSingleStep) {
    const auto t = wkv::synthetic_qkv(wkv::SyntheticKind::IsotropicGaussian, 1, 4, 1);
    ASSERT_EQ(t.steps(), 1u);
    EXPECT_EQ(t.token_ids.front(), -1);
    EXPECT_EQ(t.at(0, 0, 0).v.size(), 4u);
}

TEST(Synthetic, PeakedTokenHoldsMajorityOfAttention) {
    wkv::SyntheticOptions o;
    o.peak_index = 3;
    const std::size_t steps = 200;
    const auto t = wkv::synthetic_qkv(wkv::SyntheticKind::PeakedAttention, steps, 8, 12, o);
    wkv::CacheState c;
    for (std::size_t s = 0; s < steps; ++s) {
        const auto& r = t.at(s, 0, 0);
        wkv::append(c, r.k, r.v, s);
        const auto st = wkv::attend(c, r.q);
        if (s >= o.peak_index) {
            EXPECT_GE(st.weights[o.peak_index], 0.5) << "step " << s;
        }
    }
}

TEST(Synthetic, InvalidParametersThrow) {
    wkv::SyntheticOptions o;
    o.rank = 0;
    EXPECT_THROW(wkv::synthetic_qkv(wkv::SyntheticKind::LowRankValues, 8, 4, 1, o), wkv::Error);
    o.rank = 5;
    EXPECT_THROW(wkv::synthetic_qkv(wkv::SyntheticKind::LowRankValues, 8, 4, 1, o), wkv::Error);
    wkv::SyntheticOptions p;
    p.peak_index = 8;
    EXPECT_THROW(wkv::synthetic_qkv(wkv::SyntheticKind::PeakedAttention, 8, 4, 1, p), wkv::Error);
    EXPECT_THROW(wkv::synthetic_qkv(wkv::SyntheticKind::IsotropicGaussian, 0, 4, 1), wkv::Error);
}

TEST(TraceIO, JsonlRoundTripIsBitExact) {
    const auto m = wkv::init_model(small_config(11));
    const auto trace = wkv::generate_trace(m, wkv::random_tokens(12, 32, 11));
    std::stringstream ss;
    wkv::write_trace_jsonl(ss, trace);
    const auto back = wkv::read_trace_jsonl(ss);
    EXPECT_EQ(back, trace);
}

TEST(TraceIO, RejectsMissingRecords) {
    std::stringstream ss;
    ss << R"({"step":0,"layer":0,"head":0,"token_id":1,"q":[1,2],"k":[1,2],"v":[1,2]})" << '\n'
       << R"({"step":0,"layer":0,"head":1,"token_id":1,"q":[1,2],"k":[1,2],"v":[1,2]})" << '\n'
       << R"({"step":1,"layer":0,"head":0,"token_id":1,"q":[1,2],"k":[1,2],"v":[1,2]})" << '\n';
    EXPECT_THROW(wkv::read_trace_jsonl(ss), wkv::Error);
    std::stringstream bad("not json\n");
    EXPECT_THROW(wkv::read_trace_jsonl(bad), wkv::Error);
}
