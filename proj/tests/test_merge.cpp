// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "weightedkv/experiments.hpp"
#include "weightedkv/merge.hpp"

using wkv::MergeWeights;
using wkv::Vec;

namespace {

/// The closed form evaluated term by term with raw exponentials in long
/// double, summing the tail from the last token backwards.
Vec closed_form_longhand(const Vec& q, const std::vector<Vec>& keys, const std::vector<Vec>& values) {
    const std::size_t d = q.size();
    const long double root = std::sqrt((long double)d);
    std::vector<long double> e(keys.size());
    for (std::size_t i = keys.size(); i-- > 0;) {
        long double s = 0.0L;
        for (std::size_t c = d; c-- > 0;) s += (long double)q[c] * keys[i][c];
        e[i] = std::exp(s / root);
    }
    long double total = 0.0L;
    for (std::size_t i = keys.size(); i-- > 0;) total += e[i];
    const long double diff = e[0] / e[1];  // e^{q(k1-k2)/sqrt d}
    Vec out(d);
    for (std::size_t c = 0; c < d; ++c) {
        long double tail = 0.0L;
        for (std::size_t i = keys.size(); i-- > 2;) tail += e[i] * values[i][c];
        const long double v = (1.0L - e[0] / total) * (diff * values[0][c] + values[1][c]) - diff / total * tail;
        out[c] = static_cast<double>(v);
    }
    return out;
}

double relative_error(const Vec& a, const Vec& b) {
    return wkv::l2_distance(a, b) / std::max(wkv::norm(b), 1e-300);
}

}  // namespace

TEST(IdealMerge, TwoTokensIsTheSoftmaxBlend) {
    const Vec q{0.4, -1.1, 2.0};
    const std::vector<Vec> keys{{1, 0.5, -0.3}, {-0.2, 0.8, 0.9}};
    const std::vector<Vec> values{{1, 2, 3}, {-4, 0, 6}};
    const Vec got = wkv::ideal_merge(q, keys, values);
    const double s = 1.0 / std::sqrt(3.0);
    const Vec p = wkv::softmax(Vec{wkv::dot(q, keys[0]) * s, wkv::dot(q, keys[1]) * s});
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(got[c], p[0] * values[0][c] + p[1] * values[1][c], 1e-13);
}

TEST(IdealMerge, SubstitutionPreservesOutput) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const std::size_t t = 2 + seed % 30;
        const std::size_t d = 2 + seed % 11;
        const auto c = wkv::random_ideal_case(t, d, seed);
        const Vec merged = wkv::ideal_merge(c.query, c.keys, c.values);
        std::vector<Vec> keys(c.keys.begin() + 1, c.keys.end());
        std::vector<Vec> values(c.values.begin() + 1, c.values.end());
        values.front() = merged;
        const Vec before = oracle::attention(c.query, c.keys, c.values);
        const Vec after = oracle::attention(c.query, keys, values);
        EXPECT_LE(relative_error(after, before), 1e-10) << "t=" << t << " d=" << d;
    }
}

TEST(IdealMerge, MatchesClosedFormLonghand) {
    const auto c = wkv::random_ideal_case(16, 8, 16008);
    const Vec got = wkv::ideal_merge(c.query, c.keys, c.values);
    const Vec want = closed_form_longhand(c.query, c.keys, c.values);
    EXPECT_LE(relative_error(got, want), 1e-10);
}

TEST(IdealMerge, NeedsTwoTokens) {
    EXPECT_THROW(wkv::ideal_merge(Vec{1, 0}, {{1, 0}}, {{1, 1}}), wkv::Error);
}

TEST(ApproxMergeWeights, IdenticalKeysOrZeroQuerySplitEvenly) {
    const MergeWeights a = wkv::approx_merge_weights(Vec{3, -1}, Vec{1, 2}, Vec{1, 2});
    EXPECT_EQ(a.left, 0.5);
    EXPECT_EQ(a.right, 0.5);
    const MergeWeights b = wkv::approx_merge_weights(Vec{0, 0}, Vec{5, 2}, Vec{-1, 9});
    EXPECT_EQ(b.left, 0.5);
    EXPECT_EQ(b.right, 0.5);
}

TEST(ApproxMergeWeights, LogThreeLogitGap) {
    // d = 1: logits are the plain products; q.k1 = 0, q.k2 = ln 3.
    const MergeWeights w = wkv::approx_merge_weights(Vec{1}, Vec{0}, Vec{std::log(3.0)});
    EXPECT_NEAR(w.left, 0.25, 1e-15);
    EXPECT_NEAR(w.right, 0.75, 1e-15);
}

TEST(ApproxMergeWeights, ConvexAndShiftInvariantAtExtremeLogits) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 300.0);
    for (int i = 0; i < 500; ++i) {
        const Vec q{1.0};
        const double l1 = g(rng), l2 = g(rng), shift = g(rng);
        const MergeWeights a = wkv::approx_merge_weights(q, Vec{l1}, Vec{l2});
        const MergeWeights b = wkv::approx_merge_weights(q, Vec{l1 + shift}, Vec{l2 + shift});
        EXPECT_TRUE(a.valid());
        EXPECT_NEAR(a.left, b.left, 1e-9);
        EXPECT_NEAR(a.right, b.right, 1e-9);
    }
}

TEST(ConvexCombine, ToyTraceBlend) {
    const Vec out = wkv::convex_combine({1.0 / 6.0, 5.0 / 6.0}, Vec{6, 0}, Vec{0, 6});
    EXPECT_NEAR(out[0], 1.0, 1e-15);
    EXPECT_NEAR(out[1], 5.0, 1e-15);
}

TEST(ConvexCombine, DegenerateAndHandWeights) {
    EXPECT_EQ(wkv::convex_combine({1.0, 0.0}, Vec{3, -2}, Vec{9, 9}), (Vec{3, -2}));
    EXPECT_NEAR(wkv::convex_combine({0.3, 0.7}, Vec{10}, Vec{0})[0], 3.0, 1e-15);
    EXPECT_THROW(wkv::convex_combine({0.5, 0.5}, Vec{1}, Vec{1, 2}), wkv::Error);
    EXPECT_THROW(wkv::convex_combine({0.9, 0.9}, Vec{1}, Vec{2}), wkv::Error);
}

TEST(ConvexCombine, StaysBetweenSources) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 100.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double wl = u(rng);
        const Vec a{g(rng), g(rng), g(rng)}, b{g(rng), g(rng), g(rng)};
        const Vec out = wkv::convex_combine({wl, 1.0 - wl}, a, b);
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_GE(out[c], std::min(a[c], b[c]));
            EXPECT_LE(out[c], std::max(a[c], b[c]));
        }
    }
}

TEST(AttentionPerturbation, HandExamples) {
    EXPECT_NEAR(wkv::attention_perturbation(Vec{0.2, 0.3, 0.5}, Vec{0.5, 0.5}, 0), 1.0, 1e-15);
    EXPECT_NEAR(wkv::attention_perturbation(Vec{0.25, 0.25, 0.5}, Vec{0.5, 0.5}, 0), 1.0, 1e-15);
    EXPECT_NEAR(wkv::attention_perturbation(Vec{0.5, 0.25, 0.25}, Vec{0.25, 0.75}, 0), 0.6, 1e-15);
}

TEST(AttentionPerturbation, LengthMismatchThrows) {
    EXPECT_THROW(wkv::attention_perturbation(Vec{0.5, 0.5}, Vec{0.5, 0.5}, 0), wkv::Error);
    EXPECT_THROW(wkv::attention_perturbation(Vec{0.5, 0.25, 0.25}, Vec{0.5, 0.5}, 2), wkv::Error);
}

TEST(ApproximationGap, VanishesWithoutATail) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto c = wkv::random_ideal_case(2, 2 + seed % 9, seed);
        EXPECT_LE(wkv::approximation_gap(c), 1e-12);
    }
}

TEST(ApproximationGap, ShrinksAsEvictedWeightDrops) {
    int monotone = 0;
    const int sweeps = 100;
    for (int s = 0; s < sweeps; ++s) {
        const auto sweep = wkv::approximation_sweep(static_cast<std::uint64_t>(s), 16);
        for (std::size_t i = 1; i < sweep.size(); ++i) EXPECT_LT(sweep[i].first, sweep[i - 1].first);
        EXPECT_LT(sweep.back().second, sweep.front().second);
        monotone += wkv::non_increasing(sweep) ? 1 : 0;
    }
    EXPECT_GE(monotone, 90);
}
