// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace {

using namespace sparsedecode;
using sdtest::Instance;
using sdtest::make_instance;

SparseIndexSet full_index_set(const Instance& inst) {
    SparseIndexSet idx(1, inst.q_heads());
    for (std::size_t h = 0; h < inst.q_heads(); ++h) {
        idx.at(0, h).indices.resize(inst.n);
        std::iota(idx.at(0, h).indices.begin(), idx.at(0, h).indices.end(), TokenIndex{0});
    }
    return idx;
}

static_assert(gqa_kv_head(0, 4) == 0);
static_assert(gqa_kv_head(5, 4) == 1);
static_assert(gqa_kv_head(31, 4) == 7);

TEST(Attention, SingletonReturnsValueRow) {
    const auto inst = make_instance(1, 2, 2, 8, 4, 1);
    const auto out = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
    for (std::size_t h = 0; h < inst.q_heads(); ++h) {
        for (std::size_t d = 0; d < inst.dim; ++d) EXPECT_EQ(out.at(0, h)[d], inst.value(0, inst.kv_of(h))[d]);
    }
}

TEST(Attention, IdenticalKeysAverageValues) {
    auto inst = make_instance(50, 1, 1, 8, 4, 2);
    for (std::size_t t = 0; t < inst.n; ++t) std::copy(inst.key(0, 0), inst.key(0, 0) + inst.dim, inst.keys.data() + t * inst.dim);
    inst.cache = PagedKvCache(CacheConfig{.num_kv_heads = 1, .head_dim = 8, .page_size = 16, .element_width = 4});
    inst.cache.append_tokens(0, inst.keys, inst.values);
    const auto out = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
    for (std::size_t d = 0; d < inst.dim; ++d) {
        double mean = 0.0;
        for (std::size_t t = 0; t < inst.n; ++t) mean += inst.value(t, 0)[d];
        EXPECT_NEAR(out.at(0, 0)[d], mean / 50.0, 1e-6);
    }
}

TEST(Attention, DenseMatchesTwoPassReference) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto inst = make_instance(64, 2, 2, 8, 4, 100 + seed);
        const auto out = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
        for (std::size_t h = 0; h < inst.q_heads(); ++h) {
            const auto ref = sdtest::ref_attention(inst, h);
            EXPECT_LE(sdtest::rel_err(out.at(0, h), ref.out), 1e-5);
            EXPECT_NEAR(out.lse(0, h), ref.lse, 1e-5 * std::max(1.0, std::abs(ref.lse)));
        }
    }
}

TEST(Attention, DenseReadsEachKvHeadOnce) {
    const auto inst = make_instance(100, 2, 4, 16, 2, 3);
    const auto before = inst.cache.bytes_read();
    dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
    EXPECT_EQ(inst.cache.bytes_read() - before, 2ull * 100 * 2 * 16 * 2);
}

TEST(Attention, SparseFullIndexEqualsDense) {
    const auto inst = make_instance(300, 2, 4, 64, 2, 4);
    const auto dense = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
    const auto sparse = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, full_index_set(inst));
    for (std::size_t h = 0; h < inst.q_heads(); ++h) EXPECT_LE(sdtest::rel_err(sparse.at(0, h), dense.at(0, h)), 1e-6);
}

TEST(Attention, SparseSingletonReturnsValueRow) {
    const auto inst = make_instance(40, 1, 2, 8, 4, 5);
    SparseIndexSet idx(1, 2);
    idx.at(0, 0).indices = {17};
    idx.at(0, 1).indices = {39};
    const auto out = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, idx);
    for (std::size_t d = 0; d < inst.dim; ++d) {
        EXPECT_EQ(out.at(0, 0)[d], inst.value(17, 0)[d]);
        EXPECT_EQ(out.at(0, 1)[d], inst.value(39, 0)[d]);
    }
}

TEST(Attention, SparseTopHalfMatchesMaskedReference) {
    const auto inst = make_instance(256, 2, 2, 32, 4, 6);
    SparseIndexSet idx(1, inst.q_heads());
    for (std::size_t h = 0; h < inst.q_heads(); ++h)
        idx.at(0, h).indices = sdtest::brute_topk(sdtest::ref_scores(inst, h), 128);
    const auto out = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, idx);
    for (std::size_t h = 0; h < inst.q_heads(); ++h) {
        const auto ref = sdtest::ref_attention(inst, h, idx.at(0, h).indices);
        EXPECT_LE(sdtest::rel_err(out.at(0, h), ref.out), 1e-5);
    }
}

TEST(Attention, SparseBytesPerQueryHead) {
    const auto inst = make_instance(64, 2, 4, 8, 2, 7);
    SparseIndexSet idx(1, inst.q_heads());
    std::size_t total = 0;
    for (std::size_t h = 0; h < inst.q_heads(); ++h) {
        for (TokenIndex t = 0; t < 64; t += static_cast<TokenIndex>(1 + h)) idx.at(0, h).indices.push_back(t);
        total += idx.at(0, h).indices.size();
    }
    const auto before = inst.cache.bytes_read();
    sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, idx);
    EXPECT_EQ(inst.cache.bytes_read() - before, 2ull * total * 8 * 2);
}

TEST(Attention, RejectsBadInputs) {
    const auto inst = make_instance(10, 1, 1, 8, 4, 8);
    SparseIndexSet empty(1, 1);
    EXPECT_THROW(sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, empty), std::invalid_argument);
    SparseIndexSet out_of_range(1, 1);
    out_of_range.at(0, 0).indices = {3, 10};
    EXPECT_THROW(sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, out_of_range), IndexError);
    SparseIndexSet unsorted(1, 1);
    unsorted.at(0, 0).indices = {4, 3};
    EXPECT_THROW(sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, unsorted), std::invalid_argument);

    PagedKvCache cache(CacheConfig{.num_kv_heads = 1, .head_dim = 8, .page_size = 16, .element_width = 4});
    EXPECT_THROW(dense_decode(inst.config, cache, inst.seqs, inst.queries), std::out_of_range);
    cache.append_tokens(0, {}, {});
    EXPECT_THROW(dense_decode(inst.config, cache, inst.seqs, inst.queries), std::invalid_argument);

    AttentionConfig bad = inst.config;
    bad.num_q_heads = 3;
    bad.num_kv_heads = 2;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// Weighted sums of a constant value row return the constant times the total
// weight fraction, so outputs read back the normalization directly.
TEST(AttentionProperty, WeightsSumToOne) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        auto inst = make_instance(1 + rng() % 400, 1, 2, 8, 4, 200 + trial);
        std::fill(inst.values.begin(), inst.values.end(), 1.0f);
        inst.cache = PagedKvCache(CacheConfig{.num_kv_heads = 1, .head_dim = 8, .page_size = 16, .element_width = 4});
        inst.cache.append_tokens(0, inst.keys, inst.values);
        const auto dense = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
        SparseIndexSet idx(1, 2);
        for (std::size_t h = 0; h < 2; ++h) {
            for (TokenIndex t = 0; t < inst.n; ++t)
                if (rng() % 3 == 0 || t == 0) {
                    idx.at(0, h).indices.push_back(t);
                    idx.at(0, h).weights.push_back(0.5f + static_cast<float>(rng() % 4));
                }
        }
        const auto sparse = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, idx);
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t d = 0; d < inst.dim; ++d) {
                EXPECT_NEAR(dense.at(0, h)[d], 1.0, 1e-6);
                EXPECT_NEAR(sparse.at(0, h)[d], 1.0, 1e-6);
            }
    }
}

// Scores sit on a 1/1024 grid so the shifted scores are exact in float and
// only the max-subtraction is under test.
TEST(AttentionProperty, ShiftInvariance) {
    std::mt19937_64 rng(10);
    std::normal_distribution<float> normal;
    for (float shift : {-500.0f, 3.0f, 80.0f, 1000.0f}) {
        const std::size_t n = 150, dim = 8;
        RowBlock values;
        values.resize(n, dim);
        for (float& v : values.data) v = normal(rng);
        std::vector<float> scores(n), shifted(n);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = std::round(4.0f * normal(rng) * 1024.0f) / 1024.0f;
            shifted[i] = scores[i] + shift;
        }
        detail::SoftmaxAccumulator a(dim), b(dim);
        RowBlock tile;
        for (std::size_t t0 = 0; t0 < n; t0 += 64) {
            const std::size_t rows = std::min<std::size_t>(64, n - t0);
            tile.resize(rows, dim);
            std::copy_n(values.data.begin() + t0 * dim, rows * dim, tile.data.begin());
            a.add_tile(std::span<const float>(scores).subspan(t0, rows), nullptr, 0, tile);
            b.add_tile(std::span<const float>(shifted).subspan(t0, rows), nullptr, 0, tile);
        }
        std::vector<float> out_a(dim), out_b(dim);
        float lse_a = 0, lse_b = 0;
        a.finish(out_a, lse_a);
        b.finish(out_b, lse_b);
        EXPECT_LE(sdtest::rel_err(out_b, out_a), 1e-6) << "shift " << shift;
    }
}

TEST(AttentionProperty, FullIndexEquivalenceSweep) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 1 + rng() % 512;
        const std::size_t dim = std::vector<std::size_t>{8, 64, 128}[rng() % 3];
        const std::size_t group = rng() % 2 ? 4 : 1;
        const auto inst = make_instance(n, 2, group, dim, rng() % 2 ? 2 : 4, 300 + trial);
        const auto dense = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
        const auto sparse = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, full_index_set(inst));
        for (std::size_t h = 0; h < inst.q_heads(); ++h)
            ASSERT_LE(sdtest::rel_err(sparse.at(0, h), dense.at(0, h)), 1e-6) << "n=" << n << " D=" << dim;
    }
}

TEST(AttentionProperty, DominantKeyConcentratesSoftmax) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        auto inst = make_instance(200, 1, 1, 16, 4, 400 + trial);
        const std::size_t star = rng() % inst.n;
        const auto q = inst.queries.at(0, 0);
        for (std::size_t d = 0; d < inst.dim; ++d) inst.keys[star * inst.dim + d] = 60.0f * q[d];
        inst.cache = PagedKvCache(CacheConfig{.num_kv_heads = 1, .head_dim = 16, .page_size = 16, .element_width = 4});
        inst.cache.append_tokens(0, inst.keys, inst.values);
        const auto dense = dense_decode(inst.config, inst.cache, inst.seqs, inst.queries);
        SparseIndexSet idx(1, 1);
        for (TokenIndex t = 0; t < inst.n; ++t)
            if (t == star || rng() % 5 == 0) idx.at(0, 0).indices.push_back(t);
        const auto sparse = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, idx);
        for (std::size_t d = 0; d < inst.dim; ++d) EXPECT_NEAR(sparse.at(0, 0)[d], dense.at(0, 0)[d], 1e-3);
    }
}

TEST(AttentionProperty, PermutedIndexListCanonicalizes) {
    const auto inst = make_instance(120, 1, 1, 8, 4, 13);
    std::mt19937_64 rng(13);
    HeadSelection sel;
    for (TokenIndex t = 0; t < inst.n; t += 3) {
        sel.indices.push_back(t);
        sel.weights.push_back(1.0f + static_cast<float>(t % 5));
    }
    SparseIndexSet ordered(1, 1);
    ordered.at(0, 0) = sel;
    std::vector<std::size_t> perm(sel.indices.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    HeadSelection shuffled;
    for (std::size_t p : perm) {
        shuffled.indices.push_back(sel.indices[p]);
        shuffled.weights.push_back(sel.weights[p]);
    }
    canonicalize(shuffled);
    SparseIndexSet permuted(1, 1);
    permuted.at(0, 0) = shuffled;
    const auto a = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, ordered);
    const auto b = sparse_decode(inst.config, inst.cache, inst.seqs, inst.queries, permuted);
    EXPECT_LE(sdtest::rel_err(b.at(0, 0), a.at(0, 0)), 1e-6);

    HeadSelection dup{{1, 1}, {}};
    EXPECT_THROW(canonicalize(dup), std::invalid_argument);
}

TEST(AttentionProperty, BatchedSequencesAreIndependent) {
    PagedKvCache cache(CacheConfig{.num_kv_heads = 1, .head_dim = 8, .page_size = 4, .element_width = 4});
    const auto a = make_instance(30, 1, 2, 8, 4, 14);
    const auto b = make_instance(45, 1, 2, 8, 4, 15);
    cache.append_tokens(5, a.keys, a.values);
    cache.append_tokens(9, b.keys, b.values);
    QueryBlock q(2, 2, 8);
    for (std::size_t h = 0; h < 2; ++h) {
        std::copy_n(a.queries.at(0, h).begin(), 8, q.at(0, h).begin());
        std::copy_n(b.queries.at(0, h).begin(), 8, q.at(1, h).begin());
    }
    const std::vector<SequenceId> seqs{5, 9};
    const auto out = dense_decode(a.config, cache, seqs, q);
    for (std::size_t h = 0; h < 2; ++h) {
        EXPECT_LE(sdtest::rel_err(out.at(0, h), sdtest::ref_attention(a, h).out), 1e-5);
        EXPECT_LE(sdtest::rel_err(out.at(1, h), sdtest::ref_attention(b, h).out), 1e-5);
    }
}

} // namespace
