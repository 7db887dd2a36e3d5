// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures and independent reference implementations for the tests.
// Nothing here calls into the library's numeric kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "sparsedecode/sparsedecode.hpp"

namespace sdtest {

using namespace sparsedecode;

// Normal samples snapped to a 1/256 grid in [-7.99, 7.99]; exactly
// representable at both fp16 and fp32.
inline float grid_normal(std::mt19937_64& rng, float sigma = 1.0f) {
    std::normal_distribution<float> normal(0.0f, sigma);
    const float x = std::clamp(normal(rng), -7.99f, 7.99f);
    return std::round(x * 256.0f) / 256.0f;
}

// One sequence (id 0) with H_kv kv heads, G query heads per kv head.
struct Instance {
    std::size_t n = 0, kv_heads = 1, group = 1, dim = 8, width = 4;
    std::vector<float> keys, values;  // n x kv_heads x dim
    QueryBlock queries;               // 1 x (kv_heads * group) x dim
    AttentionConfig config;
    PagedKvCache cache{CacheConfig{}};
    std::vector<SequenceId> seqs{0};

    const float* key(std::size_t t, std::size_t kv) const { return keys.data() + (t * kv_heads + kv) * dim; }
    const float* value(std::size_t t, std::size_t kv) const { return values.data() + (t * kv_heads + kv) * dim; }
    std::size_t q_heads() const { return kv_heads * group; }
    std::size_t kv_of(std::size_t h) const { return h / group; }
};

inline Instance make_instance(std::size_t n, std::size_t kv_heads, std::size_t group, std::size_t dim,
                              std::size_t width, std::uint64_t seed, std::size_t page_size = 16) {
    Instance inst;
    inst.n = n;
    inst.kv_heads = kv_heads;
    inst.group = group;
    inst.dim = dim;
    inst.width = width;
    std::mt19937_64 rng(seed);
    inst.keys.resize(n * kv_heads * dim);
    inst.values.resize(n * kv_heads * dim);
    for (float& x : inst.keys) x = grid_normal(rng);
    for (float& x : inst.values) x = grid_normal(rng);
    inst.queries = QueryBlock(1, kv_heads * group, dim);
    for (float& x : inst.queries.data()) x = grid_normal(rng, 0.5f);
    inst.config = {.num_q_heads = kv_heads * group, .num_kv_heads = kv_heads, .head_dim = dim, .scale = std::nullopt};
    inst.cache = PagedKvCache(
        CacheConfig{.num_kv_heads = kv_heads, .head_dim = dim, .page_size = page_size, .element_width = width});
    if (n > 0) inst.cache.append_tokens(0, inst.keys, inst.values);
    return inst;
}

// scale * <q, k> accumulated in double, one coordinate at a time.
inline double ref_score(const float* q, const float* k, std::size_t dim, double scale) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(q[d]) * static_cast<double>(k[d]);
    return scale * s;
}

inline std::vector<double> ref_scores(const Instance& inst, std::size_t h) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(inst.dim));
    const float* q = inst.queries.at(0, h).data();
    std::vector<double> s(inst.n);
    for (std::size_t t = 0; t < inst.n; ++t) s[t] = ref_score(q, inst.key(t, inst.kv_of(h)), inst.dim, scale);
    return s;
}

struct RefAttention {
    std::vector<double> out;
    double lse = 0.0;
    double denominator = 0.0;  // sum_i w_i exp(s_i), unshifted
};

// Two-pass weighted softmax attention over `indices` (all tokens when empty).
inline RefAttention ref_attention(const Instance& inst, std::size_t h, std::vector<TokenIndex> indices = {},
                                  std::vector<float> weights = {}) {
    if (indices.empty()) {
        indices.resize(inst.n);
        std::iota(indices.begin(), indices.end(), TokenIndex{0});
    }
    const auto scores = ref_scores(inst, h);
    double m = -std::numeric_limits<double>::infinity();
    for (TokenIndex t : indices) m = std::max(m, scores[t]);
    RefAttention r;
    r.out.assign(inst.dim, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        const double p = w * std::exp(scores[indices[i]] - m);
        z += p;
        const float* v = inst.value(indices[i], inst.kv_of(h));
        for (std::size_t d = 0; d < inst.dim; ++d) r.out[d] += p * v[d];
    }
    for (double& x : r.out) x /= z;
    r.lse = m + std::log(z);
    r.denominator = z * std::exp(m);
    return r;
}

// max_d |a - b| / max_d |b|
inline double rel_err(std::span<const float> a, std::span<const double> b) {
    double e = 0.0, s = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        e = std::max(e, std::abs(static_cast<double>(a[i]) - b[i]));
        s = std::max(s, std::abs(b[i]));
    }
    return s > 0.0 ? e / s : e;
}

inline double rel_err(std::span<const float> a, std::span<const float> b) {
    std::vector<double> bd(b.begin(), b.end());
    return rel_err(a, std::span<const double>(bd));
}

// Full sort by (score desc, index asc), first k, returned in increasing order.
inline std::vector<TokenIndex> brute_topk(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::pair<double, TokenIndex>> all;
    for (std::size_t t = 0; t < scores.size(); ++t) all.emplace_back(scores[t], static_cast<TokenIndex>(t));
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<TokenIndex> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

// Rank by Gaussian elimination with partial pivoting, relative tolerance.
inline std::size_t elimination_rank(std::vector<std::vector<double>> a, double rel_tol = 1e-9) {
    const std::size_t rows = a.size(), cols = rows ? a[0].size() : 0;
    double scale = 0.0;
    for (const auto& r : a)
        for (double x : r) scale = std::max(scale, std::abs(x));
    if (scale == 0.0) return 0;
    std::size_t rank = 0;
    for (std::size_t c = 0; c < cols && rank < rows; ++c) {
        std::size_t piv = rank;
        for (std::size_t r = rank; r < rows; ++r)
            if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
        if (std::abs(a[piv][c]) <= rel_tol * scale) continue;
        std::swap(a[piv], a[rank]);
        for (std::size_t r = rank + 1; r < rows; ++r) {
            const double f = a[r][c] / a[rank][c];
            for (std::size_t j = c; j < cols; ++j) a[r][j] -= f * a[rank][j];
        }
        ++rank;
    }
    return rank;
}

inline std::size_t recall(const std::vector<TokenIndex>& got, const std::vector<TokenIndex>& truth) {
    std::size_t hit = 0;
    for (TokenIndex t : got)
        if (std::binary_search(truth.begin(), truth.end(), t)) ++hit;
    return hit;
}

} // namespace sdtest
