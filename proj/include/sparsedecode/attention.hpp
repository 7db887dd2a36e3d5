// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsedecode/common.hpp"
#include "sparsedecode/kv_store.hpp"
#include "sparsedecode/parallel.hpp"

namespace sparsedecode {

struct AttentionConfig {
    std::size_t num_q_heads = 32;
    std::size_t num_kv_heads = 8;
    std::size_t head_dim = 128;
    std::optional<float> scale;  // defaults to 1/sqrt(head_dim)

    void validate() const {
        if (num_q_heads == 0 || num_kv_heads == 0 || head_dim == 0)
            throw std::invalid_argument("AttentionConfig: head counts and head_dim must be >= 1");
        if (num_q_heads % num_kv_heads != 0)
            throw std::invalid_argument("AttentionConfig: H_q = " + std::to_string(num_q_heads) +
                                        " is not a multiple of H_kv = " + std::to_string(num_kv_heads));
        if (scale && !std::isfinite(*scale)) throw std::invalid_argument("AttentionConfig: scale must be finite");
    }

    std::size_t group_size() const { return num_q_heads / num_kv_heads; }
    float softmax_scale() const { return scale.value_or(1.0f / std::sqrt(static_cast<float>(head_dim))); }
};

// Query heads [g*G, (g+1)*G) share kv head g.
constexpr std::size_t gqa_kv_head(std::size_t q_head, std::size_t group_size) { return q_head / group_size; }

// One decode query per sequence: B x H_q x D.
class QueryBlock {
public:
    QueryBlock() = default;
    QueryBlock(std::size_t batch, std::size_t heads, std::size_t dim)
        : batch_(batch), heads_(heads), dim_(dim), data_(batch * heads * dim) {}

    std::size_t batch() const { return batch_; }
    std::size_t heads() const { return heads_; }
    std::size_t dim() const { return dim_; }

    std::span<float> at(std::size_t b, std::size_t h) { return {data_.data() + (b * heads_ + h) * dim_, dim_}; }
    std::span<const float> at(std::size_t b, std::size_t h) const {
        return {data_.data() + (b * heads_ + h) * dim_, dim_};
    }
    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

private:
    std::size_t batch_ = 0;
    std::size_t heads_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> data_;
};

// Indices for one (batch element, query head). Empty weights mean unit weights.
struct HeadSelection {
    std::vector<TokenIndex> indices;
    std::vector<float> weights;

    bool weighted() const { return !weights.empty(); }
    float weight(std::size_t i) const { return weights.empty() ? 1.0f : weights[i]; }
};

// Sorts indices increasingly (permuting weights alongside) and rejects duplicates.
inline void canonicalize(HeadSelection& sel) {
    if (sel.weighted() && sel.weights.size() != sel.indices.size())
        throw std::invalid_argument("HeadSelection: weights and indices differ in length");
    std::vector<std::size_t> order(sel.indices.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sel.indices[a] < sel.indices[b]; });
    HeadSelection out;
    out.indices.reserve(order.size());
    if (sel.weighted()) out.weights.reserve(order.size());
    for (std::size_t i : order) {
        if (!out.indices.empty() && out.indices.back() == sel.indices[i])
            throw std::invalid_argument("HeadSelection: duplicate token index " + std::to_string(sel.indices[i]));
        out.indices.push_back(sel.indices[i]);
        if (sel.weighted()) out.weights.push_back(sel.weights[i]);
    }
    sel = std::move(out);
}

class SparseIndexSet {
public:
    SparseIndexSet() = default;
    SparseIndexSet(std::size_t batch, std::size_t heads) : batch_(batch), heads_(heads), heads_sel_(batch * heads) {}

    std::size_t batch() const { return batch_; }
    std::size_t heads() const { return heads_; }

    HeadSelection& at(std::size_t b, std::size_t h) { return heads_sel_[b * heads_ + h]; }
    const HeadSelection& at(std::size_t b, std::size_t h) const { return heads_sel_[b * heads_ + h]; }

    std::size_t total_indices() const {
        std::size_t n = 0;
        for (const auto& s : heads_sel_) n += s.indices.size();
        return n;
    }

    // Checks canonical form, per-head non-emptiness and weight positivity
    // against the token count of each batch element.
    void validate(std::span<const std::size_t> tokens_per_batch) const {
        if (tokens_per_batch.size() != batch_)
            throw std::invalid_argument("SparseIndexSet: batch size mismatch");
        for (std::size_t b = 0; b < batch_; ++b) {
            for (std::size_t h = 0; h < heads_; ++h) {
                const HeadSelection& sel = at(b, h);
                const std::string where = " (batch " + std::to_string(b) + ", head " + std::to_string(h) + ")";
                if (sel.indices.empty()) throw std::invalid_argument("SparseIndexSet: empty index list" + where);
                if (sel.weighted() && sel.weights.size() != sel.indices.size())
                    throw std::invalid_argument("SparseIndexSet: weight count mismatch" + where);
                for (std::size_t i = 0; i < sel.indices.size(); ++i) {
                    if (sel.indices[i] >= tokens_per_batch[b])
                        throw IndexError("SparseIndexSet: token " + std::to_string(sel.indices[i]) +
                                             " out of range" + where,
                                         sel.indices[i]);
                    if (i > 0 && sel.indices[i] <= sel.indices[i - 1])
                        throw std::invalid_argument("SparseIndexSet: indices not strictly increasing" + where);
                    const float w = sel.weight(i);
                    if (!(w > 0.0f) || !std::isfinite(w))
                        throw std::invalid_argument("SparseIndexSet: non-positive or non-finite weight" + where);
                }
            }
        }
    }

private:
    std::size_t batch_ = 0;
    std::size_t heads_ = 0;
    std::vector<HeadSelection> heads_sel_;
};

struct AttentionOutput {
    std::size_t batch = 0;
    std::size_t heads = 0;
    std::size_t dim = 0;
    std::vector<float> outputs;         // B x H_q x D
    std::vector<float> log_normalizer;  // B x H_q

    AttentionOutput() = default;
    AttentionOutput(std::size_t b, std::size_t h, std::size_t d)
        : batch(b), heads(h), dim(d), outputs(b * h * d), log_normalizer(b * h) {}

    std::span<float> at(std::size_t b, std::size_t h) { return {outputs.data() + (b * heads + h) * dim, dim}; }
    std::span<const float> at(std::size_t b, std::size_t h) const {
        return {outputs.data() + (b * heads + h) * dim, dim};
    }
    float& lse(std::size_t b, std::size_t h) { return log_normalizer[b * heads + h]; }
    float lse(std::size_t b, std::size_t h) const { return log_normalizer[b * heads + h]; }
};

namespace detail {

inline constexpr std::size_t kTileRows = 64;

inline float dot(const float* a, const float* b, std::size_t n) {
    constexpr std::size_t kLanes = 16;
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (std::size_t j = 0; j < kLanes; ++j) acc[j] += a[i + j] * b[i + j];
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    float sum = 0.0f;
    for (float v : acc) sum += v;
    return sum + tail;
}

// Streaming weighted softmax over row tiles. Each tile is folded in with one
// max-subtraction; earlier partial sums are rescaled when the running max
// grows. Partial sums are kept in double.
class SoftmaxAccumulator {
public:
    explicit SoftmaxAccumulator(std::size_t dim) : acc_(dim, 0.0), tile_acc_(dim), probs_() {}

    void add_tile(std::span<const float> scores, const HeadSelection* weights, std::size_t weight_offset,
                  const RowBlock& values) {
        if (scores.empty()) return;
        float tile_max = -std::numeric_limits<float>::infinity();
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (!std::isfinite(scores[i]))
                throw std::domain_error("attention: non-finite score at tile row " + std::to_string(i));
            tile_max = std::max(tile_max, scores[i]);
        }
        if (tile_max > max_) {
            if (denom_ > 0.0) {
                const double rescale = std::exp(static_cast<double>(max_) - tile_max);
                denom_ *= rescale;
                for (double& a : acc_) a *= rescale;
            }
            max_ = tile_max;
        }
        probs_.resize(scores.size());
        double tile_denom = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            float p = std::exp(scores[i] - max_);
            if (weights != nullptr) p *= weights->weight(weight_offset + i);
            probs_[i] = p;
            tile_denom += p;
        }
        std::fill(tile_acc_.begin(), tile_acc_.end(), 0.0f);
        const std::size_t dim = tile_acc_.size();
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const float p = probs_[i];
            const float* v = values.data.data() + i * dim;
            for (std::size_t d = 0; d < dim; ++d) tile_acc_[d] += p * v[d];
        }
        denom_ += tile_denom;
        for (std::size_t d = 0; d < dim; ++d) acc_[d] += tile_acc_[d];
    }

    void finish(std::span<float> out, float& log_normalizer) const {
        for (std::size_t d = 0; d < acc_.size(); ++d) out[d] = static_cast<float>(acc_[d] / denom_);
        log_normalizer = static_cast<float>(static_cast<double>(max_) + std::log(denom_));
    }

private:
    float max_ = -std::numeric_limits<float>::infinity();
    double denom_ = 0.0;
    std::vector<double> acc_;
    std::vector<float> tile_acc_;
    std::vector<float> probs_;
};

inline void check_decode_inputs(const AttentionConfig& config, const PagedKvCache& cache,
                                std::span<const SequenceId> seqs, const QueryBlock& queries) {
    config.validate();
    if (cache.config().num_kv_heads != config.num_kv_heads || cache.config().head_dim != config.head_dim)
        throw std::invalid_argument("decode: cache geometry does not match AttentionConfig");
    if (queries.batch() != seqs.size() || queries.heads() != config.num_q_heads || queries.dim() != config.head_dim)
        throw std::invalid_argument("decode: query block shape does not match B x H_q x D");
    for (SequenceId s : seqs)
        if (cache.total_tokens(s) == 0)
            throw std::invalid_argument("decode: sequence " + std::to_string(s) + " is empty");
}

} // namespace detail

// Full-context decode. Each (batch, kv head) gathers every cached row once and
// serves all G query heads of its group from that single read.
inline AttentionOutput dense_decode(const AttentionConfig& config, const PagedKvCache& cache,
                                    std::span<const SequenceId> seqs, const QueryBlock& queries) {
    detail::check_decode_inputs(config, cache, seqs, queries);
    const std::size_t group = config.group_size();
    const std::size_t dim = config.head_dim;
    const float scale = config.softmax_scale();
    AttentionOutput out(seqs.size(), config.num_q_heads, dim);

    detail::parallel_for(seqs.size() * config.num_kv_heads, [&](std::size_t item) {
        const std::size_t b = item / config.num_kv_heads;
        const std::size_t kv = item % config.num_kv_heads;
        const std::size_t n = cache.total_tokens(seqs[b]);
        std::vector<detail::SoftmaxAccumulator> heads(group, detail::SoftmaxAccumulator(dim));
        std::vector<TokenIndex> tile_idx(detail::kTileRows);
        std::vector<float> scores(detail::kTileRows);
        RowBlock keys, values;
        for (std::size_t t0 = 0; t0 < n; t0 += detail::kTileRows) {
            const std::size_t rows = std::min(detail::kTileRows, n - t0);
            tile_idx.resize(rows);
            std::iota(tile_idx.begin(), tile_idx.end(), static_cast<TokenIndex>(t0));
            cache.gather_rows(seqs[b], kv, tile_idx, keys, values);
            scores.resize(rows);
            for (std::size_t g = 0; g < group; ++g) {
                const auto q = queries.at(b, kv * group + g);
                for (std::size_t i = 0; i < rows; ++i)
                    scores[i] = scale * detail::dot(q.data(), keys.data.data() + i * dim, dim);
                heads[g].add_tile(scores, nullptr, 0, values);
            }
        }
        for (std::size_t g = 0; g < group; ++g) {
            const std::size_t h = kv * group + g;
            heads[g].finish(out.at(b, h), out.lse(b, h));
        }
    });
    return out;
}

// Per-query, per-head sparse decode: every query head gathers only its own
// index list (no deduplication inside a GQA group), weighting each included
// term w_i * exp(s_i - m).
inline AttentionOutput sparse_decode(const AttentionConfig& config, const PagedKvCache& cache,
                                     std::span<const SequenceId> seqs, const QueryBlock& queries,
                                     const SparseIndexSet& idx) {
    detail::check_decode_inputs(config, cache, seqs, queries);
    if (idx.batch() != seqs.size() || idx.heads() != config.num_q_heads)
        throw std::invalid_argument("sparse_decode: index set shape does not match B x H_q");
    std::vector<std::size_t> lengths(seqs.size());
    for (std::size_t b = 0; b < seqs.size(); ++b) lengths[b] = cache.total_tokens(seqs[b]);
    idx.validate(lengths);

    const std::size_t group = config.group_size();
    const std::size_t dim = config.head_dim;
    const float scale = config.softmax_scale();
    AttentionOutput out(seqs.size(), config.num_q_heads, dim);

    detail::parallel_for(seqs.size() * config.num_q_heads, [&](std::size_t item) {
        const std::size_t b = item / config.num_q_heads;
        const std::size_t h = item % config.num_q_heads;
        const std::size_t kv = gqa_kv_head(h, group);
        const HeadSelection& sel = idx.at(b, h);
        const auto q = queries.at(b, h);
        detail::SoftmaxAccumulator head(dim);
        std::vector<float> scores(detail::kTileRows);
        RowBlock keys, values;
        const std::span<const TokenIndex> all(sel.indices);
        for (std::size_t i0 = 0; i0 < all.size(); i0 += detail::kTileRows) {
            const std::size_t rows = std::min(detail::kTileRows, all.size() - i0);
            cache.gather_rows(seqs[b], kv, all.subspan(i0, rows), keys, values);
            scores.resize(rows);
            for (std::size_t i = 0; i < rows; ++i)
                scores[i] = scale * detail::dot(q.data(), keys.data.data() + i * dim, dim);
            head.add_tile(scores, sel.weighted() ? &sel : nullptr, i0, values);
        }
        head.finish(out.at(b, h), out.lse(b, h));
    });
    return out;
}

} // namespace sparsedecode
