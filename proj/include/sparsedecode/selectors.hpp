// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sparsedecode/attention.hpp"
#include "sparsedecode/half.hpp"
#include "sparsedecode/kv_store.hpp"
#include "sparsedecode/parallel.hpp"

namespace sparsedecode {

enum class SelectorKind { oracle_topk, sink_local_heavy, double_sparsity, stochastic };

inline std::string_view to_string(SelectorKind kind) {
    switch (kind) {
        case SelectorKind::oracle_topk: return "oracle";
        case SelectorKind::sink_local_heavy: return "sink-local";
        case SelectorKind::double_sparsity: return "double-sparsity";
        case SelectorKind::stochastic: return "stochastic";
    }
    return "unknown";
}

inline SelectorKind selector_kind_from_string(std::string_view name) {
    if (name == "oracle" || name == "oracle_topk") return SelectorKind::oracle_topk;
    if (name == "sink-local" || name == "sink_local_heavy") return SelectorKind::sink_local_heavy;
    if (name == "double-sparsity" || name == "double_sparsity") return SelectorKind::double_sparsity;
    if (name == "stochastic") return SelectorKind::stochastic;
    throw std::invalid_argument("unknown selector '" + std::string(name) + "'");
}

// Each query head attends to a 1/S fraction of the context.
struct SparsityFactor {
    double value = 1.0;
};

// Absolute number of retrieved tokens.
struct TokenBudget {
    std::size_t tokens = 1;
};

using Budget = std::variant<SparsityFactor, TokenBudget>;

inline std::size_t budget_from_sparsity(double sparsity, std::size_t num_tokens) {
    if (!(sparsity >= 1.0)) throw std::invalid_argument("sparsity factor must be >= 1, got " + std::to_string(sparsity));
    if (num_tokens == 0) throw std::invalid_argument("budget_from_sparsity: N must be >= 1");
    const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(num_tokens) / sparsity));
    return std::clamp<std::size_t>(k, 1, num_tokens);
}

struct SelectorSpec {
    SelectorKind kind = SelectorKind::oracle_topk;
    Budget budget = SparsityFactor{1.0};
    std::size_t sink = 0;
    std::size_t local = 0;
    std::optional<double> heavy_fraction;    // sink_local_heavy
    std::size_t channels = 8;                // double_sparsity
    std::size_t sketch_width = 2;            // double_sparsity, bytes per sketch scalar
    double deterministic_fraction = 0.5;     // stochastic
    std::optional<std::size_t> sample_count; // stochastic; defaults to k - ceil(det_frac * k)
    std::uint64_t rng_seed = 0;              // stochastic

    static SelectorSpec oracle(Budget b) { return {.kind = SelectorKind::oracle_topk, .budget = b}; }

    static SelectorSpec sink_local(std::size_t sink, std::size_t local, double heavy_fraction) {
        return {.kind = SelectorKind::sink_local_heavy, .sink = sink, .local = local, .heavy_fraction = heavy_fraction};
    }

    static SelectorSpec sink_local_absolute(std::size_t sink, std::size_t local, std::size_t heavy_tokens) {
        return {.kind = SelectorKind::sink_local_heavy, .budget = TokenBudget{heavy_tokens}, .sink = sink, .local = local};
    }

    static SelectorSpec double_sparsity(Budget b, std::size_t channels = 8, std::size_t sketch_width = 2) {
        return {.kind = SelectorKind::double_sparsity, .budget = b, .channels = channels, .sketch_width = sketch_width};
    }

    static SelectorSpec stochastic(Budget b, double det_fraction, std::optional<std::size_t> samples,
                                   std::uint64_t seed) {
        return {.kind = SelectorKind::stochastic,
                .budget = b,
                .deterministic_fraction = det_fraction,
                .sample_count = samples,
                .rng_seed = seed};
    }

    bool absolute() const { return std::holds_alternative<TokenBudget>(budget); }

    // Token budget k at context length n.
    std::size_t budget_tokens(std::size_t n) const {
        if (const auto* s = std::get_if<SparsityFactor>(&budget)) return budget_from_sparsity(s->value, n);
        return std::min(std::get<TokenBudget>(budget).tokens, n);
    }

    void validate(std::size_t head_dim) const {
        if (const auto* s = std::get_if<SparsityFactor>(&budget)) {
            if (!(s->value >= 1.0)) throw std::invalid_argument("SelectorSpec: sparsity factor must be >= 1");
        } else if (std::get<TokenBudget>(budget).tokens < 1) {
            throw std::invalid_argument("SelectorSpec: token budget must be >= 1");
        }
        const bool slh = kind == SelectorKind::sink_local_heavy;
        if (!slh && (sink != 0 || local != 0 || heavy_fraction))
            throw std::invalid_argument("SelectorSpec: sink/local/heavy_fraction only apply to sink-local");
        if (slh && !absolute()) {
            if (!heavy_fraction) throw std::invalid_argument("SelectorSpec: sink-local in fraction mode needs heavy_fraction");
            if (!(*heavy_fraction >= 0.0 && *heavy_fraction <= 1.0))
                throw std::invalid_argument("SelectorSpec: heavy_fraction must lie in [0, 1]");
        }
        if (kind == SelectorKind::double_sparsity) {
            if (channels > head_dim)
                throw std::invalid_argument("SelectorSpec: channels C = " + std::to_string(channels) +
                                            " exceeds head_dim " + std::to_string(head_dim));
            if (sketch_width != 2 && sketch_width != 4)
                throw std::invalid_argument("SelectorSpec: sketch_width must be 2 or 4");
        }
        if (kind != SelectorKind::stochastic && sample_count)
            throw std::invalid_argument("SelectorSpec: sample_count only applies to the stochastic selector");
        if (kind == SelectorKind::stochastic && !(deterministic_fraction > 0.0 && deterministic_fraction <= 1.0))
            throw std::invalid_argument("SelectorSpec: deterministic_fraction must lie in (0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Exact scores and top-k.

// scale * <q, k_t> for every cached token of one kv head, in double. Keys are
// read through scan_keys, so the traffic lands in bytes_scanned().
inline std::vector<double> exact_scores(const PagedKvCache& cache, SequenceId seq, std::size_t kv_head,
                                        std::span<const float> query, float scale) {
    const std::size_t n = cache.total_tokens(seq);
    const std::size_t dim = cache.config().head_dim;
    if (query.size() != dim) throw std::invalid_argument("exact_scores: query length != head_dim");
    std::vector<double> scores(n);
    RowBlock keys;
    constexpr std::size_t kScanRows = 256;
    for (std::size_t t0 = 0; t0 < n; t0 += kScanRows) {
        const std::size_t rows = std::min(kScanRows, n - t0);
        cache.scan_keys(seq, kv_head, t0, rows, keys);
        for (std::size_t i = 0; i < rows; ++i) {
            const float* k = keys.data.data() + i * dim;
            double s = 0.0;
            for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(query[d]) * k[d];
            scores[t0 + i] = static_cast<double>(scale) * s;
        }
    }
    return scores;
}

// Indices of the k largest entries of `scores` restricted to `candidates`
// (all tokens when empty). Ties go to the smaller index. Increasing order.
inline std::vector<TokenIndex> top_k_indices(std::span<const double> scores, std::size_t k,
                                             std::vector<TokenIndex> candidates = {}) {
    if (candidates.empty()) {
        candidates.resize(scores.size());
        std::iota(candidates.begin(), candidates.end(), TokenIndex{0});
    }
    if (k > candidates.size())
        throw std::invalid_argument("top-k: k = " + std::to_string(k) + " exceeds " +
                                    std::to_string(candidates.size()) + " candidates");
    auto better = [&](TokenIndex a, TokenIndex b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    if (k < candidates.size()) {
        std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                         better);
        candidates.resize(k);
    }
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

inline std::vector<TokenIndex> select_oracle_topk(const AttentionConfig& config, const PagedKvCache& cache,
                                                  SequenceId seq, std::size_t q_head, std::span<const float> query,
                                                  std::size_t k) {
    const std::size_t n = cache.total_tokens(seq);
    if (k < 1 || k > n)
        throw std::invalid_argument("select_oracle_topk: k = " + std::to_string(k) + " outside [1, " +
                                    std::to_string(n) + "]");
    const auto scores =
        exact_scores(cache, seq, gqa_kv_head(q_head, config.group_size()), query, config.softmax_scale());
    return top_k_indices(scores, k);
}

// Heavy budget for the middle region: round-half-up of h * |middle| in
// fraction mode, K (capped at |middle|) in absolute mode.
inline std::size_t heavy_budget(const SelectorSpec& spec, std::size_t middle) {
    if (middle == 0) return 0;
    if (const auto* tb = std::get_if<TokenBudget>(&spec.budget)) return std::min(tb->tokens, middle);
    const double h = spec.heavy_fraction.value_or(0.0);
    return std::min(middle, static_cast<std::size_t>(std::floor(h * static_cast<double>(middle) + 0.5)));
}

// Closed-form achieved density of the sink/local/heavy scaffold at length n.
inline double sink_local_heavy_density(const SelectorSpec& spec, std::size_t n) {
    const std::size_t sinks = std::min(spec.sink, n);
    const std::size_t locals = std::min(spec.local, n - sinks);
    const std::size_t middle = n - sinks - locals;
    return static_cast<double>(sinks + locals + heavy_budget(spec, middle)) / static_cast<double>(n);
}

inline std::vector<TokenIndex> select_sink_local_heavy_from_scores(const SelectorSpec& spec,
                                                                   std::span<const double> scores) {
    const std::size_t n = scores.size();
    const std::size_t sinks = std::min(spec.sink, n);
    const std::size_t locals = std::min(spec.local, n - sinks);
    const std::size_t middle_end = n - locals;
    std::vector<TokenIndex> middle(middle_end - sinks);
    std::iota(middle.begin(), middle.end(), static_cast<TokenIndex>(sinks));
    const std::size_t heavy = heavy_budget(spec, middle.size());

    std::vector<TokenIndex> out;
    out.reserve(sinks + locals + heavy);
    for (std::size_t t = 0; t < sinks; ++t) out.push_back(static_cast<TokenIndex>(t));
    if (heavy > 0) {
        const auto picked = top_k_indices(scores, heavy, std::move(middle));
        out.insert(out.end(), picked.begin(), picked.end());
    }
    for (std::size_t t = middle_end; t < n; ++t) out.push_back(static_cast<TokenIndex>(t));
    return out;
}

inline std::vector<TokenIndex> select_sink_local_heavy(const AttentionConfig& config, const PagedKvCache& cache,
                                                       SequenceId seq, std::size_t q_head,
                                                       std::span<const float> query, const SelectorSpec& spec) {
    const std::size_t n = cache.total_tokens(seq);
    if (n == 0) throw std::invalid_argument("select_sink_local_heavy: empty sequence");
    // Skip the score pass when the fixed regions already cover everything.
    if (std::min(spec.sink, n) + std::min(spec.local, n) >= n) {
        std::vector<TokenIndex> all(n);
        std::iota(all.begin(), all.end(), TokenIndex{0});
        return all;
    }
    const auto scores =
        exact_scores(cache, seq, gqa_kv_head(q_head, config.group_size()), query, config.softmax_scale());
    return select_sink_local_heavy_from_scores(spec, scores);
}

// ---------------------------------------------------------------------------
// Double Sparsity channel sketch.

struct HeadSketch {
    std::vector<std::size_t> channel_ids;  // strictly increasing, < D
    std::vector<float> values;             // N x C, rounded to sketch_width
};

struct ChannelSketch {
    std::size_t num_tokens = 0;
    std::size_t channels = 0;
    std::size_t sketch_width = 2;
    std::vector<HeadSketch> heads;  // one per kv head

    float at(std::size_t kv_head, std::size_t t, std::size_t c) const {
        return heads[kv_head].values[t * channels + c];
    }
};

// Picks, per kv head, the C dimensions with the largest mean |k_d| over the
// cached tokens (ties to the smaller dimension) and stores those channels of
// every key row at sketch precision.
inline ChannelSketch build_channel_sketch(const PagedKvCache& cache, SequenceId seq, std::size_t channels,
                                          std::size_t sketch_width) {
    const std::size_t n = cache.total_tokens(seq);
    const std::size_t dim = cache.config().head_dim;
    if (n == 0) throw std::invalid_argument("build_channel_sketch: empty sequence");
    if (channels > dim)
        throw std::invalid_argument("build_channel_sketch: C = " + std::to_string(channels) + " > D = " +
                                    std::to_string(dim));
    if (sketch_width != 2 && sketch_width != 4)
        throw std::invalid_argument("build_channel_sketch: sketch_width must be 2 or 4");

    ChannelSketch sketch{n, channels, sketch_width, std::vector<HeadSketch>(cache.config().num_kv_heads)};
    constexpr std::size_t kScanRows = 256;
    RowBlock keys;
    for (std::size_t kv = 0; kv < cache.config().num_kv_heads; ++kv) {
        std::vector<double> abs_sum(dim, 0.0);
        for (std::size_t t0 = 0; t0 < n; t0 += kScanRows) {
            const std::size_t rows = std::min(kScanRows, n - t0);
            cache.scan_keys(seq, kv, t0, rows, keys);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t d = 0; d < dim; ++d) abs_sum[d] += std::abs(keys.data[i * dim + d]);
        }
        std::vector<std::size_t> dims(dim);
        std::iota(dims.begin(), dims.end(), std::size_t{0});
        std::stable_sort(dims.begin(), dims.end(), [&](std::size_t a, std::size_t b) { return abs_sum[a] > abs_sum[b]; });
        dims.resize(channels);
        std::sort(dims.begin(), dims.end());

        HeadSketch& head = sketch.heads[kv];
        head.channel_ids = dims;
        head.values.resize(n * channels);
        for (std::size_t t0 = 0; t0 < n; t0 += kScanRows) {
            const std::size_t rows = std::min(kScanRows, n - t0);
            cache.scan_keys(seq, kv, t0, rows, keys);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < channels; ++c)
                    head.values[(t0 + i) * channels + c] = round_to_width(keys.data[i * dim + dims[c]], sketch_width);
        }
    }
    return sketch;
}

// scale * sum_{c in channels} q_c * sketch_{t,c} for every token.
inline std::vector<double> approximate_scores(const ChannelSketch& sketch, std::size_t kv_head,
                                              std::span<const float> query, float scale) {
    const HeadSketch& head = sketch.heads.at(kv_head);
    std::vector<double> scores(sketch.num_tokens);
    for (std::size_t t = 0; t < sketch.num_tokens; ++t) {
        const float* row = head.values.data() + t * sketch.channels;
        double s = 0.0;
        for (std::size_t c = 0; c < sketch.channels; ++c)
            s += static_cast<double>(query[head.channel_ids[c]]) * row[c];
        scores[t] = static_cast<double>(scale) * s;
    }
    return scores;
}

inline std::vector<TokenIndex> select_double_sparsity(const ChannelSketch& sketch, std::size_t kv_head,
                                                      std::span<const float> query, float scale, std::size_t k) {
    if (k < 1 || k > sketch.num_tokens)
        throw std::invalid_argument("select_double_sparsity: k = " + std::to_string(k) + " outside [1, " +
                                    std::to_string(sketch.num_tokens) + "]");
    const auto scores = approximate_scores(sketch, kv_head, query, scale);
    return top_k_indices(scores, k);
}

// ---------------------------------------------------------------------------
// Stochastic selection: exact top-k' plus a uniform sample of the remainder R
// weighted by |R| / m, an unbiased estimate of R's softmax mass.

inline std::mt19937_64 stream_generator(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

inline HeadSelection select_stochastic_from_scores(const SelectorSpec& spec, std::span<const double> scores,
                                                   std::uint64_t stream) {
    const std::size_t n = scores.size();
    const std::size_t k = spec.budget_tokens(n);
    const auto det = static_cast<std::size_t>(std::ceil(spec.deterministic_fraction * static_cast<double>(k)));
    if (det < 1) throw std::invalid_argument("select_stochastic: deterministic part must hold >= 1 token");
    const std::size_t top_count = std::min(det, n);
    const auto top = top_k_indices(scores, top_count);

    std::vector<TokenIndex> remainder;
    remainder.reserve(n - top_count);
    for (std::size_t t = 0, j = 0; t < n; ++t) {
        if (j < top.size() && top[j] == t) {
            ++j;
            continue;
        }
        remainder.push_back(static_cast<TokenIndex>(t));
    }
    std::size_t samples = spec.sample_count.value_or(k > top_count ? k - top_count : 0);
    samples = std::min(samples, remainder.size());

    std::vector<TokenIndex> drawn;
    drawn.reserve(samples);
    auto rng = stream_generator(spec.rng_seed, stream);
    std::sample(remainder.begin(), remainder.end(), std::back_inserter(drawn), samples, rng);

    const float sample_weight =
        samples == 0 ? 1.0f : static_cast<float>(static_cast<double>(remainder.size()) / static_cast<double>(samples));
    HeadSelection sel;
    sel.indices.reserve(top.size() + drawn.size());
    sel.weights.reserve(top.size() + drawn.size());
    std::size_t i = 0, j = 0;
    while (i < top.size() || j < drawn.size()) {
        if (j == drawn.size() || (i < top.size() && top[i] < drawn[j])) {
            sel.indices.push_back(top[i++]);
            sel.weights.push_back(1.0f);
        } else {
            sel.indices.push_back(drawn[j++]);
            sel.weights.push_back(sample_weight);
        }
    }
    return sel;
}

inline HeadSelection select_stochastic(const AttentionConfig& config, const PagedKvCache& cache, SequenceId seq,
                                       std::size_t q_head, std::span<const float> query, const SelectorSpec& spec,
                                       std::uint64_t stream) {
    const auto scores =
        exact_scores(cache, seq, gqa_kv_head(q_head, config.group_size()), query, config.softmax_scale());
    return select_stochastic_from_scores(spec, scores, stream);
}

// ---------------------------------------------------------------------------

// Runs `spec` for every (batch element, query head). Stochastic streams are
// derived from (b, h) so results do not depend on scheduling.
inline SparseIndexSet select_index_set(const AttentionConfig& config, const PagedKvCache& cache,
                                       std::span<const SequenceId> seqs, const QueryBlock& queries,
                                       const SelectorSpec& spec) {
    config.validate();
    spec.validate(config.head_dim);
    const std::size_t heads = config.num_q_heads;
    const float scale = config.softmax_scale();
    SparseIndexSet out(seqs.size(), heads);

    std::vector<ChannelSketch> sketches;
    if (spec.kind == SelectorKind::double_sparsity) {
        sketches.resize(seqs.size());
        detail::parallel_for(seqs.size(), [&](std::size_t b) {
            sketches[b] = build_channel_sketch(cache, seqs[b], spec.channels, spec.sketch_width);
        });
    }

    detail::parallel_for(seqs.size() * heads, [&](std::size_t item) {
        const std::size_t b = item / heads;
        const std::size_t h = item % heads;
        const auto q = queries.at(b, h);
        const std::size_t n = cache.total_tokens(seqs[b]);
        HeadSelection& sel = out.at(b, h);
        switch (spec.kind) {
            case SelectorKind::oracle_topk:
                sel.indices = select_oracle_topk(config, cache, seqs[b], h, q, spec.budget_tokens(n));
                break;
            case SelectorKind::sink_local_heavy:
                sel.indices = select_sink_local_heavy(config, cache, seqs[b], h, q, spec);
                break;
            case SelectorKind::double_sparsity:
                sel.indices = select_double_sparsity(sketches[b], gqa_kv_head(h, config.group_size()), q, scale,
                                                     spec.budget_tokens(n));
                break;
            case SelectorKind::stochastic:
                sel = select_stochastic(config, cache, seqs[b], h, q, spec, item);
                break;
        }
    });
    return out;
}

} // namespace sparsedecode
