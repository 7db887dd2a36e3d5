// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "sparsedecode/attention.hpp"
#include "sparsedecode/collapse.hpp"
#include "sparsedecode/kv_store.hpp"
#include "sparsedecode/selectors.hpp"
#include "sparsedecode/traffic_model.hpp"

namespace sparsedecode::bench {

using nlohmann::json;

inline AttentionConfig attention_config(const WorkloadGeometry& g) {
    return {.num_q_heads = g.q_heads, .num_kv_heads = g.kv_heads, .head_dim = g.head_dim, .scale = std::nullopt};
}

inline CacheConfig cache_config(const WorkloadGeometry& g) {
    return {.num_kv_heads = g.kv_heads, .head_dim = g.head_dim, .page_size = g.page_size,
            .element_width = g.element_width};
}

// Page-rounded key+value storage for a geometry.
inline std::uint64_t workload_storage_bytes(const WorkloadGeometry& g) {
    const std::uint64_t pages = (g.context + g.page_size - 1) / g.page_size;
    return 2ull * g.batch * pages * g.page_size * g.kv_heads * g.head_dim * g.element_width;
}

// ---------------------------------------------------------------------------
// Workloads

struct WorkloadOptions {
    std::uint64_t seed = 0;
    std::optional<float> needle_scale;  // plant one key row c * (group query sum) per kv head
    std::uint64_t memory_cap_bytes = 4ull << 30;
};

struct Workload {
    WorkloadGeometry geometry;
    std::unique_ptr<PagedKvCache> cache;
    std::vector<SequenceId> seqs;
    QueryBlock queries;
    std::vector<std::size_t> needles;  // b * H_kv + kv -> planted token

    std::size_t needle(std::size_t b, std::size_t kv) const { return needles.at(b * geometry.kv_heads + kv); }
};

// Keys, values and queries are seeded standard normals scaled by 1/sqrt(D).
inline Workload generate_workload(const WorkloadGeometry& g, const WorkloadOptions& opts = {}) {
    g.validate();
    if (g.context == 0 || g.batch == 0) throw std::invalid_argument("generate_workload: empty batch or context");
    const std::uint64_t need = workload_storage_bytes(g);
    if (need > opts.memory_cap_bytes)
        throw ResourceError("workload needs " + std::to_string(need) + " bytes of KV storage, cap is " +
                                std::to_string(opts.memory_cap_bytes),
                            need, opts.memory_cap_bytes);

    Workload w{g, std::make_unique<PagedKvCache>(cache_config(g)), {}, QueryBlock(g.batch, g.q_heads, g.head_dim), {}};
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(g.head_dim));
    const std::size_t group = g.group_size();
    const std::size_t per_token = g.kv_heads * g.head_dim;
    constexpr std::size_t kChunkTokens = 1024;

    auto rng = stream_generator(opts.seed, 0);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (float& x : w.queries.data()) x = normal(rng) * inv_sqrt_d;

    if (opts.needle_scale) {
        w.needles.resize(g.batch * g.kv_heads);
        std::uniform_int_distribution<std::size_t> pos(0, g.context - 1);
        for (auto& p : w.needles) p = pos(rng);
    }

    std::vector<float> keys, values;
    for (std::size_t b = 0; b < g.batch; ++b) {
        const SequenceId seq = b;
        w.seqs.push_back(seq);
        auto seq_rng = stream_generator(opts.seed, 1 + b);
        for (std::size_t t0 = 0; t0 < g.context; t0 += kChunkTokens) {
            const std::size_t rows = std::min(kChunkTokens, g.context - t0);
            keys.resize(rows * per_token);
            values.resize(rows * per_token);
            for (float& x : keys) x = normal(seq_rng) * inv_sqrt_d;
            for (float& x : values) x = normal(seq_rng) * inv_sqrt_d;
            if (opts.needle_scale) {
                for (std::size_t kv = 0; kv < g.kv_heads; ++kv) {
                    const std::size_t t = w.needle(b, kv);
                    if (t < t0 || t >= t0 + rows) continue;
                    float* row = keys.data() + (t - t0) * per_token + kv * g.head_dim;
                    std::fill(row, row + g.head_dim, 0.0f);
                    for (std::size_t j = 0; j < group; ++j) {
                        const auto q = w.queries.at(b, kv * group + j);
                        for (std::size_t d = 0; d < g.head_dim; ++d) row[d] += *opts.needle_scale * q[d];
                    }
                }
            }
            w.cache->append_tokens(seq, keys, values);
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// Timing

template <typename Fn>
double median_ms(Fn&& fn, std::size_t repeats, std::size_t warmup) {
    if (repeats == 0) throw std::invalid_argument("median_ms: repeats must be >= 1");
    for (std::size_t i = 0; i < warmup; ++i) fn();
    std::vector<double> samples;
    samples.reserve(repeats);
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t mid = samples.size() / 2;
    return samples.size() % 2 == 1 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
}

// ---------------------------------------------------------------------------
// Masked-softmax oracle in double over the selected rows of one head.

inline std::vector<double> masked_reference(const PagedKvCache& cache, SequenceId seq, std::size_t kv_head,
                                            std::span<const float> query, const HeadSelection& sel, double scale) {
    const auto [keys, values] = cache.gather_rows(seq, kv_head, sel.indices);
    const std::size_t dim = keys.cols;
    std::vector<double> scores(sel.indices.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(query[d]) * keys.data[i * dim + d];
        scores[i] = scale * s;
        m = std::max(m, scores[i]);
    }
    std::vector<double> out(dim, 0.0);
    double denom = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double p = static_cast<double>(sel.weight(i)) * std::exp(scores[i] - m);
        denom += p;
        for (std::size_t d = 0; d < dim; ++d) out[d] += p * values.data[i * dim + d];
    }
    for (double& x : out) x /= denom;
    return out;
}

// max_d |out - ref| / max_d |ref|
inline double relative_error(std::span<const float> out, std::span<const double> ref) {
    double err = 0.0, scale = 0.0;
    for (std::size_t d = 0; d < ref.size(); ++d) {
        err = std::max(err, std::abs(static_cast<double>(out[d]) - ref[d]));
        scale = std::max(scale, std::abs(ref[d]));
    }
    return scale > 0.0 ? err / scale : err;
}

// ---------------------------------------------------------------------------
// Configuration and records

enum class OutputFormat { csv, markdown, json };

inline OutputFormat output_format_from_string(std::string_view s) {
    if (s == "csv") return OutputFormat::csv;
    if (s == "markdown" || s == "md") return OutputFormat::markdown;
    if (s == "json") return OutputFormat::json;
    throw std::invalid_argument("unknown output format '" + std::string(s) + "' (expected csv, markdown or json)");
}

struct BenchConfig {
    WorkloadGeometry geometry{.batch = 1, .context = 32768, .q_heads = 32, .kv_heads = 8, .head_dim = 128,
                              .element_width = 2, .page_size = 16};
    std::vector<std::size_t> batches{1, 4, 8};
    std::vector<double> sparsity_levels{2, 4, 10, 20, 50, 100, 200, 500};
    SelectorSpec selector = SelectorSpec::oracle(SparsityFactor{1.0});
    std::size_t repeats = 20;
    std::size_t warmup = 3;
    std::uint64_t seed = 0;
    std::optional<std::string> out;
    OutputFormat format = OutputFormat::markdown;
    std::uint64_t memory_cap_bytes = 4ull << 30;
    std::optional<float> needle_scale;

    void validate() const {
        geometry.validate();
        if (batches.empty()) throw std::invalid_argument("BenchConfig: at least one batch size required");
        if (repeats < 1) throw std::invalid_argument("BenchConfig: repeats must be >= 1");
        if (!std::is_sorted(sparsity_levels.begin(), sparsity_levels.end()))
            throw std::invalid_argument("BenchConfig: sparsity levels must be sorted ascending");
        for (double s : sparsity_levels)
            if (!(s >= 1.0)) throw std::invalid_argument("BenchConfig: sparsity levels must be >= 1");
    }
};

// The selector used at one sweep point.
inline SelectorSpec spec_for_sparsity(const SelectorSpec& base, double sparsity) {
    SelectorSpec spec = base;
    if (spec.absolute()) return spec;
    spec.budget = SparsityFactor{sparsity};
    if (spec.kind == SelectorKind::sink_local_heavy && !base.heavy_fraction) spec.heavy_fraction = 1.0 / sparsity;
    return spec;
}

inline void apply_selector_json(const json& j, SelectorSpec& spec) {
    if (j.contains("kind")) spec.kind = selector_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("tokens")) spec.budget = TokenBudget{j.at("tokens").get<std::size_t>()};
    if (j.contains("sink")) spec.sink = j.at("sink").get<std::size_t>();
    if (j.contains("local")) spec.local = j.at("local").get<std::size_t>();
    if (j.contains("heavy_frac")) spec.heavy_fraction = j.at("heavy_frac").get<double>();
    if (j.contains("channels")) spec.channels = j.at("channels").get<std::size_t>();
    if (j.contains("sketch_width")) spec.sketch_width = j.at("sketch_width").get<std::size_t>();
    if (j.contains("det_frac")) spec.deterministic_fraction = j.at("det_frac").get<double>();
    if (j.contains("samples")) spec.sample_count = j.at("samples").get<std::size_t>();
    if (j.contains("rng_seed")) spec.rng_seed = j.at("rng_seed").get<std::uint64_t>();
}

inline std::size_t element_width_from_dtype(std::string_view dtype) {
    if (dtype == "f16") return 2;
    if (dtype == "f32") return 4;
    throw std::invalid_argument("unknown dtype '" + std::string(dtype) + "' (expected f16 or f32)");
}

// Overlays the fields present in `j` onto `config`.
inline void apply_config_json(const json& j, BenchConfig& config) {
    auto& g = config.geometry;
    if (j.contains("batch")) {
        const auto& b = j.at("batch");
        config.batches = b.is_array() ? b.get<std::vector<std::size_t>>() : std::vector<std::size_t>{b.get<std::size_t>()};
    }
    if (j.contains("context")) g.context = j.at("context").get<std::size_t>();
    if (j.contains("q_heads")) g.q_heads = j.at("q_heads").get<std::size_t>();
    if (j.contains("kv_heads")) g.kv_heads = j.at("kv_heads").get<std::size_t>();
    if (j.contains("head_dim")) g.head_dim = j.at("head_dim").get<std::size_t>();
    if (j.contains("page_size")) g.page_size = j.at("page_size").get<std::size_t>();
    if (j.contains("dtype")) g.element_width = element_width_from_dtype(j.at("dtype").get<std::string>());
    if (j.contains("sparsity")) config.sparsity_levels = j.at("sparsity").get<std::vector<double>>();
    if (j.contains("selector")) apply_selector_json(j.at("selector"), config.selector);
    if (j.contains("repeats")) config.repeats = j.at("repeats").get<std::size_t>();
    if (j.contains("warmup")) config.warmup = j.at("warmup").get<std::size_t>();
    if (j.contains("seed")) config.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out")) config.out = j.at("out").get<std::string>();
    if (j.contains("format")) config.format = output_format_from_string(j.at("format").get<std::string>());
    if (j.contains("mem_cap_mib")) config.memory_cap_bytes = j.at("mem_cap_mib").get<std::uint64_t>() << 20;
    if (j.contains("planted")) config.needle_scale = j.at("planted").get<float>();
}

struct RunRecord {
    std::size_t batch = 1;
    std::optional<double> sparsity;  // empty for a dense-only baseline row
    double dense_ms = 0.0;
    std::optional<double> sparse_ms;
    std::optional<double> measured_speedup;
    std::optional<double> predicted_speedup;
    std::uint64_t bytes_dense = 0;
    std::uint64_t bytes_sparse = 0;
    std::uint64_t bytes_indexer = 0;
    double max_output_rel_error = 0.0;

    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

// ---------------------------------------------------------------------------
// Sweep

struct SweepHooks {
    std::ostream* log = nullptr;
};

inline std::vector<RunRecord> run_sweep(const BenchConfig& config, const Calibration& calibration,
                                        const SweepHooks& hooks = {}) {
    constexpr double kTolerance = 1e-4;
    config.validate();
    std::vector<RunRecord> records;
    for (std::size_t batch : config.batches) {
        const WorkloadGeometry g = config.geometry.with_batch(batch);
        const AttentionConfig attn = attention_config(g);
        const Workload w = generate_workload(g, {config.seed, config.needle_scale, config.memory_cap_bytes});
        const PagedKvCache& cache = *w.cache;

        std::uint64_t before = cache.bytes_read();
        dense_decode(attn, cache, w.seqs, w.queries);
        const std::uint64_t bytes_dense = cache.bytes_read() - before;
        if (bytes_dense != estimate_dense(g))
            throw CorrectnessError("dense byte count " + std::to_string(bytes_dense) + " != model " +
                                       std::to_string(estimate_dense(g)),
                                   batch, 1.0, 0);
        const double dense_ms =
            median_ms([&] { dense_decode(attn, cache, w.seqs, w.queries); }, config.repeats, config.warmup);
        if (hooks.log) *hooks.log << "B=" << batch << " dense " << format_number(dense_ms, 3) << " ms\n";

        if (config.sparsity_levels.empty()) {
            records.push_back({.batch = batch, .dense_ms = dense_ms, .bytes_dense = bytes_dense});
            continue;
        }
        for (double s : config.sparsity_levels) {
            const SelectorSpec spec = spec_for_sparsity(config.selector, s);
            const std::uint64_t scanned_before = cache.bytes_scanned();
            const SparseIndexSet idx = select_index_set(attn, cache, w.seqs, w.queries, spec);
            const std::uint64_t bytes_indexer = cache.bytes_scanned() - scanned_before;

            before = cache.bytes_read();
            const AttentionOutput out = sparse_decode(attn, cache, w.seqs, w.queries, idx);
            const std::uint64_t bytes_sparse = cache.bytes_read() - before;
            if (bytes_sparse != sparse_bytes_for(idx, g.head_dim, g.element_width))
                throw CorrectnessError("sparse byte count does not match the index set", batch, s, 0);

            double max_err = 0.0;
            for (std::size_t b = 0; b < g.batch; ++b) {
                for (std::size_t h = 0; h < g.q_heads; ++h) {
                    const auto ref = masked_reference(cache, w.seqs[b], gqa_kv_head(h, g.group_size()),
                                                      w.queries.at(b, h), idx.at(b, h), attn.softmax_scale());
                    const double err = relative_error(out.at(b, h), ref);
                    max_err = std::max(max_err, err);
                    if (!(err <= kTolerance))
                        throw CorrectnessError("sparse output deviates from masked oracle: rel error " +
                                                   std::to_string(err) + " at B=" + std::to_string(batch) +
                                                   " S=" + format_number(s, 2) + " batch element " +
                                                   std::to_string(b) + " head " + std::to_string(h),
                                               batch, s, h);
                }
            }
            const double sparse_ms = median_ms([&] { sparse_decode(attn, cache, w.seqs, w.queries, idx); },
                                               config.repeats, config.warmup);
            const std::size_t mean_k = std::max<std::size_t>(
                1, (idx.total_indices() + g.batch * g.q_heads / 2) / (g.batch * g.q_heads));
            const double predicted =
                predict_speedup(g, std::min(mean_k, g.context), std::nullopt, calibration);
            records.push_back({.batch = batch,
                               .sparsity = s,
                               .dense_ms = dense_ms,
                               .sparse_ms = sparse_ms,
                               .measured_speedup = dense_ms / sparse_ms,
                               .predicted_speedup = predicted,
                               .bytes_dense = bytes_dense,
                               .bytes_sparse = bytes_sparse,
                               .bytes_indexer = bytes_indexer,
                               .max_output_rel_error = max_err});
            if (hooks.log)
                *hooks.log << "B=" << batch << " S=" << s << " sparse " << format_number(sparse_ms, 3) << " ms ("
                           << format_number(dense_ms / sparse_ms, 2) << "x)\n";
        }
    }
    return records;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string shortest(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string opt(const std::optional<double>& v) { return v ? shortest(*v) : std::string(); }

inline double parse_double(std::string_view s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("CSV: bad number '" + std::string(s) + "'");
    return v;
}

inline std::uint64_t parse_uint(std::string_view s) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("CSV: bad integer '" + std::string(s) + "'");
    return v;
}

inline std::optional<double> parse_opt(std::string_view s) {
    if (s.empty()) return std::nullopt;
    return parse_double(s);
}

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

} // namespace detail

inline constexpr std::string_view kRecordCsvHeader =
    "B,S,dense_ms,sparse_ms,measured_speedup,predicted_speedup,bytes_dense,bytes_sparse,bytes_indexer,"
    "max_output_rel_error";

inline std::string records_to_csv(std::span<const RunRecord> records) {
    std::ostringstream os;
    os << kRecordCsvHeader << '\n';
    for (const auto& r : records) {
        os << r.batch << ',' << detail::opt(r.sparsity) << ',' << detail::shortest(r.dense_ms) << ','
           << detail::opt(r.sparse_ms) << ',' << detail::opt(r.measured_speedup) << ','
           << detail::opt(r.predicted_speedup) << ',' << r.bytes_dense << ',' << r.bytes_sparse << ','
           << r.bytes_indexer << ',' << detail::shortest(r.max_output_rel_error) << '\n';
    }
    return os.str();
}

inline std::vector<RunRecord> records_from_csv(std::string_view text) {
    std::vector<RunRecord> out;
    std::istringstream is{std::string(text)};
    std::string line;
    if (!std::getline(is, line) || line != kRecordCsvHeader) throw std::invalid_argument("CSV: unexpected header");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string_view> f;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            f.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (f.size() != 10) throw std::invalid_argument("CSV: expected 10 fields, got " + std::to_string(f.size()));
        RunRecord r;
        r.batch = static_cast<std::size_t>(detail::parse_uint(f[0]));
        r.sparsity = detail::parse_opt(f[1]);
        r.dense_ms = detail::parse_double(f[2]);
        r.sparse_ms = detail::parse_opt(f[3]);
        r.measured_speedup = detail::parse_opt(f[4]);
        r.predicted_speedup = detail::parse_opt(f[5]);
        r.bytes_dense = detail::parse_uint(f[6]);
        r.bytes_sparse = detail::parse_uint(f[7]);
        r.bytes_indexer = detail::parse_uint(f[8]);
        r.max_output_rel_error = detail::parse_double(f[9]);
        out.push_back(r);
    }
    return out;
}

inline std::string speedup_cell(double speedup) { return format_number(speedup, 2) + "×"; }

// Rows are batch sizes; columns are the dense baseline (ms) and one measured
// speedup per sparsity level.
inline std::string records_to_markdown(std::span<const RunRecord> records) {
    std::vector<std::size_t> batches;
    std::vector<double> levels;
    for (const auto& r : records) {
        if (std::find(batches.begin(), batches.end(), r.batch) == batches.end()) batches.push_back(r.batch);
        if (r.sparsity && std::find(levels.begin(), levels.end(), *r.sparsity) == levels.end())
            levels.push_back(*r.sparsity);
    }
    std::sort(levels.begin(), levels.end());
    std::ostringstream os;
    os << "| B | dense (ms) |";
    for (double s : levels) os << ' ' << format_sparsity(s) << " |";
    os << "\n|---|---:|";
    for (std::size_t i = 0; i < levels.size(); ++i) os << "---:|";
    os << '\n';
    for (std::size_t b : batches) {
        double dense = 0.0;
        std::vector<std::string> cells(levels.size());
        for (const auto& r : records) {
            if (r.batch != b) continue;
            dense = r.dense_ms;
            if (!r.sparsity || !r.measured_speedup) continue;
            const auto pos = std::find(levels.begin(), levels.end(), *r.sparsity) - levels.begin();
            cells[static_cast<std::size_t>(pos)] = speedup_cell(*r.measured_speedup);
        }
        os << "| " << b << " | " << format_number(dense, 2) << " |";
        for (const auto& c : cells) os << ' ' << c << " |";
        os << '\n';
    }
    return os.str();
}

inline json records_to_json(std::span<const RunRecord> records) {
    json arr = json::array();
    for (const auto& r : records) {
        arr.push_back({{"B", r.batch},
                       {"S", detail::opt_json(r.sparsity)},
                       {"dense_ms", r.dense_ms},
                       {"sparse_ms", detail::opt_json(r.sparse_ms)},
                       {"measured_speedup", detail::opt_json(r.measured_speedup)},
                       {"predicted_speedup", detail::opt_json(r.predicted_speedup)},
                       {"bytes_dense", r.bytes_dense},
                       {"bytes_sparse", r.bytes_sparse},
                       {"bytes_indexer", r.bytes_indexer},
                       {"max_output_rel_error", r.max_output_rel_error}});
    }
    return arr;
}

inline std::string emit_table(std::span<const RunRecord> records, OutputFormat format) {
    if (records.empty()) throw std::invalid_argument("emit_table: no records");
    switch (format) {
        case OutputFormat::csv: return records_to_csv(records);
        case OutputFormat::markdown: return records_to_markdown(records);
        case OutputFormat::json: return records_to_json(records).dump(2) + "\n";
    }
    throw std::invalid_argument("emit_table: unknown format");
}

inline std::string emit_table(std::span<const RunRecord> records, std::string_view format) {
    return emit_table(records, output_format_from_string(format));
}

// ---------------------------------------------------------------------------
// Collapse report

inline collapse::Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    auto rng = stream_generator(seed, 0x636f6c6c61707365ull);
    std::normal_distribution<double> normal;
    collapse::Matrix v(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = normal(rng);
    return v;
}

inline json run_collapse(std::size_t num_tokens, std::size_t width, double beta, std::uint64_t seed,
                         double tol = 1e-9) {
    if (!(beta > 0.0 && beta < 1.0))
        throw std::invalid_argument("beta must lie in the open interval (0, 1), got " + std::to_string(beta));
    if (num_tokens < 2) throw std::invalid_argument("collapse: N must be >= 2");
    if (width < 1) throw std::invalid_argument("collapse: d must be >= 1");

    const collapse::Matrix v = gaussian_matrix(num_tokens, width, seed);
    json report{{"N", num_tokens},
                {"d", width},
                {"beta", beta},
                {"seed", seed},
                {"tolerance", tol},
                {"min_width_for_injectivity", collapse::min_width_for_injectivity(num_tokens)},
                {"stacked_rank", collapse::stacked_rank(v)}};
    const auto witness = collapse::find_collapse_pair(v, beta);
    if (!witness) {
        report["witness"] = nullptr;
        report["passed"] = false;
        report["message"] = width + 1 >= num_tokens ? "no witness (d >= N-1)" : "no witness (stacked map injective)";
        return report;
    }
    const auto verdict = collapse::verify_witness(v, *witness, tol);
    auto to_vec = [](const collapse::Vector& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
    json checks = json::array();
    for (const auto& c : verdict.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}});
    report["witness"] = {{"a", to_vec(witness->a)},
                         {"a_prime", to_vec(witness->a_prime)},
                         {"z", to_vec(witness->z)},
                         {"residual", witness->residual}};
    report["checks"] = checks;
    report["passed"] = verdict.passed();
    report["message"] = verdict.passed() ? "witness verified" : "witness failed verification";
    return report;
}

// ---------------------------------------------------------------------------
// Property checks on one geometry (the `verify` subcommand).

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

inline std::vector<CheckResult> run_verify(const WorkloadGeometry& g, std::uint64_t seed,
                                           std::uint64_t memory_cap_bytes = 4ull << 30) {
    std::vector<CheckResult> results;
    const Workload w = generate_workload(g, {seed, std::nullopt, memory_cap_bytes});
    const PagedKvCache& cache = *w.cache;
    const AttentionConfig attn = attention_config(g);
    const double scale = attn.softmax_scale();

    // Dense decode against the double-precision oracle over all tokens.
    std::uint64_t before = cache.bytes_read();
    const AttentionOutput dense = dense_decode(attn, cache, w.seqs, w.queries);
    const std::uint64_t dense_bytes = cache.bytes_read() - before;
    SparseIndexSet full(g.batch, g.q_heads);
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t h = 0; h < g.q_heads; ++h) {
            auto& idx = full.at(b, h).indices;
            idx.resize(g.context);
            std::iota(idx.begin(), idx.end(), TokenIndex{0});
        }
    double dense_err = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t h = 0; h < g.q_heads; ++h)
            dense_err = std::max(dense_err, relative_error(dense.at(b, h),
                                                           masked_reference(cache, w.seqs[b], gqa_kv_head(h, g.group_size()),
                                                                            w.queries.at(b, h), full.at(b, h), scale)));
    results.push_back({"dense_matches_double_oracle", dense_err <= 1e-5, "max rel error " + detail::shortest(dense_err)});

    before = cache.bytes_read();
    const AttentionOutput sparse_full = sparse_decode(attn, cache, w.seqs, w.queries, full);
    const std::uint64_t full_bytes = cache.bytes_read() - before;
    double equiv = 0.0;
    for (std::size_t i = 0; i < dense.outputs.size(); ++i) {
        const double ref = std::abs(static_cast<double>(dense.outputs[i]));
        equiv = std::max(equiv, std::abs(static_cast<double>(sparse_full.outputs[i]) - dense.outputs[i]) /
                                    std::max(ref, 1e-30));
    }
    results.push_back({"full_index_equivalence", equiv <= 1e-6, "max rel diff " + detail::shortest(equiv)});

    results.push_back({"dense_byte_identity", dense_bytes == estimate_dense(g),
                       std::to_string(dense_bytes) + " vs " + std::to_string(estimate_dense(g))});
    results.push_back({"full_sparse_byte_identity", full_bytes == estimate_sparse(g, g.context),
                       std::to_string(full_bytes) + " vs " + std::to_string(estimate_sparse(g, g.context))});

    // Oracle top-k against an exhaustive sort of independently computed scores.
    const std::size_t k = budget_from_sparsity(10.0, g.context);
    std::size_t mismatches = 0;
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t h = 0; h < g.q_heads; ++h) {
            const auto picked = select_oracle_topk(attn, cache, w.seqs[b], h, w.queries.at(b, h), k);
            const auto rows = cache.gather_rows(w.seqs[b], gqa_kv_head(h, g.group_size()), full.at(b, h).indices);
            std::vector<std::pair<double, TokenIndex>> all(g.context);
            const auto q = w.queries.at(b, h);
            for (std::size_t t = 0; t < g.context; ++t) {
                double s = 0.0;
                for (std::size_t d = 0; d < g.head_dim; ++d) s += static_cast<double>(q[d]) * rows.first.data[t * g.head_dim + d];
                all[t] = {scale * s, static_cast<TokenIndex>(t)};
            }
            std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
                return x.first > y.first || (x.first == y.first && x.second < y.second);
            });
            std::vector<TokenIndex> expect;
            for (std::size_t i = 0; i < k; ++i) expect.push_back(all[i].second);
            std::sort(expect.begin(), expect.end());
            if (expect != picked) ++mismatches;
        }
    }
    results.push_back({"oracle_topk_exact", mismatches == 0, std::to_string(mismatches) + " mismatching heads"});
    return results;
}

} // namespace sparsedecode::bench
