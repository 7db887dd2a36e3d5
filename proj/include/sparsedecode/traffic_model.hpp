// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsedecode/selectors.hpp"

namespace sparsedecode {

struct WorkloadGeometry {
    std::size_t batch = 1;
    std::size_t context = 131072;
    std::size_t q_heads = 32;
    std::size_t kv_heads = 8;
    std::size_t head_dim = 128;
    std::size_t element_width = 2;
    std::size_t page_size = 16;

    void validate() const {
        if (q_heads == 0 || kv_heads == 0 || head_dim == 0 || page_size == 0)
            throw std::invalid_argument("WorkloadGeometry: head counts, head_dim and page_size must be >= 1");
        if (q_heads % kv_heads != 0)
            throw std::invalid_argument("WorkloadGeometry: H_q must be a multiple of H_kv");
        if (element_width != 2 && element_width != 4)
            throw std::invalid_argument("WorkloadGeometry: element_width must be 2 or 4");
    }

    std::size_t group_size() const { return q_heads / kv_heads; }

    WorkloadGeometry with_batch(std::size_t b) const {
        WorkloadGeometry g = *this;
        g.batch = b;
        return g;
    }
};

// FP16 GQA H_q=32, H_kv=8, D=128, page size 16, 128K context.
inline WorkloadGeometry reference_gqa_geometry(std::size_t batch = 1) {
    return {.batch = batch, .context = 131072, .q_heads = 32, .kv_heads = 8, .head_dim = 128, .element_width = 2,
            .page_size = 16};
}

// Same with H_q = H_kv = 32.
inline WorkloadGeometry reference_mha_geometry(std::size_t batch = 1) {
    WorkloadGeometry g = reference_gqa_geometry(batch);
    g.kv_heads = 32;
    return g;
}

enum class SparseAccounting {
    per_query_head,  // each query head gathers its own rows
    dedup_group,     // rows shared inside a GQA group are read once
};

// Keys and values, read once per kv head.
inline std::uint64_t estimate_dense(const WorkloadGeometry& g) {
    g.validate();
    return 2ull * g.batch * g.context * g.kv_heads * g.head_dim * g.element_width;
}

inline std::uint64_t estimate_sparse(const WorkloadGeometry& g, std::size_t k,
                                     SparseAccounting accounting = SparseAccounting::per_query_head) {
    g.validate();
    if (k > g.context) throw std::invalid_argument("estimate_sparse: k exceeds context");
    if (accounting == SparseAccounting::per_query_head)
        return 2ull * g.batch * g.q_heads * k * g.head_dim * g.element_width;
    if (g.context == 0) return 0;
    // Expected union of G independent uniform k-subsets of N tokens.
    const double n = static_cast<double>(g.context);
    const double expected_union =
        n * (1.0 - std::pow(1.0 - static_cast<double>(k) / n, static_cast<double>(g.group_size())));
    const double bytes = 2.0 * static_cast<double>(g.batch * g.kv_heads * g.head_dim * g.element_width) * expected_union;
    return static_cast<std::uint64_t>(std::llround(bytes));
}

// Rows named by an index set, read per query head.
inline std::uint64_t sparse_bytes_for(const SparseIndexSet& idx, std::size_t head_dim, std::size_t element_width) {
    return 2ull * idx.total_indices() * head_dim * element_width;
}

// Logical indexer payload per decode step. Double Sparsity scans its sketch;
// score-based selectors are charged a full score pass, which is a measurement
// instrument rather than a deployable indexer.
inline std::uint64_t estimate_indexer(const WorkloadGeometry& g, const SelectorSpec& spec) {
    g.validate();
    if (spec.kind == SelectorKind::double_sparsity)
        return 1ull * g.batch * g.kv_heads * g.context * spec.channels * spec.sketch_width;
    return 2ull * g.batch * g.kv_heads * g.context * g.head_dim * g.element_width;
}

inline bool indexer_is_deployable(const SelectorSpec& spec) { return spec.kind == SelectorKind::double_sparsity; }

// Memory-transaction view of an untuned channel indexer: each selected
// channel is fetched in place from the NHD key row, so it costs a whole
// transaction, and C uniformly placed channels touch
// s * (1 - (1 - 1/s)^C) of the row's s transactions on average. Approximate
// scores are written and re-read in fp32 once per query head for the top-k.
struct IndexerCostModel {
    std::size_t transaction_bytes = 32;
    std::size_t score_bytes_per_query_head = 8;
};

inline std::uint64_t indexer_transfer_bytes(const WorkloadGeometry& g, const SelectorSpec& spec,
                                            const IndexerCostModel& model = {}) {
    if (spec.kind != SelectorKind::double_sparsity) return estimate_indexer(g, spec);
    if (spec.channels == 0) return 0;
    const double row_bytes = static_cast<double>(g.head_dim * g.element_width);
    const double sectors = std::ceil(row_bytes / static_cast<double>(model.transaction_bytes));
    const double touched = sectors * (1.0 - std::pow(1.0 - 1.0 / sectors, static_cast<double>(spec.channels)));
    const double key_bytes = std::min(row_bytes, touched * static_cast<double>(model.transaction_bytes));
    const double per_token = static_cast<double>(g.kv_heads) * key_bytes +
                             static_cast<double>(g.q_heads * model.score_bytes_per_query_head);
    return static_cast<std::uint64_t>(std::llround(static_cast<double>(g.batch * g.context) * per_token));
}

// Recurrent/linear-attention state, independent of context length.
inline std::uint64_t estimate_fixed_state(const WorkloadGeometry& g) {
    g.validate();
    return 1ull * g.batch * g.kv_heads * g.head_dim * g.head_dim * g.element_width;
}

// ---------------------------------------------------------------------------
// Calibration: time(bytes) = bytes / bandwidth + overhead.

struct CalibrationPoint {
    std::size_t batch = 1;
    double dense_ms = 0.0;
};

// Dense decode latency at the reference geometry, B = 1, 4, 8, 16.
inline std::vector<CalibrationPoint> reference_dense_latencies() {
    return {{1, 0.19}, {4, 0.72}, {8, 1.50}, {16, 3.08}};
}

struct Calibration {
    WorkloadGeometry reference;
    std::vector<CalibrationPoint> points;
    double bytes_per_ms = 0.0;
    double overhead_ms = 0.0;

    bool fitted() const { return bytes_per_ms > 0.0; }

    double time_ms(double bytes) const {
        if (!fitted()) throw std::logic_error("Calibration: not fitted");
        return bytes / bytes_per_ms + overhead_ms;
    }

    // Fixed overhead for a given batch; the fit uses one value for all batches.
    double overhead_for(std::size_t /*batch*/) const { return overhead_ms; }
};

// Least squares of measured dense latency against dense bytes, with the
// intercept (fixed overhead) constrained to be non-negative.
inline Calibration fit_calibration(const WorkloadGeometry& reference, std::vector<CalibrationPoint> points) {
    if (points.size() < 2) throw std::invalid_argument("fit_calibration: need at least two points");
    std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.batch < b.batch; });
    for (std::size_t i = 1; i < points.size(); ++i)
        if (!(points[i].dense_ms > points[i - 1].dense_ms) || points[i].batch == points[i - 1].batch)
            throw std::invalid_argument("fit_calibration: dense latencies must strictly increase with batch");

    std::vector<double> x, y;
    for (const auto& p : points) {
        x.push_back(static_cast<double>(estimate_dense(reference.with_batch(p.batch))));
        y.push_back(p.dense_ms);
    }
    const double m = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    double intercept = (sy - slope * sx) / m;
    if (intercept < 0.0) {
        intercept = 0.0;
        slope = sxy / sxx;
    }
    if (!(slope > 0.0)) throw std::invalid_argument("fit_calibration: non-positive time per byte");
    return {reference, std::move(points), 1.0 / slope, intercept};
}

inline Calibration reference_calibration() {
    return fit_calibration(reference_gqa_geometry(), reference_dense_latencies());
}

struct TrafficEstimate {
    std::uint64_t dense_bytes = 0;
    std::uint64_t sparse_bytes = 0;
    std::uint64_t indexer_bytes = 0;      // logical payload (estimate_indexer)
    std::uint64_t indexer_transfer = 0;   // charged to the timing model
    std::uint64_t fixed_state_bytes = 0;
    double dense_ms = 0.0;
    double sparse_ms = 0.0;
    double predicted_speedup = 0.0;
    double overhead_ms = 0.0;
};

// `indexer` empty means the backend-only regime: selection cost excluded.
inline TrafficEstimate estimate_traffic(const WorkloadGeometry& g, std::size_t k,
                                        const std::optional<SelectorSpec>& indexer, const Calibration& calibration,
                                        SparseAccounting accounting = SparseAccounting::per_query_head,
                                        const IndexerCostModel& cost = {}) {
    if (!calibration.fitted()) throw std::invalid_argument("estimate_traffic: calibration missing");
    TrafficEstimate e;
    e.dense_bytes = estimate_dense(g);
    e.sparse_bytes = estimate_sparse(g, k, accounting);
    if (indexer) {
        e.indexer_bytes = estimate_indexer(g, *indexer);
        e.indexer_transfer = indexer_transfer_bytes(g, *indexer, cost);
    }
    e.fixed_state_bytes = estimate_fixed_state(g);
    e.overhead_ms = calibration.overhead_for(g.batch);
    e.dense_ms = calibration.time_ms(static_cast<double>(e.dense_bytes));
    e.sparse_ms = calibration.time_ms(static_cast<double>(e.sparse_bytes + e.indexer_transfer));
    e.predicted_speedup = e.dense_ms / e.sparse_ms;
    return e;
}

inline double predict_speedup(const WorkloadGeometry& g, std::size_t k, const std::optional<SelectorSpec>& indexer,
                              const Calibration& calibration,
                              SparseAccounting accounting = SparseAccounting::per_query_head) {
    return estimate_traffic(g, k, indexer, calibration, accounting).predicted_speedup;
}

inline double predict_speedup_at(const WorkloadGeometry& g, double sparsity, const std::optional<SelectorSpec>& indexer,
                                 const Calibration& calibration,
                                 SparseAccounting accounting = SparseAccounting::per_query_head) {
    return predict_speedup(g, budget_from_sparsity(sparsity, g.context), indexer, calibration, accounting);
}

// Smallest S in [1, 1000] with predicted speedup >= 1, by bisection. Empty when
// the sparse path never breaks even in that range.
inline std::optional<double> break_even_sparsity(const WorkloadGeometry& g, const std::optional<SelectorSpec>& indexer,
                                                 const Calibration& calibration,
                                                 SparseAccounting accounting = SparseAccounting::per_query_head) {
    constexpr double kLow = 1.0, kHigh = 1000.0;
    auto ok = [&](double s) { return predict_speedup_at(g, s, indexer, calibration, accounting) >= 1.0; };
    if (ok(kLow)) return kLow;
    if (!ok(kHigh)) return std::nullopt;
    double lo = kLow, hi = kHigh;
    for (int i = 0; i < 100 && hi - lo > 1e-9 * hi; ++i) {
        const double mid = 0.5 * (lo + hi);
        (ok(mid) ? hi : lo) = mid;
    }
    return hi;
}

// ---------------------------------------------------------------------------
// Model-only sweep.

struct ModelRow {
    std::size_t batch = 1;
    double sparsity = 1.0;
    std::string regime;  // "backend" or the indexer name
    double dense_ms_calibrated = 0.0;
    double predicted_speedup = 0.0;
    std::optional<double> measured_speedup;
};

inline std::vector<ModelRow> model_sweep(const WorkloadGeometry& base, std::span<const std::size_t> batches,
                                         std::span<const double> sparsity_levels,
                                         const std::optional<SelectorSpec>& indexer, const Calibration& calibration) {
    std::vector<ModelRow> rows;
    for (std::size_t b : batches) {
        const WorkloadGeometry g = base.with_batch(b);
        for (double s : sparsity_levels) {
            const auto e = estimate_traffic(g, budget_from_sparsity(s, g.context), indexer, calibration);
            rows.push_back({b, s, indexer ? std::string(to_string(indexer->kind)) : "backend", e.dense_ms,
                            e.predicted_speedup, std::nullopt});
        }
    }
    return rows;
}

inline std::string format_number(double v, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

inline std::string format_sparsity(double s) {
    std::ostringstream os;
    os << s;
    return os.str() + "x";
}

inline std::string model_rows_to_csv(std::span<const ModelRow> rows) {
    std::ostringstream os;
    os << "B,S,regime,dense_ms_calibrated,predicted_speedup,measured_speedup_optional\n";
    for (const auto& r : rows) {
        os << r.batch << ',' << r.sparsity << ',' << r.regime << ',' << format_number(r.dense_ms_calibrated, 4) << ','
           << format_number(r.predicted_speedup, 4) << ',';
        if (r.measured_speedup) os << format_number(*r.measured_speedup, 4);
        os << '\n';
    }
    return os.str();
}

// Rows are batch sizes; columns are the dense baseline and one per sparsity.
inline std::string model_rows_to_markdown(std::span<const ModelRow> rows) {
    std::vector<std::size_t> batches;
    std::vector<double> levels;
    for (const auto& r : rows) {
        if (std::find(batches.begin(), batches.end(), r.batch) == batches.end()) batches.push_back(r.batch);
        if (std::find(levels.begin(), levels.end(), r.sparsity) == levels.end()) levels.push_back(r.sparsity);
    }
    std::ostringstream os;
    os << "| B | dense (ms) |";
    for (double s : levels) os << ' ' << format_sparsity(s) << " |";
    os << "\n|---|---:|";
    for (std::size_t i = 0; i < levels.size(); ++i) os << "---:|";
    os << '\n';
    for (std::size_t b : batches) {
        double dense = 0.0;
        std::vector<std::string> cells(levels.size());
        for (const auto& r : rows) {
            if (r.batch != b) continue;
            dense = r.dense_ms_calibrated;
            const auto pos = std::find(levels.begin(), levels.end(), r.sparsity) - levels.begin();
            cells[static_cast<std::size_t>(pos)] = format_number(r.predicted_speedup, 2) + "×";
        }
        os << "| " << b << " | " << format_number(dense, 2) << " |";
        for (const auto& c : cells) os << ' ' << c << " |";
        os << '\n';
    }
    return os.str();
}

} // namespace sparsedecode
