// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <new>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sparsedecode/common.hpp"
#include "sparsedecode/half.hpp"

namespace sparsedecode {

struct CacheConfig {
    std::size_t num_kv_heads = 8;
    std::size_t head_dim = 128;
    std::size_t page_size = 16;
    std::size_t element_width = 2;  // bytes per stored scalar: 2 (fp16) or 4 (fp32)

    void validate() const {
        if (num_kv_heads == 0) throw std::invalid_argument("CacheConfig: num_kv_heads must be >= 1");
        if (head_dim == 0) throw std::invalid_argument("CacheConfig: head_dim must be >= 1");
        if (page_size == 0) throw std::invalid_argument("CacheConfig: page_size must be >= 1");
        if (element_width != 2 && element_width != 4)
            throw std::invalid_argument("CacheConfig: element_width must be 2 or 4, got " +
                                        std::to_string(element_width));
    }

    // Elements in one token slot across all heads (one "N" step of NHD).
    std::size_t token_elements() const { return num_kv_heads * head_dim; }
    std::size_t page_elements() const { return page_size * token_elements(); }
    std::uint64_t row_bytes() const { return static_cast<std::uint64_t>(head_dim) * element_width; }
};

// Row-major block of gathered rows, always decoded to single precision.
struct RowBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    RowBlock() = default;
    RowBlock(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c) {}

    void resize(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        data.resize(r * c);
    }
    std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

// One page of NHD storage: slot-major, then head, then dimension.
struct KvPage {
    std::vector<std::byte> keys;
    std::vector<std::byte> values;
    std::size_t occupancy = 0;
};

struct TokenLocation {
    std::size_t page_id = 0;
    std::size_t slot = 0;

    friend bool operator==(const TokenLocation&, const TokenLocation&) = default;
};

struct PageTable {
    SequenceId sequence_id = 0;
    std::size_t page_size = 16;
    std::vector<std::size_t> page_ids;
    std::size_t total_tokens = 0;
};

inline TokenLocation token_location(const PageTable& table, std::size_t t) {
    if (t >= table.total_tokens)
        throw IndexError("token " + std::to_string(t) + " out of range for sequence " +
                             std::to_string(table.sequence_id) + " with " +
                             std::to_string(table.total_tokens) + " tokens",
                         t);
    return {table.page_ids[t / table.page_size], t % table.page_size};
}

// Paged key/value cache with an instrumented read counter.
//
// Readers (gather_rows, scan_keys, accessors) take a shared lock; appends take
// an exclusive lock. The byte counters are atomic, so concurrent gathers
// account exactly.
class PagedKvCache {
public:
    explicit PagedKvCache(CacheConfig config) : config_(config) { config_.validate(); }

    PagedKvCache(const PagedKvCache&) = delete;
    PagedKvCache& operator=(const PagedKvCache&) = delete;

    // Not safe against concurrent use of `other`.
    PagedKvCache(PagedKvCache&& other) noexcept
        : config_(other.config_),
          pages_(std::move(other.pages_)),
          tables_(std::move(other.tables_)),
          bytes_read_(other.bytes_read_.load()),
          bytes_scanned_(other.bytes_scanned_.load()) {}

    PagedKvCache& operator=(PagedKvCache&& other) noexcept {
        if (this == &other) return *this;
        std::scoped_lock lock(mutex_, other.mutex_);
        config_ = other.config_;
        pages_ = std::move(other.pages_);
        tables_ = std::move(other.tables_);
        bytes_read_.store(other.bytes_read_.load());
        bytes_scanned_.store(other.bytes_scanned_.load());
        return *this;
    }

    const CacheConfig& config() const { return config_; }

    // Appends T tokens laid out T x H_kv x D. Returns the new total_tokens.
    std::size_t append_tokens(SequenceId seq, std::span<const float> keys, std::span<const float> values) {
        const std::size_t per_token = config_.token_elements();
        if (keys.size() != values.size())
            throw std::invalid_argument("append_tokens: keys have " + std::to_string(keys.size()) +
                                        " elements but values have " + std::to_string(values.size()));
        if (keys.size() % per_token != 0)
            throw std::invalid_argument("append_tokens: " + std::to_string(keys.size()) +
                                        " elements is not a multiple of H_kv*D = " +
                                        std::to_string(per_token));
        const std::size_t count = keys.size() / per_token;

        std::unique_lock lock(mutex_);
        auto [it, inserted] = tables_.try_emplace(seq);
        PageTable& table = it->second;
        if (inserted) {
            table.sequence_id = seq;
            table.page_size = config_.page_size;
        }
        try {
            const std::size_t needed_pages =
                (table.total_tokens + count + config_.page_size - 1) / config_.page_size;
            pages_.reserve(pages_.size() + (needed_pages - table.page_ids.size()));
            table.page_ids.reserve(needed_pages);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t slot = table.total_tokens % config_.page_size;
                if (slot == 0) table.page_ids.push_back(allocate_page());
                KvPage& page = *pages_[table.page_ids.back()];
                store_token(page.keys, slot, keys.subspan(i * per_token, per_token));
                store_token(page.values, slot, values.subspan(i * per_token, per_token));
                page.occupancy = slot + 1;
                ++table.total_tokens;
            }
        } catch (const std::bad_alloc&) {
            throw ResourceError("append_tokens: page allocation failed for sequence " + std::to_string(seq),
                                static_cast<std::uint64_t>(count) * per_token * config_.element_width * 2, 0);
        }
        return table.total_tokens;
    }

    // Copies the key and value rows of `token_indices` for one kv head, in the
    // order given. Adds 2 * k * D * element_width to bytes_read().
    void gather_rows(SequenceId seq, std::size_t kv_head, std::span<const TokenIndex> token_indices,
                     RowBlock& keys_out, RowBlock& values_out) const {
        std::shared_lock lock(mutex_);
        const PageTable& table = table_locked(seq);
        check_head(kv_head);
        keys_out.resize(token_indices.size(), config_.head_dim);
        values_out.resize(token_indices.size(), config_.head_dim);
        for (std::size_t i = 0; i < token_indices.size(); ++i) {
            const TokenLocation loc = sparsedecode::token_location(table, token_indices[i]);
            const KvPage& page = *pages_[loc.page_id];
            const std::size_t offset = (loc.slot * config_.num_kv_heads + kv_head) * config_.head_dim;
            decode(page.keys, offset, keys_out.row(i));
            decode(page.values, offset, values_out.row(i));
        }
        bytes_read_.fetch_add(2 * token_indices.size() * config_.row_bytes(), std::memory_order_relaxed);
    }

    std::pair<RowBlock, RowBlock> gather_rows(SequenceId seq, std::size_t kv_head,
                                              std::span<const TokenIndex> token_indices) const {
        RowBlock k, v;
        gather_rows(seq, kv_head, token_indices, k, v);
        return {std::move(k), std::move(v)};
    }

    // Reads key rows [begin, begin + count) for selector score passes. Counted
    // in bytes_scanned() (keys only), never in bytes_read().
    void scan_keys(SequenceId seq, std::size_t kv_head, std::size_t begin, std::size_t count,
                   RowBlock& keys_out) const {
        std::shared_lock lock(mutex_);
        const PageTable& table = table_locked(seq);
        check_head(kv_head);
        if (begin + count > table.total_tokens)
            throw IndexError("scan_keys: range end " + std::to_string(begin + count) + " exceeds " +
                                 std::to_string(table.total_tokens) + " tokens",
                             begin + count);
        keys_out.resize(count, config_.head_dim);
        for (std::size_t i = 0; i < count; ++i) {
            const TokenLocation loc = sparsedecode::token_location(table, begin + i);
            const std::size_t offset = (loc.slot * config_.num_kv_heads + kv_head) * config_.head_dim;
            decode(pages_[loc.page_id]->keys, offset, keys_out.row(i));
        }
        bytes_scanned_.fetch_add(count * config_.row_bytes(), std::memory_order_relaxed);
    }

    TokenLocation token_location(SequenceId seq, std::size_t t) const {
        std::shared_lock lock(mutex_);
        return sparsedecode::token_location(table_locked(seq), t);
    }

    // Copy of the page table; the live one may grow under concurrent appends.
    PageTable table(SequenceId seq) const {
        std::shared_lock lock(mutex_);
        return table_locked(seq);
    }

    bool contains(SequenceId seq) const {
        std::shared_lock lock(mutex_);
        return tables_.contains(seq);
    }

    std::size_t total_tokens(SequenceId seq) const {
        std::shared_lock lock(mutex_);
        return table_locked(seq).total_tokens;
    }

    std::size_t page_occupancy(std::size_t page_id) const {
        std::shared_lock lock(mutex_);
        if (page_id >= pages_.size()) throw IndexError("no page " + std::to_string(page_id), page_id);
        return pages_[page_id]->occupancy;
    }

    std::size_t num_pages() const {
        std::shared_lock lock(mutex_);
        return pages_.size();
    }

    std::size_t num_sequences() const {
        std::shared_lock lock(mutex_);
        return tables_.size();
    }

    std::uint64_t bytes_read() const { return bytes_read_.load(std::memory_order_relaxed); }
    std::uint64_t bytes_scanned() const { return bytes_scanned_.load(std::memory_order_relaxed); }

    // Bytes of key/value storage held by the page pool.
    std::uint64_t storage_bytes() const {
        std::shared_lock lock(mutex_);
        return static_cast<std::uint64_t>(pages_.size()) * config_.page_elements() * config_.element_width * 2;
    }

private:
    std::size_t allocate_page() {
        auto page = std::make_unique<KvPage>();
        const std::size_t bytes = config_.page_elements() * config_.element_width;
        page->keys.resize(bytes);
        page->values.resize(bytes);
        pages_.push_back(std::move(page));
        return pages_.size() - 1;
    }

    void store_token(std::vector<std::byte>& storage, std::size_t slot, std::span<const float> src) const {
        const std::size_t n = src.size();
        std::byte* dst = storage.data() + slot * n * config_.element_width;
        if (config_.element_width == 2) {
            encode_half_row(src.data(), reinterpret_cast<std::uint16_t*>(dst), n);
        } else {
            std::memcpy(dst, src.data(), n * sizeof(float));
        }
    }

    void decode(const std::vector<std::byte>& storage, std::size_t offset, std::span<float> dst) const {
        const std::byte* src = storage.data() + offset * config_.element_width;
        if (config_.element_width == 2) {
            decode_half_row(reinterpret_cast<const std::uint16_t*>(src), dst.data(), dst.size());
        } else {
            std::memcpy(dst.data(), src, dst.size() * sizeof(float));
        }
    }

    const PageTable& table_locked(SequenceId seq) const {
        auto it = tables_.find(seq);
        if (it == tables_.end()) throw IndexError("unknown sequence " + std::to_string(seq), seq);
        return it->second;
    }

    void check_head(std::size_t kv_head) const {
        if (kv_head >= config_.num_kv_heads)
            throw IndexError("kv head " + std::to_string(kv_head) + " out of range (H_kv = " +
                                 std::to_string(config_.num_kv_heads) + ")",
                             kv_head);
    }

    CacheConfig config_;
    std::vector<std::unique_ptr<KvPage>> pages_;
    std::map<SequenceId, PageTable> tables_;
    mutable std::shared_mutex mutex_;
    mutable std::atomic<std::uint64_t> bytes_read_{0};
    mutable std::atomic<std::uint64_t> bytes_scanned_{0};
};

} // namespace sparsedecode
