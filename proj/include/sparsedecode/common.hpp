// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sparsedecode {

using SequenceId = std::uint64_t;
using TokenIndex = std::uint32_t;

// Raised when a request would exceed a configured memory cap or an
// allocation fails outright.
class ResourceError : public std::runtime_error {
public:
    ResourceError(const std::string& what, std::uint64_t requested_bytes, std::uint64_t cap_bytes)
        : std::runtime_error(what), requested_(requested_bytes), cap_(cap_bytes) {}

    std::uint64_t requested_bytes() const noexcept { return requested_; }
    std::uint64_t cap_bytes() const noexcept { return cap_; }

private:
    std::uint64_t requested_;
    std::uint64_t cap_;
};

// An index outside the valid range of a sequence or head.
class IndexError : public std::out_of_range {
public:
    IndexError(const std::string& what, std::uint64_t index)
        : std::out_of_range(what), index_(index) {}

    std::uint64_t index() const noexcept { return index_; }

private:
    std::uint64_t index_;
};

// Inline correctness assertion failure during a benchmark sweep.
class CorrectnessError : public std::runtime_error {
public:
    CorrectnessError(const std::string& what, std::size_t batch, double sparsity, std::size_t head)
        : std::runtime_error(what), batch_(batch), sparsity_(sparsity), head_(head) {}

    std::size_t batch() const noexcept { return batch_; }
    double sparsity() const noexcept { return sparsity_; }
    std::size_t head() const noexcept { return head_; }

private:
    std::size_t batch_;
    double sparsity_;
    std::size_t head_;
};

} // namespace sparsedecode
