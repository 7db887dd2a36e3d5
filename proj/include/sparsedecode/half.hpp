// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>

#include <Eigen/Core>

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace sparsedecode {

inline std::uint16_t float_to_half_bits(float value) {
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

inline float half_bits_to_float(std::uint16_t bits) {
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

// Nearest value representable at the given storage width (2 = fp16, 4 = fp32).
inline float round_to_width(float value, std::size_t element_width) {
    return element_width == 2 ? half_bits_to_float(float_to_half_bits(value)) : value;
}

inline void decode_half_row(const std::uint16_t* src, float* dst, std::size_t n) {
    std::size_t i = 0;
#if defined(__F16C__)
    for (; i + 8 <= n; i += 8) {
        __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(src + i));
        _mm256_storeu_ps(dst + i, _mm256_cvtph_ps(h));
    }
#endif
    for (; i < n; ++i) dst[i] = half_bits_to_float(src[i]);
}

inline void encode_half_row(const float* src, std::uint16_t* dst, std::size_t n) {
    std::size_t i = 0;
#if defined(__F16C__)
    for (; i + 8 <= n; i += 8) {
        __m256 f = _mm256_loadu_ps(src + i);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + i),
                         _mm256_cvtps_ph(f, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC));
    }
#endif
    for (; i < n; ++i) dst[i] = float_to_half_bits(src[i]);
}

} // namespace sparsedecode
