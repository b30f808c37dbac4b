// SPDX-License-Identifier: Apache-2.0
//
// FTS1 tensor files:
//   "FTS1" | dtype u8 (0 f32, 1 u8, 2 i32) | ndim u8 | dims u32 LE x ndim | payload
// The payload is row-major little-endian with no padding.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "flans/tensor.hpp"

namespace flans {

enum class FtsDtype : std::uint8_t { F32 = 0, U8 = 1, I32 = 2 };

template <typename T>
constexpr FtsDtype fts_dtype_of();
template <>
constexpr FtsDtype fts_dtype_of<float>() { return FtsDtype::F32; }
template <>
constexpr FtsDtype fts_dtype_of<std::uint8_t>() { return FtsDtype::U8; }
template <>
constexpr FtsDtype fts_dtype_of<std::int32_t>() { return FtsDtype::I32; }

template <typename T>
std::string encode_fts(const Tensor<T>& t);

// Throws BadMagic, UnsupportedDtype (unknown code or not T), TruncatedPayload.
template <typename T>
Tensor<T> decode_fts(std::string_view bytes);

// Reads only the dtype byte (after validating the magic).
FtsDtype peek_fts_dtype(std::string_view bytes);

template <typename T>
void write_fts(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> read_fts(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace flans
