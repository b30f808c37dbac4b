// SPDX-License-Identifier: Apache-2.0
#include "flans/fts.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace flans {

namespace {

constexpr char kMagic[4] = {'F', 'T', 'S', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
std::uint32_t to_bits(T v) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<std::uint32_t>(v);
  } else {
    return static_cast<std::uint32_t>(v);
  }
}

template <typename T>
T from_bits(std::uint32_t b) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(b);
  } else {
    return static_cast<T>(b);
  }
}

const char* dtype_name(FtsDtype d) {
  switch (d) {
    case FtsDtype::F32: return "f32";
    case FtsDtype::U8: return "u8";
    case FtsDtype::I32: return "i32";
  }
  return "?";
}

}  // namespace

FtsDtype peek_fts_dtype(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::BadMagic, "not an FTS1 file");
  }
  if (bytes.size() < 5) throw Error(ErrorCode::TruncatedPayload, "missing dtype byte");
  const auto code = static_cast<std::uint8_t>(bytes[4]);
  if (code > 2) throw Error(ErrorCode::UnsupportedDtype, "dtype code " + std::to_string(code));
  return static_cast<FtsDtype>(code);
}

template <typename T>
std::string encode_fts(const Tensor<T>& t) {
  if (t.rank() > 255) throw Error(ErrorCode::InvalidArgument, "FTS supports at most 255 dims");
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(fts_dtype_of<T>()));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw Error(ErrorCode::InvalidArgument, "dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values()) {
    if constexpr (sizeof(T) == 1) {
      out.push_back(static_cast<char>(v));
    } else {
      put_u32(out, to_bits(v));
    }
  }
  return out;
}

template <typename T>
Tensor<T> decode_fts(std::string_view bytes) {
  const FtsDtype dtype = peek_fts_dtype(bytes);
  if (dtype != fts_dtype_of<T>()) {
    throw Error(ErrorCode::UnsupportedDtype, std::string("file holds ") + dtype_name(dtype) + ", requested " +
                                                 dtype_name(fts_dtype_of<T>()));
  }
  if (bytes.size() < 6) throw Error(ErrorCode::TruncatedPayload, "missing ndim byte");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t ndim = p[5];
  std::size_t offset = 6;
  if (bytes.size() < offset + 4 * ndim) throw Error(ErrorCode::TruncatedPayload, "header ends inside dims");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i, offset += 4) shape[i] = get_u32(p + offset);
  const std::size_t count = numel(shape);
  const std::size_t expected = count * sizeof(T);
  if (bytes.size() - offset != expected) {
    throw Error(ErrorCode::TruncatedPayload, "payload holds " + std::to_string(bytes.size() - offset) +
                                                 " bytes, shape " + to_string(shape) + " needs " +
                                                 std::to_string(expected));
  }
  std::vector<T> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    if constexpr (sizeof(T) == 1) {
      data[i] = static_cast<T>(p[offset + i]);
    } else {
      data[i] = from_bits<T>(get_u32(p + offset + 4 * i));
    }
  }
  return Tensor<T>::from_external(std::move(shape), std::move(data));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoError, "read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

template <typename T>
void write_fts(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode_fts(t));
}

template <typename T>
Tensor<T> read_fts(const std::filesystem::path& path) {
  try {
    return decode_fts<T>(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::IoError) throw;
    throw Error(e.code(), path.string() + ": " + (e.what() + std::strlen(to_string(e.code())) + 2));
  }
}

#define FLANS_INSTANTIATE(T)                                      \
  template std::string encode_fts(const Tensor<T>&);              \
  template Tensor<T> decode_fts(std::string_view);                \
  template void write_fts(const std::filesystem::path&, const Tensor<T>&); \
  template Tensor<T> read_fts(const std::filesystem::path&);

FLANS_INSTANTIATE(float)
FLANS_INSTANTIATE(std::uint8_t)
FLANS_INSTANTIATE(std::int32_t)

#undef FLANS_INSTANTIATE

}  // namespace flans
