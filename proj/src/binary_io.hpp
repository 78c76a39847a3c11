#pragma once

// Little-endian primitives shared by the checkpoint, dataset and teacher-cache formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "protoclip/error.hpp"
#include "protoclip/tensor.hpp"

namespace protoclip::binary {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(bytes, 4);
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  os.write(bytes, 8);
}

inline void write_values(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) write_f64(os, v);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw IoError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw IoError(std::string("truncated file while reading ") + what);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char bytes[4];
  read_exact(is, reinterpret_cast<char*>(bytes), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const char* what) {
  unsigned char bytes[8];
  read_exact(is, reinterpret_cast<char*>(bytes), 8, what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline Tensor read_tensor(std::istream& is, std::size_t rows, std::size_t cols, const char* what) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = read_f64(is, what);
  return t;
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic, const std::string& path) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(is.gcount()) != magic.size() || got != magic) {
    throw IoError(path + ": missing " + std::string(magic) + " header");
  }
}

}  // namespace protoclip::binary
