#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "btok/errors.hpp"

namespace btok::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

template <typename V>
  requires std::is_arithmetic_v<V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

inline void put_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

inline void get_bytes(std::istream& is, void* data, std::size_t n, const char* what) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("truncated file while reading ") + what);
}

template <typename V>
  requires std::is_arithmetic_v<V>
V get(std::istream& is, const char* what) {
  V v{};
  get_bytes(is, &v, sizeof(V), what);
  return v;
}

inline std::string get_string(std::istream& is, const char* what, std::size_t max_len = 1u << 20) {
  const auto n = get<std::uint32_t>(is, what);
  if (n > max_len) throw FormatError(std::string("implausible string length while reading ") + what);
  std::string s(n, '\0');
  get_bytes(is, s.data(), n, what);
  return s;
}

}  // namespace btok::io
