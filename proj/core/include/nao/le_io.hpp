#pragma once

// Little-endian binary I/O shared by the checkpoint and feature-cache formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>

#include "nao/errors.hpp"

namespace nao::le {

template <class U>
void put(std::ostream& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf.data(), buf.size());
}

template <class U>
U get(std::istream& in, const std::string& what) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> buf;
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) throw FormatError(what + ": truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  return v;
}

inline void put_floats(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
}

inline void get_floats(std::istream& in, std::span<float> values, const std::string& what) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) throw FormatError(what + ": truncated file");
  } else {
    for (float& f : values) f = std::bit_cast<float>(get<std::uint32_t>(in, what));
  }
}

}  // namespace nao::le
