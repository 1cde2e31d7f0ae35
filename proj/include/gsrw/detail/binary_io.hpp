#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace gsrw::detail {

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 4);
}

inline void write_f64le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32le(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == std::char_traits<char>::eof())
    throw std::runtime_error("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32le(std::istream& is) {
  char buf[4];
  if (!is.read(buf, 4)) throw std::runtime_error("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

inline double read_f64le(std::istream& is) {
  char buf[8];
  if (!is.read(buf, 8)) throw std::runtime_error("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return std::bit_cast<double>(v);
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
  const std::uint32_t len = read_u32le(is);
  if (len > max_len) throw std::runtime_error("string length field out of range");
  std::string s(len, '\0');
  if (len > 0 && !is.read(s.data(), len))
    throw std::runtime_error("unexpected end of file");
  return s;
}

}  // namespace gsrw::detail
