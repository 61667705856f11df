#include "fermi/io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "fermi/errors.hpp"

namespace fermi::io {

namespace {

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw Error("binary write failed");
}

void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw ValidationError("binary read failed: truncated file");
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(os, b, 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(os, b, 8);
}

void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

void write_matrix(std::ostream& os, const Matrix& m) {
  write_u32(os, static_cast<std::uint32_t>(m.rows()));
  write_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (std::size_t i = 0; i < m.size(); ++i) write_f64(os, m.data()[i]);
}

std::uint8_t read_u8(std::istream& is) {
  std::uint8_t v;
  get_bytes(is, &v, 1);
  return v;
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  get_bytes(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

std::string read_string(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n) get_bytes(is, s.data(), n);
  return s;
}

Matrix read_matrix(std::istream& is) {
  std::uint32_t r = read_u32(is);
  std::uint32_t c = read_u32(is);
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = read_f64(is);
  return m;
}

void write_magic(std::ostream& os, const char magic[4]) { put_bytes(os, magic, 4); }

void expect_magic(std::istream& is, const char magic[4]) {
  char got[4];
  get_bytes(is, got, 4);
  if (std::memcmp(got, magic, 4) != 0)
    throw ValidationError(std::string("bad file magic: expected '") +
                          std::string(magic, 4) + "', found '" +
                          std::string(got, 4) + "'");
}

std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace fermi::io
