#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "fermi/mat.hpp"

// Little-endian binary primitives shared by all checkpoint formats.
namespace fermi::io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
void write_matrix(std::ostream& os, const Matrix& m);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
Matrix read_matrix(std::istream& is);

// Writes/checks a 4-byte magic tag. Mismatch throws ValidationError naming
// both the expected and the found tag.
void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4]);

std::string hex_u64(std::uint64_t v);

}  // namespace fermi::io
