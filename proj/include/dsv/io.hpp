#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dsv/error.hpp"

namespace dsv::io {

// ---- little-endian binary primitives -------------------------------------
// All container formats (DSVC/DSVD/DSVX) are little-endian on disk.

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, char* buf, std::size_t n, const char* what) {
  is.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw Error("truncated", std::string("truncated file while reading ") + what);
}

inline std::uint8_t read_u8(std::istream& is, const char* what = "u8") {
  char b;
  read_exact(is, &b, 1, what);
  return static_cast<std::uint8_t>(b);
}

inline std::uint32_t read_u32(std::istream& is, const char* what = "u32") {
  char b[4];
  read_exact(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is, const char* what = "u64") {
  char b[8];
  read_exact(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const char* what = "f64") {
  std::uint64_t bits = read_u64(is, what);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_string(std::istream& is, const char* what = "string") {
  std::uint64_t n = read_u64(is, what);
  if (n > (1ULL << 32)) throw Error("truncated", std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  if (n > 0) read_exact(is, s.data(), n, what);
  return s;
}

inline void expect_magic(std::istream& is, const char magic[4], const char* format_name) {
  char b[4];
  is.read(b, 4);
  if (is.gcount() != 4 || std::memcmp(b, magic, 4) != 0)
    throw Error("bad-magic", std::string("bad magic, not a ") + format_name + " file");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open for reading: " + path);
  return is;
}

// ---- text helpers ---------------------------------------------------------

/// Shortest round-trip decimal form of a double (deterministic across runs).
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // prefer a shorter representation when it round-trips exactly
  for (int prec = 1; prec < 17; ++prec) {
    char probe[40];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    if (std::strtod(probe, nullptr) == v) return probe;
  }
  return buf;
}

/// Write a whole text file.
inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot open for writing: " + path);
  os << content;
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open for reading: " + path);
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return s;
}

// ---- PPM (P6, binary) ------------------------------------------------------

/// rgb: height*width*3 bytes, row-major.
inline void write_ppm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3)
    throw Error("shape-mismatch", "ppm buffer size does not match dimensions");
  auto os = open_out(path);
  os << "P6\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace dsv::io
