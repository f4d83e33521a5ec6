#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqcm {

// Thrown by BinReader with the byte offset where the file stopped making sense.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Little-endian binary writer. The host is little-endian in every supported
// build; byte order is asserted once at open.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("cannot open for writing: " + path);
    check_endianness();
  }

  void bytes(const void* p, std::size_t n) {
    f_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    pos_ += n;
  }
  void u8(std::uint8_t x) { bytes(&x, 1); }
  void u32(std::uint32_t x) { bytes(&x, 4); }
  void u64(std::uint64_t x) { bytes(&x, 8); }
  void f32(float x) { bytes(&x, 4); }
  void magic(const char (&m)[9]) { bytes(m, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  std::uint64_t pos() const { return pos_; }
  void close() {
    f_.close();
    if (!f_) throw std::runtime_error("write failed while closing");
  }

 private:
  static void check_endianness() {
    const std::uint32_t probe = 1;
    if (*reinterpret_cast<const std::uint8_t*>(&probe) != 1)
      throw std::runtime_error("big-endian hosts are not supported");
  }
  std::ofstream f_;
  std::uint64_t pos_ = 0;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("cannot open for reading: " + path);
  }

  void bytes(void* p, std::size_t n) {
    f_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f_.gcount()) != n)
      throw IoError("unexpected end of file", pos_ + static_cast<std::uint64_t>(f_.gcount()));
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t x;
    bytes(&x, 1);
    return x;
  }
  std::uint32_t u32() {
    std::uint32_t x;
    bytes(&x, 4);
    return x;
  }
  std::uint64_t u64() {
    std::uint64_t x;
    bytes(&x, 8);
    return x;
  }
  float f32() {
    float x;
    bytes(&x, 4);
    return x;
  }
  void expect_magic(const char (&m)[9]) {
    char got[8];
    bytes(got, 8);
    for (int i = 0; i < 8; ++i)
      if (got[i] != m[i]) throw IoError("bad magic bytes", pos_ - 8);
  }
  std::string str(std::uint32_t max_len = 1u << 20) {
    const std::uint32_t n = u32();
    if (n > max_len) throw IoError("string length out of range", pos_ - 4);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_eof() {
    f_.peek();
    return f_.eof();
  }

  std::uint64_t pos() const { return pos_; }

 private:
  std::ifstream f_;
  std::uint64_t pos_ = 0;
};

// FNV-1a over a byte stream; used to stamp dataset identity into run logs.
class Fnv1a {
 public:
  void feed(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void feed_value(const T& x) {
    feed(&x, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace eqcm
