#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>

#include "ibpica/errors.hpp"

namespace ibpica {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void magic(std::string_view m) { buf_.append(m.data(), m.size()); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  /// u32 length followed by the raw characters.
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    magic(s);
  }

  const std::string& data() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  template <typename T>
  void put_le(T v) {
    char out[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) out[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    buf_.append(out, sizeof(T));
  }
  std::string buf_;
};

/// Bounds-checked little-endian reader; any overrun is a FormatError.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view m) {
    if (data_.size() - pos_ < m.size() || data_.substr(pos_, m.size()) != m)
      throw FormatError(what_ + ": bad magic, expected " + printable(m));
    pos_ += m.size();
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() { return std::string(bytes(u32())); }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }
  const std::string& what() const noexcept { return what_; }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated (needed " + std::to_string(n) + " more bytes)");
  }
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  static std::string printable(std::string_view m) {
    std::string out;
    for (char c : m) out += (c == '\0') ? std::string("\\0") : std::string(1, c);
    return out;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

/// Whole-file helpers; failures raise IoError naming the path.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace ibpica
