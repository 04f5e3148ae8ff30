#pragma once

// Little-endian byte packing shared by the bag and checkpoint formats.

#include <type_traits>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "marble/error.hpp"

namespace marble::binio {

class Writer {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    using Unsigned = std::make_unsigned_t<U>;
    auto u = static_cast<Unsigned>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
    }
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_f64(double d) { put(std::bit_cast<std::uint64_t>(d)); }
  void put_bytes(std::string_view s) { buf_.append(s); }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

// Bounds-checked reader. Every failure is a FormatError naming the offset.
class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <class U>
  U get(std::string_view field) {
    static_assert(std::is_integral_v<U>);
    need(sizeof(U), field);
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      u |= static_cast<std::make_unsigned_t<U>>(static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }
  float get_f32(std::string_view field) { return std::bit_cast<float>(get<std::uint32_t>(field)); }
  double get_f64(std::string_view field) { return std::bit_cast<double>(get<std::uint64_t>(field)); }
  std::string_view get_bytes(std::size_t n, std::string_view field) {
    need(n, field);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at offset " + std::to_string(pos_));
  }
  void need(std::size_t n, std::string_view field) const {
    if (data_.size() - pos_ < n) {
      fail("truncated while reading " + std::string(field));
    }
  }

 private:
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
// Writes via a temporary sibling and renames into place.
void write_file(const std::string& path, std::string_view bytes);

}  // namespace marble::binio
