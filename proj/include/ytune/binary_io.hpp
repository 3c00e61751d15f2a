#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "ytune/error.hpp"

namespace ytune {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void raw(std::string_view s) { buf_.append(s); }
  void f64s(std::span<const double> values) {
    if constexpr (std::endian::native == std::endian::little) {
      buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    } else {
      for (double d : values) u64(std::bit_cast<std::uint64_t>(d));
    }
  }
  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

/// Little-endian byte source over a buffer; running past the end raises a
/// TruncationError carrying the absolute offset.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::uint64_t base_offset = 0)
      : data_(data), base_(base_offset) {}

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get_le(4, what)); }
  std::uint64_t u64(const char* what) { return get_le(8, what); }

  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void f64s(std::span<double> out, const char* what) {
    need(out.size() * sizeof(double), what);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data_.data() + pos_, out.size() * sizeof(double));
      pos_ += out.size() * sizeof(double);
    } else {
      for (double& d : out) d = std::bit_cast<double>(get_le(8, what));
    }
  }

  std::size_t position() const { return pos_; }
  std::uint64_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      throw TruncationError(std::string("truncated while reading ") + what, base_ + pos_);
  }
  std::uint64_t get_le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view data_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

}  // namespace ytune
