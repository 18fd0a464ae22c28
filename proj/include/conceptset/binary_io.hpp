#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "conceptset/error.hpp"

namespace conceptset {

// Little-endian encoder used by every on-disk artifact (graph snapshots,
// vector indexes, embedding caches, ingest bundles).
class ByteWriter {
 public:
  void u8(std::uint8_t value) { buffer_.push_back(static_cast<char>(value)); }
  void u32(std::uint32_t value) {
    for (int shift = 0; shift < 32; shift += 8) {
      buffer_.push_back(static_cast<char>((value >> shift) & 0xff));
    }
  }
  void u64(std::uint64_t value) {
    for (int shift = 0; shift < 64; shift += 8) {
      buffer_.push_back(static_cast<char>((value >> shift) & 0xff));
    }
  }
  void f32(float value) {
    std::uint32_t bits;
    std::memcpy(&bits, &value, sizeof(bits));
    u32(bits);
  }
  void f64(double value) {
    std::uint64_t bits;
    std::memcpy(&bits, &value, sizeof(bits));
    u64(bits);
  }
  void bytes(std::string_view data) { buffer_.append(data); }
  // Length-prefixed (u32) string.
  void str(std::string_view value) {
    u32(static_cast<std::uint32_t>(value.size()));
    buffer_.append(value);
  }

  const std::string& data() const { return buffer_; }
  std::string take() { return std::move(buffer_); }

 private:
  std::string buffer_;
};

// Bounds-checked decoder; any overrun throws Error(corrupt_code).
class ByteReader {
 public:
  ByteReader(std::string_view data, ErrorCode corrupt_code)
      : data_(data), corrupt_code_(corrupt_code) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      value |= static_cast<std::uint32_t>(
                   static_cast<std::uint8_t>(data_[pos_ + i]))
               << (8 * i);
    }
    pos_ += 4;
    return value;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t value = 0;
    for (int i = 0; i < 8; ++i) {
      value |= static_cast<std::uint64_t>(
                   static_cast<std::uint8_t>(data_[pos_ + i]))
               << (8 * i);
    }
    pos_ += 8;
    return value;
  }
  float f32() {
    std::uint32_t bits = u32();
    float value;
    std::memcpy(&value, &bits, sizeof(value));
    return value;
  }
  double f64() {
    std::uint64_t bits = u64();
    double value;
    std::memcpy(&value, &bits, sizeof(value));
    return value;
  }
  std::string_view bytes(std::size_t count) {
    need(count);
    auto view = data_.substr(pos_, count);
    pos_ += count;
    return view;
  }
  std::string str() {
    auto size = u32();
    return std::string(bytes(size));
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(corrupt_code_, what);
  }

 private:
  void need(std::size_t count) const {
    if (data_.size() - pos_ < count) {
      fail("truncated data at offset " + std::to_string(pos_));
    }
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  ErrorCode corrupt_code_;
};

std::string read_file_bytes(const std::string& path);
// Writes via a temporary file and rename so readers never see a partial file.
void write_file_atomic(const std::string& path, std::string_view bytes);

}  // namespace conceptset
