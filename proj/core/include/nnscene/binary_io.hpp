#pragma once

// Little-endian byte packing shared by the HBFS / HBMB / HBIX / HBPR formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "nnscene/errors.hpp"

namespace nnscene::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
 public:
  void magic(std::string_view tag) { raw(tag.data(), tag.size()); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    raw(&value, sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    raw(values.data(), values.size_bytes());
  }

  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }

  std::size_t size() const noexcept { return buffer_.size(); }
  const std::vector<std::uint8_t>& bytes() const noexcept { return buffer_; }
  std::vector<std::uint8_t> take() && { return std::move(buffer_); }

 private:
  std::vector<std::uint8_t> buffer_;
};

/// Bounds-checked cursor. Every failure throws ParseError with the offset of
/// the field that could not be read.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data, std::uint64_t base_offset = 0)
      : data_(data), base_(base_offset) {}

  void expect_magic(std::string_view tag, std::string_view what);

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(std::string_view field) {
    T value;
    std::memcpy(&value, take(sizeof(T), field), sizeof(T));
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out, std::string_view field) {
    if (out.empty()) return;
    std::memcpy(out.data(), take(out.size_bytes(), field), out.size_bytes());
  }

  const std::uint8_t* take(std::size_t n, std::string_view field);

  std::uint64_t offset() const noexcept { return base_ + pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written file.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Overflow-checked product used when sizing payloads from header fields.
std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t offset);

}  // namespace nnscene::io
