#include "nnscene/binary_io.hpp"

#include <fstream>
#include <limits>

namespace nnscene::io {

void ByteReader::expect_magic(std::string_view tag, std::string_view what) {
  const std::uint64_t at = offset();
  if (remaining() < tag.size()) {
    throw ParseError(std::string(what) + ": truncated before magic", at);
  }
  if (std::memcmp(data_.data() + pos_, tag.data(), tag.size()) != 0) {
    throw ParseError(std::string(what) + ": bad magic, expected \"" + std::string(tag) + "\"", at);
  }
  pos_ += tag.size();
}

const std::uint8_t* ByteReader::take(std::size_t n, std::string_view field) {
  if (n > remaining()) {
    throw ParseError("truncated payload reading " + std::string(field) + " (need " +
                         std::to_string(n) + " bytes, have " + std::to_string(remaining()) + ")",
                     offset());
  }
  const std::uint8_t* p = data_.data() + pos_;
  pos_ += n;
  return p;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error("cannot open " + path.string() + " for reading");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::uint8_t> bytes(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw Error("failed reading " + path.string());
  }
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t offset) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw ParseError("header dimensions overflow", offset);
  }
  return a * b;
}

}  // namespace nnscene::io
