#pragma once

// Little-endian encode/decode helpers shared by the CFM1, IDX1, WHT1 and
// DSC1 file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qamret/error.hpp"

namespace qamret::io {

class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.append(tag.data(), tag.size()); }

  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }

  void u32(std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) {
      bytes_.push_back(static_cast<char>((v >> shift) & 0xFFu));
    }
  }

  void u64(std::uint64_t v) {
    for (int shift = 0; shift < 64; shift += 8) {
      bytes_.push_back(static_cast<char>((v >> shift) & 0xFFu));
    }
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void f32s(std::span<const float> values) {
    bytes_.reserve(bytes_.size() + 4 * values.size());
    for (float v : values) f32(v);
  }

  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s.data(), s.size());
  }

  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

/// Sequential reader over an in-memory buffer. Every failed read reports the
/// section currently being decoded and the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes, std::string source = {})
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  void section(std::string name) { section_ = std::move(name); }
  const std::string& section() const { return section_; }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void expect_magic(std::string_view tag) {
    need(tag.size());
    if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
      fail("bad magic, expected \"" + std::string(tag) + "\"");
    }
    pos_ += tag.size();
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  void f32s(std::span<float> out) {
    need(4 * out.size());
    for (float& v : out) v = f32();
  }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  /// Throws a FormatError unless at least `n` more bytes are available.
  void need(std::size_t n) const {
    if (remaining() < n) {
      fail("truncated: needed " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
           " left");
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::string msg = source_.empty() ? std::string{} : source_ + ": ";
    if (!section_.empty()) msg += "section '" + section_ + "': ";
    msg += what + " (offset " + std::to_string(pos_) + ")";
    throw FormatError(msg);
  }

 private:
  std::vector<char> bytes_;
  std::string source_;
  std::string section_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace qamret::io
