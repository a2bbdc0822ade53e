#pragma once

// Convolutional feature-map tensors and the CFM1 file format.
//
// CFM1 layout (all little-endian):
//   "CFM1" | u32 H | u32 W | u32 D | H*W*D f32, row-major (h, then w, d fastest)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qamret/binary_io.hpp"
#include "qamret/error.hpp"

namespace qamret {

/// Inclusive-exclusive rectangle on the feature-map grid.
struct GridBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool operator==(const GridBox&) const = default;
};

/// H x W x D nonnegative activation tensor. Immutable once constructed; the
/// constructor enforces finiteness and nonnegativity.
class CfmTensor {
 public:
  CfmTensor(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> values)
      : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
    if (height_ == 0 || width_ == 0 || channels_ == 0) {
      throw ValidationError("tensor dimensions must be positive, got " + shape_string());
    }
    if (values_.size() != height_ * width_ * channels_) {
      throw ValidationError("tensor " + shape_string() + " expects " +
                            std::to_string(height_ * width_ * channels_) + " values, got " +
                            std::to_string(values_.size()));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const float v = values_[i];
      if (!std::isfinite(v)) throw ValidationError("non-finite activation at index " + std::to_string(i));
      if (v < 0.0f) throw ValidationError("negative activation at index " + std::to_string(i));
    }
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  /// Number of spatial locations, H*W.
  std::size_t locations() const { return height_ * width_; }

  float at(std::size_t h, std::size_t w, std::size_t d) const {
    return values_[(h * width_ + w) * channels_ + d];
  }

  /// The D-dim local descriptor at flat location i = h*W + w.
  std::span<const float> local(std::size_t i) const {
    return {values_.data() + i * channels_, channels_};
  }
  std::span<const float> local(std::size_t h, std::size_t w) const { return local(h * width_ + w); }

  std::span<const float> values() const { return values_; }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" + std::to_string(channels_);
  }

  bool operator==(const CfmTensor&) const = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t channels_;
  std::vector<float> values_;
};

inline std::string encode_tensor(const CfmTensor& t) {
  io::ByteWriter w;
  w.magic("CFM1");
  w.u32(static_cast<std::uint32_t>(t.height()));
  w.u32(static_cast<std::uint32_t>(t.width()));
  w.u32(static_cast<std::uint32_t>(t.channels()));
  w.f32s(t.values());
  return w.bytes();
}

inline void write_tensor(const CfmTensor& t, const std::filesystem::path& path) {
  io::write_file(path, encode_tensor(t));
}

inline CfmTensor decode_tensor(std::vector<char> bytes, const std::string& source = {}) {
  io::ByteReader r(std::move(bytes), source);
  r.section("header");
  r.expect_magic("CFM1");
  const std::uint32_t h = r.u32();
  const std::uint32_t w = r.u32();
  const std::uint32_t d = r.u32();
  if (h == 0 || w == 0 || d == 0) r.fail("zero dimension in header");
  const std::uint64_t count = std::uint64_t{h} * w * d;
  r.section("payload");
  if (r.remaining() != 4 * count) {
    r.fail("payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
           std::to_string(4 * count));
  }
  std::vector<float> values(count);
  r.f32s(values);
  const std::string where = source.empty() ? std::string{} : source + ": ";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ValidationError(where + "non-finite activation at index " + std::to_string(i));
    }
    if (values[i] < 0.0f) {
      throw ValidationError(where + "negative activation at index " + std::to_string(i));
    }
  }
  return CfmTensor(h, w, d, std::move(values));
}

inline CfmTensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(io::read_file(path), path.string());
}

inline CfmTensor crop_tensor(const CfmTensor& t, const GridBox& box) {
  if (box.height == 0 || box.width == 0) throw RangeError("crop box is empty");
  if (box.top + box.height > t.height() || box.left + box.width > t.width()) {
    throw RangeError("crop box [" + std::to_string(box.top) + "+" + std::to_string(box.height) +
                     ", " + std::to_string(box.left) + "+" + std::to_string(box.width) +
                     ") exceeds grid " + std::to_string(t.height()) + "x" + std::to_string(t.width()));
  }
  std::vector<float> out;
  out.reserve(box.height * box.width * t.channels());
  for (std::size_t h = box.top; h < box.top + box.height; ++h) {
    for (std::size_t w = box.left; w < box.left + box.width; ++w) {
      auto x = t.local(h, w);
      out.insert(out.end(), x.begin(), x.end());
    }
  }
  return CfmTensor(box.height, box.width, t.channels(), std::move(out));
}

}  // namespace qamret
