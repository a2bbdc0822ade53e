#pragma once

#include <cmath>
#include <cstddef>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "qamret/error.hpp"

namespace qamret {

/// Dense row-major matrix. Rows are the natural unit here (one descriptor per
/// row), so the interface is built around row spans.
template <typename T>
class RowMatrix {
 public:
  using value_type = T;

  RowMatrix() = default;
  RowMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  RowMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ValidationError("matrix storage size does not match " + std::to_string(rows_) + "x" +
                            std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  /// Appends a row from any sized range; the first row fixes the column
  /// count of an empty matrix.
  template <typename Range>
  void append_row(const Range& values) {
    const std::size_t n = std::size(values);
    if (rows_ == 0 && cols_ == 0) cols_ = n;
    if (n != cols_) {
      throw ValidationError("row length " + std::to_string(n) + " != " + std::to_string(cols_));
    }
    data_.reserve(data_.size() + cols_);
    for (const auto& v : values) data_.push_back(static_cast<T>(v));
    ++rows_;
  }

  bool operator==(const RowMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = RowMatrix<float>;

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) {
    throw ValidationError("dot: dimension mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename A>
double l2_norm(std::span<const A> a) {
  double acc = 0.0;
  for (const A& v : a) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// Divides `v` by its l2 norm in place. Returns false (and leaves `v` zero)
/// when the norm is zero.
template <typename T>
bool normalize_in_place(std::span<T> v) {
  const double n = l2_norm(std::span<const T>(v));
  if (n == 0.0 || !std::isfinite(n)) {
    for (T& x : v) x = T{0};
    return false;
  }
  for (T& x : v) x = static_cast<T>(static_cast<double>(x) / n);
  return true;
}

/// A unit-norm image-level descriptor, or the flagged all-zero descriptor.
struct GlobalDescriptor {
  std::vector<float> values;
  bool degenerate = false;

  std::size_t dim() const { return values.size(); }
  std::span<const float> view() const { return values; }

  /// l2-normalizes a double-precision accumulator into a descriptor.
  static GlobalDescriptor normalized(std::span<const double> raw) {
    GlobalDescriptor g;
    g.values.assign(raw.size(), 0.0f);
    const double n = l2_norm(raw);
    if (n == 0.0 || !std::isfinite(n)) {
      g.degenerate = true;
      return g;
    }
    for (std::size_t i = 0; i < raw.size(); ++i) g.values[i] = static_cast<float>(raw[i] / n);
    return g;
  }

  bool operator==(const GlobalDescriptor&) const = default;
};

}  // namespace qamret
