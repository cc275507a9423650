#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "egic/error.hpp"

namespace egic {

/// NCHW extent. Every array in the library is four-dimensional; scalars are 1x1x1x1.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// 64-byte aligned storage. Vectorized reductions peel a misaligned head, so without a
/// fixed alignment the summation order (and the last bits) would vary between buffers.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.size(), fill) {}
  Tensor(Shape s, Buffer<T> values) : shape_(s), data_(std::move(values)) {
    EGIC_REQUIRE(data_.size() == shape_.size(), "tensor data does not match shape " + s.str());
  }
  Tensor(Shape s, const std::vector<T>& values) : shape_(s), data_(values.begin(), values.end()) {
    EGIC_REQUIRE(data_.size() == shape_.size(), "tensor data does not match shape " + s.str());
  }
  Tensor(Shape s, std::initializer_list<T> values) : shape_(s), data_(values) {
    EGIC_REQUIRE(data_.size() == shape_.size(), "tensor data does not match shape " + s.str());
  }

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Buffer<T>& vec() { return data_; }
  const Buffer<T>& vec() const { return data_; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    EGIC_REQUIRE(data_.size() == 1, "item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape s) {
    EGIC_REQUIRE(s.size() == data_.size(), "reshape changes element count");
    shape_ = s;
  }

  /// Copies sample `i` of the batch into a 1xCxHxW tensor.
  Tensor sample(int i) const {
    Shape s{1, shape_.c, shape_.h, shape_.w};
    const std::size_t stride = s.size();
    Tensor out(s);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(stride * i), stride, out.data_.begin());
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.vec().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  Shape shape_{};
  Buffer<T> data_;
};

/// Stacks same-shaped single-sample tensors along the batch axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  EGIC_REQUIRE(!items.empty(), "stack of zero tensors");
  Shape s = items.front().shape();
  s.n = 0;
  for (const auto& t : items) {
    EGIC_REQUIRE(t.c() == items.front().c() && t.h() == items.front().h() &&
                     t.w() == items.front().w(),
                 "stack shape mismatch");
    s.n += t.n();
  }
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& t : items) {
    std::copy(t.vec().begin(), t.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
    off += t.size();
  }
  return out;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  EGIC_REQUIRE(a.shape() == b.shape(), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// Integer H x W map (semantic labels, connected-component ids, masks).
struct LabelMap {
  int h = 0, w = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(int height, int width, int fill = 0)
      : h(height), w(width), data(static_cast<std::size_t>(height) * width, fill) {}

  int& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  int at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return data.size(); }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace egic
