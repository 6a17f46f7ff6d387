#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <new>
#include <vector>

namespace cloakforge {

// Every tensor is NCHW. Vectors are (n, d, 1, 1) and scalars (1, 1, 1, 1).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t per_sample() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// Allocator whose value-less construct() leaves scalars uninitialized, so
// buffers that are about to be overwritten are not zero-filled first. Buffers
// are 64-byte aligned: Eigen's vectorized kernels peel differently depending
// on alignment, and a fixed alignment keeps results bit-reproducible.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class S>
class Tensor {
 public:
  using value_type = S;
  using Storage = std::vector<S, DefaultInitAllocator<S>>;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, const std::vector<S>& data) : shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("Tensor: data length does not match shape " + shape_.str());
    }
  }

  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = shape;
    t.data_.resize(shape.size());
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const S& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  std::span<S> sample(int n) {
    return std::span<S>(data_).subspan(shape_.per_sample() * n, shape_.per_sample());
  }
  std::span<const S> sample(int n) const {
    return std::span<const S>(data_).subspan(shape_.per_sample() * n, shape_.per_sample());
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.size() != shape_.size()) throw ShapeError("reshape: " + shape_.str() + " -> " + s.str());
    Tensor t = *this;
    t.shape_ = s;
    return t;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_{0, 0, 0, 0};
  Storage data_;
};

using Image = Tensor<float>;

// Stacks single-sample tensors (n == 1 each) into a batch.
template <class S>
Tensor<S> stack(std::span<const Tensor<S>> items) {
  if (items.empty()) throw ShapeError("stack: empty list");
  Shape s = items.front().shape();
  const std::size_t per = s.size();
  Tensor<S> out(Shape{static_cast<int>(items.size()) * s.n, s.c, s.h, s.w});
  for (std::size_t i = 0; i < items.size(); ++i) {
    require_same_shape(items[i].shape(), s, "stack");
    std::copy(items[i].data(), items[i].data() + per, out.data() + i * per);
  }
  return out;
}

template <class S>
Tensor<S> stack(const std::vector<Tensor<S>>& items) {
  return stack(std::span<const Tensor<S>>(items));
}

template <class S>
std::vector<Tensor<S>> unstack(const Tensor<S>& batch) {
  std::vector<Tensor<S>> out;
  const Shape s = batch.shape();
  out.reserve(s.n);
  for (int i = 0; i < s.n; ++i) {
    Tensor<S> item(Shape{1, s.c, s.h, s.w});
    auto src = batch.sample(i);
    std::copy(src.begin(), src.end(), item.data());
    out.push_back(std::move(item));
  }
  return out;
}

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class S>
double mean_of(const Tensor<S>& t) {
  double acc = 0;
  for (auto v : t.values()) acc += v;
  return t.empty() ? 0.0 : acc / static_cast<double>(t.size());
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](S v) { return std::isfinite(v); });
}

template <class S>
Tensor<S> clamp01(Tensor<S> t) {
  for (auto& v : t.values()) v = std::clamp(v, S(0), S(1));
  return t;
}

}  // namespace cloakforge
