#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pefll/nn/aligned.hpp"

namespace pefll::nn {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t layer)
      : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) { validate(); }
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) { validate(); }

  std::size_t rank() const noexcept { return dims.size(); }
  std::size_t operator[](std::size_t i) const { return dims.at(i); }

  std::size_t element_count() const noexcept {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  /// Shape with a leading batch dimension prepended.
  Shape batched(std::size_t batch) const {
    std::vector<std::size_t> d;
    d.reserve(dims.size() + 1);
    d.push_back(batch);
    d.insert(d.end(), dims.begin(), dims.end());
    return Shape(std::move(d));
  }

  /// Drops the leading (batch) dimension.
  Shape unbatched() const {
    if (dims.empty()) throw ShapeError("cannot drop batch dimension of a scalar shape");
    return Shape(std::vector<std::size_t>(dims.begin() + 1, dims.end()));
  }

  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (auto d : dims)
      if (d == 0) throw ShapeError("shape dimensions must be >= 1, got " + to_string());
  }
};

/// Dense row-major tensor. The first dimension is the batch when used as a
/// network input or output.
template <typename T>
struct Tensor {
  Shape shape;
  AlignedVector<T> values;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), values(shape.element_count(), T(0)) {}
  Tensor(Shape s, AlignedVector<T> v) : shape(std::move(s)), values(std::move(v)) {
    check();
  }
  Tensor(Shape s, const std::vector<T>& v) : shape(std::move(s)), values(v.begin(), v.end()) {
    check();
  }
  Tensor(Shape s, std::initializer_list<T> v) : shape(std::move(s)), values(v) { check(); }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t batch() const { return shape[0]; }
  std::span<T> span() noexcept { return values; }
  std::span<const T> span() const noexcept { return values; }
  T* data() noexcept { return values.data(); }
  const T* data() const noexcept { return values.data(); }

 private:
  void check() const {
    if (values.size() != shape.element_count())
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape " + shape.to_string());
  }
};

using TensorBuffer = Tensor<float>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape, AlignedVector<To>(t.values.begin(), t.values.end()));
}

inline std::string Shape::to_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace pefll::nn
