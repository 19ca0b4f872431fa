#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pefll/nn/aligned.hpp"

namespace pefll::nn {

/// Flat real vector tagged by its role. Parameters and gradients share a
/// layout but are not interchangeable at the type level.
template <typename T, typename Tag>
class Flat {
 public:
  using value_type = T;

  Flat() = default;
  explicit Flat(std::size_t n, T fill = T(0)) : values_(n, fill) {}
  explicit Flat(AlignedVector<T> v) : values_(std::move(v)) {}
  explicit Flat(const std::vector<T>& v) : values_(v.begin(), v.end()) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }
  std::span<T> span() noexcept { return values_; }
  std::span<const T> span() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }
  const AlignedVector<T>& values() const noexcept { return values_; }
  AlignedVector<T>& values() noexcept { return values_; }

  double squared_norm() const {
    double s = 0.0;
    for (T v : values_) s += double(v) * double(v);
    return s;
  }

  bool all_finite() const {
    for (T v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Flat<U, Tag> cast() const {
    return Flat<U, Tag>(AlignedVector<U>(values_.begin(), values_.end()));
  }

  friend bool operator==(const Flat&, const Flat&) = default;

 private:
  AlignedVector<T> values_;
};

struct ParamTag {};
struct GradTag {};

template <typename T>
using BasicParamVector = Flat<T, ParamTag>;
template <typename T>
using BasicGradVector = Flat<T, GradTag>;

using ParamVector = BasicParamVector<float>;
using GradVector = BasicGradVector<float>;

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
}

}  // namespace pefll::nn
