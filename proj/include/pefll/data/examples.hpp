#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "pefll/nn/tensor.hpp"

namespace pefll::data {

/// A batch of normalized images ([N,C,H,W]) with their labels.
template <typename T>
struct BasicExamples {
  nn::Tensor<T> images;
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_elements() const { return images.shape.element_count() / images.shape[0]; }

  BasicExamples subset(std::span<const std::uint32_t> rows) const {
    std::vector<std::size_t> dims = images.shape.dims;
    dims[0] = rows.size();
    BasicExamples out{nn::Tensor<T>(nn::Shape(dims)), {}};
    const std::size_t per = image_elements();
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const T* src = images.data() + std::size_t(rows[i]) * per;
      std::copy(src, src + per, out.images.data() + i * per);
      out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }

  template <typename U>
  BasicExamples<U> cast() const {
    return {nn::tensor_cast<U>(images), labels};
  }
};

using Examples = BasicExamples<float>;

}  // namespace pefll::data
