#pragma once

// Checkpoint fragment encoding, one record per tensor:
//   [u32 rank][u32 dim]*rank[f32 value]*prod(dims)
// All integers and floats little-endian. Values are always stored in single
// precision regardless of the compute precision.

#include <cstdint>
#include <span>
#include <vector>

#include "pefll/nn/bytes.hpp"
#include "pefll/nn/flat.hpp"
#include "pefll/nn/tensor.hpp"

namespace pefll::nn {

template <typename T>
void write_fragment(ByteWriter& w, const Shape& shape, std::span<const T> values) {
  if (values.size() != shape.element_count())
    throw ShapeError("fragment: value count does not match shape " + shape.to_string());
  w.u32(static_cast<std::uint32_t>(shape.rank()));
  for (auto d : shape.dims) w.u32(static_cast<std::uint32_t>(d));
  for (T v : values) w.f32(static_cast<float>(v));
}

template <typename T, typename Tag>
void write_fragment(ByteWriter& w, const Flat<T, Tag>& v) {
  write_fragment<T>(w, Shape{v.size()}, v.span());
}

struct Fragment {
  Shape shape;
  std::vector<float> values;
};

inline Fragment read_fragment(ByteReader& r) {
  const std::size_t start = r.position();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw ParseError("fragment: invalid rank " + std::to_string(rank), start);
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    d = r.u32();
    if (d == 0) throw ParseError("fragment: zero dimension", r.position() - 4);
    count *= d;
  }
  if (count * 4 > r.remaining())
    throw ParseError("fragment: expected " + std::to_string(count * 4) + " value bytes, have " +
                         std::to_string(r.remaining()),
                     r.position());
  Fragment f{Shape(std::move(dims)), std::vector<float>(count)};
  for (auto& v : f.values) v = r.f32();
  return f;
}

/// Reads a rank-1 fragment into a flat vector of the requested type.
template <typename FlatT>
FlatT read_flat_fragment(ByteReader& r) {
  const std::size_t start = r.position();
  Fragment f = read_fragment(r);
  if (f.shape.rank() != 1) throw ParseError("fragment: expected a rank-1 tensor", start);
  using V = typename FlatT::value_type;
  return FlatT(std::vector<V>(f.values.begin(), f.values.end()));
}

inline std::size_t fragment_size(std::size_t rank, std::size_t elements) {
  return 4 + 4 * rank + 4 * elements;
}

}  // namespace pefll::nn
