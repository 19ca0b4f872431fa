#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pefll/nn/flat.hpp"
#include "pefll/nn/tensor.hpp"

namespace pefll::nn {

enum class LayerKind : std::uint8_t { conv2d, maxpool2d, dense, relu, softmax, flatten };

std::string to_string(LayerKind kind);

/// One layer of a feed-forward network. Only the size fields relevant to
/// `kind` are meaningful. Convolutions use stride 1 and no padding; pooling
/// uses a square window with stride equal to the window.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;      // conv: input channels, dense: input features
  std::size_t out = 0;     // conv: output channels, dense: output features
  std::size_t kernel = 0;  // conv kernel side, pool window side

  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k) {
    return {LayerKind::conv2d, in_ch, out_ch, k};
  }
  static LayerSpec maxpool2d(std::size_t window) { return {LayerKind::maxpool2d, 0, 0, window}; }
  static LayerSpec dense(std::size_t in_f, std::size_t out_f) {
    return {LayerKind::dense, in_f, out_f, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0}; }
  static LayerSpec softmax() { return {LayerKind::softmax, 0, 0, 0}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0}; }

  std::size_t weight_count() const;
  std::size_t bias_count() const;
  std::size_t param_count() const { return weight_count() + bias_count(); }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Shape input_shape;  // per example, without batch dimension
  std::vector<LayerSpec> layers;
  std::size_t output_dim = 0;

  /// Same network with a trailing softmax removed. Parameter layout is
  /// unchanged, so the result evaluates logits with the same ParamVector.
  NetworkSpec without_output_softmax() const;
  bool ends_with_softmax() const {
    return !layers.empty() && layers.back().kind == LayerKind::softmax;
  }

  std::string describe() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Per-example output shape of every layer; element i is the output of
/// layer i. Throws ShapeError naming the first inconsistent layer.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);

std::size_t param_count(const NetworkSpec& spec);

/// Offset of each layer's parameter block inside the flat layout
/// (weights then biases, layers in spec order).
std::vector<std::size_t> param_offsets(const NetworkSpec& spec);

/// Uniform fan-in/fan-out scaled weights in +-sqrt(6/(fan_in+fan_out)),
/// zero biases.
template <typename T>
BasicParamVector<T> init_params(const NetworkSpec& spec, std::mt19937_64& rng);

/// Recorded activations of one forward pass, consumed by backward.
template <typename T>
struct Tape {
  // activations[0] is the input; activations[i+1] is the output of layer i.
  std::vector<Tensor<T>> activations;
  // Per maxpool layer: flat input index that produced each output element.
  std::vector<std::vector<std::uint32_t>> pool_routes;
  // Per conv layer: the unfolded input patches, rows = in*k*k.
  std::vector<AlignedVector<T>> patches;
  const Tensor<T>& output() const { return activations.back(); }
};

/// Evaluates the network on a batch. `input.shape` must equal
/// spec.input_shape with a leading batch dimension.
template <typename T>
Tensor<T> forward(const NetworkSpec& spec, std::span<const T> params, const Tensor<T>& input);

template <typename T>
Tape<T> forward_tape(const NetworkSpec& spec, std::span<const T> params, Tensor<T> input);

template <typename T>
struct Gradients {
  BasicGradVector<T> params;
  Tensor<T> input;  // empty when not requested
};

template <typename T>
Gradients<T> backward(const NetworkSpec& spec, std::span<const T> params, const Tape<T>& tape,
                      const Tensor<T>& output_grad, bool want_input_grad = true);

/// Convenience overload that recomputes the forward pass.
template <typename T>
Gradients<T> backward(const NetworkSpec& spec, std::span<const T> params, const Tensor<T>& input,
                      const Tensor<T>& output_grad, bool want_input_grad = true);

/// Splits a flat parameter vector into per-layer (weights, biases) views and
/// back. Used by checkpoint tooling and tests.
template <typename T>
struct LayerParams {
  std::vector<T> weights;
  std::vector<T> biases;
};

template <typename T>
std::vector<LayerParams<T>> unflatten(const NetworkSpec& spec, std::span<const T> params);

template <typename T>
BasicParamVector<T> flatten(const NetworkSpec& spec, const std::vector<LayerParams<T>>& layers);

}  // namespace pefll::nn
