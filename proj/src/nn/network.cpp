#include "pefll/nn/network.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pefll::nn {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const RowMatrix<T>>;

[[noreturn]] void layer_error(std::size_t index, const LayerSpec& layer, const std::string& msg) {
  throw ShapeError("layer " + std::to_string(index) + " (" + to_string(layer.kind) + "): " + msg);
}

template <typename T>
void check_finite(const Tensor<T>& t, std::size_t layer) {
  for (T v : t.values)
    if (!std::isfinite(v))
      throw NumericError("non-finite activation produced by layer " + std::to_string(layer), layer);
}

// Unfolds [N,C,H,W] into a (C*k*k) x (N*Ho*Wo) row-major patch matrix.
template <typename T>
void im2col(const Tensor<T>& x, std::size_t k, AlignedVector<T>& out) {
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const std::size_t ho = h - k + 1, wo = w - k + 1, p = ho * wo, np = n * p;
  out.assign(c * k * k * np, T(0));
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = out.data() + ((ci * k + ki) * k + kj) * np;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = x.data() + (b * c + ci) * h * w;
          T* dst = row + b * p;
          for (std::size_t i = 0; i < ho; ++i) {
            const T* src = plane + (i + ki) * w + kj;
            std::copy(src, src + wo, dst + i * wo);
          }
        }
      }
}

template <typename T>
void col2im(const AlignedVector<T>& cols, std::size_t k, Tensor<T>& dx) {
  const std::size_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3];
  const std::size_t ho = h - k + 1, wo = w - k + 1, p = ho * wo, np = n * p;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols.data() + ((ci * k + ki) * k + kj) * np;
        for (std::size_t b = 0; b < n; ++b) {
          T* plane = dx.data() + (b * c + ci) * h * w;
          const T* src = row + b * p;
          for (std::size_t i = 0; i < ho; ++i) {
            T* dst = plane + (i + ki) * w + kj;
            for (std::size_t j = 0; j < wo; ++j) dst[j] += src[i * wo + j];
          }
        }
      }
}

template <typename T>
Tensor<T> conv_forward(const LayerSpec& layer, const T* params, const Tensor<T>& x,
                       AlignedVector<T>& patches) {
  const std::size_t n = x.shape[0], h = x.shape[2], w = x.shape[3], k = layer.kernel;
  const std::size_t ho = h - k + 1, wo = w - k + 1, p = ho * wo, np = n * p;
  const std::size_t kk = layer.in * k * k;
  im2col(x, k, patches);
  ConstMapRM<T> weights(params, kk, layer.out);
  ConstMapRM<T> cols(patches.data(), kk, np);
  RowMatrix<T> out = weights.transpose() * cols;
  const T* bias = params + layer.weight_count();
  Tensor<T> y(Shape{n, layer.out, ho, wo});
  for (std::size_t o = 0; o < layer.out; ++o)
    for (std::size_t b = 0; b < n; ++b) {
      T* dst = y.data() + (b * layer.out + o) * p;
      const T* src = out.data() + o * np + b * p;
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bias[o];
    }
  return y;
}

template <typename T>
void conv_backward(const LayerSpec& layer, const T* params, const Tensor<T>& x,
                   const AlignedVector<T>& patches, const Tensor<T>& dy, T* dparams,
                   Tensor<T>* dx) {
  const std::size_t n = x.shape[0], k = layer.kernel;
  const std::size_t p = dy.shape[2] * dy.shape[3], np = n * p;
  const std::size_t kk = layer.in * k * k;
  RowMatrix<T> dout(layer.out, np);
  for (std::size_t o = 0; o < layer.out; ++o)
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = dy.data() + (b * layer.out + o) * p;
      std::copy(src, src + p, dout.data() + o * np + b * p);
    }
  ConstMapRM<T> cols(patches.data(), kk, np);
  MapRM<T> dw(dparams, kk, layer.out);
  dw.noalias() = cols * dout.transpose();
  T* db = dparams + layer.weight_count();
  for (std::size_t o = 0; o < layer.out; ++o) db[o] = dout.row(o).sum();
  if (dx) {
    ConstMapRM<T> weights(params, kk, layer.out);
    AlignedVector<T> dcols(kk * np);
    MapRM<T>(dcols.data(), kk, np).noalias() = weights * dout;
    *dx = Tensor<T>(x.shape);
    col2im(dcols, k, *dx);
  }
}

template <typename T>
Tensor<T> pool_forward(const LayerSpec& layer, const Tensor<T>& x,
                       std::vector<std::uint32_t>& route) {
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const std::size_t k = layer.kernel, ho = h / k, wo = w / k;
  Tensor<T> y(Shape{n, c, ho, wo});
  route.assign(y.size(), 0);
  std::size_t out_idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j, ++out_idx) {
        std::size_t best = base + (i * k) * w + j * k;
        T best_v = x.values[best];
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) {
            const std::size_t idx = base + (i * k + a) * w + (j * k + b);
            // strict comparison: the lowest-index maximum wins
            if (x.values[idx] > best_v) {
              best_v = x.values[idx];
              best = idx;
            }
          }
        y.values[out_idx] = best_v;
        route[out_idx] = static_cast<std::uint32_t>(best);
      }
  }
  return y;
}

template <typename T>
Tensor<T> dense_forward(const LayerSpec& layer, const T* params, const Tensor<T>& x) {
  const std::size_t n = x.shape[0];
  ConstMapRM<T> in(x.data(), n, layer.in);
  ConstMapRM<T> weights(params, layer.in, layer.out);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(params + layer.weight_count(),
                                                              layer.out);
  Tensor<T> y(Shape{n, layer.out});
  MapRM<T> out(y.data(), n, layer.out);
  out.noalias() = in * weights;
  out.rowwise() += bias;
  return y;
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
  }
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax: return "softmax";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

std::size_t LayerSpec::weight_count() const {
  switch (kind) {
    case LayerKind::conv2d: return in * kernel * kernel * out;
    case LayerKind::dense: return in * out;
    default: return 0;
  }
}

std::size_t LayerSpec::bias_count() const {
  return (kind == LayerKind::conv2d || kind == LayerKind::dense) ? out : 0;
}

NetworkSpec NetworkSpec::without_output_softmax() const {
  NetworkSpec s = *this;
  if (s.ends_with_softmax()) s.layers.pop_back();
  return s;
}

std::string NetworkSpec::describe() const {
  std::ostringstream os;
  os << "input " << input_shape.to_string();
  for (const auto& l : layers) {
    os << " | " << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        os << " " << l.in << "x" << l.kernel << "x" << l.kernel << "x" << l.out;
        break;
      case LayerKind::dense: os << " " << l.in << "x" << l.out; break;
      case LayerKind::maxpool2d: os << " " << l.kernel << "x" << l.kernel; break;
      default: break;
    }
  }
  os << " | out " << output_dim;
  return os.str();
}

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
  std::vector<Shape> shapes;
  shapes.reserve(spec.layers.size());
  Shape cur = spec.input_shape;
  if (cur.rank() == 0) throw ShapeError("network input shape is empty");
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (l.in == 0 || l.out == 0 || l.kernel == 0) layer_error(i, l, "sizes must be positive");
        if (cur.rank() != 3) layer_error(i, l, "expects [C,H,W] input, got " + cur.to_string());
        if (cur[0] != l.in)
          layer_error(i, l, "expects " + std::to_string(l.in) + " channels, got " + cur.to_string());
        if (cur[1] < l.kernel || cur[2] < l.kernel)
          layer_error(i, l, "kernel larger than input " + cur.to_string());
        cur = Shape{l.out, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
        break;
      }
      case LayerKind::maxpool2d: {
        if (l.kernel == 0) layer_error(i, l, "window must be positive");
        if (cur.rank() != 3) layer_error(i, l, "expects [C,H,W] input, got " + cur.to_string());
        if (cur[1] < l.kernel || cur[2] < l.kernel)
          layer_error(i, l, "window larger than input " + cur.to_string());
        cur = Shape{cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
        break;
      }
      case LayerKind::dense: {
        if (l.in == 0 || l.out == 0) layer_error(i, l, "sizes must be positive");
        if (cur.rank() != 1 || cur[0] != l.in)
          layer_error(i, l, "expects [" + std::to_string(l.in) + "] input, got " + cur.to_string());
        cur = Shape{l.out};
        break;
      }
      case LayerKind::softmax:
        if (cur.rank() != 1) layer_error(i, l, "expects a vector input, got " + cur.to_string());
        break;
      case LayerKind::relu: break;
      case LayerKind::flatten: cur = Shape{cur.element_count()}; break;
    }
    shapes.push_back(cur);
  }
  if (cur.rank() != 1 || cur[0] != spec.output_dim)
    throw ShapeError("network output shape " + cur.to_string() + " does not match output_dim " +
                     std::to_string(spec.output_dim));
  return shapes;
}

std::size_t param_count(const NetworkSpec& spec) {
  infer_shapes(spec);
  std::size_t n = 0;
  for (const auto& l : spec.layers) n += l.param_count();
  return n;
}

std::vector<std::size_t> param_offsets(const NetworkSpec& spec) {
  std::vector<std::size_t> off;
  off.reserve(spec.layers.size());
  std::size_t n = 0;
  for (const auto& l : spec.layers) {
    off.push_back(n);
    n += l.param_count();
  }
  return off;
}

template <typename T>
BasicParamVector<T> init_params(const NetworkSpec& spec, std::mt19937_64& rng) {
  BasicParamVector<T> p(param_count(spec));
  std::size_t off = 0;
  for (const auto& l : spec.layers) {
    if (l.weight_count() == 0) continue;
    double fan_in = double(l.in), fan_out = double(l.out);
    if (l.kind == LayerKind::conv2d) {
      fan_in *= double(l.kernel * l.kernel);
      fan_out *= double(l.kernel * l.kernel);
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < l.weight_count(); ++i) p[off + i] = static_cast<T>(dist(rng));
    off += l.param_count();
  }
  return p;
}

template <typename T>
Tape<T> forward_tape(const NetworkSpec& spec, std::span<const T> params, Tensor<T> input) {
  const auto shapes = infer_shapes(spec);
  if (input.shape.rank() != spec.input_shape.rank() + 1 ||
      input.shape.unbatched() != spec.input_shape)
    throw ShapeError("input shape " + input.shape.to_string() + " does not match network input " +
                     spec.input_shape.batched(input.shape.rank() ? input.shape[0] : 1).to_string());
  std::size_t total = 0;
  for (const auto& l : spec.layers) total += l.param_count();
  require_same_length(params.size(), total, "forward: parameter vector");

  const std::size_t n = input.shape[0];
  Tape<T> tape;
  tape.activations.reserve(spec.layers.size() + 1);
  tape.activations.push_back(std::move(input));
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Tensor<T>& x = tape.activations.back();
    const T* p = params.data() + off;
    Tensor<T> y;
    switch (l.kind) {
      case LayerKind::conv2d:
        tape.patches.emplace_back();
        y = conv_forward(l, p, x, tape.patches.back());
        break;
      case LayerKind::maxpool2d:
        tape.pool_routes.emplace_back();
        y = pool_forward(l, x, tape.pool_routes.back());
        break;
      case LayerKind::dense: y = dense_forward(l, p, x); break;
      case LayerKind::relu:
        y = x;
        for (auto& v : y.values) v = v > T(0) ? v : T(0);
        break;
      case LayerKind::softmax:
        y = Tensor<T>(x.shape);
        softmax_rows(x.data(), y.data(), n, x.shape[1]);
        break;
      case LayerKind::flatten: y = Tensor<T>(shapes[i].batched(n), x.values); break;
    }
    check_finite(y, i);
    tape.activations.push_back(std::move(y));
    off += l.param_count();
  }
  return tape;
}

template <typename T>
Tensor<T> forward(const NetworkSpec& spec, std::span<const T> params, const Tensor<T>& input) {
  auto tape = forward_tape(spec, params, input);
  return std::move(tape.activations.back());
}

template <typename T>
Gradients<T> backward(const NetworkSpec& spec, std::span<const T> params, const Tape<T>& tape,
                      const Tensor<T>& output_grad, bool want_input_grad) {
  if (tape.activations.size() != spec.layers.size() + 1)
    throw ShapeError("tape does not belong to this network");
  if (output_grad.shape != tape.output().shape)
    throw ShapeError("output gradient shape " + output_grad.shape.to_string() +
                     " does not match network output " + tape.output().shape.to_string());
  const auto offsets = param_offsets(spec);
  Gradients<T> g{BasicGradVector<T>(params.size()), {}};
  Tensor<T> dy = output_grad;
  std::size_t conv_idx = tape.patches.size(), pool_idx = tape.pool_routes.size();
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& l = spec.layers[li];
    const Tensor<T>& x = tape.activations[li];
    const Tensor<T>& y = tape.activations[li + 1];
    const bool need_dx = want_input_grad || li > 0;
    Tensor<T> dx;
    switch (l.kind) {
      case LayerKind::conv2d:
        --conv_idx;
        conv_backward(l, params.data() + offsets[li], x, tape.patches[conv_idx], dy,
                      g.params.data() + offsets[li], need_dx ? &dx : nullptr);
        break;
      case LayerKind::maxpool2d: {
        --pool_idx;
        if (!need_dx) break;
        dx = Tensor<T>(x.shape);
        const auto& route = tape.pool_routes[pool_idx];
        for (std::size_t i = 0; i < route.size(); ++i) dx.values[route[i]] += dy.values[i];
        break;
      }
      case LayerKind::dense: {
        const std::size_t n = x.shape[0];
        ConstMapRM<T> in(x.data(), n, l.in);
        ConstMapRM<T> dout(dy.data(), n, l.out);
        MapRM<T> dw(g.params.data() + offsets[li], l.in, l.out);
        dw.noalias() = in.transpose() * dout;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(
            g.params.data() + offsets[li] + l.weight_count(), l.out);
        db = dout.colwise().sum();
        if (need_dx) {
          ConstMapRM<T> weights(params.data() + offsets[li], l.in, l.out);
          dx = Tensor<T>(x.shape);
          MapRM<T>(dx.data(), n, l.in).noalias() = dout * weights.transpose();
        }
        break;
      }
      case LayerKind::relu:
        if (!need_dx) break;
        dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (!(y.values[i] > T(0))) dx.values[i] = T(0);
        break;
      case LayerKind::softmax: {
        if (!need_dx) break;
        const std::size_t rows = y.shape[0], cols = y.shape[1];
        dx = Tensor<T>(y.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * cols;
          const T* gr = dy.data() + r * cols;
          T dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
          for (std::size_t c = 0; c < cols; ++c) dx.values[r * cols + c] = yr[c] * (gr[c] - dot);
        }
        break;
      }
      case LayerKind::flatten:
        if (!need_dx) break;
        dx = Tensor<T>(x.shape, dy.values);
        break;
    }
    if (!need_dx) break;
    dy = std::move(dx);
  }
  if (want_input_grad) g.input = std::move(dy);
  return g;
}

template <typename T>
Gradients<T> backward(const NetworkSpec& spec, std::span<const T> params, const Tensor<T>& input,
                      const Tensor<T>& output_grad, bool want_input_grad) {
  auto tape = forward_tape(spec, params, input);
  return backward(spec, params, tape, output_grad, want_input_grad);
}

template <typename T>
std::vector<LayerParams<T>> unflatten(const NetworkSpec& spec, std::span<const T> params) {
  require_same_length(params.size(), param_count(spec), "unflatten");
  std::vector<LayerParams<T>> out;
  std::size_t off = 0;
  for (const auto& l : spec.layers) {
    LayerParams<T> lp;
    lp.weights.assign(params.begin() + off, params.begin() + off + l.weight_count());
    off += l.weight_count();
    lp.biases.assign(params.begin() + off, params.begin() + off + l.bias_count());
    off += l.bias_count();
    out.push_back(std::move(lp));
  }
  return out;
}

template <typename T>
BasicParamVector<T> flatten(const NetworkSpec& spec, const std::vector<LayerParams<T>>& layers) {
  if (layers.size() != spec.layers.size()) throw ShapeError("flatten: layer count mismatch");
  std::vector<T> v;
  v.reserve(param_count(spec));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require_same_length(layers[i].weights.size(), spec.layers[i].weight_count(), "flatten: weights");
    require_same_length(layers[i].biases.size(), spec.layers[i].bias_count(), "flatten: biases");
    v.insert(v.end(), layers[i].weights.begin(), layers[i].weights.end());
    v.insert(v.end(), layers[i].biases.begin(), layers[i].biases.end());
  }
  return BasicParamVector<T>(std::move(v));
}

#define PEFLL_INSTANTIATE(T)                                                                      \
  template BasicParamVector<T> init_params<T>(const NetworkSpec&, std::mt19937_64&);              \
  template Tape<T> forward_tape<T>(const NetworkSpec&, std::span<const T>, Tensor<T>);            \
  template Tensor<T> forward<T>(const NetworkSpec&, std::span<const T>, const Tensor<T>&);        \
  template Gradients<T> backward<T>(const NetworkSpec&, std::span<const T>, const Tape<T>&,       \
                                    const Tensor<T>&, bool);                                      \
  template Gradients<T> backward<T>(const NetworkSpec&, std::span<const T>, const Tensor<T>&,     \
                                    const Tensor<T>&, bool);                                      \
  template std::vector<LayerParams<T>> unflatten<T>(const NetworkSpec&, std::span<const T>);     \
  template BasicParamVector<T> flatten<T>(const NetworkSpec&, const std::vector<LayerParams<T>>&);

PEFLL_INSTANTIATE(float)
PEFLL_INSTANTIATE(double)
#undef PEFLL_INSTANTIATE

}  // namespace pefll::nn
