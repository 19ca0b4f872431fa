#include "pefll/models/models.hpp"

#include <algorithm>
#include <vector>

namespace pefll::models {

using nn::LayerSpec;
using nn::NetworkSpec;
using nn::Shape;

std::string to_string(EmbeddingKind k) {
  return k == EmbeddingKind::linear_onehot ? "linear-onehot" : "lenet-conv";
}
std::string to_string(Arch a) { return a == Arch::lenet ? "lenet" : "compact"; }
std::string to_string(HyperSize s) {
  switch (s) {
    case HyperSize::small: return "S";
    case HyperSize::medium: return "M";
    case HyperSize::large: return "L";
  }
  return "?";
}

EmbeddingKind parse_embedding_kind(const std::string& s) {
  if (s == "linear-onehot") return EmbeddingKind::linear_onehot;
  if (s == "lenet-conv") return EmbeddingKind::lenet_conv;
  throw std::invalid_argument("unknown embedding kind '" + s + "' (expected linear-onehot|lenet-conv)");
}
Arch parse_arch(const std::string& s) {
  if (s == "lenet") return Arch::lenet;
  if (s == "compact") return Arch::compact;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected lenet|compact)");
}
HyperSize parse_hyper_size(const std::string& s) {
  if (s == "S") return HyperSize::small;
  if (s == "M") return HyperSize::medium;
  if (s == "L") return HyperSize::large;
  throw std::invalid_argument("unknown hypernetwork size '" + s + "' (expected S|M|L)");
}

std::size_t HyperConfig::hidden_layers_for(HyperSize s) {
  switch (s) {
    case HyperSize::small: return 1;
    case HyperSize::medium: return 3;
    case HyperSize::large: return 5;
  }
  return 3;
}

std::size_t recommended_descriptor_dim(std::size_t n_clients) {
  return std::max<std::size_t>(1, n_clients / 4);
}

namespace {

// Shared trunk of the client and embedding networks, ending in an 84-wide
// (lenet) or 16-wide (compact) hidden representation followed by `head`.
NetworkSpec conv_trunk(std::size_t in_channels, std::size_t head, Arch arch) {
  NetworkSpec s;
  s.input_shape = Shape{in_channels, kImageSide, kImageSide};
  if (arch == Arch::lenet) {
    s.layers = {LayerSpec::conv2d(in_channels, 16, 5), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                LayerSpec::conv2d(16, 32, 5),          LayerSpec::relu(), LayerSpec::maxpool2d(2),
                LayerSpec::flatten(),
                LayerSpec::dense(800, 120),            LayerSpec::relu(),
                LayerSpec::dense(120, 84),             LayerSpec::relu(),
                LayerSpec::dense(84, head)};
  } else {
    s.layers = {LayerSpec::conv2d(in_channels, 4, 5), LayerSpec::relu(), LayerSpec::maxpool2d(4),
                LayerSpec::flatten(),
                LayerSpec::dense(196, 16),            LayerSpec::relu(),
                LayerSpec::dense(16, head)};
  }
  s.output_dim = head;
  return s;
}

}  // namespace

NetworkSpec build_client_model(std::size_t num_classes, Arch arch) {
  if (num_classes < 2) throw std::invalid_argument("client model needs at least 2 classes");
  NetworkSpec s = conv_trunk(kImageChannels, num_classes, arch);
  s.layers.push_back(LayerSpec::softmax());
  nn::infer_shapes(s);
  return s;
}

NetworkSpec build_embedding_net(EmbeddingKind kind, std::size_t num_classes,
                                std::size_t descriptor_dim, Arch arch) {
  if (descriptor_dim < 1) throw std::invalid_argument("descriptor dimension must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("embedding network needs at least 2 classes");
  NetworkSpec s;
  if (kind == EmbeddingKind::linear_onehot) {
    s.input_shape = Shape{num_classes};
    s.layers = {LayerSpec::dense(num_classes, descriptor_dim)};
    s.output_dim = descriptor_dim;
  } else {
    s = conv_trunk(kImageChannels + num_classes, descriptor_dim, arch);
  }
  nn::infer_shapes(s);
  return s;
}

NetworkSpec build_hypernetwork(const HyperConfig& cfg) {
  if (cfg.descriptor_dim == 0 || cfg.hidden_width == 0 || cfg.output_dim == 0)
    throw std::invalid_argument("hypernetwork sizes must be positive");
  NetworkSpec s;
  s.input_shape = Shape{cfg.descriptor_dim};
  s.layers.push_back(LayerSpec::dense(cfg.descriptor_dim, cfg.hidden_width));
  s.layers.push_back(LayerSpec::relu());
  for (std::size_t i = 0; i < cfg.hidden_layers; ++i) {
    s.layers.push_back(LayerSpec::dense(cfg.hidden_width, cfg.hidden_width));
    s.layers.push_back(LayerSpec::relu());
  }
  s.layers.push_back(LayerSpec::dense(cfg.hidden_width, cfg.output_dim));
  s.output_dim = cfg.output_dim;
  nn::infer_shapes(s);
  return s;
}

template <typename T>
nn::BasicParamVector<T> init_hypernetwork(const NetworkSpec& hyper, const NetworkSpec& client,
                                          std::mt19937_64& rng) {
  auto eta = nn::init_params<T>(hyper, rng);
  const auto theta0 = nn::init_params<T>(client, rng);
  const auto& last = hyper.layers.back();
  if (last.kind != nn::LayerKind::dense || last.out != theta0.size())
    throw nn::ShapeError("hypernetwork output does not match the client model size");
  const std::size_t off = nn::param_offsets(hyper).back();
  for (std::size_t i = 0; i < last.weight_count(); ++i) eta[off + i] *= T(0.01);
  std::copy(theta0.begin(), theta0.end(), eta.begin() + off + last.weight_count());
  return eta;
}

template <typename T>
nn::Tensor<T> embedding_inputs(const data::BasicExamples<T>& batch, EmbeddingKind kind,
                               std::size_t num_classes, bool labeled) {
  if (batch.empty()) throw std::invalid_argument("embedding input batch is empty");
  const std::size_t n = batch.size();
  if (kind == EmbeddingKind::linear_onehot) {
    if (!labeled)
      throw UnsupportedError("linear-onehot embedding consumes labels only; unlabeled data unsupported");
    nn::Tensor<T> x(Shape{n, num_classes});
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.labels[i] >= num_classes) throw std::out_of_range("label outside class range");
      x.values[i * num_classes + batch.labels[i]] = T(1);
    }
    return x;
  }
  const auto& img = batch.images.shape;
  if (img.rank() != 4) throw nn::ShapeError("images must be [N,C,H,W], got " + img.to_string());
  const std::size_t c = img[1], hw = img[2] * img[3];
  nn::Tensor<T> x(Shape{n, c + num_classes, img[2], img[3]});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = batch.images.data() + i * c * hw;
    T* dst = x.data() + i * (c + num_classes) * hw;
    std::copy(src, src + c * hw, dst);
    if (labeled) {
      if (batch.labels[i] >= num_classes) throw std::out_of_range("label outside class range");
      std::fill_n(dst + (c + batch.labels[i]) * hw, hw, T(1));
    }
  }
  return x;
}

template <typename T>
BasicDescriptor<T> mean_embedding(const nn::Tensor<T>& embeddings) {
  const std::size_t n = embeddings.shape[0], l = embeddings.shape[1];
  BasicDescriptor<T> v(l);
  std::vector<T> column(n);
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = embeddings.values[i * l + j];
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (T x : column) sum += double(x);
    v[j] = static_cast<T>(sum / double(n));
  }
  return v;
}

template <typename T>
BasicDescriptor<T> compute_descriptor(const data::BasicExamples<T>& batch, const NetworkSpec& embed,
                                      const nn::BasicParamVector<T>& eta_v, EmbeddingKind kind,
                                      std::size_t num_classes) {
  const auto x = embedding_inputs(batch, kind, num_classes, true);
  return mean_embedding(nn::forward<T>(embed, eta_v.span(), x));
}

template <typename T>
BasicDescriptor<T> compute_descriptor_unlabeled(const data::BasicExamples<T>& batch,
                                                const NetworkSpec& embed,
                                                const nn::BasicParamVector<T>& eta_v,
                                                EmbeddingKind kind, std::size_t num_classes) {
  const auto x = embedding_inputs(batch, kind, num_classes, false);
  return mean_embedding(nn::forward<T>(embed, eta_v.span(), x));
}

template <typename T>
nn::BasicParamVector<T> generate_personal_model(const BasicDescriptor<T>& v,
                                                const nn::BasicParamVector<T>& eta_h,
                                                const NetworkSpec& hyper) {
  if (hyper.input_shape != Shape{v.size()})
    throw nn::ShapeError("descriptor length " + std::to_string(v.size()) +
                         " does not match hypernetwork input " + hyper.input_shape.to_string());
  nn::Tensor<T> x(Shape{1, v.size()}, std::vector<T>(v.begin(), v.end()));
  auto y = nn::forward<T>(hyper, eta_h.span(), x);
  return nn::BasicParamVector<T>(std::move(y.values));
}

#define PEFLL_INSTANTIATE(T)                                                                     \
  template nn::BasicParamVector<T> init_hypernetwork<T>(const NetworkSpec&, const NetworkSpec&,  \
                                                        std::mt19937_64&);                       \
  template nn::Tensor<T> embedding_inputs<T>(const data::BasicExamples<T>&, EmbeddingKind,       \
                                             std::size_t, bool);                                 \
  template BasicDescriptor<T> mean_embedding<T>(const nn::Tensor<T>&);                           \
  template BasicDescriptor<T> compute_descriptor<T>(const data::BasicExamples<T>&,               \
                                                    const NetworkSpec&,                          \
                                                    const nn::BasicParamVector<T>&,              \
                                                    EmbeddingKind, std::size_t);                 \
  template BasicDescriptor<T> compute_descriptor_unlabeled<T>(                                   \
      const data::BasicExamples<T>&, const NetworkSpec&, const nn::BasicParamVector<T>&,         \
      EmbeddingKind, std::size_t);                                                               \
  template nn::BasicParamVector<T> generate_personal_model<T>(                                   \
      const BasicDescriptor<T>&, const nn::BasicParamVector<T>&, const NetworkSpec&);

PEFLL_INSTANTIATE(float)
PEFLL_INSTANTIATE(double)
#undef PEFLL_INSTANTIATE

}  // namespace pefll::models
