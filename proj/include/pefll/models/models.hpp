#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "pefll/data/examples.hpp"
#include "pefll/nn/flat.hpp"
#include "pefll/nn/network.hpp"

namespace pefll::models {

class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class EmbeddingKind : std::uint8_t { linear_onehot, lenet_conv };

/// Network sizes. `lenet` is the full architecture; `compact` keeps the same
/// layer kinds at a fraction of the parameters for toy runs and gradient
/// oracles.
enum class Arch : std::uint8_t { lenet, compact };

enum class HyperSize : std::uint8_t { small, medium, large };

std::string to_string(EmbeddingKind k);
std::string to_string(Arch a);
std::string to_string(HyperSize s);
EmbeddingKind parse_embedding_kind(const std::string& s);
Arch parse_arch(const std::string& s);
HyperSize parse_hyper_size(const std::string& s);

struct HyperConfig {
  std::size_t descriptor_dim = 0;  // l
  std::size_t hidden_width = 100;
  std::size_t hidden_layers = 3;   // 100x100 layers between FC1 and the output layer
  std::size_t output_dim = 0;      // D

  static std::size_t hidden_layers_for(HyperSize s);
};

/// Recommended descriptor dimension for a population of n clients (n/4, at
/// least 1).
std::size_t recommended_descriptor_dim(std::size_t n_clients);

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;

/// Client model: Conv(3,5,5,16)+ReLU, MaxPool2, Conv(16,5,5,32)+ReLU, MaxPool2,
/// FC 800x120+ReLU, FC 120x84+ReLU, FC 84xC, softmax.
nn::NetworkSpec build_client_model(std::size_t num_classes, Arch arch = Arch::lenet);

/// Embedding network phi. lenet_conv mirrors the client model on 3+C input
/// channels (one-hot label planes appended) with a final FC 84xl and no
/// output nonlinearity; linear_onehot is a single dense Cxl layer applied to
/// the one-hot label.
nn::NetworkSpec build_embedding_net(EmbeddingKind kind, std::size_t num_classes,
                                    std::size_t descriptor_dim, Arch arch = Arch::lenet);

nn::NetworkSpec build_hypernetwork(const HyperConfig& cfg);

/// Hypernetwork initialization: standard init everywhere, the output layer's
/// weights scaled by 0.01 and its bias set to a freshly initialized client
/// model, so that generated models start near a usable initialization.
template <typename T>
nn::BasicParamVector<T> init_hypernetwork(const nn::NetworkSpec& hyper,
                                          const nn::NetworkSpec& client, std::mt19937_64& rng);

/// Turns a batch of (image, label) examples into embedding-network inputs.
/// With `labeled == false` the label channels are all zero.
template <typename T>
nn::Tensor<T> embedding_inputs(const data::BasicExamples<T>& batch, EmbeddingKind kind,
                               std::size_t num_classes, bool labeled = true);

struct DescriptorTag {};
template <typename T>
using BasicDescriptor = nn::Flat<T, DescriptorTag>;
using Descriptor = BasicDescriptor<float>;

/// Mean of the per-example embeddings. Each coordinate is accumulated in
/// double precision over the values sorted ascending, so the result is
/// bitwise independent of the batch order.
template <typename T>
BasicDescriptor<T> mean_embedding(const nn::Tensor<T>& embeddings);

template <typename T>
BasicDescriptor<T> compute_descriptor(const data::BasicExamples<T>& batch,
                                      const nn::NetworkSpec& embed,
                                      const nn::BasicParamVector<T>& eta_v, EmbeddingKind kind,
                                      std::size_t num_classes);

/// Descriptor from images only; label channels are zero. Only lenet_conv
/// embeddings can consume unlabeled data.
template <typename T>
BasicDescriptor<T> compute_descriptor_unlabeled(const data::BasicExamples<T>& batch,
                                                const nn::NetworkSpec& embed,
                                                const nn::BasicParamVector<T>& eta_v,
                                                EmbeddingKind kind, std::size_t num_classes);

/// theta = h(v; eta_h).
template <typename T>
nn::BasicParamVector<T> generate_personal_model(const BasicDescriptor<T>& v,
                                                const nn::BasicParamVector<T>& eta_h,
                                                const nn::NetworkSpec& hyper);

}  // namespace pefll::models
