#pragma once

// Small fixtures shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pefll/data/examples.hpp"
#include "pefll/models/models.hpp"
#include "pefll/nn/network.hpp"
#include "pefll/nn/train.hpp"
#include "pefll/protocol/protocol.hpp"

namespace pefll::testing {

/// A few-hundred-parameter stand-in for the full architecture on 6x6 images
/// with 3 classes and a 2-dimensional descriptor.
inline protocol::Architecture tiny_arch(models::EmbeddingKind kind = models::EmbeddingKind::lenet_conv) {
  using nn::LayerSpec;
  protocol::Architecture a;
  a.num_classes = 3;
  a.kind = kind;
  a.client.input_shape = nn::Shape{3, 6, 6};
  a.client.layers = {LayerSpec::conv2d(3, 2, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                     LayerSpec::flatten(), LayerSpec::dense(8, 3), LayerSpec::softmax()};
  a.client.output_dim = 3;
  if (kind == models::EmbeddingKind::lenet_conv) {
    a.embed.input_shape = nn::Shape{6, 6, 6};
    a.embed.layers = {LayerSpec::conv2d(6, 2, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                      LayerSpec::flatten(), LayerSpec::dense(8, 2)};
  } else {
    a.embed.input_shape = nn::Shape{3};
    a.embed.layers = {LayerSpec::dense(3, 2)};
  }
  a.embed.output_dim = 2;
  const auto d = nn::param_count(a.client);
  a.hyper.input_shape = nn::Shape{2};
  a.hyper.layers = {LayerSpec::dense(2, 6), LayerSpec::relu(), LayerSpec::dense(6, 6),
                    LayerSpec::relu(), LayerSpec::dense(6, d)};
  a.hyper.output_dim = d;
  a.validate();
  return a;
}

template <typename T>
data::BasicExamples<T> random_examples(std::size_t n, std::size_t c, std::size_t side,
                                       std::size_t classes, std::mt19937_64& rng) {
  data::BasicExamples<T> ex{nn::Tensor<T>(nn::Shape{n, c, side, side}), {}};
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : ex.images.values) v = T(g(rng));
  std::uniform_int_distribution<std::uint32_t> lab(0, std::uint32_t(classes - 1));
  for (std::size_t i = 0; i < n; ++i) ex.labels.push_back(lab(rng));
  return ex;
}

template <typename T>
nn::Tensor<T> random_tensor(nn::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  nn::Tensor<T> t(std::move(shape));
  std::normal_distribution<double> g(0.0, scale);
  for (auto& v : t.values) v = T(g(rng));
  return t;
}

inline nn::NetworkSpec small_convnet() {
  nn::NetworkSpec s;
  s.input_shape = nn::Shape{2, 7, 7};
  s.layers = {nn::LayerSpec::conv2d(2, 3, 3), nn::LayerSpec::relu(), nn::LayerSpec::maxpool2d(2),
              nn::LayerSpec::flatten(),       nn::LayerSpec::dense(12, 5), nn::LayerSpec::relu(),
              nn::LayerSpec::dense(5, 4),     nn::LayerSpec::softmax()};
  s.output_dim = 4;
  return s;
}

inline nn::NetworkSpec small_mlp() {
  nn::NetworkSpec s;
  s.input_shape = nn::Shape{6};
  s.layers = {nn::LayerSpec::dense(6, 8), nn::LayerSpec::relu(), nn::LayerSpec::dense(8, 8),
              nn::LayerSpec::relu(), nn::LayerSpec::dense(8, 3)};
  s.output_dim = 3;
  return s;
}

// <w, out> as a scalar loss gives output_grad = w.
inline double weighted_sum(const nn::Tensor<double>& out, const nn::Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.values[i] * w.values[i];
  return s;
}

using ClientD = protocol::BasicClient<double>;
using StateD = protocol::BasicServerState<double>;

// Straight-line evaluation of the regularized objective from forward passes
// only; the oracle for every gradient the protocol assembles.
inline double objective(const protocol::Architecture& arch, std::span<const double> eta_h,
                        std::span<const double> eta_v, const std::vector<ClientD>& clients,
                        const protocol::RoundConfig& cfg) {
  double total = 0.0;
  for (const auto& c : clients) {
    const auto& data = c.train_data();
    const auto x = models::embedding_inputs(data, arch.kind, arch.num_classes);
    const auto emb = nn::forward<double>(arch.embed, eta_v, x);
    const std::size_t n = emb.shape[0], l = emb.shape[1];
    nn::Tensor<double> v(nn::Shape{1, l});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < l; ++j) v.values[j] += emb.values[i * l + j] / double(n);
    const auto theta = nn::forward<double>(arch.hyper, eta_h, v);
    const auto logits = nn::forward<double>(arch.client.without_output_softmax(), theta.span(), data.images);
    double ce = 0.0;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const double* z = logits.data() + r * arch.num_classes;
      double mx = *std::max_element(z, z + arch.num_classes), s = 0.0;
      for (std::size_t k = 0; k < arch.num_classes; ++k) s += std::exp(z[k] - mx);
      ce += std::log(s) + mx - z[data.labels[r]];
    }
    double th2 = 0.0;
    for (double t : theta.values) th2 += t * t;
    total += ce / double(data.size()) + cfg.lambda_theta * th2;
  }
  double h2 = 0.0, v2 = 0.0;
  for (double x : eta_h) h2 += x * x;
  for (double x : eta_v) v2 += x * x;
  return cfg.lambda_h * h2 + cfg.lambda_v * v2 + total / double(clients.size());
}

inline std::vector<double> fd_objective_grad(const protocol::Architecture& arch, const StateD& s,
                                             const std::vector<ClientD>& clients,
                                             const protocol::RoundConfig& cfg) {
  std::vector<double> eta(s.eta_h.begin(), s.eta_h.end());
  eta.insert(eta.end(), s.eta_v.begin(), s.eta_v.end());
  const std::size_t nh = s.eta_h.size();
  auto g = nn::finite_diff_grad(eta, [&](std::span<const double> e) {
    return objective(arch, e.subspan(0, nh), e.subspan(nh), clients, cfg);
  });
  return {g.begin(), g.end()};
}

inline protocol::RoundConfig oracle_config(std::size_t clients) {
  protocol::RoundConfig cfg;
  cfg.lambda_h = cfg.lambda_v = cfg.lambda_theta = 0.0;
  cfg.lr = 0.05;
  cfg.local_steps = 1;
  cfg.client_momentum = 0.0;
  cfg.clients_per_round = clients;
  cfg.descriptor_batch = 1000;
  cfg.local_batch = 1000;
  return cfg;
}

// Written out independently from the statement of the bound.
inline double reference_bound(double loss, double n, double m, double eh, double ev, const std::vector<double>& th,
                              double ah, double av, double at, double delta) {
  double ts = 0.0;
  for (double t : th) ts += t;
  const double kl_meta = eh / (2 * ah) + ev / (2 * av);
  const double kl_client = ts / (2 * at);
  return loss + std::sqrt((kl_meta + std::log(4 * std::sqrt(n) / delta)) / (2 * n)) +
         std::sqrt((kl_client + std::log(8 * m * n / delta) + 1) / (2 * m * n));
}

}  // namespace pefll::testing
