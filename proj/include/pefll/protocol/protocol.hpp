#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pefll/data/examples.hpp"
#include "pefll/models/models.hpp"
#include "pefll/nn/flat.hpp"
#include "pefll/nn/network.hpp"

namespace pefll::protocol {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Logical message kinds; the numeric values are the wire `kind` byte.
enum class MessageKind : std::uint8_t {
  embed_weights = 1,
  descriptor = 2,
  personal_model = 3,
  model_delta = 4,
  descriptor_grad = 5,
  embed_delta = 6,
  round_control = 7,
};

std::string to_string(MessageKind k);

enum class Direction : std::uint8_t { down, up };  // down: server to client

struct MessageRecord {
  MessageKind kind;
  Direction direction;
  std::uint32_t client_id;
  std::uint64_t round;
  std::size_t elements;  // tensor payload length in scalars
};
using MessageLog = std::vector<MessageRecord>;

/// Hyperparameters of one training run. Defaults follow the recommended
/// settings: k=50 local steps, descriptor batch 32, lambda_h=lambda_v=1e-3,
/// lambda_theta=0, client momentum 0.9.
struct RoundConfig {
  double lambda_h = 1e-3;
  double lambda_v = 1e-3;
  double lambda_theta = 0.0;
  double lr = 0.01;                 // beta, client SGD step size
  std::size_t local_steps = 50;     // k
  std::size_t clients_per_round = 1;
  std::size_t descriptor_batch = 32;  // b
  std::size_t local_batch = 32;
  double client_momentum = 0.9;
  double server_momentum = 0.0;     // 0 disables momentum on eta updates

  void validate() const;
};

/// The three network specs plus the facts both roles need to agree on.
struct Architecture {
  nn::NetworkSpec client;
  nn::NetworkSpec embed;
  nn::NetworkSpec hyper;
  models::EmbeddingKind kind = models::EmbeddingKind::lenet_conv;
  std::size_t num_classes = 0;

  static Architecture make(std::size_t num_classes, models::EmbeddingKind kind,
                           std::size_t descriptor_dim, models::HyperSize size,
                           models::Arch arch = models::Arch::lenet);

  std::size_t descriptor_dim() const { return embed.output_dim; }
  std::size_t client_params() const { return nn::param_count(client); }
  void validate() const;
};

/// Everything the server keeps between rounds. Holds no per-client record;
/// any client can be served at any round from this state alone.
template <typename T>
struct BasicServerState {
  nn::BasicParamVector<T> eta_h;
  nn::BasicParamVector<T> eta_v;
  nn::BasicGradVector<T> velocity_h;  // empty unless server momentum is enabled
  nn::BasicGradVector<T> velocity_v;
  std::uint64_t round_index = 0;

  /// Names of all persistent fields, for introspection in tests and tools.
  static std::vector<std::string> field_names() {
    return {"eta_h", "eta_v", "velocity_h", "velocity_v", "round_index"};
  }

  template <typename U>
  BasicServerState<U> cast() const {
    return {eta_h.template cast<U>(), eta_v.template cast<U>(), velocity_h.template cast<U>(),
            velocity_v.template cast<U>(), round_index};
  }

  friend bool operator==(const BasicServerState&, const BasicServerState&) = default;
};
using ServerState = BasicServerState<float>;

template <typename T>
BasicServerState<T> init_server(const Architecture& arch, std::mt19937_64& rng);

/// Per-round descriptor state on the client: the sampled batch and the
/// descriptor computed from it. Needed again for the embedding backward pass.
template <typename T>
struct BasicDescriptorContext {
  nn::Tensor<T> embed_input;
  models::BasicDescriptor<T> descriptor;
};

template <typename T>
struct BasicClientUpdate {
  std::uint32_t client_id = 0;
  nn::BasicGradVector<T> delta_theta;  // theta_initial - theta_after_k_steps
  models::BasicDescriptor<T> descriptor;
};

template <typename T>
struct HyperGrads {
  nn::BasicGradVector<T> eta_h;
  nn::BasicGradVector<T> descriptor;
};

template <typename T>
struct ClientContribution {
  std::uint32_t client_id = 0;
  nn::BasicGradVector<T> eta_h;
  nn::BasicGradVector<T> eta_v;
};

/// Independent random stream for client `seed` at `round`; `stream` separates
/// descriptor sampling (0) from local SGD (1).
std::mt19937_64 client_stream(std::uint64_t seed, std::uint64_t round, std::uint64_t stream);

/// min(b, m) distinct row indices out of m, ascending.
std::vector<std::uint32_t> sample_rows(std::size_t m, std::size_t b, std::mt19937_64& rng);

/// Client-side descriptor: forward pass of the embedding network on `batch`.
template <typename T>
BasicDescriptorContext<T> describe_batch(const Architecture& arch,
                                         const nn::BasicParamVector<T>& eta_v,
                                         const data::BasicExamples<T>& batch, bool labeled = true);

/// Client objective f(theta) = CE(theta; batch) + lambda_theta ||theta||^2 and
/// its gradient.
template <typename T>
nn::BasicGradVector<T> client_objective_grad(const nn::NetworkSpec& client,
                                             const nn::BasicParamVector<T>& theta,
                                             const data::BasicExamples<T>& batch,
                                             double lambda_theta, double* objective = nullptr);

/// k steps of minibatch momentum SGD on the client objective, starting at
/// theta0. Minibatches walk a fresh permutation of the data per local epoch.
template <typename T>
BasicClientUpdate<T> client_local_steps(const nn::NetworkSpec& client,
                                        const nn::BasicParamVector<T>& theta0,
                                        const data::BasicExamples<T>& data, const RoundConfig& cfg,
                                        std::mt19937_64& rng);

/// Vector-Jacobian products of the hypernetwork at v with upstream delta_theta.
template <typename T>
HyperGrads<T> server_hyper_backprop(const Architecture& arch, const BasicServerState<T>& server,
                                    const nn::BasicGradVector<T>& delta_theta,
                                    const models::BasicDescriptor<T>& v);

/// VJP through the batch-mean embedding with upstream delta_v.
template <typename T>
nn::BasicGradVector<T> client_embedding_backprop(const Architecture& arch,
                                                 const nn::BasicParamVector<T>& eta_v,
                                                 const BasicDescriptorContext<T>& ctx,
                                                 const nn::BasicGradVector<T>& delta_v);

/// eta <- eta - (1/c) sum_i delta_eta_i - beta*k*2*lambda*eta, clients summed
/// in ascending id order.
template <typename T>
BasicServerState<T> server_apply_updates(BasicServerState<T> server,
                                         std::vector<ClientContribution<T>> updates,
                                         const RoundConfig& cfg);

/// A participant: its private training data and its own randomness.
template <typename T>
class BasicClient {
 public:
  BasicClient(std::uint32_t id, data::BasicExamples<T> train, std::uint64_t seed)
      : id_(id), train_(std::move(train)), seed_(seed) {}

  std::uint32_t id() const noexcept { return id_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const data::BasicExamples<T>& train_data() const noexcept { return train_; }

  BasicDescriptorContext<T> describe(const Architecture& arch, const nn::BasicParamVector<T>& eta_v,
                                     std::uint64_t round, std::size_t b) const;
  BasicClientUpdate<T> local_steps(const Architecture& arch, const nn::BasicParamVector<T>& theta0,
                                   const RoundConfig& cfg, std::uint64_t round) const;
  nn::BasicGradVector<T> embed_backprop(const Architecture& arch,
                                        const nn::BasicParamVector<T>& eta_v,
                                        const BasicDescriptorContext<T>& ctx,
                                        const nn::BasicGradVector<T>& delta_v) const;

 private:
  std::uint32_t id_;
  data::BasicExamples<T> train_;
  std::uint64_t seed_;
};
using Client = BasicClient<float>;

/// Personalized model for a client holding `data`: descriptor from a sample
/// of min(b, |data|) examples, then one hypernetwork forward pass.
template <typename T>
nn::BasicParamVector<T> predict(const Architecture& arch, const BasicServerState<T>& server,
                                const data::BasicExamples<T>& data, std::size_t b,
                                std::mt19937_64& rng, MessageLog* log = nullptr,
                                std::uint32_t client_id = 0, bool labeled = true);

/// Uniform choice of c distinct clients out of `available`, ascending.
std::vector<std::size_t> select_clients(std::size_t available, std::size_t c,
                                        std::mt19937_64& rng);

/// One training round over the clients in `available`. Returns the new
/// state; the input state is untouched.
template <typename T>
BasicServerState<T> train_round(const Architecture& arch, const BasicServerState<T>& server,
                                std::span<const BasicClient<T>* const> available,
                                const RoundConfig& cfg, std::mt19937_64& rng,
                                MessageLog* log = nullptr);

/// Exact gradient of lambda_h||eta_h||^2 + lambda_v||eta_v||^2 +
/// (1/n) sum_i f_i(h(v(S_i))) using full client data for descriptors and
/// losses.
template <typename T>
struct ObjectiveGradient {
  double objective = 0.0;
  nn::BasicGradVector<T> eta_h;
  nn::BasicGradVector<T> eta_v;
  double squared_norm() const { return eta_h.squared_norm() + eta_v.squared_norm(); }
};

template <typename T>
ObjectiveGradient<T> objective_gradient(const Architecture& arch, const BasicServerState<T>& server,
                                        std::span<const BasicClient<T>* const> clients,
                                        const RoundConfig& cfg);

}  // namespace pefll::protocol
