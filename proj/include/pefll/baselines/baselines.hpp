#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "pefll/protocol/protocol.hpp"

namespace pefll::baselines {

/// The single shared model trained by FedAvg.
template <typename T>
struct BasicGlobalModelState {
  nn::BasicParamVector<T> theta;
  std::uint64_t round_index = 0;

  friend bool operator==(const BasicGlobalModelState&, const BasicGlobalModelState&) = default;
};
using GlobalModelState = BasicGlobalModelState<float>;

template <typename T>
BasicGlobalModelState<T> init_global(const nn::NetworkSpec& client, std::mt19937_64& rng);

/// Parameters a client returns after k local steps from theta (FedAvg upload).
template <typename T>
nn::BasicParamVector<T> fedavg_client_update(const protocol::Architecture& arch,
                                             const protocol::BasicClient<T>& client,
                                             const nn::BasicParamVector<T>& theta,
                                             const protocol::RoundConfig& cfg, std::uint64_t round);

/// Equal-weight average of client parameters, accumulated in list order.
template <typename T>
nn::BasicParamVector<T> average_models(std::span<const nn::BasicParamVector<T>> models);

/// One FedAvg round: c clients chosen uniformly, k local steps each from the
/// broadcast model, equal averaging of the returned parameters.
template <typename T>
BasicGlobalModelState<T> fedavg_round(const protocol::Architecture& arch,
                                      const BasicGlobalModelState<T>& state,
                                      std::span<const protocol::BasicClient<T>* const> available,
                                      const protocol::RoundConfig& cfg, std::mt19937_64& rng,
                                      protocol::MessageLog* log = nullptr);

struct LocalConfig {
  std::size_t epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch = 32;
  double lambda_theta = 0.0;
};

/// SGD on one client's data only, starting from `init`. An epoch is
/// floor(m / batch) minibatches (at least one).
template <typename T>
nn::BasicParamVector<T> local_train(const nn::NetworkSpec& client, const nn::BasicParamVector<T>& init,
                                    const data::BasicExamples<T>& data, const LocalConfig& cfg,
                                    std::mt19937_64& rng);

}  // namespace pefll::baselines
