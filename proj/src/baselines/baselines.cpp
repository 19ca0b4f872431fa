#include "pefll/baselines/baselines.hpp"

#include <algorithm>

namespace pefll::baselines {

using protocol::Direction;
using protocol::MessageKind;
using protocol::ProtocolError;

template <typename T>
BasicGlobalModelState<T> init_global(const nn::NetworkSpec& client, std::mt19937_64& rng) {
  return {nn::init_params<T>(client, rng), 0};
}

template <typename T>
nn::BasicParamVector<T> fedavg_client_update(const protocol::Architecture& arch,
                                             const protocol::BasicClient<T>& client,
                                             const nn::BasicParamVector<T>& theta,
                                             const protocol::RoundConfig& cfg, std::uint64_t round) {
  const auto u = client.local_steps(arch, theta, cfg, round);
  nn::BasicParamVector<T> out(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) out[i] = theta[i] - u.delta_theta[i];
  return out;
}

template <typename T>
nn::BasicParamVector<T> average_models(std::span<const nn::BasicParamVector<T>> models) {
  if (models.empty()) throw ProtocolError("no client models to average");
  const std::size_t d = models.front().size();
  std::vector<double> acc(d, 0.0);
  for (const auto& m : models) {
    nn::require_same_length(m.size(), d, "fedavg: client model");
    for (std::size_t i = 0; i < d; ++i) acc[i] += double(m[i]);
  }
  nn::BasicParamVector<T> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = T(acc[i] / double(models.size()));
  return out;
}

template <typename T>
BasicGlobalModelState<T> fedavg_round(const protocol::Architecture& arch,
                                      const BasicGlobalModelState<T>& state,
                                      std::span<const protocol::BasicClient<T>* const> available,
                                      const protocol::RoundConfig& cfg, std::mt19937_64& rng,
                                      protocol::MessageLog* log) {
  cfg.validate();
  nn::require_same_length(state.theta.size(), arch.client_params(), "fedavg: global model");
  const auto chosen = protocol::select_clients(available.size(), cfg.clients_per_round, rng);
  std::vector<const protocol::BasicClient<T>*> clients;
  for (auto i : chosen) clients.push_back(available[i]);
  std::sort(clients.begin(), clients.end(), [](auto a, auto b) { return a->id() < b->id(); });

  std::vector<nn::BasicParamVector<T>> returned;
  for (const auto* c : clients) {
    if (log) log->push_back({MessageKind::personal_model, Direction::down, c->id(), state.round_index, state.theta.size()});
    returned.push_back(fedavg_client_update(arch, *c, state.theta, cfg, state.round_index));
    if (log) log->push_back({MessageKind::model_delta, Direction::up, c->id(), state.round_index, returned.back().size()});
  }
  return {average_models<T>(returned), state.round_index + 1};
}

template <typename T>
nn::BasicParamVector<T> local_train(const nn::NetworkSpec& client, const nn::BasicParamVector<T>& init,
                                    const data::BasicExamples<T>& data, const LocalConfig& cfg,
                                    std::mt19937_64& rng) {
  if (cfg.epochs == 0) return init;
  if (data.empty()) throw ProtocolError("local training needs data");
  protocol::RoundConfig rc;
  rc.lr = cfg.lr;
  rc.client_momentum = cfg.momentum;
  rc.local_batch = cfg.batch;
  rc.lambda_theta = cfg.lambda_theta;
  rc.local_steps = cfg.epochs * std::max<std::size_t>(1, data.size() / std::min(cfg.batch, data.size()));
  const auto u = protocol::client_local_steps(client, init, data, rc, rng);
  nn::BasicParamVector<T> out(init.size());
  for (std::size_t i = 0; i < init.size(); ++i) out[i] = init[i] - u.delta_theta[i];
  return out;
}

#define PEFLL_INSTANTIATE(T)                                                                         \
  template BasicGlobalModelState<T> init_global<T>(const nn::NetworkSpec&, std::mt19937_64&);        \
  template nn::BasicParamVector<T> fedavg_client_update<T>(                                          \
      const protocol::Architecture&, const protocol::BasicClient<T>&, const nn::BasicParamVector<T>&, \
      const protocol::RoundConfig&, std::uint64_t);                                                  \
  template nn::BasicParamVector<T> average_models<T>(std::span<const nn::BasicParamVector<T>>);      \
  template BasicGlobalModelState<T> fedavg_round<T>(                                                 \
      const protocol::Architecture&, const BasicGlobalModelState<T>&,                                \
      std::span<const protocol::BasicClient<T>* const>, const protocol::RoundConfig&,                \
      std::mt19937_64&, protocol::MessageLog*);                                                      \
  template nn::BasicParamVector<T> local_train<T>(const nn::NetworkSpec&, const nn::BasicParamVector<T>&, \
                                                  const data::BasicExamples<T>&, const LocalConfig&,  \
                                                  std::mt19937_64&);

PEFLL_INSTANTIATE(float)
PEFLL_INSTANTIATE(double)
#undef PEFLL_INSTANTIATE

}  // namespace pefll::baselines
