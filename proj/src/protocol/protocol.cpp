#include "pefll/protocol/protocol.hpp"

#include <algorithm>
#include <numeric>

#include "pefll/nn/train.hpp"

namespace pefll::protocol {

std::string to_string(MessageKind k) {
  switch (k) {
    case MessageKind::embed_weights: return "EmbedWeights";
    case MessageKind::descriptor: return "Descriptor";
    case MessageKind::personal_model: return "PersonalModel";
    case MessageKind::model_delta: return "ModelDelta";
    case MessageKind::descriptor_grad: return "DescriptorGrad";
    case MessageKind::embed_delta: return "EmbedDelta";
    case MessageKind::round_control: return "RoundControl";
  }
  return "Unknown";
}

void RoundConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("round config: " + m); };
  if (lambda_h < 0 || lambda_v < 0 || lambda_theta < 0) fail("regularization weights must be >= 0");
  if (!(lr >= 0)) fail("lr must be >= 0");
  if (local_steps < 1) fail("local_steps must be >= 1");
  if (clients_per_round < 1) fail("clients_per_round must be >= 1");
  if (descriptor_batch < 1) fail("descriptor_batch must be >= 1");
  if (local_batch < 1) fail("local_batch must be >= 1");
  if (client_momentum < 0 || client_momentum >= 1) fail("client_momentum must lie in [0,1)");
  if (server_momentum < 0 || server_momentum >= 1) fail("server_momentum must lie in [0,1)");
}

Architecture Architecture::make(std::size_t num_classes, models::EmbeddingKind kind,
                                std::size_t descriptor_dim, models::HyperSize size,
                                models::Arch arch) {
  Architecture a;
  a.client = models::build_client_model(num_classes, arch);
  a.embed = models::build_embedding_net(kind, num_classes, descriptor_dim, arch);
  a.hyper = models::build_hypernetwork({descriptor_dim, 100,
                                        models::HyperConfig::hidden_layers_for(size),
                                        nn::param_count(a.client)});
  a.kind = kind;
  a.num_classes = num_classes;
  return a;
}

void Architecture::validate() const {
  const std::size_t d = nn::param_count(client);
  nn::param_count(embed);
  nn::param_count(hyper);
  if (hyper.output_dim != d)
    throw nn::ShapeError("hypernetwork output " + std::to_string(hyper.output_dim) +
                         " does not match client model size " + std::to_string(d));
  if (hyper.input_shape != nn::Shape{embed.output_dim})
    throw nn::ShapeError("hypernetwork input does not match descriptor dimension");
  if (client.output_dim != num_classes)
    throw nn::ShapeError("client model output does not match the class count");
}

template <typename T>
BasicServerState<T> init_server(const Architecture& arch, std::mt19937_64& rng) {
  arch.validate();
  BasicServerState<T> s;
  s.eta_h = models::init_hypernetwork<T>(arch.hyper, arch.client, rng);
  s.eta_v = nn::init_params<T>(arch.embed, rng);
  return s;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
nn::BasicGradVector<T> as_grad(nn::BasicParamVector<T> p) {
  return nn::BasicGradVector<T>(std::move(p.values()));
}

// Sums client contributions in ascending id order and applies the server step.
template <typename T>
class UpdateAggregator {
 public:
  void add(const ClientContribution<T>& u) {
    if (count_ > 0 && u.client_id <= last_id_)
      throw ProtocolError("client contributions must arrive in ascending id order");
    if (count_ == 0) {
      sum_h_ = u.eta_h;
      sum_v_ = u.eta_v;
    } else {
      nn::require_same_length(sum_h_.size(), u.eta_h.size(), "aggregate eta_h");
      nn::require_same_length(sum_v_.size(), u.eta_v.size(), "aggregate eta_v");
      for (std::size_t i = 0; i < sum_h_.size(); ++i) sum_h_[i] += u.eta_h[i];
      for (std::size_t i = 0; i < sum_v_.size(); ++i) sum_v_[i] += u.eta_v[i];
    }
    last_id_ = u.client_id;
    ++count_;
  }

  BasicServerState<T> apply(BasicServerState<T> s, const RoundConfig& cfg) const {
    if (count_ == 0) throw ProtocolError("no client updates to apply");
    nn::require_same_length(s.eta_h.size(), sum_h_.size(), "apply eta_h");
    nn::require_same_length(s.eta_v.size(), sum_v_.size(), "apply eta_v");
    const T inv_c = T(1) / T(count_);
    const double decay_scale = 2.0 * cfg.lr * double(cfg.local_steps);
    step(s.eta_h, s.velocity_h, sum_h_, inv_c, T(decay_scale * cfg.lambda_h), cfg.server_momentum);
    step(s.eta_v, s.velocity_v, sum_v_, inv_c, T(decay_scale * cfg.lambda_v), cfg.server_momentum);
    return s;
  }

 private:
  static void step(nn::BasicParamVector<T>& eta, nn::BasicGradVector<T>& vel,
                   const nn::BasicGradVector<T>& sum, T inv_c, T decay, double momentum) {
    if (momentum > 0.0) {
      if (vel.size() != eta.size()) vel = nn::BasicGradVector<T>(eta.size());
      const T m = T(momentum);
      for (std::size_t i = 0; i < eta.size(); ++i) {
        vel[i] = m * vel[i] + (sum[i] * inv_c + decay * eta[i]);
        eta[i] -= vel[i];
      }
    } else {
      for (std::size_t i = 0; i < eta.size(); ++i) eta[i] -= sum[i] * inv_c + decay * eta[i];
    }
  }

  nn::BasicGradVector<T> sum_h_, sum_v_;
  std::uint32_t last_id_ = 0;
  std::size_t count_ = 0;
};

}  // namespace

std::mt19937_64 client_stream(std::uint64_t seed, std::uint64_t round, std::uint64_t stream) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(round * 4 + stream + 1)));
}

std::vector<std::uint32_t> sample_rows(std::size_t m, std::size_t b, std::mt19937_64& rng) {
  std::vector<std::uint32_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0u);
  const std::size_t take = std::min(b, m);
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> select_clients(std::size_t available, std::size_t c,
                                        std::mt19937_64& rng) {
  if (c > available)
    throw ProtocolError("insufficient clients: need " + std::to_string(c) + ", have " +
                        std::to_string(available));
  auto rows = sample_rows(available, c, rng);
  return std::vector<std::size_t>(rows.begin(), rows.end());
}

template <typename T>
BasicDescriptorContext<T> describe_batch(const Architecture& arch,
                                         const nn::BasicParamVector<T>& eta_v,
                                         const data::BasicExamples<T>& batch, bool labeled) {
  if (batch.empty()) throw ProtocolError("descriptor batch is empty");
  BasicDescriptorContext<T> ctx;
  ctx.embed_input = models::embedding_inputs(batch, arch.kind, arch.num_classes, labeled);
  ctx.descriptor = models::mean_embedding(nn::forward<T>(arch.embed, eta_v.span(), ctx.embed_input));
  return ctx;
}

template <typename T>
nn::BasicGradVector<T> client_objective_grad(const nn::NetworkSpec& client,
                                             const nn::BasicParamVector<T>& theta,
                                             const data::BasicExamples<T>& batch,
                                             double lambda_theta, double* objective) {
  const auto logits_net = client.without_output_softmax();
  auto tape = nn::forward_tape<T>(logits_net, theta.span(), batch.images);
  auto ce = nn::cross_entropy_loss<T>(tape.output(), batch.labels);
  auto g = nn::backward<T>(logits_net, theta.span(), tape, ce.logit_grad, false).params;
  if (lambda_theta != 0.0) {
    const T two_lambda = T(2.0 * lambda_theta);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += two_lambda * theta[i];
  }
  if (objective) *objective = double(ce.loss) + lambda_theta * theta.squared_norm();
  return g;
}

template <typename T>
BasicClientUpdate<T> client_local_steps(const nn::NetworkSpec& client,
                                        const nn::BasicParamVector<T>& theta0,
                                        const data::BasicExamples<T>& data, const RoundConfig& cfg,
                                        std::mt19937_64& rng) {
  if (data.empty()) throw ProtocolError("client has no training data");
  nn::require_same_length(theta0.size(), nn::param_count(client), "local steps: theta");
  BasicClientUpdate<T> out;
  if (cfg.lr == 0.0) {
    out.delta_theta = nn::BasicGradVector<T>(theta0.size());
    return out;
  }
  auto theta = theta0;
  nn::BasicGradVector<T> velocity(theta.size());
  const std::size_t m = data.size(), bs = std::min(cfg.local_batch, m);
  std::vector<std::uint32_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0u);
  std::size_t pos = m;
  for (std::size_t step = 0; step < cfg.local_steps; ++step) {
    if (pos + bs > m) {
      std::shuffle(perm.begin(), perm.end(), rng);
      pos = 0;
    }
    const auto batch =
        data.subset(std::span<const std::uint32_t>(perm.data() + pos, bs));
    pos += bs;
    const auto g = client_objective_grad(client, theta, batch, cfg.lambda_theta);
    nn::sgd_step_inplace(theta, g, cfg.lr, cfg.client_momentum, velocity);
  }
  out.delta_theta = nn::BasicGradVector<T>(theta0.size());
  for (std::size_t i = 0; i < theta.size(); ++i) out.delta_theta[i] = theta0[i] - theta[i];
  return out;
}

template <typename T>
HyperGrads<T> server_hyper_backprop(const Architecture& arch, const BasicServerState<T>& server,
                                    const nn::BasicGradVector<T>& delta_theta,
                                    const models::BasicDescriptor<T>& v) {
  nn::require_same_length(delta_theta.size(), arch.hyper.output_dim, "hyper backprop: delta_theta");
  nn::require_same_length(v.size(), arch.descriptor_dim(), "hyper backprop: descriptor");
  nn::Tensor<T> x(nn::Shape{1, v.size()}, v.values());
  nn::Tensor<T> up(nn::Shape{1, delta_theta.size()}, delta_theta.values());
  auto g = nn::backward<T>(arch.hyper, server.eta_h.span(), x, up, true);
  return {std::move(g.params), nn::BasicGradVector<T>(std::move(g.input.values))};
}

template <typename T>
nn::BasicGradVector<T> client_embedding_backprop(const Architecture& arch,
                                                 const nn::BasicParamVector<T>& eta_v,
                                                 const BasicDescriptorContext<T>& ctx,
                                                 const nn::BasicGradVector<T>& delta_v) {
  nn::require_same_length(delta_v.size(), ctx.descriptor.size(), "embedding backprop: delta_v");
  if (ctx.embed_input.shape.rank() == 0) throw ProtocolError("no descriptor context to backprop");
  const std::size_t n = ctx.embed_input.shape[0], l = delta_v.size();
  nn::Tensor<T> up(nn::Shape{n, l});
  const T inv_n = T(1) / T(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < l; ++j) up.values[i * l + j] = delta_v[j] * inv_n;
  return nn::backward<T>(arch.embed, eta_v.span(), ctx.embed_input, up, false).params;
}

template <typename T>
BasicServerState<T> server_apply_updates(BasicServerState<T> server,
                                         std::vector<ClientContribution<T>> updates,
                                         const RoundConfig& cfg) {
  if (updates.empty()) throw ProtocolError("server_apply_updates: empty update list");
  std::sort(updates.begin(), updates.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  UpdateAggregator<T> agg;
  for (const auto& u : updates) agg.add(u);
  return agg.apply(std::move(server), cfg);
}

template <typename T>
BasicDescriptorContext<T> BasicClient<T>::describe(const Architecture& arch,
                                                   const nn::BasicParamVector<T>& eta_v,
                                                   std::uint64_t round, std::size_t b) const {
  auto rng = client_stream(seed_, round, 0);
  const auto rows = sample_rows(train_.size(), b, rng);
  return describe_batch(arch, eta_v, train_.subset(rows));
}

template <typename T>
BasicClientUpdate<T> BasicClient<T>::local_steps(const Architecture& arch,
                                                 const nn::BasicParamVector<T>& theta0,
                                                 const RoundConfig& cfg, std::uint64_t round) const {
  auto rng = client_stream(seed_, round, 1);
  auto u = client_local_steps(arch.client, theta0, train_, cfg, rng);
  u.client_id = id_;
  return u;
}

template <typename T>
nn::BasicGradVector<T> BasicClient<T>::embed_backprop(const Architecture& arch,
                                                      const nn::BasicParamVector<T>& eta_v,
                                                      const BasicDescriptorContext<T>& ctx,
                                                      const nn::BasicGradVector<T>& delta_v) const {
  return client_embedding_backprop(arch, eta_v, ctx, delta_v);
}

template <typename T>
nn::BasicParamVector<T> predict(const Architecture& arch, const BasicServerState<T>& server,
                                const data::BasicExamples<T>& data, std::size_t b,
                                std::mt19937_64& rng, MessageLog* log, std::uint32_t client_id,
                                bool labeled) {
  if (data.empty()) throw ProtocolError("predict: client has no data");
  const auto rows = sample_rows(data.size(), b, rng);
  const auto round = server.round_index;
  if (log) log->push_back({MessageKind::embed_weights, Direction::down, client_id, round, server.eta_v.size()});
  const auto ctx = describe_batch(arch, server.eta_v, data.subset(rows), labeled);
  if (log) log->push_back({MessageKind::descriptor, Direction::up, client_id, round, ctx.descriptor.size()});
  auto theta = models::generate_personal_model(ctx.descriptor, server.eta_h, arch.hyper);
  if (log) log->push_back({MessageKind::personal_model, Direction::down, client_id, round, theta.size()});
  return theta;
}

template <typename T>
BasicServerState<T> train_round(const Architecture& arch, const BasicServerState<T>& server,
                                std::span<const BasicClient<T>* const> available,
                                const RoundConfig& cfg, std::mt19937_64& rng, MessageLog* log) {
  cfg.validate();
  const auto chosen = select_clients(available.size(), cfg.clients_per_round, rng);
  std::vector<const BasicClient<T>*> selected;
  for (auto i : chosen) selected.push_back(available[i]);
  std::sort(selected.begin(), selected.end(),
            [](const auto* a, const auto* b) { return a->id() < b->id(); });

  const auto round = server.round_index;
  auto note = [&](MessageKind k, Direction d, std::uint32_t id, std::size_t n) {
    if (log) log->push_back({k, d, id, round, n});
  };
  UpdateAggregator<T> agg;
  for (const auto* client : selected) {
    const auto id = client->id();
    note(MessageKind::embed_weights, Direction::down, id, server.eta_v.size());
    const auto ctx = client->describe(arch, server.eta_v, round, cfg.descriptor_batch);
    note(MessageKind::descriptor, Direction::up, id, ctx.descriptor.size());
    const auto theta = models::generate_personal_model(ctx.descriptor, server.eta_h, arch.hyper);
    note(MessageKind::personal_model, Direction::down, id, theta.size());
    const auto upd = client->local_steps(arch, theta, cfg, round);
    note(MessageKind::model_delta, Direction::up, id, upd.delta_theta.size());
    auto hg = server_hyper_backprop(arch, server, upd.delta_theta, ctx.descriptor);
    note(MessageKind::descriptor_grad, Direction::down, id, hg.descriptor.size());
    auto dv = client->embed_backprop(arch, server.eta_v, ctx, hg.descriptor);
    note(MessageKind::embed_delta, Direction::up, id, dv.size());
    agg.add({id, std::move(hg.eta_h), std::move(dv)});
  }
  auto next = agg.apply(server, cfg);
  next.round_index = round + 1;
  return next;
}

template <typename T>
ObjectiveGradient<T> objective_gradient(const Architecture& arch, const BasicServerState<T>& server,
                                        std::span<const BasicClient<T>* const> clients,
                                        const RoundConfig& cfg) {
  if (clients.empty()) throw ProtocolError("objective_gradient: no clients");
  ObjectiveGradient<T> out{0.0, nn::BasicGradVector<T>(server.eta_h.size()),
                           nn::BasicGradVector<T>(server.eta_v.size())};
  std::vector<const BasicClient<T>*> ordered(clients.begin(), clients.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->id() < b->id(); });
  double client_sum = 0.0;
  for (const auto* c : ordered) {
    const auto ctx = describe_batch(arch, server.eta_v, c->train_data());
    const auto theta = models::generate_personal_model(ctx.descriptor, server.eta_h, arch.hyper);
    double f = 0.0;
    const auto g = client_objective_grad(arch.client, theta, c->train_data(), cfg.lambda_theta, &f);
    client_sum += f;
    const auto hg = server_hyper_backprop(arch, server, g, ctx.descriptor);
    const auto gv = client_embedding_backprop(arch, server.eta_v, ctx, hg.descriptor);
    for (std::size_t i = 0; i < out.eta_h.size(); ++i) out.eta_h[i] += hg.eta_h[i];
    for (std::size_t i = 0; i < out.eta_v.size(); ++i) out.eta_v[i] += gv[i];
  }
  const T inv_n = T(1) / T(ordered.size());
  for (std::size_t i = 0; i < out.eta_h.size(); ++i)
    out.eta_h[i] = out.eta_h[i] * inv_n + T(2.0 * cfg.lambda_h) * server.eta_h[i];
  for (std::size_t i = 0; i < out.eta_v.size(); ++i)
    out.eta_v[i] = out.eta_v[i] * inv_n + T(2.0 * cfg.lambda_v) * server.eta_v[i];
  out.objective = cfg.lambda_h * server.eta_h.squared_norm() +
                  cfg.lambda_v * server.eta_v.squared_norm() + client_sum / double(ordered.size());
  return out;
}

#define PEFLL_INSTANTIATE(T)                                                                      \
  template BasicServerState<T> init_server<T>(const Architecture&, std::mt19937_64&);             \
  template BasicDescriptorContext<T> describe_batch<T>(                                           \
      const Architecture&, const nn::BasicParamVector<T>&, const data::BasicExamples<T>&, bool);  \
  template nn::BasicGradVector<T> client_objective_grad<T>(                                       \
      const nn::NetworkSpec&, const nn::BasicParamVector<T>&, const data::BasicExamples<T>&,      \
      double, double*);                                                                           \
  template BasicClientUpdate<T> client_local_steps<T>(                                            \
      const nn::NetworkSpec&, const nn::BasicParamVector<T>&, const data::BasicExamples<T>&,      \
      const RoundConfig&, std::mt19937_64&);                                                      \
  template HyperGrads<T> server_hyper_backprop<T>(const Architecture&,                            \
                                                  const BasicServerState<T>&,                     \
                                                  const nn::BasicGradVector<T>&,                  \
                                                  const models::BasicDescriptor<T>&);             \
  template nn::BasicGradVector<T> client_embedding_backprop<T>(                                   \
      const Architecture&, const nn::BasicParamVector<T>&, const BasicDescriptorContext<T>&,      \
      const nn::BasicGradVector<T>&);                                                             \
  template BasicServerState<T> server_apply_updates<T>(                                           \
      BasicServerState<T>, std::vector<ClientContribution<T>>, const RoundConfig&);               \
  template class BasicClient<T>;                                                                  \
  template nn::BasicParamVector<T> predict<T>(const Architecture&, const BasicServerState<T>&,    \
                                              const data::BasicExamples<T>&, std::size_t,         \
                                              std::mt19937_64&, MessageLog*, std::uint32_t, bool); \
  template BasicServerState<T> train_round<T>(const Architecture&, const BasicServerState<T>&,    \
                                              std::span<const BasicClient<T>* const>,             \
                                              const RoundConfig&, std::mt19937_64&, MessageLog*);  \
  template ObjectiveGradient<T> objective_gradient<T>(const Architecture&,                        \
                                                      const BasicServerState<T>&,                 \
                                                      std::span<const BasicClient<T>* const>,     \
                                                      const RoundConfig&);

PEFLL_INSTANTIATE(float)
PEFLL_INSTANTIATE(double)
#undef PEFLL_INSTANTIATE

}  // namespace pefll::protocol
