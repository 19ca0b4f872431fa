#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "pefll/analysis/analysis.hpp"
#include "pefll/baselines/baselines.hpp"
#include "pefll/nn/train.hpp"
#include "support.hpp"

using namespace pefll;
using namespace pefll::baselines;
using pefll::testing::random_examples;
using pefll::testing::tiny_arch;

namespace {

using ClientD = protocol::BasicClient<double>;

std::vector<ClientD> make_clients(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::vector<ClientD> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(std::uint32_t(i), random_examples<double>(m, 3, 6, 3, rng), 40 + i);
  return out;
}

std::vector<const ClientD*> ptrs(const std::vector<ClientD>& v) {
  std::vector<const ClientD*> p;
  for (const auto& c : v) p.push_back(&c);
  return p;
}

// Mean cross-entropy of one dataset, written out from the logits.
double cross_entropy(const nn::NetworkSpec& client, std::span<const double> theta, const data::BasicExamples<double>& d) {
  const auto logits = nn::forward<double>(client.without_output_softmax(), theta, d.images);
  const std::size_t C = client.output_dim;
  double ce = 0.0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    const double* z = logits.data() + r * C;
    const double mx = *std::max_element(z, z + C);
    double s = 0.0;
    for (std::size_t k = 0; k < C; ++k) s += std::exp(z[k] - mx);
    ce += std::log(s) + mx - z[d.labels[r]];
  }
  return ce / double(d.size());
}

protocol::RoundConfig full_batch_step(std::size_t c) {
  protocol::RoundConfig cfg;
  cfg.lr = 0.1;
  cfg.client_momentum = 0.0;
  cfg.local_steps = 1;
  cfg.clients_per_round = c;
  cfg.local_batch = 1000;
  cfg.lambda_theta = 0.01;
  cfg.lambda_h = cfg.lambda_v = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("one step of averaging equals one step on the pooled data") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(1);
  const auto clients = make_clients(3, 8, rng);
  const auto state = init_global<double>(arch.client, rng);
  const auto cfg = full_batch_step(3);

  std::mt19937_64 sel(2);
  const auto p = ptrs(clients);
  const auto next = fedavg_round(arch, state, std::span(p), cfg, sel);
  CHECK(next.round_index == 1);

  // A short probe step keeps the difference on one side of nearby ReLU kinks.
  const auto g = nn::finite_diff_grad(state.theta.values(), [&](std::span<const double> th) {
    double total = 0.0, sq = 0.0;
    for (double t : th) sq += t * t;
    for (const auto& c : clients) total += cross_entropy(arch.client, th, c.train_data());
    return total / double(clients.size()) + cfg.lambda_theta * sq;
  }, 1e-7);
  const auto& before = state.theta.values();
  const auto& after = next.theta.values();
  const auto& grad = g.values();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == doctest::Approx(before[i] - cfg.lr * grad[i]).epsilon(1e-7));
}

TEST_CASE("a single client round returns that client's local model") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(3);
  const auto clients = make_clients(1, 10, rng);
  const auto state = init_global<double>(arch.client, rng);
  auto cfg = full_batch_step(1);
  cfg.local_steps = 4;
  cfg.local_batch = 3;
  cfg.client_momentum = 0.9;
  std::mt19937_64 sel(1);
  const auto p = ptrs(clients);
  const auto next = fedavg_round(arch, state, std::span(p), cfg, sel);
  const auto local = fedavg_client_update(arch, clients[0], state.theta, cfg, 0);
  CHECK(next.theta.values() == local.values());
}

TEST_CASE("zero learning rate leaves the global model unchanged") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(4);
  const auto clients = make_clients(4, 6, rng);
  const auto state = init_global<double>(arch.client, rng);
  auto cfg = full_batch_step(2);
  cfg.lr = 0.0;
  std::mt19937_64 sel(1);
  const auto p = ptrs(clients);
  const auto next = fedavg_round(arch, state, std::span(p), cfg, sel);
  CHECK(next.theta.values() == state.theta.values());
}

TEST_CASE("fedavg logs one broadcast and one upload per selected client") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(5);
  const auto clients = make_clients(5, 6, rng);
  const auto state = init_global<double>(arch.client, rng);
  std::mt19937_64 sel(1);
  protocol::MessageLog log;
  const auto p = ptrs(clients);
  fedavg_round(arch, state, std::span(p), full_batch_step(3), sel, &log);
  REQUIRE(log.size() == 6);
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(log[i].kind == (i % 2 == 0 ? protocol::MessageKind::personal_model : protocol::MessageKind::model_delta));
    CHECK(log[i].elements == nn::param_count(arch.client));
  }
}

TEST_CASE("average of models") {
  using V = nn::BasicParamVector<double>;
  const std::vector<V> models = {V(std::vector<double>{1, 2, 3}), V(std::vector<double>{3, 2, 0}),
                                 V(std::vector<double>{2, 5, 3})};
  CHECK(average_models<double>(models).values() == nn::AlignedVector<double>{2, 3, 2});
  CHECK_THROWS(average_models<double>(std::span<const V>{}));
}

TEST_CASE("local training") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(6);
  const auto data = random_examples<double>(12, 3, 6, 3, rng);
  const auto init = init_global<double>(arch.client, rng).theta;

  LocalConfig cfg;
  cfg.epochs = 0;
  std::mt19937_64 r0(1);
  CHECK(local_train(arch.client, init, data, cfg, r0).values() == init.values());

  cfg.epochs = 1;
  cfg.batch = 100;
  cfg.momentum = 0.0;
  cfg.lr = 0.05;
  std::mt19937_64 r1(1);
  const auto one = local_train(arch.client, init, data, cfg, r1);
  const auto g = nn::finite_diff_grad(init.values(), [&](std::span<const double> th) {
    return cross_entropy(arch.client, th, data);
  });
  for (std::size_t i = 0; i < init.size(); ++i)
    CHECK(one.values()[i] == doctest::Approx(init.values()[i] - cfg.lr * g.values()[i]).epsilon(1e-7));

  cfg.epochs = 300;
  cfg.batch = 4;
  cfg.momentum = 0.9;
  cfg.lr = 0.02;
  std::mt19937_64 r2(1);
  const auto trained = local_train(arch.client, init, data, cfg, r2);
  CHECK(cross_entropy(arch.client, trained.values(), data) < 0.5 * cross_entropy(arch.client, init.values(), data));
  CHECK(analysis::eval_accuracy(arch.client, trained, data) > 0.9);
}
