#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "pefll/nn/train.hpp"
#include "pefll/protocol/protocol.hpp"
#include "support.hpp"

using namespace pefll;
using namespace pefll::protocol;
using pefll::testing::ClientD;
using pefll::testing::fd_objective_grad;
using pefll::testing::objective;
using pefll::testing::oracle_config;
using pefll::testing::random_examples;
using pefll::testing::StateD;
using pefll::testing::tiny_arch;

namespace {

std::vector<ClientD> make_clients(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::vector<ClientD> out;
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(std::uint32_t(i), random_examples<double>(m, 3, 6, 3, rng), 1000 + i);
  return out;
}

std::vector<const ClientD*> ptrs(const std::vector<ClientD>& v) {
  std::vector<const ClientD*> p;
  for (const auto& c : v) p.push_back(&c);
  return p;
}

}  // namespace

TEST_CASE("train_round update equals beta times the exact objective gradient") {
  for (auto kind : {models::EmbeddingKind::lenet_conv, models::EmbeddingKind::linear_onehot}) {
    CAPTURE(models::to_string(kind));
    const auto arch = tiny_arch(kind);
    std::mt19937_64 rng(17);
    const auto s0 = init_server<double>(arch, rng);
    const auto clients = make_clients(3, 5, rng);
    const auto avail = ptrs(clients);
    CHECK(nn::param_count(arch.client) + nn::param_count(arch.embed) + nn::param_count(arch.hyper) <= 5000);

    for (bool regularized : {false, true}) {
      CAPTURE(regularized);
      auto cfg = oracle_config(3);
      if (regularized) {
        cfg.lambda_h = 1e-2;
        cfg.lambda_v = 3e-2;
        cfg.lambda_theta = 5e-3;
      }
      std::mt19937_64 round_rng(1);
      const auto s1 = train_round<double>(arch, s0, avail, cfg, round_rng);
      std::vector<double> step;
      for (std::size_t i = 0; i < s0.eta_h.size(); ++i) step.push_back((s0.eta_h[i] - s1.eta_h[i]) / cfg.lr);
      for (std::size_t i = 0; i < s0.eta_v.size(); ++i) step.push_back((s0.eta_v[i] - s1.eta_v[i]) / cfg.lr);
      const auto fd = fd_objective_grad(arch, s0, clients, cfg);
      CHECK(nn::relative_error(step, fd) <= 1e-4);

      const auto exact = objective_gradient<double>(arch, s0, avail, cfg);
      std::vector<double> eg(exact.eta_h.begin(), exact.eta_h.end());
      eg.insert(eg.end(), exact.eta_v.begin(), exact.eta_v.end());
      CHECK(nn::relative_error(eg, fd) <= 1e-6);
      CHECK(exact.objective ==
            doctest::Approx(objective(arch, s0.eta_h.span(), s0.eta_v.span(), clients, cfg)).epsilon(1e-12));
    }
  }
}

TEST_CASE("predict composes descriptor and hypernetwork and uses three messages") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(5);
  const auto s = init_server<double>(arch, rng);
  const auto data = random_examples<double>(7, 3, 6, 3, rng);

  MessageLog log;
  std::mt19937_64 r1(9);
  const auto theta = predict<double>(arch, s, data, 100, r1, &log, 4);
  const auto direct = models::generate_personal_model(
      models::compute_descriptor(data, arch.embed, s.eta_v, arch.kind, arch.num_classes), s.eta_h, arch.hyper);
  CHECK(theta == direct);
  REQUIRE(log.size() == 3);
  CHECK(log[0].kind == MessageKind::embed_weights);
  CHECK(log[0].direction == Direction::down);
  CHECK(log[1].kind == MessageKind::descriptor);
  CHECK(log[1].direction == Direction::up);
  CHECK(log[2].kind == MessageKind::personal_model);
  CHECK(theta.size() == nn::param_count(arch.client));

  std::mt19937_64 a(42), b(42);
  CHECK(predict<double>(arch, s, data, 3, a) == predict<double>(arch, s, data, 3, b));

  data::BasicExamples<double> empty;
  CHECK_THROWS_AS(predict<double>(arch, s, empty, 3, a), ProtocolError);
}

TEST_CASE("client_local_steps closed forms") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(8);
  const auto theta0 = nn::init_params<double>(arch.client, rng);
  const auto data = random_examples<double>(6, 3, 6, 3, rng);

  RoundConfig cfg = oracle_config(1);
  cfg.lambda_theta = 0.01;
  cfg.lr = 0.3;
  auto u = client_local_steps<double>(arch.client, theta0, data, cfg, rng);
  const auto g = client_objective_grad<double>(arch.client, theta0, data, 0.0);
  std::vector<double> expected;
  for (std::size_t i = 0; i < theta0.size(); ++i)
    expected.push_back(cfg.lr * (g[i] + 2 * cfg.lambda_theta * theta0[i]));
  CHECK(nn::relative_error(u.delta_theta.span(), expected) <= 1e-12);

  cfg.lr = 0.0;
  u = client_local_steps<double>(arch.client, theta0, data, cfg, rng);
  for (double v : u.delta_theta) CHECK(v == 0.0);

  CHECK(RoundConfig{}.lambda_theta == 0.0);
  CHECK(RoundConfig{}.local_steps == 50);
}

TEST_CASE("server_hyper_backprop is the hypernetwork VJP") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(21);
  const auto s = init_server<double>(arch, rng);
  const auto v = models::BasicDescriptor<double>(std::vector<double>{0.3, -0.7});
  const std::size_t d = arch.hyper.output_dim;

  const auto zero = server_hyper_backprop<double>(arch, s, nn::BasicGradVector<double>(d), v);
  for (double x : zero.eta_h) CHECK(x == 0.0);
  for (double x : zero.descriptor) CHECK(x == 0.0);

  nn::BasicGradVector<double> up(d);
  std::normal_distribution<double> g(0, 1);
  for (auto& x : up) x = g(rng);
  const auto a = server_hyper_backprop<double>(arch, s, up, v);
  auto scaled = up;
  for (auto& x : scaled) x *= 2.5;
  const auto b = server_hyper_backprop<double>(arch, s, scaled, v);
  for (std::size_t i = 0; i < a.eta_h.size(); ++i) CHECK(b.eta_h[i] == doctest::Approx(2.5 * a.eta_h[i]));
  for (std::size_t i = 0; i < a.descriptor.size(); ++i)
    CHECK(b.descriptor[i] == doctest::Approx(2.5 * a.descriptor[i]));

  auto inner = [&](std::span<const double> eta_h, std::span<const double> vin) {
    nn::Tensor<double> x(nn::Shape{1, 2}, nn::AlignedVector<double>(vin.begin(), vin.end()));
    const auto theta = nn::forward<double>(arch.hyper, eta_h, x);
    double s2 = 0;
    for (std::size_t i = 0; i < d; ++i) s2 += theta.values[i] * up[i];
    return s2;
  };
  const auto fd_v = nn::finite_diff_grad(v.span(), [&](std::span<const double> vv) { return inner(s.eta_h.span(), vv); });
  CHECK(nn::relative_error(a.descriptor.span(), fd_v.span()) <= 1e-6);
  const auto fd_h = nn::finite_diff_grad(s.eta_h.span(), [&](std::span<const double> e) { return inner(e, v.span()); });
  CHECK(nn::relative_error(a.eta_h.span(), fd_h.span()) <= 1e-6);

  CHECK_THROWS(server_hyper_backprop<double>(arch, s, nn::BasicGradVector<double>(d + 1), v));
}

TEST_CASE("client_embedding_backprop is the VJP of the batch mean") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(33);
  const auto s = init_server<double>(arch, rng);
  const auto batch = random_examples<double>(4, 3, 6, 3, rng);
  const auto ctx = describe_batch(arch, s.eta_v, batch);

  const auto zero = client_embedding_backprop<double>(arch, s.eta_v, ctx, nn::BasicGradVector<double>(2));
  for (double x : zero) CHECK(x == 0.0);

  const nn::BasicGradVector<double> dv(std::vector<double>{0.8, -1.3});
  const auto got = client_embedding_backprop<double>(arch, s.eta_v, ctx, dv);
  const auto fd = nn::finite_diff_grad(s.eta_v.span(), [&](std::span<const double> e) {
    const auto v = models::compute_descriptor(batch, arch.embed, nn::BasicParamVector<double>(nn::AlignedVector<double>(e.begin(), e.end())),
                                              arch.kind, arch.num_classes);
    return v[0] * dv[0] + v[1] * dv[1];
  });
  CHECK(nn::relative_error(got.span(), fd.span()) <= 1e-6);

  // batch of one: plain backward of phi with upstream dv
  const std::vector<std::uint32_t> first = {0};
  const auto one = batch.subset(first);
  const auto ctx1 = describe_batch(arch, s.eta_v, one);
  const auto g1 = client_embedding_backprop<double>(arch, s.eta_v, ctx1, dv);
  const auto direct = nn::backward<double>(arch.embed, s.eta_v.span(), ctx1.embed_input,
                                           nn::Tensor<double>(nn::Shape{1, 2}, dv.values()));
  CHECK(g1 == direct.params);

  CHECK_THROWS(client_embedding_backprop<double>(arch, s.eta_v, ctx, nn::BasicGradVector<double>(3)));
}

TEST_CASE("server_apply_updates") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(4);
  const auto s = init_server<double>(arch, rng);
  RoundConfig cfg = oracle_config(1);
  std::normal_distribution<double> g(0, 1);
  auto random_contribution = [&](std::uint32_t id) {
    ClientContribution<double> c{id, nn::BasicGradVector<double>(s.eta_h.size()),
                                 nn::BasicGradVector<double>(s.eta_v.size())};
    for (auto& x : c.eta_h) x = g(rng);
    for (auto& x : c.eta_v) x = g(rng);
    return c;
  };

  const auto one = random_contribution(3);
  const auto moved = server_apply_updates<double>(s, {one}, cfg);
  for (std::size_t i = 0; i < s.eta_h.size(); ++i) CHECK(moved.eta_h[i] == s.eta_h[i] - one.eta_h[i]);
  for (std::size_t i = 0; i < s.eta_v.size(); ++i) CHECK(moved.eta_v[i] == s.eta_v[i] - one.eta_v[i]);

  cfg.lambda_h = 1e-3;
  cfg.lambda_v = 0.0;
  cfg.lr = 0.1;
  cfg.local_steps = 5;
  ClientContribution<double> zero{0, nn::BasicGradVector<double>(s.eta_h.size()),
                                  nn::BasicGradVector<double>(s.eta_v.size())};
  const auto decayed = server_apply_updates<double>(s, {zero}, cfg);
  const double factor = 1.0 - 2.0 * cfg.lr * cfg.local_steps * cfg.lambda_h;
  for (std::size_t i = 0; i < s.eta_h.size(); ++i)
    CHECK(decayed.eta_h[i] == doctest::Approx(factor * s.eta_h[i]).epsilon(1e-14));
  CHECK(decayed.eta_v == s.eta_v);

  std::vector<ClientContribution<double>> ups = {random_contribution(5), random_contribution(1),
                                                 random_contribution(9)};
  auto reversed = ups;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(server_apply_updates<double>(s, ups, cfg) == server_apply_updates<double>(s, reversed, cfg));

  CHECK_THROWS_AS(server_apply_updates<double>(s, {}, cfg), ProtocolError);
  const RoundConfig defaults;
  CHECK(defaults.lambda_h == 1e-3);
  CHECK(defaults.lambda_v == 1e-3);
}

TEST_CASE("train_round message flow, determinism and error paths") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(77);
  const auto s0 = init_server<float>(arch, rng);
  std::vector<Client> clients;
  for (std::uint32_t i = 0; i < 6; ++i)
    clients.emplace_back(i, random_examples<float>(8, 3, 6, 3, rng), 50 + i);
  std::vector<const Client*> avail;
  for (const auto& c : clients) avail.push_back(&c);

  RoundConfig cfg;
  cfg.clients_per_round = 3;
  cfg.local_steps = 3;
  cfg.local_batch = 4;
  cfg.descriptor_batch = 4;

  MessageLog log;
  std::mt19937_64 r1(1);
  auto s1 = train_round<float>(arch, s0, avail, cfg, r1, &log);
  CHECK(s1.round_index == 1);
  CHECK(log.size() == 18);
  std::set<std::uint32_t> ids;
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(static_cast<int>(log[i].kind) == int(i % 6) + 1);
    CHECK(log[i].direction == (i % 2 == 0 ? Direction::down : Direction::up));
    ids.insert(log[i].client_id);
  }
  CHECK(ids.size() == 3);

  // same seed, same state -> bitwise identical after several rounds
  auto run = [&](std::uint64_t seed) {
    std::mt19937_64 r(seed);
    auto s = s0;
    for (int t = 0; t < 4; ++t) s = train_round<float>(arch, s, avail, cfg, r);
    return s;
  };
  CHECK(run(3) == run(3));

  RoundConfig still = cfg;
  still.lr = 0.0;
  std::mt19937_64 r2(1);
  auto s2 = train_round<float>(arch, s0, avail, still, r2);
  CHECK(s2.eta_h == s0.eta_h);
  CHECK(s2.eta_v == s0.eta_v);
  CHECK(s2.round_index == s0.round_index + 1);

  RoundConfig greedy = cfg;
  greedy.clients_per_round = 7;
  CHECK_THROWS_AS(train_round<float>(arch, s0, avail, greedy, r2), ProtocolError);
}

TEST_CASE("server keeps no per-client state; late clients are served") {
  for (const auto& name : ServerState::field_names()) {
    CHECK(name.find("client") == std::string::npos);
  }
  const auto arch = tiny_arch();
  std::mt19937_64 rng(12);
  auto s = init_server<float>(arch, rng);
  std::vector<Client> clients;
  for (std::uint32_t i = 0; i < 5; ++i)
    clients.emplace_back(i, random_examples<float>(6, 3, 6, 3, rng), i);
  RoundConfig cfg;
  cfg.clients_per_round = 2;
  cfg.local_steps = 2;
  std::vector<const Client*> early = {&clients[0], &clients[1], &clients[2], &clients[3]};
  std::mt19937_64 r(5);
  for (int t = 0; t < 3; ++t) s = train_round<float>(arch, s, early, cfg, r);
  const auto size_before = s.eta_h.size() + s.eta_v.size();

  // client 4 never participated; the state serves it without any lookup
  std::mt19937_64 pr(1);
  const auto theta = predict<float>(arch, s, clients[4].train_data(), 32, pr);
  CHECK(theta.size() == nn::param_count(arch.client));
  std::vector<const Client*> all = {&clients[0], &clients[1], &clients[2], &clients[3], &clients[4]};
  RoundConfig everyone = cfg;
  everyone.clients_per_round = 5;
  s = train_round<float>(arch, s, all, everyone, r);
  CHECK(s.eta_h.size() + s.eta_v.size() == size_before);
}

TEST_CASE("descriptor is bitwise invariant to batch order") {
  const auto arch = tiny_arch();
  std::mt19937_64 rng(61);
  const auto s = init_server<float>(arch, rng);
  const auto batch = random_examples<float>(9, 3, 6, 3, rng);
  std::vector<std::uint32_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0u);
  const auto v = models::compute_descriptor(batch, arch.embed, s.eta_v, arch.kind, arch.num_classes);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto w = models::compute_descriptor(batch.subset(perm), arch.embed, s.eta_v, arch.kind, arch.num_classes);
    for (std::size_t j = 0; j < v.size(); ++j) CHECK(std::abs(v[j] - w[j]) <= 1e-6f);
  }
}
