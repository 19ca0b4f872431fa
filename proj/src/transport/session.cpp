#include "pefll/transport/session.hpp"

#include <algorithm>
#include <exception>
#include <future>
#include <thread>

#include "pefll/nn/bytes.hpp"

namespace pefll::transport {

using protocol::Architecture;
using protocol::ProtocolError;

namespace {

Frame control(ControlOp op, std::uint32_t client_id, std::vector<std::uint8_t> extra = {}) {
  std::vector<std::uint8_t> payload;
  payload.reserve(1 + extra.size());
  payload.push_back(static_cast<std::uint8_t>(op));
  payload.insert(payload.end(), extra.begin(), extra.end());
  return Frame{MessageKind::round_control, 0, client_id, std::move(payload)};
}

bool is_connection_lost(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConnectionLost&) {
    return true;
  } catch (...) {
    return false;
  }
}

ControlOp control_op(const Frame& f) {
  if (f.kind != MessageKind::round_control || f.payload.empty())
    throw SequenceError("expected a RoundControl frame, got " + protocol::to_string(f.kind));
  const auto op = f.payload[0];
  if (op < 1 || op > 3) throw SequenceError("unknown RoundControl operation " + std::to_string(op));
  return static_cast<ControlOp>(op);
}

template <typename V>
Frame tensor_frame(MessageKind kind, std::uint32_t round, std::uint32_t id, const V& values) {
  return {kind, round, id, tensor_payload<float>(values.span())};
}

template <typename V>
V tensor_of(const Frame& f, std::size_t expected) {
  auto values = read_tensor_payload(f.payload);
  if (values.size() != expected)
    throw ProtocolError(protocol::to_string(f.kind) + " carries " + std::to_string(values.size()) +
                        " values, expected " + std::to_string(expected));
  return V(std::move(values));
}

std::uint32_t wire_round(std::uint64_t r) {
  if (r > 0xffffffffu) throw ProtocolError("round index does not fit the wire format");
  return static_cast<std::uint32_t>(r);
}

}  // namespace

std::vector<std::uint8_t> encode_config(const SessionConfig& cfg, const Architecture& arch) {
  nn::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(cfg.mode));
  const auto& r = cfg.round;
  for (double x : {r.lambda_h, r.lambda_v, r.lambda_theta, r.lr, r.client_momentum, r.server_momentum}) w.f64(x);
  for (std::size_t x : {r.local_steps, r.clients_per_round, r.descriptor_batch, r.local_batch}) w.u64(x);
  w.u64(arch.client_params());
  w.u64(nn::param_count(arch.embed));
  w.u64(arch.descriptor_dim());
  return w.take();
}

SessionConfig decode_config(std::span<const std::uint8_t> payload, const Architecture& arch) {
  try {
    nn::ByteReader rd(payload);
    SessionConfig cfg;
    const auto mode = rd.u8();
    if (mode != 1 && mode != 2) throw ProtocolError("unknown session mode " + std::to_string(mode));
    cfg.mode = static_cast<Mode>(mode);
    auto& r = cfg.round;
    r.lambda_h = rd.f64();
    r.lambda_v = rd.f64();
    r.lambda_theta = rd.f64();
    r.lr = rd.f64();
    r.client_momentum = rd.f64();
    r.server_momentum = rd.f64();
    r.local_steps = rd.u64();
    r.clients_per_round = rd.u64();
    r.descriptor_batch = rd.u64();
    r.local_batch = rd.u64();
    const auto d = rd.u64(), e = rd.u64(), l = rd.u64();
    if (!rd.done()) throw ProtocolError("trailing bytes in session config");
    if (d != arch.client_params() || e != nn::param_count(arch.embed) || l != arch.descriptor_dim())
      throw ProtocolError("session config sizes do not match the local architecture");
    r.validate();
    return cfg;
  } catch (const nn::ParseError& e) {
    throw ProtocolError(std::string("session config: ") + e.what());
  }
}

Frame expect_frame(Channel& ch, MessageKind kind, std::uint32_t round, std::uint32_t client_id) {
  auto f = ch.recv();
  if (f.kind != kind)
    throw SequenceError("expected " + protocol::to_string(kind) + ", got " + protocol::to_string(f.kind));
  if (f.round != round || f.client_id != client_id)
    throw SequenceError(protocol::to_string(kind) + " frame for round " + std::to_string(f.round) + " client " +
                        std::to_string(f.client_id) + ", expected round " + std::to_string(round) + " client " +
                        std::to_string(client_id));
  return f;
}

void run_client(Channel& ch, const Architecture& arch, const protocol::Client& client) {
  const auto id = client.id();
  ch.send(control(ControlOp::hello, id));
  const auto hello = ch.recv();
  if (control_op(hello) != ControlOp::config) throw SequenceError("expected session config after hello");
  const auto cfg = decode_config(std::span(hello.payload).subspan(1), arch);

  for (;;) {
    const auto f = ch.recv();
    if (f.kind == MessageKind::round_control) {
      if (control_op(f) != ControlOp::shutdown) throw SequenceError("unexpected RoundControl during session");
      return;
    }
    if (f.client_id != id) throw SequenceError("frame addressed to client " + std::to_string(f.client_id));
    const auto round = f.round;
    if (cfg.mode == Mode::fedavg) {
      if (f.kind != MessageKind::personal_model)
        throw SequenceError("FedAvg round must open with PersonalModel, got " + protocol::to_string(f.kind));
      const auto theta = tensor_of<nn::ParamVector>(f, arch.client_params());
      const auto local = baselines::fedavg_client_update(arch, client, theta, cfg.round, round);
      ch.send(tensor_frame(MessageKind::model_delta, round, id, local));
      continue;
    }
    if (f.kind != MessageKind::embed_weights)
      throw SequenceError("round must open with EmbedWeights, got " + protocol::to_string(f.kind));
    const auto eta_v = tensor_of<nn::ParamVector>(f, nn::param_count(arch.embed));
    const auto ctx = client.describe(arch, eta_v, round, cfg.round.descriptor_batch);
    ch.send(tensor_frame(MessageKind::descriptor, round, id, ctx.descriptor));
    const auto theta =
        tensor_of<nn::ParamVector>(expect_frame(ch, MessageKind::personal_model, round, id), arch.client_params());
    const auto upd = client.local_steps(arch, theta, cfg.round, round);
    ch.send(tensor_frame(MessageKind::model_delta, round, id, upd.delta_theta));
    const auto dv =
        tensor_of<nn::GradVector>(expect_frame(ch, MessageKind::descriptor_grad, round, id), arch.descriptor_dim());
    const auto d_eta_v = client.embed_backprop(arch, eta_v, ctx, dv);
    ch.send(tensor_frame(MessageKind::embed_delta, round, id, d_eta_v));
  }
}

TrainingServer::TrainingServer(Architecture arch, SessionConfig cfg, CommMeter* meter)
    : arch_(std::move(arch)), cfg_(cfg), meter_(meter) {
  cfg_.round.validate();
}

TrainingServer::~TrainingServer() { abort(); }

void TrainingServer::send(Channel& ch, const Frame& f) {
  if (meter_) meter_->record(Direction::down, f);
  ch.send(f);
}

Frame TrainingServer::expect(Channel& ch, MessageKind kind, std::uint32_t round, std::uint32_t id) {
  auto f = expect_frame(ch, kind, round, id);
  if (meter_) meter_->record(Direction::up, f);
  return f;
}

void TrainingServer::accept_clients(Acceptor& acceptor, std::size_t count) {
  const auto config = encode_config(cfg_, arch_);
  for (std::size_t i = 0; i < count; ++i) {
    auto ch = acceptor.accept();
    const auto hello = ch->recv();
    if (control_op(hello) != ControlOp::hello) throw SequenceError("connection must open with hello");
    const auto id = hello.client_id;
    if (clients_.count(id)) throw ProtocolError("duplicate client id " + std::to_string(id));
    ch->send(control(ControlOp::config, id, config));
    clients_.emplace(id, std::move(ch));
  }
}

std::vector<std::uint32_t> TrainingServer::client_ids() const {
  std::vector<std::uint32_t> ids;
  for (const auto& [id, ch] : clients_) ids.push_back(id);
  return ids;
}

std::vector<std::uint32_t> TrainingServer::select(std::mt19937_64& rng) const {
  const auto ids = client_ids();
  std::vector<std::uint32_t> chosen;
  for (auto i : protocol::select_clients(ids.size(), cfg_.round.clients_per_round, rng)) chosen.push_back(ids[i]);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

protocol::ServerState TrainingServer::pefll_round(const protocol::ServerState& state, std::mt19937_64& rng) {
  if (cfg_.mode != Mode::pefll) throw ProtocolError("session is not in PeFLL mode");
  const auto round = wire_round(state.round_index);
  const auto chosen = select(rng);
  auto exchange = [&](std::uint32_t id) {
    auto& ch = *clients_.at(id);
    send(ch, tensor_frame(MessageKind::embed_weights, round, id, state.eta_v));
    const auto v = tensor_of<models::Descriptor>(expect(ch, MessageKind::descriptor, round, id), arch_.descriptor_dim());
    const auto theta = models::generate_personal_model(v, state.eta_h, arch_.hyper);
    send(ch, tensor_frame(MessageKind::personal_model, round, id, theta));
    const auto dtheta =
        tensor_of<nn::GradVector>(expect(ch, MessageKind::model_delta, round, id), arch_.client_params());
    auto hg = protocol::server_hyper_backprop(arch_, state, dtheta, v);
    send(ch, tensor_frame(MessageKind::descriptor_grad, round, id, hg.descriptor));
    auto d_eta_v =
        tensor_of<nn::GradVector>(expect(ch, MessageKind::embed_delta, round, id), nn::param_count(arch_.embed));
    return protocol::ClientContribution<float>{id, std::move(hg.eta_h), std::move(d_eta_v)};
  };
  std::vector<std::future<protocol::ClientContribution<float>>> pending;
  for (auto id : chosen) pending.push_back(std::async(std::launch::async, exchange, id));
  std::vector<protocol::ClientContribution<float>> contributions;
  std::exception_ptr failure;
  for (auto& p : pending) {
    try {
      contributions.push_back(p.get());
    } catch (...) {
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  auto next = protocol::server_apply_updates(state, std::move(contributions), cfg_.round);
  next.round_index = state.round_index + 1;
  return next;
}

baselines::GlobalModelState TrainingServer::fedavg_round(const baselines::GlobalModelState& state,
                                                         std::mt19937_64& rng) {
  if (cfg_.mode != Mode::fedavg) throw ProtocolError("session is not in FedAvg mode");
  const auto round = wire_round(state.round_index);
  const auto chosen = select(rng);
  auto exchange = [&](std::uint32_t id) {
    auto& ch = *clients_.at(id);
    send(ch, tensor_frame(MessageKind::personal_model, round, id, state.theta));
    return tensor_of<nn::ParamVector>(expect(ch, MessageKind::model_delta, round, id), arch_.client_params());
  };
  std::vector<std::future<nn::ParamVector>> pending;
  for (auto id : chosen) pending.push_back(std::async(std::launch::async, exchange, id));
  std::vector<nn::ParamVector> models;
  std::exception_ptr failure;
  for (auto& p : pending) {
    try {
      models.push_back(p.get());
    } catch (...) {
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return {baselines::average_models<float>(models), state.round_index + 1};
}

void TrainingServer::shutdown() {
  for (auto& [id, ch] : clients_) ch->send(control(ControlOp::shutdown, id));
  abort();
}

void TrainingServer::abort() {
  for (auto& [id, ch] : clients_) ch->close();
  clients_.clear();
}

void run_session(Backend& backend, const Architecture& arch, const SessionConfig& cfg,
                 std::span<const protocol::Client* const> clients, CommMeter* meter,
                 const std::function<void(TrainingServer&)>& body) {
  std::vector<std::exception_ptr> errors(clients.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        auto ch = backend.connect();
        run_client(*ch, arch, *clients[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  std::exception_ptr server_error;
  {
    TrainingServer server(arch, cfg, meter);
    try {
      server.accept_clients(*backend.acceptor, clients.size());
      body(server);
      server.shutdown();
    } catch (...) {
      server_error = std::current_exception();
      server.abort();
      backend.acceptor->close();
    }
  }
  for (auto& t : threads) t.join();
  // A client failing on its own shows up at the server as a lost
  // connection; report the client's error instead.
  if (!server_error || is_connection_lost(server_error))
    for (auto& e : errors)
      if (e && !is_connection_lost(e)) std::rethrow_exception(e);
  if (server_error) std::rethrow_exception(server_error);
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void serve_predict(Channel& ch, const Architecture& arch, const protocol::ServerState& state, CommMeter* meter) {
  const auto round = wire_round(state.round_index);
  auto send = [&](const Frame& f) {
    if (meter) meter->record(Direction::down, f);
    ch.send(f);
  };
  send(tensor_frame(MessageKind::embed_weights, round, 0, state.eta_v));
  const auto f = expect_frame(ch, MessageKind::descriptor, round, 0);
  if (meter) meter->record(Direction::up, f);
  const auto v = tensor_of<models::Descriptor>(f, arch.descriptor_dim());
  send(tensor_frame(MessageKind::personal_model, round, 0, models::generate_personal_model(v, state.eta_h, arch.hyper)));
}

nn::ParamVector predict_remote(Channel& ch, const Architecture& arch, const data::Examples& data, std::size_t b,
                               std::mt19937_64& rng, bool labeled) {
  if (data.empty()) throw ProtocolError("predict: client has no data");
  const auto first = ch.recv();
  if (first.kind != MessageKind::embed_weights)
    throw SequenceError("predict must open with EmbedWeights, got " + protocol::to_string(first.kind));
  const auto eta_v = tensor_of<nn::ParamVector>(first, nn::param_count(arch.embed));
  const auto rows = protocol::sample_rows(data.size(), b, rng);
  const auto ctx = protocol::describe_batch(arch, eta_v, data.subset(rows), labeled);
  ch.send(tensor_frame(MessageKind::descriptor, first.round, 0, ctx.descriptor));
  return tensor_of<nn::ParamVector>(expect_frame(ch, MessageKind::personal_model, first.round, 0),
                                    arch.client_params());
}

}  // namespace pefll::transport
