#pragma once

#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "pefll/baselines/baselines.hpp"
#include "pefll/transport/transport.hpp"

namespace pefll::transport {

enum class Mode : std::uint8_t { pefll = 1, fedavg = 2 };

/// RoundControl operations, first payload byte.
enum class ControlOp : std::uint8_t { hello = 1, config = 2, shutdown = 3 };

struct SessionConfig {
  Mode mode = Mode::pefll;
  protocol::RoundConfig round;
};

std::vector<std::uint8_t> encode_config(const SessionConfig& cfg, const protocol::Architecture& arch);
/// Throws protocol::ProtocolError when the sizes disagree with `arch`.
SessionConfig decode_config(std::span<const std::uint8_t> payload, const protocol::Architecture& arch);

/// Receives the next frame and checks its kind, round and client id.
Frame expect_frame(Channel& ch, MessageKind kind, std::uint32_t round, std::uint32_t client_id);

/// Client role for a whole training session: hello, config, then one
/// message exchange per round it is selected for, until shutdown.
void run_client(Channel& ch, const protocol::Architecture& arch, const protocol::Client& client);

/// Server role for a training session over already-connected clients. The
/// meter sees round messages only, not session control.
/// Updates are applied only after every selected client has finished its
/// exchange, so a failed round leaves the caller's state untouched.
class TrainingServer {
 public:
  TrainingServer(protocol::Architecture arch, SessionConfig cfg, CommMeter* meter = nullptr);
  ~TrainingServer();
  TrainingServer(const TrainingServer&) = delete;
  TrainingServer& operator=(const TrainingServer&) = delete;

  /// Accepts `count` connections and reads each client's hello.
  void accept_clients(Acceptor& acceptor, std::size_t count);
  std::vector<std::uint32_t> client_ids() const;

  protocol::ServerState pefll_round(const protocol::ServerState& state, std::mt19937_64& rng);
  baselines::GlobalModelState fedavg_round(const baselines::GlobalModelState& state, std::mt19937_64& rng);

  /// Sends shutdown to every client and closes the connections.
  void shutdown();
  void abort();

 private:
  void send(Channel& ch, const Frame& f);
  Frame expect(Channel& ch, MessageKind kind, std::uint32_t round, std::uint32_t id);
  std::vector<std::uint32_t> select(std::mt19937_64& rng) const;

  protocol::Architecture arch_;
  SessionConfig cfg_;
  CommMeter* meter_;
  std::map<std::uint32_t, std::unique_ptr<Channel>> clients_;
};

/// Runs a training session: every client in its own thread connecting through
/// `backend`, the server on the calling thread executing `body`.
void run_session(Backend& backend, const protocol::Architecture& arch, const SessionConfig& cfg,
                 std::span<const protocol::Client* const> clients, CommMeter* meter,
                 const std::function<void(TrainingServer&)>& body);

/// Server side of a predict session: EmbedWeights down, Descriptor up,
/// PersonalModel down.
void serve_predict(Channel& ch, const protocol::Architecture& arch, const protocol::ServerState& state,
                   CommMeter* meter = nullptr);
/// Client side of a predict session.
nn::ParamVector predict_remote(Channel& ch, const protocol::Architecture& arch, const data::Examples& data,
                               std::size_t b, std::mt19937_64& rng, bool labeled = true);

}  // namespace pefll::transport
