#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pefll/protocol/protocol.hpp"

namespace pefll::transport {

using protocol::Direction;
using protocol::MessageKind;

/// Peer went away or the socket failed.
class ConnectionLost : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed frame bytes.
class FrameError : public protocol::ProtocolError {
 public:
  using protocol::ProtocolError::ProtocolError;
};

/// A well-formed frame arrived out of the expected order.
class SequenceError : public protocol::ProtocolError {
 public:
  using protocol::ProtocolError::ProtocolError;
};

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kHeaderSize = 18;  // magic 4, version 1, kind 1, round 4, client 4, length 4
inline constexpr std::uint64_t kMaxPayload = std::uint64_t(1) << 31;

struct Frame {
  MessageKind kind = MessageKind::round_control;
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::vector<std::uint8_t> payload;

  std::size_t wire_size() const { return kHeaderSize + payload.size(); }
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct FrameHeader {
  MessageKind kind;
  std::uint32_t round;
  std::uint32_t client_id;
  std::uint32_t payload_len;
};

std::vector<std::uint8_t> encode_frame(const Frame& f);
FrameHeader decode_header(std::span<const std::uint8_t> header);
/// Decodes exactly one frame occupying all of `bytes`.
Frame decode_frame(std::span<const std::uint8_t> bytes);

/// Rank-1 tensor fragment in single precision.
template <typename T>
std::vector<std::uint8_t> tensor_payload(std::span<const T> values);
std::vector<float> read_tensor_payload(std::span<const std::uint8_t> payload);

/// Per-round byte and frame tallies, split by direction and kind.
class CommMeter {
 public:
  struct Tally {
    std::uint64_t bytes = 0;
    std::uint64_t frames = 0;
  };
  struct RoundTally {
    Tally up, down;
    std::map<MessageKind, Tally> by_kind;
  };

  void record(Direction d, const Frame& f);
  RoundTally round(std::uint32_t r) const;
  std::map<std::uint32_t, RoundTally> rounds() const;
  Tally total(Direction d) const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::map<std::uint32_t, RoundTally> rounds_;
};

/// One bidirectional, ordered frame stream.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Frame& f) = 0;
  /// Blocks for the next frame; throws ConnectionLost once the peer is gone.
  virtual Frame recv() = 0;
  virtual void close() = 0;
};

class Acceptor {
 public:
  virtual ~Acceptor() = default;
  virtual std::unique_ptr<Channel> accept() = 0;
  virtual void close() = 0;
};

/// A server endpoint plus a way for clients to reach it.
struct Backend {
  std::string name;
  std::unique_ptr<Acceptor> acceptor;
  std::function<std::unique_ptr<Channel>()> connect;
};

/// In-process backend; frames still pass through their encoded bytes.
Backend make_loopback_backend();
/// Localhost TCP backend; port 0 picks a free port.
Backend make_tcp_backend(const std::string& host = "127.0.0.1", std::uint16_t port = 0);
Backend make_backend(const std::string& name);

/// Channel endpoints connected to each other in memory.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> loopback_pair();

std::unique_ptr<Acceptor> tcp_listen(const std::string& host, std::uint16_t port, std::uint16_t* bound_port);
std::unique_ptr<Channel> tcp_connect(const std::string& host, std::uint16_t port);

}  // namespace pefll::transport
