#include <algorithm>
#include <cstring>

#include "pefll/nn/bytes.hpp"
#include "pefll/nn/fragment.hpp"
#include "pefll/transport/transport.hpp"

namespace pefll::transport {

namespace {
constexpr std::uint8_t kMagic[4] = {'P', 'F', 'L', 'L'};
}

std::vector<std::uint8_t> encode_frame(const Frame& f) {
  const auto k = static_cast<std::uint8_t>(f.kind);
  if (k < 1 || k > 7) throw FrameError("invalid message kind " + std::to_string(k));
  if (f.payload.size() > kMaxPayload) throw FrameError("payload of " + std::to_string(f.payload.size()) + " bytes exceeds 2^31");
  nn::ByteWriter w;
  w.buffer().reserve(kHeaderSize + f.payload.size());
  w.bytes(kMagic);
  w.u8(kWireVersion);
  w.u8(k);
  w.u32(f.round);
  w.u32(f.client_id);
  w.u32(static_cast<std::uint32_t>(f.payload.size()));
  w.bytes(f.payload);
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t> header) {
  if (header.size() < kHeaderSize) throw FrameError("frame header truncated at " + std::to_string(header.size()) + " bytes");
  if (!std::equal(header.begin(), header.begin() + 4, kMagic)) throw FrameError("bad frame magic");
  if (header[4] != kWireVersion) throw FrameError("unsupported wire version " + std::to_string(header[4]));
  const std::uint8_t k = header[5];
  if (k < 1 || k > 7) throw FrameError("invalid message kind " + std::to_string(k));
  nn::ByteReader r(header.subspan(6, 12));
  FrameHeader h{static_cast<MessageKind>(k), 0, 0, 0};
  h.round = r.u32();
  h.client_id = r.u32();
  h.payload_len = r.u32();
  if (h.payload_len > kMaxPayload) throw FrameError("declared payload exceeds 2^31 bytes");
  return h;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  const auto h = decode_header(bytes);
  if (bytes.size() != kHeaderSize + h.payload_len)
    throw FrameError("frame length " + std::to_string(bytes.size()) + " does not match header (" +
                     std::to_string(kHeaderSize + h.payload_len) + ")");
  return {h.kind, h.round, h.client_id, {bytes.begin() + kHeaderSize, bytes.end()}};
}

template <typename T>
std::vector<std::uint8_t> tensor_payload(std::span<const T> values) {
  nn::ByteWriter w;
  nn::write_fragment<T>(w, nn::Shape{values.size()}, values);
  return w.take();
}

std::vector<float> read_tensor_payload(std::span<const std::uint8_t> payload) {
  try {
    nn::ByteReader r(payload);
    auto f = nn::read_fragment(r);
    if (f.shape.rank() != 1) throw FrameError("tensor payload must be rank 1");
    if (!r.done()) throw FrameError("trailing bytes after tensor payload");
    return std::move(f.values);
  } catch (const nn::ParseError& e) {
    throw FrameError(std::string("tensor payload: ") + e.what());
  }
}

template std::vector<std::uint8_t> tensor_payload<float>(std::span<const float>);
template std::vector<std::uint8_t> tensor_payload<double>(std::span<const double>);

void CommMeter::record(Direction d, const Frame& f) {
  std::lock_guard lock(mu_);
  auto& r = rounds_[f.round];
  auto& t = d == Direction::up ? r.up : r.down;
  t.bytes += f.wire_size();
  ++t.frames;
  auto& k = r.by_kind[f.kind];
  k.bytes += f.wire_size();
  ++k.frames;
}

CommMeter::RoundTally CommMeter::round(std::uint32_t r) const {
  std::lock_guard lock(mu_);
  const auto it = rounds_.find(r);
  return it == rounds_.end() ? RoundTally{} : it->second;
}

std::map<std::uint32_t, CommMeter::RoundTally> CommMeter::rounds() const {
  std::lock_guard lock(mu_);
  return rounds_;
}

CommMeter::Tally CommMeter::total(Direction d) const {
  std::lock_guard lock(mu_);
  Tally t;
  for (const auto& [r, tally] : rounds_) {
    const auto& x = d == Direction::up ? tally.up : tally.down;
    t.bytes += x.bytes;
    t.frames += x.frames;
  }
  return t;
}

void CommMeter::clear() {
  std::lock_guard lock(mu_);
  rounds_.clear();
}

}  // namespace pefll::transport
