#include "pefll/cli/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "pefll/nn/bytes.hpp"
#include "pefll/nn/fragment.hpp"

namespace pefll::cli {

namespace {
constexpr std::uint8_t kMagic[4] = {'P', 'F', 'C', 'K'};
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  nn::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u64(c.digest);
  w.u64(c.round);
  w.str(c.algorithm);
  w.str(c.config_text);
  w.str(c.rng_state);
  for (double m : c.norm.mean) w.f64(m);
  for (double s : c.norm.stddev) w.f64(s);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) nn::write_fragment(w, t);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  nn::ByteReader r(bytes);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw nn::ParseError("not a checkpoint file", 0);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw nn::ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint c;
  c.digest = r.u64();
  c.round = r.u64();
  c.algorithm = r.str();
  c.config_text = r.str();
  c.rng_state = r.str();
  for (double& m : c.norm.mean) m = r.f64();
  for (double& s : c.norm.stddev) s = r.f64();
  const auto count = r.u32();
  if (count > 16) throw nn::ParseError("implausible tensor count " + std::to_string(count), r.position() - 4);
  for (std::uint32_t i = 0; i < count; ++i) c.tensors.push_back(nn::read_flat_fragment<nn::ParamVector>(r));
  if (!r.done()) throw nn::ParseError("trailing bytes after checkpoint", r.position());
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

std::mt19937_64 rng_from_state(const std::string& state) {
  std::istringstream s(state);
  std::mt19937_64 rng;
  s >> rng;
  if (!s) throw std::invalid_argument("corrupt random generator state in checkpoint");
  return rng;
}

}  // namespace pefll::cli
