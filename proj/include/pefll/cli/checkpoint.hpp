#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pefll/data/dataset.hpp"
#include "pefll/nn/flat.hpp"

namespace pefll::cli {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Training state at a round boundary. Layout: "PFCK", u32 version, u64
/// digest, u64 round, str algorithm, str config, str rng, 6 f64 normalizer
/// statistics, u32 tensor count, tensor fragments. Strings are u32 length
/// plus bytes; all integers little-endian.
struct Checkpoint {
  std::uint64_t digest = 0;
  std::uint64_t round = 0;
  std::string algorithm;
  std::string config_text;
  std::string rng_state;
  data::Normalizer norm;
  std::vector<nn::ParamVector> tensors;  // pefll: eta_h, eta_v; fedavg: theta

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
/// Throws nn::ParseError with the byte offset of the first problem.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string rng_state(const std::mt19937_64& rng);
std::mt19937_64 rng_from_state(const std::string& state);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace pefll::cli
