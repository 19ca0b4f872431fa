#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pefll/data/examples.hpp"

namespace pefll::data {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kSide = 32;
inline constexpr std::size_t kPixels = kChannels * kSide * kSide;  // 3072

/// Raw labeled images, stored as 8-bit CHW planes (32x32x3 each).
struct Dataset {
  std::vector<std::uint8_t> pixels;  // size() * kPixels
  std::vector<std::uint32_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * kPixels, kPixels};
  }
  /// Throws std::invalid_argument when lengths or labels are inconsistent.
  void validate() const;
  /// Example indices per class.
  std::vector<std::vector<std::uint32_t>> by_class() const;
};

/// Scale to [0,1], then standardize each channel.
struct Normalizer {
  std::array<double, kChannels> mean{0.0, 0.0, 0.0};
  std::array<double, kChannels> stddev{1.0, 1.0, 1.0};

  static Normalizer fit(const Dataset& ds);
  float apply(std::uint8_t value, std::size_t channel) const {
    return float((value / 255.0 - mean[channel]) / stddev[channel]);
  }
  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

/// Normalized float examples for the given dataset rows.
Examples gather(const Dataset& ds, std::span<const std::uint32_t> rows, const Normalizer& norm);

struct ClientDataset {
  std::uint32_t client_id = 0;
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> val;
  std::vector<std::uint32_t> test;
  std::vector<double> proportions;  // class proportions, sums to 1

  std::size_t size() const { return train.size() + val.size() + test.size(); }
  std::vector<std::uint32_t> all() const;
};

struct Population {
  std::size_t num_classes = 0;
  std::vector<ClientDataset> clients;
  std::vector<std::uint32_t> seen_ids;
  std::vector<std::uint32_t> unseen_ids;

  /// Partition checks: disjoint indices, seen/unseen cover all ids, valid proportions.
  void validate(std::size_t dataset_size) const;
};

struct SplitOptions {
  double seen_fraction = 0.9;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

/// Each client gets `classes_per_client` distinct classes, balanced so that
/// every class is held by roughly the same number of clients; each class's
/// examples are divided equally among its holders.
Population fixed_classes_split(const Dataset& ds, std::size_t n, std::size_t classes_per_client,
                               std::mt19937_64& rng, const SplitOptions& opt = {});

/// Class proportions per client drawn from a symmetric Dirichlet(alpha); every
/// client receives `per_client` examples (default: dataset size / n).
Population dirichlet_split(const Dataset& ds, std::size_t n, double alpha, std::mt19937_64& rng,
                           std::optional<std::size_t> per_client = std::nullopt,
                           const SplitOptions& opt = {});

/// Seen clients drawn with alpha_train, unseen clients with alpha_new.
Population extrapolation_population(const Dataset& ds, std::size_t n, double alpha_train,
                                    double alpha_new, std::mt19937_64& rng,
                                    std::optional<std::size_t> per_client = std::nullopt,
                                    const SplitOptions& opt = {});

/// Symmetric Dirichlet sample via normalized Gamma variates.
std::vector<double> sample_dirichlet(std::size_t dim, double alpha, std::mt19937_64& rng);

/// Shannon entropy (nats) of a probability vector.
double entropy(std::span<const double> p);

enum class DatasetFormat { cifar_binary, idx_pair, csv };
DatasetFormat parse_dataset_format(const std::string& s);
std::string to_string(DatasetFormat f);

/// cifar-binary: concatenated 3073-byte records (label byte, 3072 CHW pixels).
/// idx-pair: a directory with `images.idx` ([N,3,32,32] or [N,32,32,3] or
/// [N,32,32] u8) and `labels.idx` ([N] u8).
/// csv: header `label,p0,...,p3071`, one CHW image per row.
/// Throws nn::ParseError with the byte offset of the first problem.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format);
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, std::size_t num_classes = 10);
Dataset parse_csv(const std::string& text);
Dataset parse_idx_pair(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

struct SynthOptions {
  double margin = 0.25;       // minimum distance between class colors in [0,1]^3
  double color_jitter = 0.08; // per-image deviation of the blob color
  double pixel_noise = 0.10;
  double blob_radius = 6.0;
};

/// Class-conditional colored Gaussian blobs on a gray background at a random
/// position; the class is carried by the blob color.
Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::mt19937_64& rng,
                      const SynthOptions& opt = {});
/// Class colors used by synth_dataset for the same rng state.
std::vector<std::array<double, 3>> synth_class_colors(std::size_t num_classes, double margin,
                                                      std::mt19937_64& rng);

/// Deterministic text form of a population (one block per client).
void write_manifest(std::ostream& out, const Population& pop);
Population read_manifest(std::istream& in);

}  // namespace pefll::data
