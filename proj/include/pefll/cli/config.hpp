#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pefll/protocol/protocol.hpp"

namespace pefll::cli {

/// Invalid configuration; the message starts with the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what) : std::invalid_argument(key + ": " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct DataConfig {
  std::string source = "synth";  // "synth" or a dataset path
  std::string format = "cifar-binary";
  std::size_t num_classes = 10;
  std::size_t synth_per_class = 600;
  double synth_margin = 0.25;
  double synth_jitter = 0.08;
  double synth_noise = 0.10;
  std::size_t clients = 100;
  std::string split = "classes";  // classes | dirichlet | extrapolation
  std::size_t classes_per_client = 2;
  double alpha = 0.1;
  double alpha_new = 0.1;
  std::size_t per_client = 0;  // 0: even share of the dataset
  double seen_fraction = 0.9;
  std::uint64_t seed = 1;
};

struct ModelConfig {
  std::string arch = "lenet";
  std::string embedding = "lenet-conv";
  std::string hyper = "M";
  std::size_t descriptor_dim = 0;  // 0: clients / 4
};

inline protocol::RoundConfig participation_default() {
  protocol::RoundConfig r;
  r.clients_per_round = 0;
  return r;
}

struct TrainConfig {
  std::string algorithm = "pefll";  // pefll | fedavg | local
  std::size_t rounds = 5000;
  protocol::RoundConfig round = participation_default();  // clients_per_round 0: use participation
  double participation = 0.05;
  std::uint64_t seed = 1;
};

struct LocalTrainConfig {
  std::size_t epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch = 32;
};

struct EvalConfig {
  std::size_t every = 100;
  bool masked = false;
  bool grad_norm = true;
  bool spearman = true;
  std::size_t bound_samples = 8;
  double bound_alpha = 1.0;
  double bound_delta = 0.05;
};

struct TransportConfig {
  std::string kind = "loopback";  // loopback | tcp
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  LocalTrainConfig local;
  EvalConfig eval;
  TransportConfig transport;
  std::string out_dir = "runs/default";

  /// Throws ConfigError naming the first invalid key.
  void validate() const;

  std::size_t descriptor_dim() const;
  std::size_t seen_count() const;
  /// Clients per round after resolving participation.
  std::size_t clients_per_round() const;
  protocol::RoundConfig round_config() const;
};

/// Applies `key=value` lines on top of `base`. Blank lines and `#` comments
/// are skipped; unknown keys and malformed values raise ConfigError.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});
/// Sets one key; the same rules as a config line.
void set_option(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Every key with its current value, one per line, in a fixed order.
std::string to_text(const ExperimentConfig& cfg);
/// As `to_text` without the transport and output keys, so checkpoints of the
/// same run agree across backends and directories.
std::string checkpoint_text(const ExperimentConfig& cfg);

/// Digest of the keys that determine the training trajectory. Round count
/// and output location are excluded so a run can be extended on resume.
std::uint64_t trajectory_digest(const ExperimentConfig& cfg);

struct KeyDoc {
  std::string key;
  std::string default_value;
  std::string description;
};
std::vector<KeyDoc> config_reference();

std::uint64_t fnv1a(std::string_view bytes);

}  // namespace pefll::cli
