#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pefll/analysis/analysis.hpp"
#include "pefll/baselines/baselines.hpp"
#include "pefll/cli/checkpoint.hpp"
#include "pefll/cli/config.hpp"
#include "pefll/data/dataset.hpp"

namespace pefll::cli {

/// Everything a run derives from its configuration before training starts.
struct Experiment {
  ExperimentConfig cfg;
  data::Dataset dataset;
  data::Normalizer norm;
  data::Population population;
  protocol::Architecture arch;
  std::vector<protocol::Client> clients;  // indexed by client id
  std::vector<data::Examples> test_sets;
  std::vector<std::vector<std::uint32_t>> label_sets;

  static Experiment build(const ExperimentConfig& cfg);
  std::vector<const protocol::Client*> seen_clients() const;
  std::vector<std::vector<double>> proportions() const;
};

protocol::Architecture make_architecture(const ExperimentConfig& cfg);
data::Dataset load_source(const ExperimentConfig& cfg);

/// Metrics of a PeFLL state: accuracy of every client's generated model on its
/// test split, optional gradient norm and descriptor correlation.
analysis::MetricsRow evaluate_pefll(const Experiment& ex, const protocol::ServerState& state);
analysis::MetricsRow evaluate_global(const Experiment& ex, const baselines::GlobalModelState& state);

struct RunOptions {
  std::optional<std::filesystem::path> resume;
  std::ostream* log = nullptr;
};

struct RunResult {
  std::vector<analysis::MetricsRow> rows;
  std::filesystem::path metrics_path;
  std::optional<std::filesystem::path> checkpoint_path;
};

/// Trains according to `cfg`, writing `metrics.csv`, `config.txt` and
/// `checkpoint.bin` to the output directory. A metrics row is written before
/// the first round, every `eval.every` rounds and after the last round; the
/// checkpoint is refreshed with every row.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {});

/// Rebuilds the configuration stored in a checkpoint.
ExperimentConfig checkpoint_config(const Checkpoint& c);
protocol::ServerState checkpoint_server_state(const Checkpoint& c);

struct PredictOptions {
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  bool unlabeled = false;
};

/// Generated model for the client data in `data_path`, written as a tensor
/// fragment to `<out>.bin` with a text manifest `<out>.manifest`.
void predict_to_file(const Checkpoint& ckpt, const std::filesystem::path& data_path, data::DatasetFormat format,
                     const PredictOptions& opt, const std::filesystem::path& out);

/// Named preset grids for `sweep`.
struct SweepCell {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};
std::vector<SweepCell> sweep_preset(const std::string& name);
std::vector<std::string> sweep_preset_names();

}  // namespace pefll::cli
