#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pefll/data/examples.hpp"
#include "pefll/protocol/protocol.hpp"

namespace pefll::analysis {

/// Index of the largest entry among `allowed` classes (all when empty);
/// ties go to the lowest class index.
std::size_t masked_argmax(std::span<const float> scores, std::span<const std::uint32_t> allowed = {});

/// Fraction of examples whose (optionally masked) argmax equals the label.
/// `mask` restricts predictions to the given classes; nullopt means no mask.
template <typename T>
double eval_accuracy(const nn::NetworkSpec& client, const nn::BasicParamVector<T>& theta,
                     const data::BasicExamples<T>& test,
                     std::optional<std::span<const std::uint32_t>> mask = std::nullopt);

/// Sorted distinct labels present in `ex`.
std::vector<std::uint32_t> label_set(std::span<const std::uint32_t> labels);

using Matrix = std::vector<std::vector<double>>;

/// Pairwise Euclidean distances; symmetric with a zero diagonal.
Matrix distance_matrix(const std::vector<std::vector<double>>& points);

/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> x);

/// Pearson correlation of the rank vectors; nullopt when either has zero
/// rank variance.
std::optional<double> spearman_rank_corr(std::span<const double> a, std::span<const double> b);

/// Mean over `query_ids` of the rank correlation between row i of the
/// descriptor distance matrix and row i of the proportion distance matrix,
/// both restricted to j != i. Rows with undefined correlation are skipped;
/// nullopt when none is defined.
std::optional<double> descriptor_correlation(const std::vector<std::vector<double>>& descriptors,
                                             const std::vector<std::vector<double>>& proportions,
                                             std::span<const std::uint32_t> query_ids);

/// Descriptors of all clients from their full training data under eta_v.
template <typename T>
std::vector<std::vector<double>> client_descriptors(const protocol::Architecture& arch,
                                                    const nn::BasicParamVector<T>& eta_v,
                                                    std::span<const data::BasicExamples<T>> data);

/// Inputs of the generalization bound. Loss must lie in [0,1].
struct BoundInputs {
  double alpha_h = 1.0;
  double alpha_v = 1.0;
  double alpha_theta = 1.0;
  double delta = 0.05;
  std::size_t n = 1;  // clients
  std::size_t m = 1;  // examples per client
  double eta_h_sq = 0.0;
  double eta_v_sq = 0.0;
  std::vector<double> theta_sq;  // per-client squared norms of generated models
  double empirical_loss = 0.0;

  void validate() const;
};

struct BoundTerms {
  double empirical = 0.0;
  double meta = 0.0;    // complexity of the shared networks
  double client = 0.0;  // complexity of the generated models
  double total() const { return empirical + meta + client; }
};

BoundTerms pacbayes_bound(const BoundInputs& in);

struct BoundEstimate {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over draws
  std::size_t samples = 0;
  BoundTerms at_mean;   // deterministic bound at the unperturbed parameters
};

/// Monte-Carlo evaluation: draws (eta_h, eta_v) from isotropic Gaussians
/// around the server state, generates every client's model, and evaluates
/// the bound with the 0-1 training loss and the drawn model norms.
template <typename T>
BoundEstimate pacbayes_bound_mc(const protocol::Architecture& arch,
                                const protocol::BasicServerState<T>& server,
                                std::span<const data::BasicExamples<T>> client_data, double alpha_h,
                                double alpha_v, double alpha_theta, double delta,
                                std::size_t samples, std::mt19937_64& rng);

/// Squared norm of the exact objective gradient at the server state.
template <typename T>
double grad_norm_sq(const protocol::Architecture& arch, const protocol::BasicServerState<T>& server,
                    std::span<const protocol::BasicClient<T>* const> clients,
                    const protocol::RoundConfig& cfg);

struct MetricsRow {
  std::uint64_t round = 0;
  double train_client_acc = 0.0;
  double unseen_client_acc = 0.0;
  std::optional<double> mean_grad_norm_sq;  // empty when not tracked
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::optional<double> spearman;
};

inline constexpr const char* kMetricsHeader =
    "round,train_client_acc,unseen_client_acc,mean_grad_norm_sq,bytes_up,bytes_down,spearman";

/// Empty cells stand for values that were not computed.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsRow& row);
std::vector<MetricsRow> read_metrics(std::istream& in);

}  // namespace pefll::analysis
