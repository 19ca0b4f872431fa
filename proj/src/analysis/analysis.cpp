#include "pefll/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace pefll::analysis {

std::size_t masked_argmax(std::span<const float> scores, std::span<const std::uint32_t> allowed) {
  if (scores.empty()) throw std::invalid_argument("argmax of an empty row");
  std::size_t best = scores.size();
  auto consider = [&](std::size_t k) {
    if (k >= scores.size()) throw std::out_of_range("mask class outside the score row");
    if (best == scores.size() || scores[k] > scores[best] || (scores[k] == scores[best] && k < best)) best = k;
  };
  if (allowed.empty()) {
    for (std::size_t k = 0; k < scores.size(); ++k) consider(k);
  } else {
    for (auto k : allowed) consider(k);
  }
  return best;
}

template <typename T>
double eval_accuracy(const nn::NetworkSpec& client, const nn::BasicParamVector<T>& theta,
                     const data::BasicExamples<T>& test, std::optional<std::span<const std::uint32_t>> mask) {
  if (test.empty()) throw std::invalid_argument("accuracy on an empty test set");
  if (mask && mask->empty()) throw std::invalid_argument("empty class mask");
  const auto logits = nn::forward<T>(client.without_output_softmax(), theta.span(), test.images);
  const std::size_t C = client.output_dim;
  std::vector<float> row(C);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t k = 0; k < C; ++k) row[k] = float(logits.values[i * C + k]);
    const auto pred = masked_argmax(row, mask ? *mask : std::span<const std::uint32_t>{});
    correct += pred == test.labels[i];
  }
  return double(correct) / double(test.size());
}

std::vector<std::uint32_t> label_set(std::span<const std::uint32_t> labels) {
  std::vector<std::uint32_t> s(labels.begin(), labels.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

Matrix distance_matrix(const std::vector<std::vector<double>>& points) {
  if (points.size() < 2) throw std::invalid_argument("distance matrix needs at least two points");
  const std::size_t n = points.size();
  Matrix d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != points[0].size()) throw std::invalid_argument("points have different lengths");
    for (std::size_t j = 0; j < i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < points[i].size(); ++k) {
        const double t = points[i][k] - points[j][k];
        s += t * t;
      }
      d[i][j] = d[j][i] = std::sqrt(s);
    }
  }
  return d;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::optional<double> spearman_rank_corr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("rank correlation of vectors with different lengths");
  if (a.size() < 2) throw std::invalid_argument("rank correlation needs at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> descriptor_correlation(const std::vector<std::vector<double>>& descriptors,
                                             const std::vector<std::vector<double>>& proportions,
                                             std::span<const std::uint32_t> query_ids) {
  if (descriptors.size() != proportions.size())
    throw std::invalid_argument("descriptor and proportion lists differ in length");
  const auto dv = distance_matrix(descriptors);
  const auto dp = distance_matrix(proportions);
  bool degenerate = true;
  for (const auto& row : dp)
    for (double x : row) degenerate = degenerate && x == 0.0;
  if (degenerate) throw std::invalid_argument("all clients have identical class proportions");

  double sum = 0.0;
  std::size_t count = 0;
  for (auto i : query_ids) {
    std::vector<double> a, b;
    for (std::size_t j = 0; j < descriptors.size(); ++j) {
      if (j == i) continue;
      a.push_back(dv.at(i)[j]);
      b.push_back(dp.at(i)[j]);
    }
    if (const auto r = spearman_rank_corr(a, b)) {
      sum += *r;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / double(count);
}

template <typename T>
std::vector<std::vector<double>> client_descriptors(const protocol::Architecture& arch,
                                                    const nn::BasicParamVector<T>& eta_v,
                                                    std::span<const data::BasicExamples<T>> data) {
  std::vector<std::vector<double>> out;
  for (const auto& d : data) {
    const auto v = models::compute_descriptor(d, arch.embed, eta_v, arch.kind, arch.num_classes);
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

void BoundInputs::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0,1)");
  if (!(alpha_h > 0 && alpha_v > 0 && alpha_theta > 0)) throw std::invalid_argument("alphas must be > 0");
  if (n == 0 || m == 0) throw std::invalid_argument("n and m must be >= 1");
  if (eta_h_sq < 0 || eta_v_sq < 0) throw std::invalid_argument("squared norms must be >= 0");
  if (theta_sq.size() != n) throw std::invalid_argument("need one generated-model norm per client");
  if (!(empirical_loss >= 0.0 && empirical_loss <= 1.0)) throw std::invalid_argument("empirical loss must lie in [0,1]");
}

BoundTerms pacbayes_bound(const BoundInputs& in) {
  in.validate();
  const double n = double(in.n), m = double(in.m);
  double theta_total = 0.0;
  for (double t : in.theta_sq) theta_total += t;
  BoundTerms b;
  b.empirical = in.empirical_loss;
  b.meta = std::sqrt((in.eta_h_sq / (2.0 * in.alpha_h) + in.eta_v_sq / (2.0 * in.alpha_v) +
                      std::log(4.0 * std::sqrt(n) / in.delta)) /
                     (2.0 * n));
  b.client = std::sqrt((theta_total / (2.0 * in.alpha_theta) + std::log(8.0 * m * n / in.delta) + 1.0) / (2.0 * m * n));
  return b;
}

namespace {

template <typename T>
BoundInputs bound_inputs_at(const protocol::Architecture& arch, const nn::BasicParamVector<T>& eta_h,
                            const nn::BasicParamVector<T>& eta_v, std::span<const data::BasicExamples<T>> data,
                            double alpha_h, double alpha_v, double alpha_theta, double delta) {
  BoundInputs in;
  in.alpha_h = alpha_h;
  in.alpha_v = alpha_v;
  in.alpha_theta = alpha_theta;
  in.delta = delta;
  in.n = data.size();
  in.m = data.front().size();
  in.eta_h_sq = eta_h.squared_norm();
  in.eta_v_sq = eta_v.squared_norm();
  double loss = 0.0;
  for (const auto& d : data) {
    in.m = std::min(in.m, d.size());
    const auto v = models::compute_descriptor(d, arch.embed, eta_v, arch.kind, arch.num_classes);
    const auto theta = models::generate_personal_model(v, eta_h, arch.hyper);
    in.theta_sq.push_back(theta.squared_norm());
    loss += 1.0 - eval_accuracy(arch.client, theta, d);
  }
  in.empirical_loss = loss / double(data.size());
  return in;
}

}  // namespace

template <typename T>
BoundEstimate pacbayes_bound_mc(const protocol::Architecture& arch, const protocol::BasicServerState<T>& server,
                                std::span<const data::BasicExamples<T>> client_data, double alpha_h,
                                double alpha_v, double alpha_theta, double delta, std::size_t samples,
                                std::mt19937_64& rng) {
  if (client_data.empty()) throw std::invalid_argument("bound needs at least one client");
  if (samples == 0) throw std::invalid_argument("bound needs at least one Monte-Carlo sample");
  BoundEstimate est;
  est.samples = samples;
  est.at_mean = pacbayes_bound(
      bound_inputs_at(arch, server.eta_h, server.eta_v, client_data, alpha_h, alpha_v, alpha_theta, delta));
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> totals;
  for (std::size_t s = 0; s < samples; ++s) {
    auto eh = server.eta_h;
    auto ev = server.eta_v;
    const double sh = std::sqrt(alpha_h), sv = std::sqrt(alpha_v);
    for (auto& x : eh) x += T(sh * g(rng));
    for (auto& x : ev) x += T(sv * g(rng));
    auto in = bound_inputs_at(arch, eh, ev, client_data, alpha_h, alpha_v, alpha_theta, delta);
    // the meta term is evaluated at the posterior mean, not at the draw
    in.eta_h_sq = server.eta_h.squared_norm();
    in.eta_v_sq = server.eta_v.squared_norm();
    totals.push_back(pacbayes_bound(in).total());
  }
  est.mean = std::accumulate(totals.begin(), totals.end(), 0.0) / double(samples);
  double ss = 0.0;
  for (double t : totals) ss += (t - est.mean) * (t - est.mean);
  est.stddev = samples > 1 ? std::sqrt(ss / double(samples - 1)) : 0.0;
  return est;
}

template <typename T>
double grad_norm_sq(const protocol::Architecture& arch, const protocol::BasicServerState<T>& server,
                    std::span<const protocol::BasicClient<T>* const> clients, const protocol::RoundConfig& cfg) {
  return protocol::objective_gradient<T>(arch, server, clients, cfg).squared_norm();
}

namespace {

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(9);
  s << x;
  return s.str();
}

}  // namespace

void write_metrics_header(std::ostream& out) { out << kMetricsHeader << '\n'; }

void write_metrics_row(std::ostream& out, const MetricsRow& r) {
  out << r.round << ',' << fmt(r.train_client_acc) << ',' << fmt(r.unseen_client_acc) << ','
      << (r.mean_grad_norm_sq ? fmt(*r.mean_grad_norm_sq) : std::string()) << ',' << r.bytes_up << ',' << r.bytes_down << ','
      << (r.spearman ? fmt(*r.spearman) : std::string()) << '\n';
}

std::vector<MetricsRow> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::invalid_argument("metrics CSV: bad header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 6) f.emplace_back();
    if (f.size() != 7) throw std::invalid_argument("metrics CSV: expected 7 fields in '" + line + "'");
    MetricsRow r;
    r.round = std::stoull(f[0]);
    r.train_client_acc = std::stod(f[1]);
    r.unseen_client_acc = std::stod(f[2]);
    if (!f[3].empty()) r.mean_grad_norm_sq = std::stod(f[3]);
    r.bytes_up = std::stoull(f[4]);
    r.bytes_down = std::stoull(f[5]);
    if (!f[6].empty()) r.spearman = std::stod(f[6]);
    rows.push_back(r);
  }
  return rows;
}

#define PEFLL_INSTANTIATE(T)                                                                              \
  template double eval_accuracy<T>(const nn::NetworkSpec&, const nn::BasicParamVector<T>&,               \
                                   const data::BasicExamples<T>&,                                         \
                                   std::optional<std::span<const std::uint32_t>>);                        \
  template std::vector<std::vector<double>> client_descriptors<T>(                                        \
      const protocol::Architecture&, const nn::BasicParamVector<T>&, std::span<const data::BasicExamples<T>>); \
  template BoundEstimate pacbayes_bound_mc<T>(const protocol::Architecture&,                              \
                                              const protocol::BasicServerState<T>&,                      \
                                              std::span<const data::BasicExamples<T>>, double, double,   \
                                              double, double, std::size_t, std::mt19937_64&);             \
  template double grad_norm_sq<T>(const protocol::Architecture&, const protocol::BasicServerState<T>&,   \
                                  std::span<const protocol::BasicClient<T>* const>,                       \
                                  const protocol::RoundConfig&);

PEFLL_INSTANTIATE(float)
PEFLL_INSTANTIATE(double)
#undef PEFLL_INSTANTIATE

}  // namespace pefll::analysis
