#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "pefll/data/dataset.hpp"

namespace pefll::data {

void Dataset::validate() const {
  if (pixels.size() != labels.size() * kPixels)
    throw std::invalid_argument("dataset has " + std::to_string(pixels.size()) + " pixel bytes for " +
                                std::to_string(labels.size()) + " labels");
  if (num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " of example " + std::to_string(i) +
                                  " is outside [0, " + std::to_string(num_classes) + ")");
}

std::vector<std::vector<std::uint32_t>> Dataset::by_class() const {
  std::vector<std::vector<std::uint32_t>> out(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) out.at(labels[i]).push_back(std::uint32_t(i));
  return out;
}

Normalizer Normalizer::fit(const Dataset& ds) {
  Normalizer n;
  if (ds.size() == 0) return n;
  const std::size_t plane = kSide * kSide;
  for (std::size_t c = 0; c < kChannels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* p = ds.pixels.data() + i * kPixels + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double x = p[k] / 255.0;
        sum += x;
        sq += x * x;
      }
    }
    const double count = double(ds.size() * plane);
    n.mean[c] = sum / count;
    n.stddev[c] = std::sqrt(std::max(sq / count - n.mean[c] * n.mean[c], 1e-12));
  }
  return n;
}

Examples gather(const Dataset& ds, std::span<const std::uint32_t> rows, const Normalizer& norm) {
  if (rows.empty()) return {};
  Examples ex{nn::Tensor<float>(nn::Shape{rows.size(), kChannels, kSide, kSide}), {}};
  const std::size_t plane = kSide * kSide;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto img = ds.image(rows[r]);
    float* dst = ex.images.data() + r * kPixels;
    for (std::size_t k = 0; k < kPixels; ++k) dst[k] = norm.apply(img[k], k / plane);
    ex.labels.push_back(ds.labels[rows[r]]);
  }
  return ex;
}

std::vector<std::uint32_t> ClientDataset::all() const {
  std::vector<std::uint32_t> out = train;
  out.insert(out.end(), val.begin(), val.end());
  out.insert(out.end(), test.begin(), test.end());
  return out;
}

void Population::validate(std::size_t dataset_size) const {
  std::vector<bool> used(dataset_size, false);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const auto& c = clients[i];
    if (c.client_id != i) throw std::invalid_argument("client ids must be 0..n-1 in order");
    if (c.proportions.size() != num_classes)
      throw std::invalid_argument("client " + std::to_string(i) + " proportions have wrong length");
    double s = 0.0;
    for (double p : c.proportions) {
      if (!(p >= 0.0)) throw std::invalid_argument("negative class proportion");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("class proportions do not sum to 1");
    for (auto idx : c.all()) {
      if (idx >= dataset_size) throw std::invalid_argument("example index out of range");
      if (used[idx]) throw std::invalid_argument("example " + std::to_string(idx) + " assigned twice");
      used[idx] = true;
    }
  }
  std::set<std::uint32_t> ids(seen_ids.begin(), seen_ids.end());
  for (auto u : unseen_ids)
    if (!ids.insert(u).second) throw std::invalid_argument("client in both seen and unseen sets");
  if (ids.size() != clients.size() || (!ids.empty() && *ids.rbegin() >= clients.size()))
    throw std::invalid_argument("seen and unseen ids do not cover the population");
}

std::vector<double> sample_dirichlet(std::size_t dim, double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("Dirichlet concentration must be > 0");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(dim);
  for (;;) {
    double s = 0.0;
    for (auto& x : p) s += (x = gamma(rng));
    if (s > 0.0 && std::isfinite(s)) {
      for (auto& x : p) x /= s;
      return p;
    }
  }
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

namespace {

// Shuffle a client's examples and cut them into train/val/test.
void split_client(ClientDataset& c, std::vector<std::uint32_t> idx, const SplitOptions& opt,
                  std::mt19937_64& rng) {
  std::sort(idx.begin(), idx.end());
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t m = idx.size();
  std::size_t n_test = std::size_t(std::llround(opt.test_fraction * double(m)));
  std::size_t n_val = std::size_t(std::llround(opt.val_fraction * double(m)));
  while (n_test + n_val >= m && (n_test > 0 || n_val > 0)) {
    if (n_val > 0) --n_val;
    else --n_test;
  }
  c.test.assign(idx.begin(), idx.begin() + n_test);
  c.val.assign(idx.begin() + n_test, idx.begin() + n_test + n_val);
  c.train.assign(idx.begin() + n_test + n_val, idx.end());
  std::sort(c.train.begin(), c.train.end());
  std::sort(c.val.begin(), c.val.end());
  std::sort(c.test.begin(), c.test.end());
}

void assign_seen(Population& pop, double seen_fraction, std::mt19937_64& rng) {
  const std::size_t n = pop.clients.size();
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t n_unseen = std::size_t(std::llround((1.0 - seen_fraction) * double(n)));
  if (n_unseen >= n) n_unseen = n - 1;
  pop.unseen_ids.assign(ids.begin(), ids.begin() + n_unseen);
  pop.seen_ids.assign(ids.begin() + n_unseen, ids.end());
  std::sort(pop.seen_ids.begin(), pop.seen_ids.end());
  std::sort(pop.unseen_ids.begin(), pop.unseen_ids.end());
}

// Largest-remainder rounding of quota * p to integers summing to quota.
std::vector<std::size_t> apportion(std::span<const double> p, std::size_t quota) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t total = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double exact = p[k] * double(quota);
    counts[k] = std::size_t(std::floor(exact));
    total += counts[k];
    rem.emplace_back(exact - double(counts[k]), k);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; total < quota; ++i, ++total) ++counts[rem[i % rem.size()].second];
  return counts;
}

Population dirichlet_population(const Dataset& ds, std::span<const double> alphas,
                                std::optional<std::size_t> per_client, std::mt19937_64& rng,
                                const SplitOptions& opt, std::vector<std::uint32_t> unseen) {
  ds.validate();
  const std::size_t n = alphas.size();
  if (n == 0) throw std::invalid_argument("population needs at least one client");
  const std::size_t quota = per_client.value_or(ds.size() / n);
  if (quota == 0 || quota * n > ds.size())
    throw std::invalid_argument("dataset of " + std::to_string(ds.size()) + " examples cannot give " +
                                std::to_string(n) + " clients " + std::to_string(quota) + " examples each");
  auto pools = ds.by_class();
  for (auto& pool : pools) std::shuffle(pool.begin(), pool.end(), rng);

  Population pop;
  pop.num_classes = ds.num_classes;
  for (std::size_t i = 0; i < n; ++i) {
    ClientDataset c;
    c.client_id = std::uint32_t(i);
    c.proportions = sample_dirichlet(ds.num_classes, alphas[i], rng);
    auto want = apportion(c.proportions, quota);
    std::vector<std::uint32_t> mine;
    std::size_t deficit = 0;
    for (std::size_t k = 0; k < want.size(); ++k) {
      const std::size_t take = std::min(want[k], pools[k].size());
      deficit += want[k] - take;
      mine.insert(mine.end(), pools[k].end() - take, pools[k].end());
      pools[k].resize(pools[k].size() - take);
    }
    // Exhausted classes: draw the remainder from the classes that still have
    // examples, proportionally to their remaining pool sizes.
    while (deficit > 0) {
      std::vector<double> w(pools.size());
      for (std::size_t k = 0; k < pools.size(); ++k) w[k] = double(pools[k].size());
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      const std::size_t k = pick(rng);
      mine.push_back(pools[k].back());
      pools[k].pop_back();
      --deficit;
    }
    split_client(c, std::move(mine), opt, rng);
    pop.clients.push_back(std::move(c));
  }
  if (unseen.empty()) {
    assign_seen(pop, opt.seen_fraction, rng);
  } else {
    pop.unseen_ids = std::move(unseen);
    for (std::uint32_t i = 0; i < n; ++i)
      if (!std::binary_search(pop.unseen_ids.begin(), pop.unseen_ids.end(), i)) pop.seen_ids.push_back(i);
  }
  return pop;
}

}  // namespace

Population fixed_classes_split(const Dataset& ds, std::size_t n, std::size_t classes_per_client,
                               std::mt19937_64& rng, const SplitOptions& opt) {
  ds.validate();
  const std::size_t C = ds.num_classes;
  if (n == 0) throw std::invalid_argument("population needs at least one client");
  if (classes_per_client == 0 || classes_per_client > C)
    throw std::invalid_argument("classes_per_client must be in [1, " + std::to_string(C) + "]");
  if (n * classes_per_client < C)
    throw std::invalid_argument("n * classes_per_client < C leaves classes without a client");

  // Balanced class assignment: each client takes the least-used classes, ties random.
  std::vector<std::size_t> usage(C, 0);
  std::vector<std::vector<std::size_t>> assigned(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return usage[a] < usage[b]; });
    assigned[i].assign(order.begin(), order.begin() + classes_per_client);
    std::sort(assigned[i].begin(), assigned[i].end());
    for (auto k : assigned[i]) ++usage[k];
  }

  auto pools = ds.by_class();
  std::vector<std::vector<std::uint32_t>> mine(n);
  for (std::size_t k = 0; k < C; ++k) {
    std::vector<std::size_t> holders;
    for (std::size_t i = 0; i < n; ++i)
      if (std::binary_search(assigned[i].begin(), assigned[i].end(), k)) holders.push_back(i);
    auto& pool = pools[k];
    if (pool.size() < holders.size())
      throw std::invalid_argument("class " + std::to_string(k) + " has " + std::to_string(pool.size()) +
                                  " examples for " + std::to_string(holders.size()) + " clients; n too large");
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t h = 0; h < holders.size(); ++h) {
      const std::size_t lo = pool.size() * h / holders.size(), hi = pool.size() * (h + 1) / holders.size();
      mine[holders[h]].insert(mine[holders[h]].end(), pool.begin() + lo, pool.begin() + hi);
    }
  }

  Population pop;
  pop.num_classes = C;
  for (std::size_t i = 0; i < n; ++i) {
    ClientDataset c;
    c.client_id = std::uint32_t(i);
    c.proportions.assign(C, 0.0);
    for (auto idx : mine[i]) c.proportions[ds.labels[idx]] += 1.0 / double(mine[i].size());
    split_client(c, std::move(mine[i]), opt, rng);
    pop.clients.push_back(std::move(c));
  }
  assign_seen(pop, opt.seen_fraction, rng);
  return pop;
}

Population dirichlet_split(const Dataset& ds, std::size_t n, double alpha, std::mt19937_64& rng,
                           std::optional<std::size_t> per_client, const SplitOptions& opt) {
  const std::vector<double> alphas(n, alpha);
  return dirichlet_population(ds, alphas, per_client, rng, opt, {});
}

Population extrapolation_population(const Dataset& ds, std::size_t n, double alpha_train,
                                    double alpha_new, std::mt19937_64& rng,
                                    std::optional<std::size_t> per_client, const SplitOptions& opt) {
  if (n < 2) throw std::invalid_argument("extrapolation needs at least two clients");
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t n_unseen = std::clamp<std::size_t>(std::size_t(std::llround((1.0 - opt.seen_fraction) * double(n))), 1, n - 1);
  std::vector<std::uint32_t> unseen(ids.begin(), ids.begin() + n_unseen);
  std::sort(unseen.begin(), unseen.end());
  std::vector<double> alphas(n, alpha_train);
  for (auto u : unseen) alphas[u] = alpha_new;
  return dirichlet_population(ds, alphas, per_client, rng, opt, std::move(unseen));
}

void write_manifest(std::ostream& out, const Population& pop) {
  out << "pefll-population 1\n";
  out << "classes " << pop.num_classes << "\n";
  out << "clients " << pop.clients.size() << "\n";
  auto list = [&](const char* key, const std::vector<std::uint32_t>& v) {
    out << key << ' ' << v.size();
    for (auto x : v) out << ' ' << x;
    out << '\n';
  };
  list("seen", pop.seen_ids);
  list("unseen", pop.unseen_ids);
  for (const auto& c : pop.clients) {
    out << "client " << c.client_id << "\n";
    std::ostringstream pi;
    pi.precision(17);
    pi << "pi";
    for (double p : c.proportions) pi << ' ' << p;
    out << pi.str() << '\n';
    list("train", c.train);
    list("val", c.val);
    list("test", c.test);
  }
}

Population read_manifest(std::istream& in) {
  auto expect = [&](const std::string& key) {
    std::string got;
    if (!(in >> got) || got != key) throw std::invalid_argument("manifest: expected '" + key + "', got '" + got + "'");
  };
  auto read_list = [&](const std::string& key) {
    expect(key);
    std::size_t count = 0;
    in >> count;
    std::vector<std::uint32_t> v(count);
    for (auto& x : v) in >> x;
    if (!in) throw std::invalid_argument("manifest: truncated '" + key + "' list");
    return v;
  };
  expect("pefll-population");
  int version = 0;
  in >> version;
  if (version != 1) throw std::invalid_argument("manifest: unsupported version");
  Population pop;
  std::size_t n = 0;
  expect("classes");
  in >> pop.num_classes;
  expect("clients");
  in >> n;
  pop.seen_ids = read_list("seen");
  pop.unseen_ids = read_list("unseen");
  for (std::size_t i = 0; i < n; ++i) {
    ClientDataset c;
    expect("client");
    in >> c.client_id;
    expect("pi");
    c.proportions.resize(pop.num_classes);
    for (auto& p : c.proportions) in >> p;
    c.train = read_list("train");
    c.val = read_list("val");
    c.test = read_list("test");
    pop.clients.push_back(std::move(c));
  }
  if (!in) throw std::invalid_argument("manifest: truncated");
  return pop;
}

}  // namespace pefll::data
