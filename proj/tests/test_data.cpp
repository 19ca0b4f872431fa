#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "pefll/data/dataset.hpp"
#include "pefll/nn/bytes.hpp"

using namespace pefll;
using namespace pefll::data;

namespace {

Dataset tiny_dataset(std::size_t classes, std::size_t per_class, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.num_classes = classes;
  std::uniform_int_distribution<int> px(0, 255);
  for (std::size_t r = 0; r < per_class; ++r)
    for (std::size_t k = 0; k < classes; ++k) {
      ds.labels.push_back(std::uint32_t(k));
      for (std::size_t p = 0; p < kPixels; ++p) ds.pixels.push_back(std::uint8_t(px(rng)));
    }
  return ds;
}

std::vector<std::uint8_t> idx_bytes(std::vector<std::uint32_t> dims, std::span<const std::uint8_t> data) {
  std::vector<std::uint8_t> b = {0, 0, 0x08, std::uint8_t(dims.size())};
  for (auto d : dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(d >> s));
  b.insert(b.end(), data.begin(), data.end());
  return b;
}

std::size_t distinct_labels(const Dataset& ds, const ClientDataset& c) {
  std::set<std::uint32_t> s;
  for (auto i : c.all()) s.insert(ds.labels[i]);
  return s.size();
}

}  // namespace

TEST_CASE("synthetic data has the requested counts and is deterministic") {
  std::mt19937_64 a(5), b(5);
  const auto x = synth_dataset(4, 7, a);
  const auto y = synth_dataset(4, 7, b);
  CHECK(x.size() == 28);
  CHECK(x.pixels.size() == 28 * kPixels);
  CHECK(x.num_classes == 4);
  CHECK(x.pixels == y.pixels);
  CHECK(x.labels == y.labels);
  for (std::size_t k = 0; k < 4; ++k) CHECK(x.by_class()[k].size() == 7);
}

TEST_CASE("synthetic class colors keep their margin") {
  std::mt19937_64 rng(2);
  const auto colors = synth_class_colors(10, 0.3, rng);
  REQUIRE(colors.size() == 10);
  for (std::size_t i = 0; i < colors.size(); ++i)
    for (std::size_t j = i + 1; j < colors.size(); ++j) {
      const double d = std::hypot(colors[i][0] - colors[j][0], colors[i][1] - colors[j][1],
                                  colors[i][2] - colors[j][2]);
      CHECK(d >= 0.3);
    }
  std::mt19937_64 r2(2);
  CHECK_THROWS(synth_class_colors(50, 2.0, r2));
}

TEST_CASE("normalizer standardizes each channel") {
  const auto ds = tiny_dataset(3, 20);
  const auto norm = Normalizer::fit(ds);
  std::vector<std::uint32_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0u);
  const auto ex = gather(ds, rows, norm);
  REQUIRE(ex.size() == ds.size());
  const std::size_t plane = kSide * kSide;
  for (std::size_t c = 0; c < kChannels; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = ex.images.values[i * kPixels + c * plane + p];
        s += v;
        s2 += v * v;
      }
    const double n = double(ds.size() * plane);
    CHECK(std::abs(s / n) < 1e-4);
    CHECK(s2 / n - (s / n) * (s / n) == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK(gather(ds, {}, norm).empty());
}

TEST_CASE("fixed-class split partitions the data with the requested label sets") {
  const auto ds = tiny_dataset(10, 40);
  for (std::size_t cpc : {2u, 5u}) {
    CAPTURE(cpc);
    std::mt19937_64 rng(9);
    const auto pop = fixed_classes_split(ds, 20, cpc, rng);
    pop.validate(ds.size());
    CHECK(pop.clients.size() == 20);
    CHECK(pop.unseen_ids.size() == 2);
    CHECK(pop.seen_ids.size() == 18);
    std::size_t total = 0;
    std::vector<std::size_t> holders(10, 0);
    for (const auto& c : pop.clients) {
      total += c.size();
      CHECK(distinct_labels(ds, c) == cpc);
      CHECK(std::accumulate(c.proportions.begin(), c.proportions.end(), 0.0) == doctest::Approx(1.0));
      for (std::size_t k = 0; k < 10; ++k) holders[k] += c.proportions[k] > 0;
    }
    CHECK(total == ds.size());
    const auto [lo, hi] = std::minmax_element(holders.begin(), holders.end());
    CHECK(*hi - *lo <= 1);
  }
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(fixed_classes_split(ds, 3, 2, rng), std::invalid_argument);
}

TEST_CASE("splits are deterministic for a seed") {
  const auto ds = tiny_dataset(5, 30);
  std::mt19937_64 a(4), b(4);
  std::ostringstream x, y;
  write_manifest(x, dirichlet_split(ds, 10, 0.5, a));
  write_manifest(y, dirichlet_split(ds, 10, 0.5, b));
  CHECK(x.str() == y.str());
}

TEST_CASE("dirichlet split") {
  const auto ds = tiny_dataset(10, 100);
  std::mt19937_64 rng(3);
  const auto pop = dirichlet_split(ds, 25, 0.3, rng, 30);
  pop.validate(ds.size());
  for (const auto& c : pop.clients) {
    CHECK(c.size() == 30);
    CHECK(std::accumulate(c.proportions.begin(), c.proportions.end(), 0.0) == doctest::Approx(1.0));
    for (double p : c.proportions) CHECK(p >= 0.0);
    CHECK(c.test.size() == 3);
    CHECK(c.val.size() == 3);
  }
}

TEST_CASE("dirichlet samples concentrate as alpha grows") {
  std::mt19937_64 rng(8);
  const double uniform = std::log(10.0);
  double small = 0, big = 0, huge = 0;
  for (int t = 0; t < 200; ++t) {
    const auto p = sample_dirichlet(10, 1000.0, rng);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
    for (double x : p) CHECK(std::abs(x - 0.1) < 0.03);
    huge += entropy(sample_dirichlet(10, 1000.0, rng));
    big += entropy(sample_dirichlet(10, 1.0, rng));
    small += entropy(sample_dirichlet(10, 0.1, rng));
  }
  CHECK(small < big);
  CHECK(big < huge);
  CHECK(huge / 200 == doctest::Approx(uniform).epsilon(0.01));
}

TEST_CASE("entropy") {
  const std::vector<double> one_hot = {0, 1, 0}, uniform = {0.25, 0.25, 0.25, 0.25};
  CHECK(entropy(one_hot) == 0.0);
  CHECK(entropy(uniform) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("extrapolation population uses separate concentration for new clients") {
  const auto ds = tiny_dataset(10, 100);
  std::mt19937_64 rng(6);
  const auto pop = extrapolation_population(ds, 40, 1000.0, 0.05, rng, 20);
  pop.validate(ds.size());
  double seen = 0, unseen = 0;
  for (auto id : pop.seen_ids) seen += entropy(pop.clients[id].proportions);
  for (auto id : pop.unseen_ids) unseen += entropy(pop.clients[id].proportions);
  CHECK(seen / double(pop.seen_ids.size()) > unseen / double(pop.unseen_ids.size()) + 0.5);
}

TEST_CASE("manifest round-trip") {
  const auto ds = tiny_dataset(4, 25);
  std::mt19937_64 rng(2);
  const auto pop = dirichlet_split(ds, 6, 0.5, rng);
  std::stringstream s;
  write_manifest(s, pop);
  const auto back = read_manifest(s);
  std::ostringstream again;
  write_manifest(again, back);
  CHECK(again.str() == s.str());
  CHECK(back.seen_ids == pop.seen_ids);
  std::istringstream junk("not a manifest\n");
  CHECK_THROWS(read_manifest(junk));
}

TEST_CASE("cifar binary records") {
  const auto ds = tiny_dataset(10, 2);
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bytes.push_back(std::uint8_t(ds.labels[i]));
    const auto img = ds.image(i);
    bytes.insert(bytes.end(), img.begin(), img.end());
  }
  CHECK(bytes.size() == 20 * 3073);
  const auto back = parse_cifar_binary(bytes);
  CHECK(back.labels == ds.labels);
  CHECK(back.pixels == ds.pixels);

  bytes.resize(bytes.size() - 100);
  try {
    parse_cifar_binary(bytes);
    FAIL("truncated file accepted");
  } catch (const nn::ParseError& e) {
    CHECK(e.offset() == 19 * 3073);
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  std::vector<std::uint8_t> bad_label(3073, 0);
  bad_label[0] = 10;
  CHECK_THROWS_AS(parse_cifar_binary(bad_label), nn::ParseError);
}

TEST_CASE("idx pair layouts") {
  const auto ds = tiny_dataset(3, 2);
  const auto labels = idx_bytes({6}, std::vector<std::uint8_t>(ds.labels.begin(), ds.labels.end()));
  SUBCASE("channel-first") {
    const auto back = parse_idx_pair(idx_bytes({6, 3, 32, 32}, ds.pixels), labels);
    CHECK(back.pixels == ds.pixels);
    CHECK(back.labels == ds.labels);
  }
  SUBCASE("channel-last") {
    std::vector<std::uint8_t> hwc(ds.pixels.size());
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t p = 0; p < 1024; ++p)
        for (std::size_t c = 0; c < 3; ++c) hwc[i * kPixels + p * 3 + c] = ds.pixels[i * kPixels + c * 1024 + p];
    CHECK(parse_idx_pair(idx_bytes({6, 32, 32, 3}, hwc), labels).pixels == ds.pixels);
  }
  SUBCASE("grayscale is replicated") {
    std::vector<std::uint8_t> gray(6 * 1024, 77);
    const auto back = parse_idx_pair(idx_bytes({6, 32, 32}, gray), labels);
    CHECK(std::all_of(back.pixels.begin(), back.pixels.end(), [](auto v) { return v == 77; }));
  }
  SUBCASE("truncated payload") {
    auto im = idx_bytes({6, 3, 32, 32}, ds.pixels);
    im.pop_back();
    CHECK_THROWS_AS(parse_idx_pair(im, labels), nn::ParseError);
  }
  SUBCASE("count mismatch") {
    const auto short_labels = idx_bytes({5}, std::vector<std::uint8_t>(5, 0));
    CHECK_THROWS_AS(parse_idx_pair(idx_bytes({6, 3, 32, 32}, ds.pixels), short_labels), nn::ParseError);
  }
}

TEST_CASE("csv loader") {
  const auto ds = tiny_dataset(2, 1);
  std::string text = "label";
  for (std::size_t k = 0; k < kPixels; ++k) text += ",p" + std::to_string(k);
  text += "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    text += std::to_string(ds.labels[i]);
    for (auto v : ds.image(i)) text += "," + std::to_string(v);
    text += "\n";
  }
  const auto back = parse_csv(text);
  CHECK(back.pixels == ds.pixels);
  CHECK(back.labels == ds.labels);
  CHECK_THROWS_AS(parse_csv("lbl,p0\n"), nn::ParseError);
  auto truncated = text.substr(0, text.size() - 40);
  CHECK_THROWS_AS(parse_csv(truncated), nn::ParseError);
}

TEST_CASE("load_dataset reads each format from disk") {
  const auto dir = std::filesystem::temp_directory_path() / "pefll_test_data";
  std::filesystem::create_directories(dir);
  const auto ds = tiny_dataset(3, 2);
  {
    std::ofstream f(dir / "images.idx", std::ios::binary);
    const auto b = idx_bytes({6, 3, 32, 32}, ds.pixels);
    f.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
    std::ofstream g(dir / "labels.idx", std::ios::binary);
    const auto l = idx_bytes({6}, std::vector<std::uint8_t>(ds.labels.begin(), ds.labels.end()));
    g.write(reinterpret_cast<const char*>(l.data()), std::streamsize(l.size()));
  }
  CHECK(load_dataset(dir, DatasetFormat::idx_pair).pixels == ds.pixels);
  CHECK(parse_dataset_format("csv") == DatasetFormat::csv);
  CHECK(to_string(DatasetFormat::cifar_binary) == "cifar-binary");
  CHECK_THROWS(parse_dataset_format("png"));
  CHECK_THROWS(load_dataset(dir / "missing.bin", DatasetFormat::cifar_binary));
  std::filesystem::remove_all(dir);
}
