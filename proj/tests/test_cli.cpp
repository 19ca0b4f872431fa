#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "pefll/cli/experiment.hpp"
#include "pefll/nn/bytes.hpp"

using namespace pefll;
using namespace pefll::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("pefll_cli_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& s) const { return path / s; }
};

ExperimentConfig small_run(const fs::path& out) {
  auto cfg = parse_config(
      "data.synth_per_class=24\n"
      "data.clients=8\n"
      "model.arch=compact\n"
      "model.hyper=S\n"
      "train.rounds=4\n"
      "train.local_steps=2\n"
      "train.clients_per_round=3\n"
      "train.descriptor_batch=8\n"
      "eval.every=2\n"
      "eval.spearman=false\n");
  cfg.out_dir = out.string();
  cfg.validate();
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string key_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

}  // namespace

TEST_CASE("config parsing applies lines and names the offending key") {
  const auto cfg = parse_config(
      "# comment line\n"
      "\n"
      "  train.lr = 0.02  \n"
      "train.local_steps=7\n"
      "eval.masked=true\n"
      "model.hyper=L\n");
  CHECK(cfg.train.round.lr == doctest::Approx(0.02));
  CHECK(cfg.train.round.local_steps == 7);
  CHECK(cfg.eval.masked);
  CHECK(cfg.model.hyper == "L");
  CHECK(cfg.data.clients == 100);

  CHECK(key_of([] { parse_config("train.bogus=1\n"); }) == "train.bogus");
  CHECK(key_of([] { parse_config("train.lr=fast\n"); }) == "train.lr");
  CHECK(key_of([] { parse_config("train.local_steps=-3\n"); }) == "train.local_steps");
  CHECK(key_of([] { parse_config("eval.masked=maybe\n"); }) == "eval.masked");
  CHECK(key_of([] { parse_config("no equals sign\n"); }) != "<no error>");

  auto bad = ExperimentConfig{};
  bad.data.split = "rings";
  CHECK(key_of([&] { bad.validate(); }) == "data.split");
  bad = {};
  bad.train.round.clients_per_round = 500;
  CHECK(key_of([&] { bad.validate(); }) == "train.clients_per_round");
  bad = {};
  bad.transport.kind = "pigeon";
  CHECK(key_of([&] { bad.validate(); }) == "transport.kind");
  CHECK_NOTHROW(ExperimentConfig{}.validate());
}

TEST_CASE("config text round-trips and every documented key parses") {
  ExperimentConfig cfg;
  set_option(cfg, "train.lr", "0.123456789012345");
  set_option(cfg, "data.split", "dirichlet");
  set_option(cfg, "transport.port", "4242");
  set_option(cfg, "out.dir", "somewhere/else");
  const auto text = to_text(cfg);
  CHECK(to_text(parse_config(text)) == text);

  const auto ref = config_reference();
  CHECK(ref.size() >= 40);
  std::set<std::string> keys;
  for (const auto& k : ref) {
    CHECK(keys.insert(k.key).second);
    CHECK_FALSE(k.description.empty());
    ExperimentConfig c;
    CHECK_NOTHROW(set_option(c, k.key, k.default_value));
  }
  CHECK(to_text(parse_config("")) == to_text(ExperimentConfig{}));
}

TEST_CASE("participation resolves to a client count") {
  ExperimentConfig cfg;
  CHECK(cfg.seen_count() == 90);
  CHECK(cfg.clients_per_round() == 5);  // 0.05 of 90, rounded
  CHECK(cfg.descriptor_dim() == 25);
  cfg.train.participation = 0.001;
  CHECK(cfg.clients_per_round() == 1);
  cfg.train.round.clients_per_round = 7;
  CHECK(cfg.clients_per_round() == 7);
  CHECK(cfg.round_config().clients_per_round == 7);
}

TEST_CASE("trajectory digest ignores round count, evaluation, transport and output") {
  const ExperimentConfig base;
  const auto d = trajectory_digest(base);
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"train.rounds", "7"}, {"eval.every", "3"}, {"transport.kind", "tcp"}, {"out.dir", "x"}}) {
    auto c = base;
    set_option(c, k, v);
    CHECK_MESSAGE(trajectory_digest(c) == d, k);
  }
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"train.lr", "0.02"}, {"data.seed", "9"}, {"model.hyper", "L"}, {"train.lambda_theta", "0.5"}}) {
    auto c = base;
    set_option(c, k, v);
    CHECK_MESSAGE(trajectory_digest(c) != d, k);
  }
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("checkpoint encoding round-trips and rejects corruption") {
  Checkpoint c;
  c.digest = 0x1122334455667788ull;
  c.round = 42;
  c.algorithm = "pefll";
  c.config_text = "train.lr=0.1\n";
  std::mt19937_64 rng(3);
  rng.discard(17);
  c.rng_state = rng_state(rng);
  c.norm.mean = {0.1, 0.2, 0.3};
  c.norm.stddev = {0.4, 0.5, 0.6};
  c.tensors = {nn::ParamVector(std::vector<float>{1.f, -2.f, 3.5f}), nn::ParamVector(std::vector<float>{0.25f})};

  const auto bytes = encode_checkpoint(c);
  CHECK(decode_checkpoint(bytes) == c);
  auto back = rng_from_state(decode_checkpoint(bytes).rng_state);
  CHECK(back() == rng());
  CHECK_THROWS(rng_from_state("garbage"));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), nn::ParseError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), nn::ParseError);
  for (std::size_t cut : {std::size_t(3), std::size_t(20), bytes.size() - 1})
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(cut)), nn::ParseError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(bad), nn::ParseError);

  TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", c);
  CHECK(load_checkpoint(dir / "a.bin") == c);
  CHECK_FALSE(fs::exists(dir / "a.bin.tmp"));
  CHECK_THROWS(load_checkpoint(dir / "missing.bin"));
}

TEST_CASE("training runs are reproducible across reruns, resumes and transports") {
  TempDir dir("run");
  const auto a = small_run(dir / "a");
  const auto ra = run_experiment(a);
  REQUIRE(ra.rows.size() == 3);
  CHECK(ra.rows[0].round == 0);
  CHECK(ra.rows[1].round == 2);
  CHECK(ra.rows[2].round == 4);
  CHECK(ra.rows[0].bytes_up == 0);
  CHECK(ra.rows[2].bytes_up > 0);
  CHECK(ra.rows[2].bytes_down > 0);
  CHECK(ra.rows[2].mean_grad_norm_sq.has_value());
  CHECK_FALSE(ra.rows[2].spearman.has_value());

  const auto metrics = slurp(ra.metrics_path);
  const auto ckpt = slurp(*ra.checkpoint_path);

  SUBCASE("rerun") {
    auto b = a;
    b.out_dir = (dir / "b").string();
    const auto rb = run_experiment(b);
    CHECK(slurp(rb.metrics_path) == metrics);
    CHECK(slurp(*rb.checkpoint_path) == ckpt);
  }
  SUBCASE("resume") {
    auto b = a;
    b.out_dir = (dir / "b").string();
    b.train.rounds = 2;
    run_experiment(b);
    CHECK(load_checkpoint(dir / "b" / "checkpoint.bin").round == 2);
    b.train.rounds = 4;
    const auto rb = run_experiment(b, {dir / "b" / "checkpoint.bin", nullptr});
    CHECK(slurp(rb.metrics_path) == metrics);
    CHECK(slurp(*rb.checkpoint_path) == ckpt);

    auto changed = b;
    changed.train.round.lr = 0.5;
    CHECK(key_of([&] { run_experiment(changed, {dir / "b" / "checkpoint.bin", nullptr}); }) == "--resume");
    changed = b;
    changed.train.algorithm = "fedavg";
    CHECK(key_of([&] { run_experiment(changed, {dir / "b" / "checkpoint.bin", nullptr}); }) == "train.algorithm");
  }
  SUBCASE("tcp") {
    auto b = a;
    b.out_dir = (dir / "b").string();
    b.transport.kind = "tcp";
    const auto rb = run_experiment(b);
    CHECK(slurp(rb.metrics_path) == metrics);
    CHECK(slurp(*rb.checkpoint_path) == ckpt);
  }
  SUBCASE("evaluation of the stored state reproduces the last row") {
    const auto ck = load_checkpoint(*ra.checkpoint_path);
    const auto cfg = checkpoint_config(ck);
    const auto row = evaluate_pefll(Experiment::build(cfg), checkpoint_server_state(ck));
    CHECK(row.train_client_acc == ra.rows[2].train_client_acc);
    CHECK(row.unseen_client_acc == ra.rows[2].unseen_client_acc);
    CHECK(row.mean_grad_norm_sq == ra.rows[2].mean_grad_norm_sq);
  }
}

TEST_CASE("fedavg and local runs") {
  TempDir dir("baselines");
  auto cfg = small_run(dir / "fedavg");
  cfg.train.algorithm = "fedavg";
  const auto fa = run_experiment(cfg);
  REQUIRE(fa.rows.size() == 3);
  CHECK_FALSE(fa.rows[2].mean_grad_norm_sq.has_value());
  CHECK(load_checkpoint(*fa.checkpoint_path).tensors.size() == 1);
  CHECK_THROWS(checkpoint_server_state(load_checkpoint(*fa.checkpoint_path)));

  cfg.train.algorithm = "local";
  cfg.local.epochs = 2;
  cfg.out_dir = (dir / "local").string();
  const auto lo = run_experiment(cfg);
  REQUIRE(lo.rows.size() == 1);
  CHECK_FALSE(lo.checkpoint_path.has_value());
  cfg.transport.kind = "tcp";
  cfg.out_dir = (dir / "local-tcp").string();
  const auto lt = run_experiment(cfg);
  CHECK(slurp(lt.metrics_path) == slurp(lo.metrics_path));
}

TEST_CASE("predict writes a deterministic model with manifest") {
  TempDir dir("predict");
  auto cfg = small_run(dir / "run");
  cfg.train.rounds = 2;
  const auto r = run_experiment(cfg);
  const auto ck = load_checkpoint(*r.checkpoint_path);

  const auto ex = Experiment::build(cfg);
  {
    std::ofstream csv(dir / "client.csv");
    csv << "label";
    for (std::size_t k = 0; k < data::kPixels; ++k) csv << ",p" << k;
    csv << "\n";
    for (std::size_t i = 0; i < 20; ++i) {
      csv << ex.dataset.labels[i];
      for (auto v : ex.dataset.image(i)) csv << ',' << int(v);
      csv << "\n";
    }
  }
  PredictOptions opt;
  opt.batch = 8;
  predict_to_file(ck, dir / "client.csv", data::DatasetFormat::csv, opt, dir / "m1");
  predict_to_file(ck, dir / "client.csv", data::DatasetFormat::csv, opt, dir / "m2");
  CHECK(slurp(dir / "m1.bin") == slurp(dir / "m2.bin"));
  const auto manifest = slurp(dir / "m1.manifest");
  CHECK(manifest.rfind("pefll-model 1\n", 0) == 0);
  CHECK(manifest.find("classes=10\n") != std::string::npos);
  CHECK(manifest.find("round=2\n") != std::string::npos);
  CHECK(manifest.find("labeled=true\n") != std::string::npos);
  const auto params = nn::param_count(make_architecture(cfg).client);
  CHECK(manifest.find("params=" + std::to_string(params) + "\n") != std::string::npos);

  opt.unlabeled = true;
  predict_to_file(ck, dir / "client.csv", data::DatasetFormat::csv, opt, dir / "m3");
  CHECK(slurp(dir / "m3.manifest").find("labeled=false\n") != std::string::npos);

  auto onehot = cfg;
  onehot.model.embedding = "linear-onehot";
  onehot.out_dir = (dir / "onehot").string();
  const auto r2 = run_experiment(onehot);
  CHECK_THROWS(predict_to_file(load_checkpoint(*r2.checkpoint_path), dir / "client.csv", data::DatasetFormat::csv,
                               opt, dir / "m4"));
}

TEST_CASE("sweep presets") {
  const auto grid = sweep_preset("lambda-grid");
  CHECK(grid.size() == 12);
  std::set<std::string> names;
  for (const auto& c : grid) names.insert(c.name);
  CHECK(names.size() == 12);
  CHECK(sweep_preset("hyper-size").size() == 3);
  CHECK(sweep_preset("embedding").size() == 2);
  CHECK(sweep_preset("alpha").size() == 10);
  for (const auto& n : sweep_preset_names())
    for (const auto& cell : sweep_preset(n)) {
      ExperimentConfig c;
      for (const auto& [k, v] : cell.overrides) CHECK_NOTHROW(set_option(c, k, v));
    }
  CHECK_THROWS_AS(sweep_preset("everything"), std::invalid_argument);
}
