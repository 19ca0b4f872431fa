#include "pefll/cli/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "pefll/nn/bytes.hpp"
#include "pefll/nn/fragment.hpp"
#include "pefll/transport/session.hpp"

namespace pefll::cli {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::optional<std::span<const std::uint32_t>> mask_for(const Experiment& ex, std::uint32_t id) {
  if (!ex.cfg.eval.masked) return std::nullopt;
  return std::span<const std::uint32_t>(ex.label_sets[id]);
}

template <typename ModelFor>
double mean_accuracy(const Experiment& ex, std::span<const std::uint32_t> ids, ModelFor&& model_for) {
  double total = 0.0;
  std::size_t count = 0;
  for (auto id : ids) {
    if (ex.test_sets[id].empty()) continue;
    total += analysis::eval_accuracy(ex.arch.client, model_for(id), ex.test_sets[id], mask_for(ex, id));
    ++count;
  }
  return count ? total / double(count) : 0.0;
}

void write_rows(const fs::path& path, const std::vector<analysis::MetricsRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  analysis::write_metrics_header(f);
  for (const auto& r : rows) analysis::write_metrics_row(f, r);
}

void append_row(const fs::path& path, const analysis::MetricsRow& row) {
  std::ofstream f(path, std::ios::app);
  analysis::write_metrics_row(f, row);
}

class Progress {
 public:
  explicit Progress(std::ostream* out) : out_(out), start_(std::chrono::steady_clock::now()) {}
  void row(const std::string& algorithm, const analysis::MetricsRow& r) {
    if (!out_) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    *out_ << algorithm << " round " << r.round << "  seen " << std::fixed << std::setprecision(4)
          << r.train_client_acc << "  new " << r.unseen_client_acc;
    if (r.spearman) *out_ << "  rank-corr " << *r.spearman;
    if (r.mean_grad_norm_sq) *out_ << "  grad^2 " << std::scientific << std::setprecision(3) << *r.mean_grad_norm_sq;
    *out_ << std::fixed << std::setprecision(1) << "  (" << secs << "s)" << std::endl;
    out_->unsetf(std::ios::floatfield);
  }

 private:
  std::ostream* out_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<analysis::MetricsRow> resume_rows(const fs::path& metrics, std::uint64_t upto) {
  std::vector<analysis::MetricsRow> rows;
  std::ifstream f(metrics);
  if (!f) return rows;
  for (const auto& r : analysis::read_metrics(f))
    if (r.round <= upto) rows.push_back(r);
  return rows;
}

Checkpoint make_checkpoint(const Experiment& ex, std::uint64_t round, const std::mt19937_64& rng,
                           std::vector<nn::ParamVector> tensors) {
  Checkpoint c;
  c.digest = trajectory_digest(ex.cfg);
  c.round = round;
  c.algorithm = ex.cfg.train.algorithm;
  c.config_text = checkpoint_text(ex.cfg);
  c.rng_state = rng_state(rng);
  c.norm = ex.norm;
  c.tensors = std::move(tensors);
  return c;
}

std::vector<nn::ParamVector> server_tensors(const protocol::ServerState& s) {
  std::vector<nn::ParamVector> t = {s.eta_h, s.eta_v};
  if (!s.velocity_h.empty()) {
    t.emplace_back(s.velocity_h.values());
    t.emplace_back(s.velocity_v.values());
  }
  return t;
}

RunResult run_local(const Experiment& ex, const fs::path& metrics) {
  const auto& cfg = ex.cfg;
  std::mt19937_64 init_rng(cfg.train.seed);
  const auto init = baselines::init_global<float>(ex.arch.client, init_rng).theta;
  baselines::LocalConfig lc{cfg.local.epochs, cfg.local.lr, cfg.local.momentum, cfg.local.batch,
                            cfg.train.round.lambda_theta};
  std::vector<nn::ParamVector> models(ex.clients.size());
  for (const auto& c : ex.clients) {
    if (c.train_data().empty()) continue;
    std::mt19937_64 rng(mix(cfg.train.seed, c.id()));
    models[c.id()] = baselines::local_train(ex.arch.client, init, c.train_data(), lc, rng);
  }
  analysis::MetricsRow row;
  row.round = cfg.local.epochs;
  auto model_for = [&](std::uint32_t id) -> const nn::ParamVector& { return models[id]; };
  row.train_client_acc = mean_accuracy(ex, ex.population.seen_ids, model_for);
  row.unseen_client_acc = mean_accuracy(ex, ex.population.unseen_ids, model_for);
  write_rows(metrics, {row});
  return {{row}, metrics, std::nullopt};
}

}  // namespace

data::Dataset load_source(const ExperimentConfig& cfg) {
  if (cfg.data.source == "synth") {
    std::mt19937_64 rng(cfg.data.seed);
    data::SynthOptions so;
    so.margin = cfg.data.synth_margin;
    so.color_jitter = cfg.data.synth_jitter;
    so.pixel_noise = cfg.data.synth_noise;
    return data::synth_dataset(cfg.data.num_classes, cfg.data.synth_per_class, rng, so);
  }
  auto ds = data::load_dataset(cfg.data.source, data::parse_dataset_format(cfg.data.format));
  if (ds.num_classes > cfg.data.num_classes)
    throw ConfigError("data.classes", "dataset has labels up to " + std::to_string(ds.num_classes - 1));
  ds.num_classes = cfg.data.num_classes;
  return ds;
}

protocol::Architecture make_architecture(const ExperimentConfig& cfg) {
  return protocol::Architecture::make(cfg.data.num_classes, models::parse_embedding_kind(cfg.model.embedding),
                                      cfg.descriptor_dim(), models::parse_hyper_size(cfg.model.hyper),
                                      models::parse_arch(cfg.model.arch));
}

Experiment Experiment::build(const ExperimentConfig& cfg) {
  cfg.validate();
  Experiment ex;
  ex.cfg = cfg;
  ex.dataset = load_source(cfg);
  std::mt19937_64 split_rng(mix(cfg.data.seed, 1));
  data::SplitOptions so;
  so.seen_fraction = cfg.data.seen_fraction;
  const std::optional<std::size_t> per_client =
      cfg.data.per_client ? std::optional<std::size_t>(cfg.data.per_client) : std::nullopt;
  if (cfg.data.split == "classes")
    ex.population = data::fixed_classes_split(ex.dataset, cfg.data.clients, cfg.data.classes_per_client, split_rng, so);
  else if (cfg.data.split == "dirichlet")
    ex.population = data::dirichlet_split(ex.dataset, cfg.data.clients, cfg.data.alpha, split_rng, per_client, so);
  else
    ex.population = data::extrapolation_population(ex.dataset, cfg.data.clients, cfg.data.alpha, cfg.data.alpha_new,
                                                   split_rng, per_client, so);
  ex.norm = data::Normalizer::fit(ex.dataset);
  ex.arch = make_architecture(cfg);
  for (const auto& c : ex.population.clients) {
    auto train = data::gather(ex.dataset, c.train, ex.norm);
    ex.label_sets.push_back(analysis::label_set(train.labels));
    ex.clients.emplace_back(c.client_id, std::move(train), mix(cfg.train.seed, c.client_id));
    ex.test_sets.push_back(data::gather(ex.dataset, c.test, ex.norm));
  }
  return ex;
}

std::vector<const protocol::Client*> Experiment::seen_clients() const {
  std::vector<const protocol::Client*> out;
  for (auto id : population.seen_ids) out.push_back(&clients[id]);
  return out;
}

std::vector<std::vector<double>> Experiment::proportions() const {
  std::vector<std::vector<double>> out;
  for (const auto& c : population.clients) out.push_back(c.proportions);
  return out;
}

analysis::MetricsRow evaluate_pefll(const Experiment& ex, const protocol::ServerState& state) {
  analysis::MetricsRow row;
  row.round = state.round_index;
  std::vector<nn::ParamVector> models(ex.clients.size());
  for (const auto& c : ex.clients) {
    if (c.train_data().empty()) continue;
    std::mt19937_64 rng(mix(mix(ex.cfg.train.seed, state.round_index), c.id() + 0x5EED));
    models[c.id()] = protocol::predict(ex.arch, state, c.train_data(), ex.cfg.train.round.descriptor_batch, rng);
  }
  auto model_for = [&](std::uint32_t id) -> const nn::ParamVector& { return models[id]; };
  row.train_client_acc = mean_accuracy(ex, ex.population.seen_ids, model_for);
  row.unseen_client_acc = mean_accuracy(ex, ex.population.unseen_ids, model_for);
  if (ex.cfg.eval.grad_norm) {
    const auto seen = ex.seen_clients();
    row.mean_grad_norm_sq = analysis::grad_norm_sq(ex.arch, state, std::span(seen), ex.cfg.round_config());
  }
  if (ex.cfg.eval.spearman && !ex.population.unseen_ids.empty()) {
    std::vector<data::Examples> train;
    for (const auto& c : ex.clients) train.push_back(c.train_data());
    const auto desc = analysis::client_descriptors(ex.arch, state.eta_v, std::span<const data::Examples>(train));
    try {
      row.spearman = analysis::descriptor_correlation(desc, ex.proportions(), ex.population.unseen_ids);
    } catch (const std::invalid_argument&) {
      row.spearman = std::nullopt;
    }
  }
  return row;
}

analysis::MetricsRow evaluate_global(const Experiment& ex, const baselines::GlobalModelState& state) {
  analysis::MetricsRow row;
  row.round = state.round_index;
  auto model_for = [&](std::uint32_t) -> const nn::ParamVector& { return state.theta; };
  row.train_client_acc = mean_accuracy(ex, ex.population.seen_ids, model_for);
  row.unseen_client_acc = mean_accuracy(ex, ex.population.unseen_ids, model_for);
  return row;
}

ExperimentConfig checkpoint_config(const Checkpoint& c) {
  auto cfg = parse_config(c.config_text);
  if (trajectory_digest(cfg) != c.digest) throw std::runtime_error("checkpoint digest does not match its stored configuration");
  return cfg;
}

protocol::ServerState checkpoint_server_state(const Checkpoint& c) {
  if (c.algorithm != "pefll" || (c.tensors.size() != 2 && c.tensors.size() != 4))
    throw std::runtime_error("checkpoint does not hold a PeFLL server state");
  protocol::ServerState s;
  s.eta_h = c.tensors[0];
  s.eta_v = c.tensors[1];
  if (c.tensors.size() == 4) {
    s.velocity_h = nn::GradVector(c.tensors[2].values());
    s.velocity_v = nn::GradVector(c.tensors[3].values());
  }
  s.round_index = c.round;
  return s;
}

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
  auto ex = Experiment::build(cfg);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  {
    std::ofstream f(out / "config.txt", std::ios::trunc);
    f << to_text(cfg);
  }
  const auto metrics = out / "metrics.csv";
  const auto ckpt_path = out / "checkpoint.bin";
  if (cfg.train.algorithm == "local") return run_local(ex, metrics);

  const bool pefll = cfg.train.algorithm == "pefll";
  std::mt19937_64 init_rng(cfg.train.seed);
  std::mt19937_64 select_rng(mix(cfg.train.seed, 2));
  protocol::ServerState server;
  baselines::GlobalModelState global;
  if (pefll)
    server = protocol::init_server<float>(ex.arch, init_rng);
  else
    global = baselines::init_global<float>(ex.arch.client, init_rng);

  std::vector<analysis::MetricsRow> rows;
  std::uint64_t start = 0;
  Progress progress(opt.log);
  if (opt.resume) {
    const auto ck = load_checkpoint(*opt.resume);
    if (ck.algorithm != cfg.train.algorithm)
      throw ConfigError("train.algorithm", "checkpoint was written by '" + ck.algorithm + "'");
    if (ck.digest != trajectory_digest(cfg))
      throw ConfigError("--resume", "checkpoint was produced by a different configuration");
    start = ck.round;
    select_rng = rng_from_state(ck.rng_state);
    if (pefll) {
      server = checkpoint_server_state(ck);
    } else {
      if (ck.tensors.size() != 1) throw std::runtime_error("checkpoint does not hold a global model");
      global = {ck.tensors[0], ck.round};
    }
    rows = resume_rows(metrics, start);
  } else {
    rows.push_back(pefll ? evaluate_pefll(ex, server) : evaluate_global(ex, global));
    progress.row(cfg.train.algorithm, rows.back());
    save_checkpoint(ckpt_path, make_checkpoint(ex, 0, select_rng, pefll ? server_tensors(server)
                                                                         : std::vector<nn::ParamVector>{global.theta}));
  }
  write_rows(metrics, rows);

  if (start < cfg.train.rounds) {
    auto backend = cfg.transport.kind == "tcp" ? transport::make_tcp_backend(cfg.transport.host, cfg.transport.port)
                                               : transport::make_loopback_backend();
    transport::CommMeter meter;
    const transport::SessionConfig session{pefll ? transport::Mode::pefll : transport::Mode::fedavg,
                                           cfg.round_config()};
    const auto seen = ex.seen_clients();
    transport::run_session(backend, ex.arch, session, seen, &meter, [&](transport::TrainingServer& srv) {
      for (std::uint64_t t = start; t < cfg.train.rounds; ++t) {
        if (pefll)
          server = srv.pefll_round(server, select_rng);
        else
          global = srv.fedavg_round(global, select_rng);
        if ((t + 1) % cfg.eval.every != 0 && t + 1 != cfg.train.rounds) continue;
        auto row = pefll ? evaluate_pefll(ex, server) : evaluate_global(ex, global);
        const auto tally = meter.round(std::uint32_t(t));
        row.bytes_up = tally.up.bytes;
        row.bytes_down = tally.down.bytes;
        rows.push_back(row);
        append_row(metrics, row);
        progress.row(cfg.train.algorithm, row);
        save_checkpoint(ckpt_path, make_checkpoint(ex, t + 1, select_rng,
                                                   pefll ? server_tensors(server)
                                                         : std::vector<nn::ParamVector>{global.theta}));
      }
    });
  }
  return {rows, metrics, ckpt_path};
}

void predict_to_file(const Checkpoint& ckpt, const fs::path& data_path, data::DatasetFormat format,
                     const PredictOptions& opt, const fs::path& out) {
  const auto cfg = checkpoint_config(ckpt);
  const auto state = checkpoint_server_state(ckpt);
  const auto arch = make_architecture(cfg);
  const auto ds = data::load_dataset(data_path, format);
  for (auto l : ds.labels)
    if (l >= arch.num_classes)
      throw std::invalid_argument("client data has label " + std::to_string(l) + " but the model has " +
                                  std::to_string(arch.num_classes) + " classes");
  std::vector<std::uint32_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0u);
  const auto examples = data::gather(ds, rows, ckpt.norm);
  std::mt19937_64 rng(opt.seed);
  const auto theta = protocol::predict(arch, state, examples, opt.batch, rng, nullptr, 0, !opt.unlabeled);

  nn::ByteWriter w;
  nn::write_fragment(w, theta);
  auto bin = out;
  bin += ".bin";
  write_file(bin, w.buffer());
  std::ostringstream m;
  m << "pefll-model 1\n"
    << "classes=" << arch.num_classes << "\n"
    << "params=" << theta.size() << "\n"
    << "spec_digest=" << std::hex << std::setw(16) << std::setfill('0') << fnv1a(arch.client.describe()) << std::dec
    << "\n"
    << "round=" << state.round_index << "\n"
    << "labeled=" << (opt.unlabeled ? "false" : "true") << "\n";
  const auto text = m.str();
  auto manifest = out;
  manifest += ".manifest";
  write_file(manifest, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::string> sweep_preset_names() { return {"hyper-size", "lambda-grid", "embedding", "alpha"}; }

std::vector<SweepCell> sweep_preset(const std::string& name) {
  std::vector<SweepCell> cells;
  if (name == "hyper-size") {
    for (const char* s : {"S", "M", "L"}) cells.push_back({std::string("hyper-") + s, {{"model.hyper", s}}});
  } else if (name == "lambda-grid") {
    for (const char* lt : {"0", "5e-05", "0.005", "0.5"})
      for (const char* lhv : {"0", "1e-05", "0.001"})
        cells.push_back({std::string("theta-") + lt + "_hv-" + lhv,
                         {{"train.lambda_theta", lt}, {"train.lambda_h", lhv}, {"train.lambda_v", lhv}}});
  } else if (name == "embedding") {
    cells.push_back({"mlp", {{"model.embedding", "linear-onehot"}}});
    cells.push_back({"cnn", {{"model.embedding", "lenet-conv"}}});
  } else if (name == "alpha") {
    for (int i = 1; i <= 10; ++i) {
      std::ostringstream a;
      a << i / 10.0;
      cells.push_back({"alpha-" + a.str(), {{"data.split", "extrapolation"}, {"data.alpha_new", a.str()}}});
    }
  } else {
    std::string names;
    for (const auto& n : sweep_preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown sweep preset '" + name + "' (expected " + names + ")");
  }
  return cells;
}

}  // namespace pefll::cli
