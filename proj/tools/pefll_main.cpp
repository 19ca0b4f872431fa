#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "pefll/cli/experiment.hpp"

using namespace pefll;
using namespace pefll::cli;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string transport;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key=value configuration file");
  app->add_option("--seed", f.seed, "seed for data, initialization and client selection");
  app->add_option("--transport", f.transport, "loopback or tcp")->check(CLI::IsMember({"loopback", "tcp"}));
  app->add_option("--out", f.out, "output directory");
  app->add_option("--set", f.sets, "override one key, as key=value (repeatable)");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config.empty()) cfg = load_config(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set", "expected key=value, got '" + kv + "'");
    set_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) {
    cfg.data.seed = *f.seed;
    cfg.train.seed = *f.seed;
  }
  if (!f.transport.empty()) cfg.transport.kind = f.transport;
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

void print_reference(std::ostream& out) {
  for (const auto& k : config_reference())
    out << std::left << std::setw(26) << k.key << std::setw(14) << k.default_value << k.description << "\n";
}

std::ostream& open_or_stdout(const std::string& path, std::ofstream& file) {
  if (path.empty()) return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot write '" + path + "'");
  return file;
}

int cmd_analyze(const std::string& ckpt_path, std::optional<std::size_t> samples, std::optional<double> alpha,
                const std::string& out_path) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto cfg = checkpoint_config(ck);
  const auto state = checkpoint_server_state(ck);
  const auto ex = Experiment::build(cfg);
  const double a = alpha.value_or(cfg.eval.bound_alpha);

  std::vector<data::Examples> seen_data;
  for (auto id : ex.population.seen_ids) seen_data.push_back(ex.clients[id].train_data());
  std::mt19937_64 rng(cfg.train.seed);
  const auto bound = analysis::pacbayes_bound_mc(ex.arch, state, std::span<const data::Examples>(seen_data), a, a, a,
                                                 cfg.eval.bound_delta, samples.value_or(cfg.eval.bound_samples), rng);
  const auto seen = ex.seen_clients();
  const double g2 = analysis::grad_norm_sq(ex.arch, state, std::span(seen), cfg.round_config());

  std::ofstream file;
  auto& out = open_or_stdout(out_path, file);
  out << std::setprecision(9);
  out << "round=" << state.round_index << "\n";
  out << "grad_norm_sq=" << g2 << "\n";
  if (!ex.population.unseen_ids.empty()) {
    std::vector<data::Examples> all;
    for (const auto& c : ex.clients) all.push_back(c.train_data());
    const auto desc = analysis::client_descriptors(ex.arch, state.eta_v, std::span<const data::Examples>(all));
    const auto r = analysis::descriptor_correlation(desc, ex.proportions(), ex.population.unseen_ids);
    out << "rank_correlation_new_clients=" << (r ? std::to_string(*r) : "undefined") << "\n";
  }
  out << "bound_mean=" << bound.mean << "\n"
      << "bound_stddev=" << bound.stddev << "\n"
      << "bound_samples=" << bound.samples << "\n"
      << "bound_empirical=" << bound.at_mean.empirical << "\n"
      << "bound_meta=" << bound.at_mean.meta << "\n"
      << "bound_client=" << bound.at_mean.client << "\n"
      << "bound_at_mean=" << bound.at_mean.total() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::vector<std::string>& sets, const std::string& out_path) {
  const auto ck = load_checkpoint(ckpt_path);
  auto cfg = checkpoint_config(ck);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    const auto key = kv.substr(0, eq);
    if (eq == std::string::npos || key.rfind("eval.", 0) != 0)
      throw ConfigError("--set", "eval accepts eval.* overrides only, got '" + kv + "'");
    set_option(cfg, key, kv.substr(eq + 1));
  }
  const auto ex = Experiment::build(cfg);
  const auto row = ck.algorithm == "pefll" ? evaluate_pefll(ex, checkpoint_server_state(ck))
                                           : evaluate_global(ex, {ck.tensors.at(0), ck.round});
  std::ofstream file;
  auto& out = open_or_stdout(out_path, file);
  analysis::write_metrics_header(out);
  analysis::write_metrics_row(out, row);
  return 0;
}

int cmd_sweep(const std::string& preset, const CommonFlags& flags, std::optional<std::size_t> rounds, bool quiet) {
  const auto base = resolve(flags);
  const std::filesystem::path root = base.out_dir;
  std::filesystem::create_directories(root);
  std::ofstream summary(root / "sweep.csv", std::ios::trunc);
  summary << "cell," << analysis::kMetricsHeader << "\n";
  for (const auto& cell : sweep_preset(preset)) {
    auto cfg = base;
    for (const auto& [k, v] : cell.overrides) set_option(cfg, k, v);
    if (rounds) cfg.train.rounds = *rounds;
    cfg.out_dir = (root / cell.name).string();
    if (!quiet) std::cerr << "== " << cell.name << "\n";
    const auto result = run_experiment(cfg, {std::nullopt, quiet ? nullptr : &std::cerr});
    summary << cell.name << ',';
    analysis::write_metrics_row(summary, result.rows.back());
    summary.flush();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated learning with learned client embeddings"};
  app.require_subcommand(1);
  app.footer("Run 'pefll --config-keys' to list every configuration key with its default.");

  CommonFlags train_flags;
  std::string resume;
  bool print_config = false, quiet = false;
  auto* train = app.add_subcommand("train", "run a training experiment");
  add_common(train, train_flags);
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_flag("--print-config", print_config, "print the resolved configuration and exit");
  train->add_flag("--quiet", quiet, "no progress lines");

  std::string ckpt, data_path, format = "cifar-binary", out_prefix;
  PredictOptions popt;
  auto* predict = app.add_subcommand("predict", "generate a personalized model for new client data");
  predict->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  predict->add_option("--data", data_path, "client dataset")->required();
  predict->add_option("--format", format, "cifar-binary, idx-pair or csv");
  predict->add_flag("--unlabeled", popt.unlabeled, "describe the client from its images only");
  predict->add_option("--batch", popt.batch, "examples used for the descriptor");
  predict->add_option("--seed", popt.seed, "seed for the descriptor sample");
  predict->add_option("--out", out_prefix, "output prefix; writes <out>.bin and <out>.manifest")->required();

  std::string eval_ckpt, eval_out;
  std::vector<std::string> eval_sets;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on every client");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--set", eval_sets, "override an eval.* key (repeatable)");
  eval->add_option("--out", eval_out, "metrics CSV path (default stdout)");

  std::string an_ckpt, an_out;
  std::optional<std::size_t> an_samples;
  std::optional<double> an_alpha;
  auto* analyze = app.add_subcommand("analyze", "gradient norm, descriptor correlation and generalization bound");
  analyze->add_option("--checkpoint", an_ckpt, "PeFLL checkpoint")->required();
  analyze->add_option("--samples", an_samples, "Monte-Carlo draws for the bound");
  analyze->add_option("--alpha", an_alpha, "posterior variance for every parameter group");
  analyze->add_option("--out", an_out, "report path (default stdout)");

  CommonFlags sweep_flags;
  std::string preset;
  std::optional<std::size_t> sweep_rounds;
  bool sweep_quiet = false;
  auto* sweep = app.add_subcommand("sweep", "run a preset grid, one output directory per cell");
  add_common(sweep, sweep_flags);
  sweep->add_option("--preset", preset, "hyper-size, lambda-grid, embedding or alpha")->required();
  sweep->add_option("--rounds", sweep_rounds, "rounds per cell");
  sweep->add_flag("--quiet", sweep_quiet, "no progress lines");

  try {
    if (argc == 2 && std::string(argv[1]) == "--config-keys") {
      print_reference(std::cout);
      return 0;
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      const auto cfg = resolve(train_flags);
      if (print_config) {
        std::cout << to_text(cfg);
        return 0;
      }
      RunOptions opt;
      if (!resume.empty()) opt.resume = resume;
      opt.log = quiet ? nullptr : &std::cerr;
      const auto r = run_experiment(cfg, opt);
      std::cerr << "metrics: " << r.metrics_path.string() << "\n";
      return 0;
    }
    if (*predict) {
      predict_to_file(load_checkpoint(ckpt), data_path, data::parse_dataset_format(format), popt, out_prefix);
      return 0;
    }
    if (*eval) return cmd_eval(eval_ckpt, eval_sets, eval_out);
    if (*analyze) return cmd_analyze(an_ckpt, an_samples, an_alpha, an_out);
    if (*sweep) return cmd_sweep(preset, sweep_flags, sweep_rounds, sweep_quiet);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
