#include "pefll/cli/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace pefll::cli {

namespace {

std::string format_value(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(std::uint16_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }

template <typename V>
V parse_value(const std::string& key, const std::string& s) {
  if constexpr (std::is_same_v<V, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<V, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key, "expected true or false, got '" + s + "'");
  } else {
    V v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw ConfigError(key, "cannot parse '" + s + "' as a " +
                                 (std::is_floating_point_v<V> ? "number" : "non-negative integer"));
    if constexpr (std::is_floating_point_v<V>)
      if (!std::isfinite(v)) throw ConfigError(key, "value must be finite");
    return v;
  }
}

struct Entry {
  std::string key;
  std::string doc;
  bool trajectory;  // part of the resume digest
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Ref>
Entry entry(std::string key, bool trajectory, std::string doc, Ref ref) {
  return {key, std::move(doc), trajectory,
          [ref](const ExperimentConfig& c) { return format_value(ref(c)); },
          [ref, key](ExperimentConfig& c, const std::string& s) {
            auto& slot = ref(c);
            slot = parse_value<std::remove_reference_t<decltype(slot)>>(key, s);
          }};
}

#define FIELD(path) [](auto& c) -> auto& { return c.path; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      entry("data.source", true, "\"synth\" for generated blobs, else a dataset path", FIELD(data.source)),
      entry("data.format", true, "file format of data.source: cifar-binary, idx-pair or csv", FIELD(data.format)),
      entry("data.classes", true, "number of classes C", FIELD(data.num_classes)),
      entry("data.synth_per_class", true, "generated examples per class", FIELD(data.synth_per_class)),
      entry("data.synth_margin", true, "minimum distance between class colors", FIELD(data.synth_margin)),
      entry("data.synth_jitter", true, "per-image color deviation", FIELD(data.synth_jitter)),
      entry("data.synth_noise", true, "per-pixel noise level", FIELD(data.synth_noise)),
      entry("data.clients", true, "number of clients n", FIELD(data.clients)),
      entry("data.split", true, "classes, dirichlet or extrapolation", FIELD(data.split)),
      entry("data.classes_per_client", true, "labels per client for the classes split", FIELD(data.classes_per_client)),
      entry("data.alpha", true, "Dirichlet concentration (training clients for extrapolation)", FIELD(data.alpha)),
      entry("data.alpha_new", true, "Dirichlet concentration of new clients for extrapolation", FIELD(data.alpha_new)),
      entry("data.per_client", true, "examples per client for Dirichlet splits, 0 for an even share", FIELD(data.per_client)),
      entry("data.seen_fraction", true, "fraction of clients used for training", FIELD(data.seen_fraction)),
      entry("data.seed", true, "seed for data generation and splitting", FIELD(data.seed)),
      entry("model.arch", true, "lenet or compact", FIELD(model.arch)),
      entry("model.embedding", true, "lenet-conv or linear-onehot", FIELD(model.embedding)),
      entry("model.hyper", true, "hypernetwork size S, M or L", FIELD(model.hyper)),
      entry("model.descriptor_dim", true, "descriptor length l, 0 for clients/4", FIELD(model.descriptor_dim)),
      entry("train.algorithm", true, "pefll, fedavg or local", FIELD(train.algorithm)),
      entry("train.rounds", false, "number of training rounds T", FIELD(train.rounds)),
      entry("train.lr", true, "client SGD step size", FIELD(train.round.lr)),
      entry("train.local_steps", true, "client SGD steps per round k", FIELD(train.round.local_steps)),
      entry("train.clients_per_round", true, "clients per round c, 0 to use train.participation", FIELD(train.round.clients_per_round)),
      entry("train.participation", true, "fraction of training clients per round", FIELD(train.participation)),
      entry("train.descriptor_batch", true, "examples per descriptor b", FIELD(train.round.descriptor_batch)),
      entry("train.local_batch", true, "client SGD minibatch size", FIELD(train.round.local_batch)),
      entry("train.lambda_h", true, "hypernetwork weight decay", FIELD(train.round.lambda_h)),
      entry("train.lambda_v", true, "embedding network weight decay", FIELD(train.round.lambda_v)),
      entry("train.lambda_theta", true, "generated-model weight decay", FIELD(train.round.lambda_theta)),
      entry("train.client_momentum", true, "client SGD momentum", FIELD(train.round.client_momentum)),
      entry("train.server_momentum", true, "momentum on server updates, 0 for none", FIELD(train.round.server_momentum)),
      entry("train.seed", true, "seed for initialization and client selection", FIELD(train.seed)),
      entry("local.epochs", true, "epochs for the local baseline", FIELD(local.epochs)),
      entry("local.lr", true, "step size for the local baseline", FIELD(local.lr)),
      entry("local.momentum", true, "momentum for the local baseline", FIELD(local.momentum)),
      entry("local.batch", true, "minibatch size for the local baseline", FIELD(local.batch)),
      entry("eval.every", false, "rounds between metrics rows and checkpoints", FIELD(eval.every)),
      entry("eval.masked", false, "restrict predictions to each client's label set", FIELD(eval.masked)),
      entry("eval.grad_norm", false, "track the exact objective gradient norm", FIELD(eval.grad_norm)),
      entry("eval.spearman", false, "track descriptor rank correlation on new clients", FIELD(eval.spearman)),
      entry("eval.bound_samples", false, "Monte-Carlo draws for the generalization bound", FIELD(eval.bound_samples)),
      entry("eval.bound_alpha", false, "posterior variance used for every parameter group", FIELD(eval.bound_alpha)),
      entry("eval.bound_delta", false, "confidence parameter of the bound", FIELD(eval.bound_delta)),
      entry("transport.kind", false, "loopback or tcp", FIELD(transport.kind)),
      entry("transport.host", false, "bind address for tcp", FIELD(transport.host)),
      entry("transport.port", false, "tcp port, 0 for any free port", FIELD(transport.port)),
      entry("out.dir", false, "output directory", FIELD(out_dir)),
  };
  return table;
}

#undef FIELD

const Entry& find(const std::string& key) {
  for (const auto& e : entries())
    if (e.key == key) return e;
  throw ConfigError(key, "unknown key");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require_one_of(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  std::string list;
  for (const char* a : allowed) {
    if (v == a) return;
    list += list.empty() ? a : std::string(", ") + a;
  }
  throw ConfigError(key, "'" + v + "' is not one of " + list);
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void set_option(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find(key).set(cfg, value);
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno), "expected key=value, got '" + line + "'");
    set_option(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("--config", "cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + "=" + e.get(cfg) + "\n";
  return out;
}

std::string checkpoint_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& e : entries())
    if (e.key.rfind("transport.", 0) != 0 && e.key != "out.dir") out += e.key + "=" + e.get(cfg) + "\n";
  return out;
}

std::uint64_t trajectory_digest(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& e : entries())
    if (e.trajectory) s += e.key + "=" + e.get(cfg) + "\n";
  return fnv1a(s);
}

std::vector<KeyDoc> config_reference() {
  const ExperimentConfig defaults;
  std::vector<KeyDoc> out;
  for (const auto& e : entries()) out.push_back({e.key, e.get(defaults), e.doc});
  return out;
}

std::size_t ExperimentConfig::descriptor_dim() const {
  return model.descriptor_dim ? model.descriptor_dim : std::max<std::size_t>(1, data.clients / 4);
}

std::size_t ExperimentConfig::seen_count() const {
  const auto unseen = std::size_t(std::llround((1.0 - data.seen_fraction) * double(data.clients)));
  return data.clients - std::min(unseen, data.clients - 1);
}

std::size_t ExperimentConfig::clients_per_round() const {
  if (train.round.clients_per_round) return train.round.clients_per_round;
  return std::max<std::size_t>(1, std::size_t(std::llround(train.participation * double(seen_count()))));
}

protocol::RoundConfig ExperimentConfig::round_config() const {
  auto r = train.round;
  r.clients_per_round = clients_per_round();
  return r;
}

void ExperimentConfig::validate() const {
  if (data.source == "synth") {
    if (data.synth_per_class == 0) throw ConfigError("data.synth_per_class", "must be >= 1");
    if (data.synth_margin < 0) throw ConfigError("data.synth_margin", "must be >= 0");
    if (data.synth_jitter < 0) throw ConfigError("data.synth_jitter", "must be >= 0");
    if (data.synth_noise < 0) throw ConfigError("data.synth_noise", "must be >= 0");
  } else {
    require_one_of("data.format", data.format, {"cifar-binary", "idx-pair", "csv"});
    std::ifstream probe(data.format == "idx-pair" ? data.source + "/images.idx" : data.source);
    if (!probe) throw ConfigError("data.source", "cannot open '" + data.source + "'");
  }
  if (data.num_classes < 2) throw ConfigError("data.classes", "must be >= 2");
  if (data.clients < 2) throw ConfigError("data.clients", "must be >= 2");
  require_one_of("data.split", data.split, {"classes", "dirichlet", "extrapolation"});
  if (data.split == "classes" &&
      (data.classes_per_client == 0 || data.classes_per_client > data.num_classes))
    throw ConfigError("data.classes_per_client", "must lie in [1, data.classes]");
  if (!(data.alpha > 0)) throw ConfigError("data.alpha", "must be > 0");
  if (!(data.alpha_new > 0)) throw ConfigError("data.alpha_new", "must be > 0");
  if (!(data.seen_fraction > 0 && data.seen_fraction <= 1)) throw ConfigError("data.seen_fraction", "must lie in (0, 1]");
  require_one_of("model.arch", model.arch, {"lenet", "compact"});
  require_one_of("model.embedding", model.embedding, {"lenet-conv", "linear-onehot"});
  require_one_of("model.hyper", model.hyper, {"S", "M", "L"});
  require_one_of("train.algorithm", train.algorithm, {"pefll", "fedavg", "local"});
  if (train.rounds == 0) throw ConfigError("train.rounds", "must be >= 1");
  if (!(train.participation > 0 && train.participation <= 1))
    throw ConfigError("train.participation", "must lie in (0, 1]");
  if (clients_per_round() > seen_count())
    throw ConfigError("train.clients_per_round", "exceeds the " + std::to_string(seen_count()) + " training clients");
  try {
    round_config().validate();
  } catch (const std::exception& e) {
    throw ConfigError("train", e.what());
  }
  if (local.batch == 0) throw ConfigError("local.batch", "must be >= 1");
  if (!(local.lr >= 0)) throw ConfigError("local.lr", "must be >= 0");
  if (!(local.momentum >= 0 && local.momentum < 1)) throw ConfigError("local.momentum", "must lie in [0, 1)");
  if (eval.every == 0) throw ConfigError("eval.every", "must be >= 1");
  if (eval.bound_samples == 0) throw ConfigError("eval.bound_samples", "must be >= 1");
  if (!(eval.bound_alpha > 0)) throw ConfigError("eval.bound_alpha", "must be > 0");
  if (!(eval.bound_delta > 0 && eval.bound_delta < 1)) throw ConfigError("eval.bound_delta", "must lie in (0, 1)");
  require_one_of("transport.kind", transport.kind, {"loopback", "tcp"});
  if (out_dir.empty()) throw ConfigError("out.dir", "must not be empty");
}

}  // namespace pefll::cli
