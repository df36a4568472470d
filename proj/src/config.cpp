#include "lidet/config.hpp"

#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace lidet {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_key(std::string_view key) {
  if (key.empty() || key.front() == '.' || key.back() == '.') return false;
  for (char c : key)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return key.find("..") == std::string_view::npos;
}

template <typename T>
T parse_unsigned(const std::string& value) {
  T out{};
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (value.empty() || res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw ValidationError("'" + value + "' is not a non-negative integer");
  return out;
}

double parse_real(const std::string& value) { return parse_double(value, 0); }

bool parse_bool(const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ValidationError("'" + value + "' is not a boolean");
}

template <typename T, typename Fn>
std::vector<T> parse_list(const std::string& value, Fn&& each) {
  std::vector<T> out;
  for (const std::string& item : split_list(value)) out.push_back(each(item));
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

template <typename T, typename Fn>
std::string join(const std::vector<T>& items, Fn&& each) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + each(items[i]);
  return out;
}

std::string fmt(double v) { return format_double(v); }
std::string fmt_bool(bool v) { return v ? "true" : "false"; }

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"dataset.name", [](ExperimentConfig& c, const std::string& v) {
         if (v != "csv") generator_from_string(v);
         c.dataset.name = v;
       }},
      {"dataset.path", [](ExperimentConfig& c, const std::string& v) { c.dataset.path = v == "-" ? "" : v; }},
      {"dataset.train_n", [](ExperimentConfig& c, const std::string& v) { c.dataset.train_n = parse_unsigned<std::size_t>(v); }},
      {"dataset.test_n", [](ExperimentConfig& c, const std::string& v) { c.dataset.test_n = parse_unsigned<std::size_t>(v); }},
      {"dataset.ambient_d", [](ExperimentConfig& c, const std::string& v) { c.dataset.ambient_d = parse_unsigned<Eigen::Index>(v); }},
      {"dataset.manifold_d", [](ExperimentConfig& c, const std::string& v) { c.dataset.manifold_d = parse_unsigned<Eigen::Index>(v); }},
      {"dataset.noise", [](ExperimentConfig& c, const std::string& v) { c.dataset.noise = parse_real(v); }},
      {"dataset.num_classes", [](ExperimentConfig& c, const std::string& v) { c.dataset.num_classes = parse_unsigned<int>(v); }},
      {"dataset.blob_std", [](ExperimentConfig& c, const std::string& v) { c.dataset.blob_std = parse_real(v); }},

      {"network.hidden", [](ExperimentConfig& c, const std::string& v) {
         c.network.hidden = parse_list<Eigen::Index>(v, parse_unsigned<Eigen::Index>);
       }},
      {"network.dropout", [](ExperimentConfig& c, const std::string& v) { c.network.dropout = parse_real(v); }},
      {"network.path", [](ExperimentConfig& c, const std::string& v) { c.network.path = v == "-" ? "" : v; }},

      {"train.epochs", [](ExperimentConfig& c, const std::string& v) { c.train.epochs = parse_unsigned<std::size_t>(v); }},
      {"train.learning_rate", [](ExperimentConfig& c, const std::string& v) { c.train.learning_rate = parse_real(v); }},
      {"train.batch_size", [](ExperimentConfig& c, const std::string& v) { c.train.batch_size = parse_unsigned<std::size_t>(v); }},
      {"train.momentum", [](ExperimentConfig& c, const std::string& v) { c.train.momentum = parse_real(v); }},

      {"attack.kinds", [](ExperimentConfig& c, const std::string& v) {
         c.attacks = parse_list<AttackKind>(v, attack_kind_from_string);
       }},
      {"attack.clip_min", [](ExperimentConfig& c, const std::string& v) { c.clip_min = parse_real(v); }},
      {"attack.clip_max", [](ExperimentConfig& c, const std::string& v) { c.clip_max = parse_real(v); }},
      {"attack.fgm.epsilon", [](ExperimentConfig& c, const std::string& v) { c.fgm_epsilon = parse_real(v); }},
      {"attack.fgm.sign", [](ExperimentConfig& c, const std::string& v) { c.fgm_sign = parse_bool(v); }},
      {"attack.bim.epsilon", [](ExperimentConfig& c, const std::string& v) { c.bim_epsilon = parse_real(v); }},
      {"attack.bim.max_iters", [](ExperimentConfig& c, const std::string& v) { c.bim_max_iters = parse_unsigned<std::size_t>(v); }},
      {"attack.jsma.max_iters", [](ExperimentConfig& c, const std::string& v) { c.jsma_max_iters = parse_unsigned<std::size_t>(v); }},
      {"attack.opt.iterations", [](ExperimentConfig& c, const std::string& v) { c.opt_iterations = parse_unsigned<std::size_t>(v); }},
      {"attack.opt.learning_rate", [](ExperimentConfig& c, const std::string& v) { c.opt_learning_rate = parse_real(v); }},
      {"attack.opt.c_min", [](ExperimentConfig& c, const std::string& v) { c.opt_search.lo = parse_real(v); }},
      {"attack.opt.c_max", [](ExperimentConfig& c, const std::string& v) { c.opt_search.hi = parse_real(v); }},
      {"attack.opt.c_initial", [](ExperimentConfig& c, const std::string& v) { c.opt_search.initial = parse_real(v); }},
      {"attack.opt.search_steps", [](ExperimentConfig& c, const std::string& v) { c.opt_search.steps = parse_unsigned<std::size_t>(v); }},
      {"attack.adaptive.alpha_min", [](ExperimentConfig& c, const std::string& v) { c.alpha_search.lo = parse_real(v); }},
      {"attack.adaptive.alpha_max", [](ExperimentConfig& c, const std::string& v) { c.alpha_search.hi = parse_real(v); }},
      {"attack.adaptive.alpha_initial", [](ExperimentConfig& c, const std::string& v) { c.alpha_search.initial = parse_real(v); }},
      {"attack.adaptive.search_steps", [](ExperimentConfig& c, const std::string& v) { c.alpha_search.steps = parse_unsigned<std::size_t>(v); }},
      {"attack.adaptive.k", [](ExperimentConfig& c, const std::string& v) { c.adaptive_k = parse_unsigned<std::size_t>(v); }},
      {"attack.adaptive.inputs", [](ExperimentConfig& c, const std::string& v) { c.adaptive_inputs = parse_unsigned<std::size_t>(v); }},
      {"attack.adaptive.alpha_min_control", [](ExperimentConfig& c, const std::string& v) { c.alpha_min_control = parse_bool(v); }},
      {"attack.transfer.train_attack", [](ExperimentConfig& c, const std::string& v) { c.transfer_train_attack = attack_kind_from_string(v); }},

      {"features.kinds", [](ExperimentConfig& c, const std::string& v) {
         c.feature_kinds = parse_list<FeatureKind>(v, feature_kind_from_string);
       }},
      {"features.k", [](ExperimentConfig& c, const std::string& v) { c.features.k = parse_unsigned<std::size_t>(v); }},
      {"features.sigma", [](ExperimentConfig& c, const std::string& v) { c.features.sigma = parse_real(v); }},
      {"features.bu_runs", [](ExperimentConfig& c, const std::string& v) { c.features.bu.num_runs = parse_unsigned<std::size_t>(v); }},
      {"features.bu_seed", [](ExperimentConfig& c, const std::string& v) { c.features.bu.base_seed = parse_unsigned<Seed>(v); }},
      {"minibatch_size", [](ExperimentConfig& c, const std::string& v) { c.minibatch_size = parse_unsigned<std::size_t>(v); }},

      {"tune.k_grid", [](ExperimentConfig& c, const std::string& v) { c.k_grid = parse_list<double>(v, parse_real); }},
      {"tune.sigma_grid", [](ExperimentConfig& c, const std::string& v) { c.sigma_grid = parse_list<double>(v, parse_real); }},
      {"tune.folds", [](ExperimentConfig& c, const std::string& v) { c.folds = parse_unsigned<std::size_t>(v); }},
      {"fig4.minibatch_sizes", [](ExperimentConfig& c, const std::string& v) {
         c.fig4_minibatch_sizes = parse_list<std::size_t>(v, parse_unsigned<std::size_t>);
       }},

      {"logreg.epochs", [](ExperimentConfig& c, const std::string& v) { c.logreg.epochs = parse_unsigned<std::size_t>(v); }},
      {"logreg.learning_rate", [](ExperimentConfig& c, const std::string& v) { c.logreg.learning_rate = parse_real(v); }},
      {"logreg.l2_penalty", [](ExperimentConfig& c, const std::string& v) { c.logreg.l2_penalty = parse_real(v); }},
      {"logreg.tolerance", [](ExperimentConfig& c, const std::string& v) { c.logreg.tolerance = parse_real(v); }},

      {"seed", [](ExperimentConfig& c, const std::string& v) { c.seed = parse_unsigned<Seed>(v); }},
      {"workers", [](ExperimentConfig& c, const std::string& v) { c.workers = parse_unsigned<std::size_t>(v); }},
      {"output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v == "-" ? "" : v; }},
  };
  return table;
}

}  // namespace

std::vector<std::string> split_list(std::string_view value) {
  std::vector<std::string> out;
  for (std::string& item : split_csv_line(value))
    if (!item.empty()) out.push_back(std::move(item));
  return out;
}

ConfigMap ConfigMap::parse(std::string_view text) {
  ConfigMap out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw ParseError("invalid key '" + key + "'", line_no);
    if (value.empty()) throw ParseError("missing value for '" + key + "'", line_no);
    if (out.entries_.count(key)) throw ParseError("duplicate key '" + key + "'", line_no);
    out.entries_[key] = Entry{value, line_no};
  }
  return out;
}

ConfigMap ConfigMap::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void ConfigMap::set(const std::string& key, std::string value) {
  if (!valid_key(key)) throw ValidationError("invalid key '" + key + "'");
  entries_[key] = Entry{std::move(value), 0};
}

std::optional<std::string> ConfigMap::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second.value;
}

ExperimentConfig apply_config(const ConfigMap& config, ExperimentConfig base) {
  for (const auto& [key, entry] : config.entries()) {
    const std::string where = entry.line ? " (line " + std::to_string(entry.line) + ")" : "";
    const auto it = setters().find(key);
    if (it == setters().end()) throw ValidationError("unknown config key '" + key + "'" + where);
    try {
      it->second(base, entry.value);
    } catch (const ValidationError& e) {
      throw ValidationError("config key '" + key + "'" + where + ": " + e.what());
    }
  }
  return base;
}

AttackConfig ExperimentConfig::attack_config(AttackKind kind) const {
  AttackConfig cfg;
  cfg.kind = kind;
  cfg.clip_min = clip_min;
  cfg.clip_max = clip_max;
  cfg.fgm_sign = fgm_sign;
  cfg.opt_search = opt_search;
  cfg.opt_iterations = opt_iterations;
  cfg.opt_learning_rate = opt_learning_rate;
  cfg.alpha_search = alpha_search;
  cfg.adaptive_k = adaptive_k;
  cfg.seed = seed;
  switch (kind) {
    case AttackKind::fgm:
      cfg.epsilon = fgm_epsilon;
      break;
    case AttackKind::bim_a:
    case AttackKind::bim_b:
      cfg.epsilon = bim_epsilon;
      cfg.max_iters = bim_max_iters;
      break;
    case AttackKind::jsma:
      cfg.max_iters = jsma_max_iters;
      break;
    case AttackKind::opt:
    case AttackKind::adaptive_opt:
      break;
  }
  return cfg;
}

std::vector<LayerSpec> ExperimentConfig::layers(Eigen::Index input_dim, Eigen::Index classes) const {
  std::vector<LayerSpec> out;
  Eigen::Index width = input_dim;
  for (Eigen::Index h : network.hidden) {
    out.push_back(LayerSpec::dense(width, h));
    out.push_back(LayerSpec::relu(h));
    if (network.dropout > 0.0) out.push_back(LayerSpec::dropout(h, network.dropout));
    width = h;
  }
  out.push_back(LayerSpec::dense(width, classes));
  out.push_back(LayerSpec::softmax(classes));
  validate_layers(out);
  return out;
}

void ExperimentConfig::validate() const {
  if (dataset.name == "csv") {
    if (dataset.path.empty()) throw ValidationError("dataset.name = csv needs dataset.path");
    if (!std::filesystem::exists(dataset.path)) throw ValidationError("dataset file " + dataset.path + " does not exist");
  } else {
    generator_from_string(dataset.name);
  }
  if (!network.path.empty() && !std::filesystem::exists(network.path))
    throw ValidationError("network file " + network.path + " does not exist");
  if (dataset.train_n < 10 || dataset.test_n < 10) throw ValidationError("dataset.train_n and dataset.test_n must be >= 10");
  if (network.hidden.empty()) throw ValidationError("network.hidden needs at least one layer");
  for (Eigen::Index h : network.hidden)
    if (h < 1) throw ValidationError("hidden widths must be positive");
  if (network.dropout < 0.0 || network.dropout >= 1.0) throw ValidationError("network.dropout must be in [0, 1)");
  if (train.epochs == 0 || train.batch_size == 0 || !(train.learning_rate > 0.0))
    throw ValidationError("train.epochs, train.batch_size and train.learning_rate must be positive");
  if (attacks.empty()) throw ValidationError("attack.kinds is empty");
  for (AttackKind kind : attacks) {
    if (kind == AttackKind::adaptive_opt)
      throw ValidationError("adaptive_opt is run by the table4 recipe, not listed in attack.kinds");
    attack_config(kind).validate();
  }
  attack_config(AttackKind::adaptive_opt).validate();
  if (feature_kinds.empty()) throw ValidationError("features.kinds is empty");
  if (features.k < 1) throw ValidationError("features.k must be positive");
  if (!(features.sigma > 0.0)) throw ValidationError("features.sigma must be positive");
  if (features.bu.num_runs < 2) throw ValidationError("features.bu_runs must be at least 2");
  if (minibatch_size < features.k + 1)
    throw ValidationError("minibatch_size must be at least features.k + 1");
  if (minibatch_size < adaptive_k) throw ValidationError("minibatch_size must be at least attack.adaptive.k");
  for (double k : k_grid)
    if (!(k >= 1.0) || k != static_cast<double>(static_cast<std::size_t>(k)) || k + 1 > static_cast<double>(minibatch_size))
      throw ValidationError("tune.k_grid values must be integers in [1, minibatch_size - 1]");
  for (double s : sigma_grid)
    if (!(s > 0.0)) throw ValidationError("tune.sigma_grid values must be positive");
  if (folds < 2) throw ValidationError("tune.folds must be at least 2");
  for (std::size_t m : fig4_minibatch_sizes)
    if (m < 2) throw ValidationError("fig4.minibatch_sizes must be at least 2");
  if (adaptive_inputs == 0) throw ValidationError("attack.adaptive.inputs must be positive");
  if (workers == 0) throw ValidationError("workers must be positive");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::describe() const {
  auto u = [](auto v) { return std::to_string(v); };
  return {
      {"dataset.name", dataset.name},
      {"dataset.path", dataset.path.empty() ? "-" : dataset.path},
      {"dataset.train_n", u(dataset.train_n)},
      {"dataset.test_n", u(dataset.test_n)},
      {"dataset.ambient_d", u(dataset.ambient_d)},
      {"dataset.manifold_d", u(dataset.manifold_d)},
      {"dataset.noise", fmt(dataset.noise)},
      {"dataset.num_classes", u(dataset.num_classes)},
      {"dataset.blob_std", fmt(dataset.blob_std)},
      {"network.hidden", join(network.hidden, [](Eigen::Index h) { return std::to_string(h); })},
      {"network.dropout", fmt(network.dropout)},
      {"network.path", network.path.empty() ? "-" : network.path},
      {"train.epochs", u(train.epochs)},
      {"train.learning_rate", fmt(train.learning_rate)},
      {"train.batch_size", u(train.batch_size)},
      {"train.momentum", fmt(train.momentum)},
      {"attack.kinds", join(attacks, [](AttackKind k) { return to_string(k); })},
      {"attack.clip_min", fmt(clip_min)},
      {"attack.clip_max", fmt(clip_max)},
      {"attack.fgm.epsilon", fmt(fgm_epsilon)},
      {"attack.fgm.sign", fmt_bool(fgm_sign)},
      {"attack.bim.epsilon", fmt(bim_epsilon)},
      {"attack.bim.max_iters", u(bim_max_iters)},
      {"attack.jsma.max_iters", u(jsma_max_iters)},
      {"attack.opt.iterations", u(opt_iterations)},
      {"attack.opt.learning_rate", fmt(opt_learning_rate)},
      {"attack.opt.c_min", fmt(opt_search.lo)},
      {"attack.opt.c_max", fmt(opt_search.hi)},
      {"attack.opt.c_initial", fmt(opt_search.initial)},
      {"attack.opt.search_steps", u(opt_search.steps)},
      {"attack.adaptive.alpha_min", fmt(alpha_search.lo)},
      {"attack.adaptive.alpha_max", fmt(alpha_search.hi)},
      {"attack.adaptive.alpha_initial", fmt(alpha_search.initial)},
      {"attack.adaptive.search_steps", u(alpha_search.steps)},
      {"attack.adaptive.k", u(adaptive_k)},
      {"attack.adaptive.inputs", u(adaptive_inputs)},
      {"attack.adaptive.alpha_min_control", fmt_bool(alpha_min_control)},
      {"attack.transfer.train_attack", to_string(transfer_train_attack)},
      {"features.kinds", join(feature_kinds, [](FeatureKind k) { return to_string(k); })},
      {"features.k", u(features.k)},
      {"features.sigma", fmt(features.sigma)},
      {"features.bu_runs", u(features.bu.num_runs)},
      {"features.bu_seed", u(features.bu.base_seed)},
      {"minibatch_size", u(minibatch_size)},
      {"tune.k_grid", join(k_grid, fmt)},
      {"tune.sigma_grid", join(sigma_grid, fmt)},
      {"tune.folds", u(folds)},
      {"fig4.minibatch_sizes", join(fig4_minibatch_sizes, [](std::size_t m) { return std::to_string(m); })},
      {"logreg.epochs", u(logreg.epochs)},
      {"logreg.learning_rate", fmt(logreg.learning_rate)},
      {"logreg.l2_penalty", fmt(logreg.l2_penalty)},
      {"logreg.tolerance", fmt(logreg.tolerance)},
      {"seed", u(seed)},
      {"workers", u(workers)},
      {"output_dir", output_dir.empty() ? "-" : output_dir},
  };
}

}  // namespace lidet
