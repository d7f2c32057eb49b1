#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "prefnet/trainer.hpp"

namespace prefnet {

/// Malformed or invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct PlotOptions {
  std::size_t resolution = 50;
  std::size_t agent = 0;  // whose allocation is drawn
  std::size_t x_agent = 0, x_item = 0;
  std::size_t y_agent = 0, y_item = 1;
  std::vector<double> pins;  // all n*m bids, row-major; empty = support midpoints
  bool operator==(const PlotOptions&) const = default;
};

struct CompareOptions {
  std::size_t samples = 20000;
  std::size_t bins = 20;
  bool operator==(const CompareOptions&) const = default;
};

struct ExperimentConfig {
  Experiment experiment;
  std::string out_dir = "runs/default";
  std::vector<double> reserves;                  // baseline; empty = Myerson reserve per item
  std::optional<PreferenceFunction> evaluate_with;  // ground truth override for evaluate
  PlotOptions plot;
  CompareOptions compare;

  bool operator==(const ExperimentConfig& o) const {
    const auto &a = experiment, &b = o.experiment;
    return a.spec == b.spec && a.valuation == b.valuation && a.preference == b.preference && a.arch == b.arch &&
           a.train == b.train && out_dir == o.out_dir && reserves == o.reserves && evaluate_with == o.evaluate_with &&
           plot == o.plot && compare == o.compare;
  }
};

/// Scale presets. "paper" is the default scale; "desk" shrinks sample counts
/// and epochs so a 2x2 run fits on a laptop.
inline void apply_preset(TrainConfig& t, const std::string& preset) {
  if (preset == "paper") {
    TrainConfig d;
    t.regretnet_samples = d.regretnet_samples;
    t.epochs = d.epochs;
    t.mlp_initial_samples = d.mlp_initial_samples;
    t.test_samples = d.test_samples;
  } else if (preset == "desk") {
    t.regretnet_samples = 20000;
    t.epochs = 60;
    t.mlp_initial_samples = 10000;
    t.test_samples = 5000;
  } else {
    throw ConfigError("unknown preset '" + preset + "' (expected desk or paper)");
  }
}

namespace detail {

[[noreturn]] inline void config_fail(const YAML::Node& node, const std::string& msg) {
  auto mark = node.Mark();
  if (mark.line >= 0) throw ConfigError("config line " + std::to_string(mark.line + 1) + ": " + msg);
  throw ConfigError("config: " + msg);
}

inline void require_map(const YAML::Node& node, const std::string& path) {
  if (!node.IsMap()) config_fail(node, "'" + path + "' must be a mapping");
}

inline void check_keys(const YAML::Node& node, const std::string& path, const std::set<std::string>& allowed) {
  require_map(node, path);
  for (const auto& kv : node) {
    auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      config_fail(kv.first, "unknown key '" + (path.empty() ? key : path + "." + key) + "' (allowed: " + list + ")");
    }
  }
}

template <class T>
T scalar_as(const YAML::Node& node, const std::string& path, const char* expected) {
  if (!node.IsScalar()) config_fail(node, "'" + path + "' must be " + expected);
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    config_fail(node, "'" + path + "' must be " + expected + ", got '" + node.Scalar() + "'");
  }
}

inline double get_double(const YAML::Node& node, const std::string& path) {
  return scalar_as<double>(node, path, "a number");
}

inline std::size_t get_count(const YAML::Node& node, const std::string& path) {
  auto v = scalar_as<long long>(node, path, "a non-negative integer");
  if (v < 0) config_fail(node, "'" + path + "' must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

inline std::uint64_t get_seed(const YAML::Node& node, const std::string& path) {
  return scalar_as<std::uint64_t>(node, path, "a non-negative integer");
}

inline std::string get_string(const YAML::Node& node, const std::string& path) {
  return scalar_as<std::string>(node, path, "a string");
}

inline bool get_bool(const YAML::Node& node, const std::string& path) {
  return scalar_as<bool>(node, path, "true or false");
}

inline std::vector<double> get_doubles(const YAML::Node& node, const std::string& path) {
  if (!node.IsSequence()) config_fail(node, "'" + path + "' must be a list of numbers");
  std::vector<double> out;
  for (std::size_t k = 0; k < node.size(); ++k) out.push_back(get_double(node[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

// Parse errors thrown by the domain parsers carry no position; attach one.
template <class F>
auto with_mark(const YAML::Node& node, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    config_fail(node, e.what());
  }
}

inline PreferenceFunction parse_preference(const YAML::Node& node, const std::string& path) {
  check_keys(node, path, {"function", "tvf_distance", "quota_threshold", "mixture"});
  PreferenceFunction fn;
  if (node["function"]) {
    fn.kind = with_mark(node["function"], [&] { return parse_preference_kind(get_string(node["function"], path + ".function")); });
  }
  if (node["tvf_distance"]) fn.tvf_distance = get_double(node["tvf_distance"], path + ".tvf_distance");
  if (node["quota_threshold"]) fn.quota_threshold = get_double(node["quota_threshold"], path + ".quota_threshold");
  if (node["mixture"]) {
    const auto& list = node["mixture"];
    if (!list.IsSequence()) config_fail(list, "'" + path + ".mixture' must be a list");
    for (std::size_t k = 0; k < list.size(); ++k) {
      std::string p = path + ".mixture[" + std::to_string(k) + "]";
      check_keys(list[k], p, {"fraction", "function", "tvf_distance", "quota_threshold"});
      if (!list[k]["fraction"]) config_fail(list[k], "'" + p + ".fraction' is required");
      MixtureComponent c;
      c.fraction = get_double(list[k]["fraction"], p + ".fraction");
      YAML::Node inner = YAML::Clone(list[k]);
      inner.remove("fraction");
      c.function = parse_preference(inner, p);
      fn.mixture.push_back(std::move(c));
    }
  }
  if (fn.kind == PreferenceKind::Mixture && fn.mixture.empty()) {
    config_fail(node, "'" + path + "': function mixture needs a 'mixture' list");
  }
  return fn;
}

inline void emit_preference(YAML::Emitter& e, const PreferenceFunction& fn) {
  e << YAML::BeginMap << YAML::Key << "function" << YAML::Value << to_string(fn.kind);
  if (fn.kind != PreferenceKind::Mixture || fn.tvf_distance != 0.0) {
    e << YAML::Key << "tvf_distance" << YAML::Value << fn.tvf_distance;
  }
  if (fn.quota_threshold) e << YAML::Key << "quota_threshold" << YAML::Value << *fn.quota_threshold;
  if (!fn.mixture.empty()) {
    e << YAML::Key << "mixture" << YAML::Value << YAML::BeginSeq;
    for (const auto& c : fn.mixture) {
      e << YAML::BeginMap << YAML::Key << "fraction" << YAML::Value << c.fraction;
      e << YAML::Key << "function" << YAML::Value << to_string(c.function.kind);
      e << YAML::Key << "tvf_distance" << YAML::Value << c.function.tvf_distance;
      if (c.function.quota_threshold) e << YAML::Key << "quota_threshold" << YAML::Value << *c.function.quota_threshold;
      e << YAML::EndMap;
    }
    e << YAML::EndSeq;
  }
  e << YAML::EndMap;
}

}  // namespace detail

/// Parses a YAML experiment description. Every key is optional; unknown keys
/// are errors. `preset_override` (e.g. from the command line) replaces the
/// file's `preset`; explicitly listed keys win over either preset.
inline ExperimentConfig parse_config(const std::string& text, const std::string& preset_override = "") {
  using namespace detail;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  ExperimentConfig cfg;
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  check_keys(root, "", {"preset", "seed", "auction", "valuation", "preference", "network", "train", "output",
                        "baseline", "evaluate", "plot", "compare"});
  auto& ex = cfg.experiment;
  auto& t = ex.train;

  std::string preset = preset_override;
  if (preset.empty() && root["preset"]) preset = get_string(root["preset"], "preset");
  if (!preset.empty()) with_mark(root["preset"] ? root["preset"] : root, [&] { apply_preset(t, preset); return 0; });
  if (root["seed"]) t.seed = get_seed(root["seed"], "seed");

  if (auto a = root["auction"]) {
    check_keys(a, "auction", {"n_agents", "m_items", "demand"});
    if (a["n_agents"]) ex.spec.n_agents = get_count(a["n_agents"], "auction.n_agents");
    if (a["m_items"]) ex.spec.m_items = get_count(a["m_items"], "auction.m_items");
    if (a["demand"]) ex.spec.demand = with_mark(a["demand"], [&] { return parse_demand_kind(get_string(a["demand"], "auction.demand")); });
    with_mark(a, [&] { ex.spec.validate(); return 0; });
  }

  double lower = 0.0, upper = 1.0;
  std::vector<double> scales;
  std::vector<ValuationModel::Range> ranges;
  YAML::Node v = root["valuation"];
  if (v) {
    check_keys(v, "valuation", {"lower", "upper", "scales", "ranges"});
    if (v["lower"]) lower = get_double(v["lower"], "valuation.lower");
    if (v["upper"]) upper = get_double(v["upper"], "valuation.upper");
    if (v["scales"]) scales = get_doubles(v["scales"], "valuation.scales");
    if (v["ranges"]) {
      const auto& list = v["ranges"];
      if (!list.IsSequence()) config_fail(list, "'valuation.ranges' must be a list of [lower, upper] pairs");
      for (std::size_t k = 0; k < list.size(); ++k) {
        auto pair = get_doubles(list[k], "valuation.ranges[" + std::to_string(k) + "]");
        if (pair.size() != 2) config_fail(list[k], "'valuation.ranges' entries must be [lower, upper]");
        ranges.push_back({pair[0], pair[1]});
      }
    }
  }
  with_mark(v ? v : root, [&] {
    ex.valuation = ValuationModel::uniform(ex.spec, lower, upper, scales);
    if (!ranges.empty()) {
      ex.valuation.ranges = ranges;
      ex.valuation.validate(ex.spec);
    }
    return 0;
  });

  if (auto p = root["preference"]) {
    ex.preference = parse_preference(p, "preference");
    with_mark(p, [&] { ex.preference.validate(ex.spec.n_agents); return 0; });
  }

  if (auto n = root["network"]) {
    check_keys(n, "network", {"hidden_layers", "width", "activation"});
    if (n["hidden_layers"]) ex.arch.hidden_layers = get_count(n["hidden_layers"], "network.hidden_layers");
    if (n["width"]) ex.arch.width = get_count(n["width"], "network.width");
    if (n["activation"]) {
      ex.arch.activation = with_mark(n["activation"], [&] { return parse_activation(get_string(n["activation"], "network.activation")); });
    }
    if (ex.arch.hidden_layers < 1 || ex.arch.width < 1) config_fail(n, "network needs at least one hidden layer of width >= 1");
  }

  if (auto tr = root["train"]) {
    check_keys(tr, "train",
               {"mode",           "epochs",          "regretnet_samples", "batch_size",          "regretnet_lr",
                "mlp_initial_samples", "mlp_hidden", "mlp_batch_size",    "mlp_lr",              "mlp_epochs",
                "mlp_cotrain_epochs",  "cotrain_interval", "cotrain_samples", "n_comparisons",   "misreport_steps",
                "misreport_rate", "test_misreport_steps", "test_misreport_rate", "test_restarts", "lambda_period",
                "rho_period",     "lambda_init",     "lambda_increment",  "rho_init",            "rho_increment",
                "lambda_s_init",  "lambda_s_increment", "rho_s_init",     "rho_s_increment",     "validation_samples",
                "test_samples",   "reference_pool",  "pca_threshold",     "noise",               "selection"});
    auto count = [&](const char* key, std::size_t& dst) {
      if (tr[key]) dst = get_count(tr[key], std::string("train.") + key);
    };
    auto real = [&](const char* key, double& dst) {
      if (tr[key]) dst = get_double(tr[key], std::string("train.") + key);
    };
    if (tr["mode"]) t.mode = with_mark(tr["mode"], [&] { return parse_train_mode(get_string(tr["mode"], "train.mode")); });
    count("epochs", t.epochs);
    count("regretnet_samples", t.regretnet_samples);
    count("batch_size", t.batch_size);
    real("regretnet_lr", t.regretnet_lr);
    count("mlp_initial_samples", t.mlp_initial_samples);
    count("mlp_hidden", t.mlp_hidden);
    count("mlp_batch_size", t.mlp_batch_size);
    real("mlp_lr", t.mlp_lr);
    count("mlp_epochs", t.mlp_epochs);
    count("mlp_cotrain_epochs", t.mlp_cotrain_epochs);
    count("cotrain_interval", t.cotrain_interval);
    count("cotrain_samples", t.cotrain_samples);
    count("n_comparisons", t.n_comparisons);
    count("misreport_steps", t.misreport_steps);
    real("misreport_rate", t.misreport_rate);
    count("test_misreport_steps", t.test_misreport_steps);
    real("test_misreport_rate", t.test_misreport_rate);
    count("test_restarts", t.test_restarts);
    count("lambda_period", t.lambda_period);
    count("rho_period", t.rho_period);
    real("lambda_init", t.lambda_init);
    real("lambda_increment", t.lambda_increment);
    real("rho_init", t.rho_init);
    real("rho_increment", t.rho_increment);
    real("lambda_s_init", t.lambda_s_init);
    real("lambda_s_increment", t.lambda_s_increment);
    real("rho_s_init", t.rho_s_init);
    real("rho_s_increment", t.rho_s_increment);
    count("validation_samples", t.validation_samples);
    count("test_samples", t.test_samples);
    count("reference_pool", t.reference_pool);
    if (tr["pca_threshold"] && !tr["pca_threshold"].IsNull()) {
      t.pca_threshold = get_double(tr["pca_threshold"], "train.pca_threshold");
    }
    if (auto nz = tr["noise"]; nz && !nz.IsNull()) {
      if (nz.IsScalar()) {
        if (get_bool(nz, "train.noise")) t.noise = NoiseConfig{};
      } else {
        check_keys(nz, "train.noise", {"k", "floor", "mu", "sigma"});
        NoiseConfig nc;
        if (nz["k"]) nc.k = get_double(nz["k"], "train.noise.k");
        if (nz["floor"]) nc.floor = get_double(nz["floor"], "train.noise.floor");
        if (nz["mu"]) nc.mu = get_double(nz["mu"], "train.noise.mu");
        if (nz["sigma"] && !nz["sigma"].IsNull()) nc.sigma = get_double(nz["sigma"], "train.noise.sigma");
        t.noise = nc;
      }
    }
    if (auto s = tr["selection"]) {
      check_keys(s, "train.selection", {"alpha", "beta", "gamma"});
      if (s["alpha"]) t.alpha = get_double(s["alpha"], "train.selection.alpha");
      if (s["beta"]) t.beta = get_double(s["beta"], "train.selection.beta");
      if (s["gamma"]) t.gamma = get_double(s["gamma"], "train.selection.gamma");
    }
    with_mark(tr, [&] { t.validate(); return 0; });
  }

  if (auto o = root["output"]) {
    check_keys(o, "output", {"dir"});
    if (o["dir"]) cfg.out_dir = get_string(o["dir"], "output.dir");
  }
  if (auto b = root["baseline"]) {
    check_keys(b, "baseline", {"reserves"});
    if (b["reserves"]) cfg.reserves = get_doubles(b["reserves"], "baseline.reserves");
    if (!cfg.reserves.empty() && cfg.reserves.size() != ex.spec.m_items) {
      config_fail(b["reserves"], "'baseline.reserves' needs one entry per item");
    }
  }
  if (auto e = root["evaluate"]) {
    check_keys(e, "evaluate", {"preference"});
    if (e["preference"] && !e["preference"].IsNull()) {
      cfg.evaluate_with = parse_preference(e["preference"], "evaluate.preference");
      with_mark(e["preference"], [&] { cfg.evaluate_with->validate(ex.spec.n_agents); return 0; });
    }
  }
  if (auto p = root["plot"]) {
    check_keys(p, "plot", {"resolution", "agent", "x", "y", "pins"});
    auto& po = cfg.plot;
    if (p["resolution"]) po.resolution = get_count(p["resolution"], "plot.resolution");
    if (p["agent"]) po.agent = get_count(p["agent"], "plot.agent");
    auto coord = [&](const char* key, std::size_t& agent, std::size_t& item) {
      if (!p[key]) return;
      auto xs = get_doubles(p[key], std::string("plot.") + key);
      if (xs.size() != 2 || xs[0] < 0 || xs[1] < 0) config_fail(p[key], std::string("'plot.") + key + "' must be [agent, item]");
      agent = static_cast<std::size_t>(xs[0]);
      item = static_cast<std::size_t>(xs[1]);
    };
    coord("x", po.x_agent, po.x_item);
    coord("y", po.y_agent, po.y_item);
    if (p["pins"]) po.pins = get_doubles(p["pins"], "plot.pins");
    if (po.resolution < 2) config_fail(p, "'plot.resolution' must be at least 2");
  }
  if (auto c = root["compare"]) {
    check_keys(c, "compare", {"samples", "bins"});
    if (c["samples"]) cfg.compare.samples = get_count(c["samples"], "compare.samples");
    if (c["bins"]) cfg.compare.bins = get_count(c["bins"], "compare.bins");
  }
  with_mark(root, [&] { ex.validate(); return 0; });
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, const std::string& preset_override = "") {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), preset_override);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Fully explicit YAML; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  const auto& ex = cfg.experiment;
  const auto& t = ex.train;
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << t.seed;
  e << YAML::Key << "auction" << YAML::Value << YAML::BeginMap << YAML::Key << "n_agents" << YAML::Value
    << ex.spec.n_agents << YAML::Key << "m_items" << YAML::Value << ex.spec.m_items << YAML::Key << "demand"
    << YAML::Value << to_string(ex.spec.demand) << YAML::EndMap;

  e << YAML::Key << "valuation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "scales" << YAML::Value << YAML::Flow << ex.valuation.scales;
  e << YAML::Key << "ranges" << YAML::Value << YAML::BeginSeq;
  for (const auto& r : ex.valuation.ranges) e << YAML::Flow << std::vector<double>{r.lower, r.upper};
  e << YAML::EndSeq << YAML::EndMap;

  e << YAML::Key << "preference" << YAML::Value;
  detail::emit_preference(e, ex.preference);
  e << YAML::Key << "network" << YAML::Value << YAML::BeginMap << YAML::Key << "hidden_layers" << YAML::Value
    << ex.arch.hidden_layers << YAML::Key << "width" << YAML::Value << ex.arch.width << YAML::Key << "activation"
    << YAML::Value << to_string(ex.arch.activation) << YAML::EndMap;

  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  auto kv = [&e](const char* k, const auto& v) { e << YAML::Key << k << YAML::Value << v; };
  kv("mode", to_string(t.mode));
  kv("epochs", t.epochs);
  kv("regretnet_samples", t.regretnet_samples);
  kv("batch_size", t.batch_size);
  kv("regretnet_lr", t.regretnet_lr);
  kv("mlp_initial_samples", t.mlp_initial_samples);
  kv("mlp_hidden", t.mlp_hidden);
  kv("mlp_batch_size", t.mlp_batch_size);
  kv("mlp_lr", t.mlp_lr);
  kv("mlp_epochs", t.mlp_epochs);
  kv("mlp_cotrain_epochs", t.mlp_cotrain_epochs);
  kv("cotrain_interval", t.cotrain_interval);
  kv("cotrain_samples", t.cotrain_samples);
  kv("n_comparisons", t.n_comparisons);
  kv("misreport_steps", t.misreport_steps);
  kv("misreport_rate", t.misreport_rate);
  kv("test_misreport_steps", t.test_misreport_steps);
  kv("test_misreport_rate", t.test_misreport_rate);
  kv("test_restarts", t.test_restarts);
  kv("lambda_period", t.lambda_period);
  kv("rho_period", t.rho_period);
  kv("lambda_init", t.lambda_init);
  kv("lambda_increment", t.lambda_increment);
  kv("rho_init", t.rho_init);
  kv("rho_increment", t.rho_increment);
  kv("lambda_s_init", t.lambda_s_init);
  kv("lambda_s_increment", t.lambda_s_increment);
  kv("rho_s_init", t.rho_s_init);
  kv("rho_s_increment", t.rho_s_increment);
  kv("validation_samples", t.validation_samples);
  kv("test_samples", t.test_samples);
  kv("reference_pool", t.reference_pool);
  if (t.pca_threshold) kv("pca_threshold", *t.pca_threshold);
  if (t.noise) {
    e << YAML::Key << "noise" << YAML::Value << YAML::BeginMap;
    kv("k", t.noise->k);
    kv("floor", t.noise->floor);
    kv("mu", t.noise->mu);
    if (t.noise->sigma) kv("sigma", *t.noise->sigma);
    e << YAML::EndMap;
  }
  e << YAML::Key << "selection" << YAML::Value << YAML::BeginMap;
  kv("alpha", t.alpha);
  kv("beta", t.beta);
  kv("gamma", t.gamma);
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "output" << YAML::Value << YAML::BeginMap << YAML::Key << "dir" << YAML::Value << cfg.out_dir
    << YAML::EndMap;
  if (!cfg.reserves.empty()) {
    e << YAML::Key << "baseline" << YAML::Value << YAML::BeginMap << YAML::Key << "reserves" << YAML::Value
      << YAML::Flow << cfg.reserves << YAML::EndMap;
  }
  if (cfg.evaluate_with) {
    e << YAML::Key << "evaluate" << YAML::Value << YAML::BeginMap << YAML::Key << "preference" << YAML::Value;
    detail::emit_preference(e, *cfg.evaluate_with);
    e << YAML::EndMap;
  }
  const auto& p = cfg.plot;
  e << YAML::Key << "plot" << YAML::Value << YAML::BeginMap;
  kv("resolution", p.resolution);
  kv("agent", p.agent);
  e << YAML::Key << "x" << YAML::Value << YAML::Flow << std::vector<std::size_t>{p.x_agent, p.x_item};
  e << YAML::Key << "y" << YAML::Value << YAML::Flow << std::vector<std::size_t>{p.y_agent, p.y_item};
  if (!p.pins.empty()) e << YAML::Key << "pins" << YAML::Value << YAML::Flow << p.pins;
  e << YAML::EndMap;
  e << YAML::Key << "compare" << YAML::Value << YAML::BeginMap;
  kv("samples", cfg.compare.samples);
  kv("bins", cfg.compare.bins);
  e << YAML::EndMap << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

}  // namespace prefnet
