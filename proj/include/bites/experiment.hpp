#pragma once

#include "bites/data.hpp"
#include "bites/ite.hpp"
#include "bites/metrics.hpp"
#include "bites/net.hpp"
#include "bites/serialize.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <variant>

namespace bites {

inline constexpr const char* kVersion = "1.0.0";

enum class Method { Bites, Ites, DeepSurvSingle, TDeepSurv, CoxTLearner };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Bites: return "bites";
    case Method::Ites: return "ites";
    case Method::DeepSurvSingle: return "deepsurv_single";
    case Method::TDeepSurv: return "tdeepsurv";
    case Method::CoxTLearner: return "cox_tlearner";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::Bites, Method::Ites, Method::DeepSurvSingle, Method::TDeepSurv, Method::CoxTLearner})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

enum class SelectionMetric { ValidationLoss, ValidationCIndex };

inline std::string to_string(SelectionMetric m) {
  return m == SelectionMetric::ValidationLoss ? "validation_loss" : "validation_c_index";
}

inline SelectionMetric parse_selection(const std::string& s) {
  if (s == "validation_loss") return SelectionMetric::ValidationLoss;
  if (s == "validation_c_index") return SelectionMetric::ValidationCIndex;
  throw ConfigError("unknown selection_metric '" + s + "'");
}

inline MedianRule parse_median_rule(const std::string& s) {
  if (s == "step") return MedianRule::Step;
  if (s == "linear") return MedianRule::Linear;
  throw ConfigError("unknown median_rule '" + s + "'");
}

inline std::string to_string(MedianRule r) { return r == MedianRule::Step ? "step" : "linear"; }

// ---------------------------------------------------------------------------
// Hyper-parameter grids

/// One fully specified hyper-parameter setting.
struct GridPoint {
  std::vector<int> shared_layers{15, 10};
  std::vector<int> head_layers{5};
  double dropout = 0.1;
  bool batch_norm = true;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 0;
  int max_epochs = 2000;
  int patience = 50;
  double alpha = 0.0;
  double epsilon = 0.1;
  int ipm_max_points = 128;
  int sinkhorn_iter = 50;
  double ridge = 0.1;
  double lasso = 0.0;

  NetworkSpec network(Index input_dim, std::uint64_t seed) const {
    NetworkSpec s;
    s.input_dim = input_dim;
    s.shared_layers = shared_layers;
    s.head_layers = head_layers;
    s.dropout_rate = dropout;
    s.use_batch_norm = batch_norm;
    s.seed = seed;
    return s;
  }

  BitesLossConfig loss() const {
    BitesLossConfig c;
    c.alpha = alpha;
    c.sinkhorn = SinkhornConfig{2.0, epsilon, sinkhorn_iter, 1e-6, 0.5};
    c.ipm_max_points = ipm_max_points;
    return c;
  }

  TrainConfig training(std::uint64_t seed) const {
    TrainConfig t;
    t.learning_rate = learning_rate;
    t.weight_decay = weight_decay;
    t.batch_size = batch_size;
    t.max_epochs = max_epochs;
    t.patience = patience;
    t.seed = seed;
    return t;
  }
};

namespace detail {

inline std::string layers_label(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "-" : "") + std::to_string(v[i]);
  return s + "]";
}

inline std::string num_label(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

}  // namespace detail

/// Keys that vary per method; everything else is fixed for that method.
inline std::vector<std::string> grid_keys(Method m) {
  switch (m) {
    case Method::Bites:
      return {"shared_layers", "head_layers", "dropout", "batch_norm", "learning_rate", "weight_decay", "batch_size",
              "max_epochs", "patience", "alpha", "epsilon", "ipm_max_points", "sinkhorn_iter"};
    case Method::Ites:
      return {"shared_layers", "head_layers", "dropout", "batch_norm", "learning_rate", "weight_decay", "batch_size",
              "max_epochs", "patience"};
    case Method::DeepSurvSingle:
    case Method::TDeepSurv:
      return {"layers", "dropout", "batch_norm", "learning_rate", "weight_decay", "batch_size", "max_epochs",
              "patience"};
    case Method::CoxTLearner: return {"ridge", "lasso"};
  }
  return {};
}

inline Json grid_point_to_json(Method m, const GridPoint& g) {
  Json j = Json::object();
  for (const auto& k : grid_keys(m)) {
    if (k == "shared_layers") j[k] = g.shared_layers;
    else if (k == "head_layers") j[k] = g.head_layers;
    else if (k == "layers") j[k] = m == Method::TDeepSurv ? g.head_layers : g.shared_layers;
    else if (k == "dropout") j[k] = g.dropout;
    else if (k == "batch_norm") j[k] = g.batch_norm;
    else if (k == "learning_rate") j[k] = g.learning_rate;
    else if (k == "weight_decay") j[k] = g.weight_decay;
    else if (k == "batch_size") j[k] = g.batch_size;
    else if (k == "max_epochs") j[k] = g.max_epochs;
    else if (k == "patience") j[k] = g.patience;
    else if (k == "alpha") j[k] = g.alpha;
    else if (k == "epsilon") j[k] = g.epsilon;
    else if (k == "ipm_max_points") j[k] = g.ipm_max_points;
    else if (k == "sinkhorn_iter") j[k] = g.sinkhorn_iter;
    else if (k == "ridge") j[k] = g.ridge;
    else if (k == "lasso") j[k] = g.lasso;
  }
  return j;
}

inline GridPoint grid_point_from_json(Method m, const Json& j) {
  GridPoint g;
  if (j.contains("shared_layers")) g.shared_layers = j["shared_layers"].get<std::vector<int>>();
  if (j.contains("head_layers")) g.head_layers = j["head_layers"].get<std::vector<int>>();
  if (j.contains("layers")) {
    if (m == Method::TDeepSurv) {
      g.shared_layers.clear();
      g.head_layers = j["layers"].get<std::vector<int>>();
    } else {
      g.shared_layers = j["layers"].get<std::vector<int>>();
    }
  }
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) v = j[k].get<std::decay_t<decltype(v)>>();
  };
  get("dropout", g.dropout);
  get("batch_norm", g.batch_norm);
  get("learning_rate", g.learning_rate);
  get("weight_decay", g.weight_decay);
  get("batch_size", g.batch_size);
  get("max_epochs", g.max_epochs);
  get("patience", g.patience);
  get("alpha", g.alpha);
  get("epsilon", g.epsilon);
  get("ipm_max_points", g.ipm_max_points);
  get("sinkhorn_iter", g.sinkhorn_iter);
  get("ridge", g.ridge);
  get("lasso", g.lasso);
  if (m == Method::Ites || m == Method::TDeepSurv || m == Method::DeepSurvSingle) g.alpha = 0.0;
  if (m == Method::TDeepSurv) g.shared_layers.clear();
  return g;
}

inline std::string grid_label(Method m, const GridPoint& g) {
  std::string s;
  const Json j = grid_point_to_json(m, g);
  for (const auto& [k, v] : j.items()) {
    if (!s.empty()) s += ' ';
    s += k + '=';
    if (v.is_array()) s += detail::layers_label(v.get<std::vector<int>>());
    else if (v.is_boolean()) s += v.get<bool>() ? "true" : "false";
    else s += detail::num_label(v.get<double>());
  }
  return s;
}

/// Lists per field for one method, expanded as a Cartesian product.
struct MethodGrid {
  Method method = Method::Bites;
  std::map<std::string, std::vector<Json>> options;  // key -> candidate values

  std::vector<GridPoint> expand() const {
    std::vector<Json> points{Json::object()};
    for (const auto& key : grid_keys(method)) {
      auto it = options.find(key);
      if (it == options.end()) continue;
      std::vector<Json> next;
      for (const auto& p : points)
        for (const auto& v : it->second) {
          Json q = p;
          q[key] = v;
          next.push_back(std::move(q));
        }
      points = std::move(next);
    }
    std::vector<GridPoint> out;
    for (const auto& p : points) out.push_back(grid_point_from_json(method, p));
    return out;
  }
};

inline MethodGrid parse_method_grid(Method m, const Json& j) {
  if (!j.is_object()) throw ConfigError("methods." + to_string(m) + ": expected an object");
  MethodGrid g;
  g.method = m;
  const auto keys = grid_keys(m);
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("methods." + to_string(m) + ": unknown key '" + k + "'");
    std::vector<Json> opts;
    const bool layered = k == "shared_layers" || k == "head_layers" || k == "layers";
    if (layered) {
      if (!v.is_array()) throw ConfigError("methods." + to_string(m) + "." + k + ": expected a list");
      if (!v.empty() && v.front().is_array()) {
        for (const auto& o : v) opts.push_back(o);
      } else {
        opts.push_back(v);
      }
    } else if (v.is_array()) {
      for (const auto& o : v) opts.push_back(o);
    } else {
      opts.push_back(v);
    }
    if (opts.empty()) throw ConfigError("methods." + to_string(m) + "." + k + ": empty grid");
    for (const auto& o : opts) {
      try {
        grid_point_from_json(m, Json{{k, o}});
      } catch (const Json::exception&) {
        throw ConfigError("methods." + to_string(m) + "." + k + ": invalid value " + o.dump());
      }
    }
    if (m == Method::Ites && k == "alpha") throw ConfigError("methods.ites: alpha is fixed at 0");
    g.options[k] = std::move(opts);
  }
  for (const auto& p : g.expand()) {
    if (m == Method::CoxTLearner) {
      if (!(p.ridge >= 0.0) || !(p.lasso >= 0.0)) throw ConfigError("methods.cox_tlearner: penalties must be >= 0");
      continue;
    }
    p.network(1, 0).validate();
    p.loss().validate();
    p.training(0).validate();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct DataConfig {
  enum class Source { Simulation, Csv } source = Source::Simulation;
  Design design = Design::Linear;
  int n_train = 600;
  int n_test = 1000;
  double train_fraction = 0.6;
  std::optional<double> censor_fraction;
  std::optional<double> horizon;
  std::optional<double> noise_variance;
  std::optional<double> bias_prob;
  std::string train_csv;
  std::string test_csv;
  CsvSchema schema;
  bool standardize = true;

  /// Samples simulated per study; the split takes n_train of them.
  int pool_size() const { return static_cast<int>(std::lround(n_train / train_fraction)); }

  SimulationConfig simulation(int n, std::uint64_t seed) const {
    auto c = SimulationConfig::defaults(design, n, seed);
    if (censor_fraction) c.censor_fraction = *censor_fraction;
    if (horizon) c.horizon = *horizon;
    if (noise_variance) c.noise_variance = *noise_variance;
    if (bias_prob) c.bias_prob = *bias_prob;
    return c;
  }
};

struct StudyConfig {
  std::string name = "study";
  int replicates = 50;
  std::uint64_t seed = 0;
  SelectionMetric selection = SelectionMetric::ValidationCIndex;
  MedianRule median_rule = MedianRule::Step;
};

struct ExperimentConfig {
  StudyConfig study;
  DataConfig data;
  std::vector<MethodGrid> methods;
  Json source;  // normalized document, hashed into the manifest
};

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where + "." + key + ": invalid value " + j.at(key).dump());
  }
}

}  // namespace detail

/// Parses the JSON experiment document. Relative CSV paths resolve against `base_dir`.
inline ExperimentConfig parse_experiment_config(const Json& j, const std::filesystem::path& base_dir = {},
                                                bool require_methods = true) {
  detail::check_keys(j, "config", {"study", "data", "methods"});
  ExperimentConfig cfg;
  const Json data = j.value("data", Json::object());
  detail::check_keys(data, "data",
                     {"source", "design", "n_train", "n_test", "train_fraction", "censor_fraction", "horizon",
                      "noise_variance", "bias_prob", "train", "test", "time", "event", "treatment", "id", "exclude",
                      "standardize"});
  auto& d = cfg.data;
  const auto source = detail::get_or<std::string>(data, "source", "simulation", "data");
  if (source == "simulation") {
    d.source = DataConfig::Source::Simulation;
    d.design = parse_design(detail::get_or<std::string>(data, "design", "linear", "data"));
    d.n_train = detail::get_or<int>(data, "n_train", 600, "data");
    d.n_test = detail::get_or<int>(data, "n_test", 1000, "data");
    d.train_fraction = detail::get_or<double>(data, "train_fraction", 0.6, "data");
    if (data.contains("censor_fraction")) d.censor_fraction = detail::get_or<double>(data, "censor_fraction", 0, "data");
    if (data.contains("horizon")) d.horizon = detail::get_or<double>(data, "horizon", 0, "data");
    if (data.contains("noise_variance")) d.noise_variance = detail::get_or<double>(data, "noise_variance", 0, "data");
    if (data.contains("bias_prob")) d.bias_prob = detail::get_or<double>(data, "bias_prob", 0, "data");
    if (d.n_train < 2) throw ConfigError("data.n_train must be >= 2");
    if (d.n_test < 2) throw ConfigError("data.n_test must be >= 2");
    d.simulation(d.pool_size(), 0).validate();
  } else if (source == "csv") {
    d.source = DataConfig::Source::Csv;
    d.train_fraction = detail::get_or<double>(data, "train_fraction", 0.8, "data");
    auto resolve = [&](const std::string& p) {
      if (p.empty()) return p;
      const std::filesystem::path path(p);
      return (path.is_relative() && !base_dir.empty() ? base_dir / path : path).string();
    };
    d.train_csv = resolve(detail::get_or<std::string>(data, "train", "", "data"));
    d.test_csv = resolve(detail::get_or<std::string>(data, "test", "", "data"));
    d.schema.time = detail::get_or<std::string>(data, "time", "time", "data");
    d.schema.event = detail::get_or<std::string>(data, "event", "event", "data");
    d.schema.treatment = detail::get_or<std::string>(data, "treatment", "treatment", "data");
    d.schema.id = detail::get_or<std::string>(data, "id", "", "data");
    d.schema.exclude = detail::get_or<std::vector<std::string>>(data, "exclude", {}, "data");
  } else {
    throw ConfigError("data.source must be 'simulation' or 'csv'");
  }
  d.standardize = detail::get_or<bool>(data, "standardize", true, "data");
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1)");

  const Json study = j.value("study", Json::object());
  detail::check_keys(study, "study", {"name", "replicates", "seed", "selection_metric", "median_rule"});
  auto& s = cfg.study;
  s.name = detail::get_or<std::string>(study, "name", "study", "study");
  s.replicates = detail::get_or<int>(study, "replicates", d.source == DataConfig::Source::Csv ? 1 : 50, "study");
  s.seed = detail::get_or<std::uint64_t>(study, "seed", 0, "study");
  s.selection = parse_selection(detail::get_or<std::string>(
      study, "selection_metric",
      d.source == DataConfig::Source::Csv ? "validation_loss" : "validation_c_index", "study"));
  s.median_rule = parse_median_rule(detail::get_or<std::string>(study, "median_rule", "step", "study"));
  if (s.replicates < 1) throw ConfigError("study.replicates must be >= 1");

  if (!require_methods && !j.contains("methods")) {
    cfg.source = j;
    cfg.source["study"]["seed"] = s.seed;
    return cfg;
  }
  if (!j.contains("methods") || !j["methods"].is_object() || j["methods"].empty())
    throw ConfigError("config: 'methods' must name at least one method");
  // Fixed method order keeps outputs independent of key order in the file.
  for (auto m : {Method::CoxTLearner, Method::DeepSurvSingle, Method::TDeepSurv, Method::Ites, Method::Bites}) {
    if (j["methods"].contains(to_string(m))) cfg.methods.push_back(parse_method_grid(m, j["methods"][to_string(m)]));
  }
  for (const auto& [k, v] : j["methods"].items()) parse_method(k);
  cfg.source = j;
  cfg.source["study"]["seed"] = s.seed;
  return cfg;
}

/// `seed` overrides study.seed when given.
inline ExperimentConfig load_experiment_config(const std::string& path, bool require_methods = true,
                                               std::optional<std::uint64_t> seed = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + path + "': expected a JSON object");
  if (seed) j["study"]["seed"] = *seed;
  return parse_experiment_config(j, std::filesystem::path(path).parent_path(), require_methods);
}

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Fitted recommenders

struct Scored {
  std::array<std::vector<SurvivalCurve>, 2> curves;
  std::vector<IteEstimate> ite;
  Vector factual_score;  // log-hazard of the applied arm
};

/// A fitted recommender of any method together with its preprocessing.
struct FittedModel {
  Method method = Method::Bites;
  GridPoint grid;
  std::variant<BitesModel, DeepSurvModel, CoxTLearner> model;
  std::vector<std::string> feature_names;
  Standardizer standardizer;
  double validation_loss = std::nan("");
  int epochs = 0;
  int best_epoch = 0;

  Vector scores(const Matrix& x, int arm) const {
    return std::visit(
        [&](const auto& m) -> Vector {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, BitesModel>) {
            const auto r = m.forward(x, Mode::Eval);
            return arm == 0 ? r.s0 : r.s1;
          } else if constexpr (std::is_same_v<M, DeepSurvModel>) {
            return m.score(x, arm);
          } else {
            return m.arms[static_cast<std::size_t>(arm)].scores(x);
          }
        },
        model);
  }

  /// Curves, effects and factual scores for standardized features.
  Scored score(const Matrix& x, const std::vector<int>& applied, MedianRule rule) const {
    Scored s;
    s.curves = std::visit([&](const auto& m) { return m.predict_curves(x); }, model);
    s.ite = ite_from_curve_sets(s.curves, rule);
    const Vector h0 = scores(x, 0);
    const Vector h1 = scores(x, 1);
    if (method == Method::DeepSurvSingle)
      for (Index i = 0; i < x.rows(); ++i) s.ite[static_cast<std::size_t>(i)].recommended = h1[i] < h0[i] ? 1 : 0;
    if (!applied.empty()) {
      s.factual_score.resize(x.rows());
      for (Index i = 0; i < x.rows(); ++i) s.factual_score[i] = applied[static_cast<std::size_t>(i)] ? h1[i] : h0[i];
    }
    return s;
  }
};

namespace detail {

inline double cox_validation_loss(const CoxTLearner& m, const SurvivalDataset& val, double q) {
  double total = 0.0;
  for (int arm : {0, 1}) {
    const auto sub = val.subset(val.arm_rows(arm));
    if (sub.size() == 0 || std::count(sub.event.begin(), sub.event.end(), 1) == 0) continue;
    const double w = arm == 0 ? q : 1.0 - q;
    total += w * cox_nll(m.arms[static_cast<std::size_t>(arm)].scores(sub.features), sub.time, sub.event);
  }
  return total;
}

}  // namespace detail

/// Fits one method on standardized train/validation data.
inline FittedModel fit_method(Method method, const GridPoint& g, const SurvivalDataset& train,
                              const SurvivalDataset& val, std::uint64_t seed) {
  FittedModel f;
  f.method = method;
  f.grid = g;
  f.feature_names = train.feature_names;
  switch (method) {
    case Method::Bites:
    case Method::Ites:
    case Method::TDeepSurv: {
      GridPoint gp = g;
      if (method != Method::Bites) gp.alpha = 0.0;
      if (method == Method::TDeepSurv) gp.shared_layers.clear();
      auto m = fit_bites(train, val, gp.network(train.dim(), seed), gp.loss(), gp.training(seed));
      f.epochs = m.history().stopped_epoch;
      f.best_epoch = m.history().best_epoch;
      f.validation_loss = m.history().validation_loss[static_cast<std::size_t>(f.best_epoch - 1)];
      f.model = std::move(m);
      break;
    }
    case Method::DeepSurvSingle: {
      auto m = fit_deepsurv(train, val, g.network(train.dim(), seed), g.training(seed));
      f.epochs = m.history().stopped_epoch;
      f.best_epoch = m.history().best_epoch;
      f.validation_loss = m.history().validation_loss[static_cast<std::size_t>(f.best_epoch - 1)];
      f.model = std::move(m);
      break;
    }
    case Method::CoxTLearner: {
      auto m = fit_cox_tlearner(train, {g.ridge, g.lasso, 10000, 1e-7});
      const double q = static_cast<double>(train.arm_count(0)) / static_cast<double>(train.size());
      f.validation_loss = detail::cox_validation_loss(m, val, q);
      f.epochs = std::max(m.fits[0].iterations, m.fits[1].iterations);
      f.model = std::move(m);
      break;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Model files

inline Json model_file_json(const FittedModel& f, const CsvSchema& schema, MedianRule rule) {
  Json model = std::visit([](const auto& m) { return to_json(m); }, f.model);
  return {{"format", "bites-model"},
          {"version", kVersion},
          {"method", to_string(f.method)},
          {"grid_point", grid_point_to_json(f.method, f.grid)},
          {"feature_names", f.feature_names},
          {"standardizer", io::standardizer_to_json(f.standardizer)},
          {"schema",
           {{"time", schema.time},
            {"event", schema.event},
            {"treatment", schema.treatment},
            {"id", schema.id},
            {"exclude", schema.exclude}}},
          {"median_rule", to_string(rule)},
          {"validation_loss", f.validation_loss},
          {"model", std::move(model)}};
}

struct LoadedModel {
  FittedModel fitted;
  CsvSchema schema;
  MedianRule median_rule = MedianRule::Step;
};

inline LoadedModel load_model_json(const Json& j) {
  try {
    if (j.at("format") != "bites-model") throw DataError("model file: unexpected format");
    LoadedModel out;
    auto& f = out.fitted;
    f.method = parse_method(j.at("method").get<std::string>());
    f.grid = grid_point_from_json(f.method, j.at("grid_point"));
    f.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    f.standardizer = io::standardizer_from_json(j.at("standardizer"));
    const auto& s = j.at("schema");
    out.schema.time = s.at("time").get<std::string>();
    out.schema.event = s.at("event").get<std::string>();
    out.schema.treatment = s.at("treatment").get<std::string>();
    out.schema.id = s.at("id").get<std::string>();
    out.schema.exclude = s.at("exclude").get<std::vector<std::string>>();
    out.median_rule = parse_median_rule(j.at("median_rule").get<std::string>());
    if (!j.at("validation_loss").is_null()) f.validation_loss = j.at("validation_loss").get<double>();
    const auto& m = j.at("model");
    switch (f.method) {
      case Method::Bites:
      case Method::Ites:
      case Method::TDeepSurv: f.model = bites_model_from_json(m); break;
      case Method::DeepSurvSingle: f.model = deepsurv_model_from_json(m); break;
      case Method::CoxTLearner: f.model = cox_tlearner_from_json(m); break;
    }
    if (static_cast<Index>(f.feature_names.size()) != f.standardizer.mean.size())
      throw DataError("model file: feature names disagree with standardizer");
    return out;
  } catch (const Json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
}

inline LoadedModel load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError("model file '" + path + "': " + e.what());
  }
  return load_model_json(j);
}

/// Loads CSV rows for a stored model and checks the feature columns.
inline SurvivalDataset load_for_model(const LoadedModel& m, const std::string& path, bool require_outcomes) {
  CsvSchema schema = m.schema;
  schema.require_outcomes = require_outcomes;
  schema.require_treatment = require_outcomes;
  auto ds = load_csv(path, schema);
  if (ds.feature_names != m.fitted.feature_names) {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
      return s;
    };
    throw DataError("feature-name mismatch: model expects [" + join(m.fitted.feature_names) + "], data has [" +
                    join(ds.feature_names) + "]");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Output tables

using Cell = std::variant<std::string, double, long long>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row) {
    if (row.size() != columns.size()) throw std::logic_error("table row width mismatch");
    rows.push_back(std::move(row));
  }
};

enum class OutputFormat { Csv, Json };

inline OutputFormat parse_format(const std::string& s) {
  if (s == "csv") return OutputFormat::Csv;
  if (s == "json") return OutputFormat::Json;
  throw ConfigError("unknown format '" + s + "' (expected csv or json)");
}

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

inline void write_table(std::ostream& out, const Table& t, OutputFormat fmt) {
  if (fmt == OutputFormat::Csv) {
    for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << detail::csv_escape(t.columns[c]);
    out << '\n';
    for (const auto& row : t.rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c) out << ',';
        std::visit(
            [&](const auto& v) {
              using V = std::decay_t<decltype(v)>;
              if constexpr (std::is_same_v<V, std::string>) out << detail::csv_escape(v);
              else if constexpr (std::is_same_v<V, double>) out << format_double(v);
              else out << v;
            },
            row[c]);
      }
      out << '\n';
    }
    return;
  }
  Json arr = Json::array();
  for (const auto& row : t.rows) {
    Json o = Json::object();
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, double>) o[t.columns[c]] = std::isfinite(v) ? Json(v) : Json(nullptr);
            else o[t.columns[c]] = v;
          },
          row[c]);
    }
    arr.push_back(std::move(o));
  }
  out << arr.dump(1) << '\n';
}

/// Writes `stem`.csv or `stem`.json into `dir`; returns the file name.
inline std::string write_table_file(const std::filesystem::path& dir, const std::string& stem, const Table& t,
                                    OutputFormat fmt) {
  const std::string name = stem + (fmt == OutputFormat::Csv ? ".csv" : ".json");
  std::ofstream out(dir / name, std::ios::binary);
  if (!out) throw DataError("cannot write '" + (dir / name).string() + "'");
  write_table(out, t, fmt);
  return name;
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

inline Json manifest(const std::string& command, const ExperimentConfig* cfg, std::uint64_t seed,
                     const std::vector<std::string>& outputs) {
  Json m{{"tool", "bites"},
         {"version", kVersion},
         {"command", command},
         {"seed", seed},
         {"versions",
          {{"bites", kVersion},
           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                         std::to_string(EIGEN_MINOR_VERSION)},
           {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                 std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                 std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
         {"outputs", outputs}};
  if (cfg) {
    m["config_hash"] = fnv1a_hex(cfg->source.dump());
    m["config"] = cfg->source;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Studies

/// Runs `f(i)` for i in [0, n) on up to `workers` threads. `f` must not throw.
template <typename F>
void parallel_for(std::size_t n, int workers, F&& f) {
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) f(i);
  };
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n <= 1) {
    work();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < std::min(threads, n); ++k) pool.emplace_back(work);
  for (auto& t : pool) t.join();
}

struct RunRecord {
  Method method = Method::Bites;
  int grid_id = 0;
  int replicate = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t model_seed = 0;
  bool ok = false;
  std::string error;
  double validation_loss = std::nan("");
  double validation_c = std::nan("");
  double antolini_c = std::nan("");
  double harrell_c = std::nan("");
  double pehe = std::nan("");
  double correct_fraction = std::nan("");
  double always_treat_fraction = std::nan("");
  double fraction_treat = std::nan("");
  int epochs = 0;
  int best_epoch = 0;
};

struct SummaryRow {
  Method method = Method::Bites;
  int grid_id = 0;
  std::string label;
  int n_ok = 0;
  int n_failed = 0;
  std::map<std::string, std::pair<double, double>> stats;  // metric -> (mean, sd)
  bool selected = false;
};

struct StudyResult {
  std::vector<RunRecord> runs;
  std::vector<SummaryRow> summary;
  std::vector<std::vector<GridPoint>> grids;  // per configured method
  std::map<Method, int> selected;            // method -> grid id
};

inline const std::vector<std::string>& summary_metrics() {
  static const std::vector<std::string> m{"validation_loss", "validation_c", "antolini_c",   "harrell_c",
                                          "pehe",            "correct_fraction", "always_treat_fraction",
                                          "fraction_treat"};
  return m;
}

inline double run_metric(const RunRecord& r, const std::string& k) {
  if (k == "validation_loss") return r.validation_loss;
  if (k == "validation_c") return r.validation_c;
  if (k == "antolini_c") return r.antolini_c;
  if (k == "harrell_c") return r.harrell_c;
  if (k == "pehe") return r.pehe;
  if (k == "correct_fraction") return r.correct_fraction;
  if (k == "always_treat_fraction") return r.always_treat_fraction;
  if (k == "fraction_treat") return r.fraction_treat;
  throw std::logic_error("unknown metric " + k);
}

/// Mean and sample sd over the finite values in fixed order.
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double sum = 0.0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  if (n == 0) return {std::nan(""), std::nan("")};
  const double mean = sum / n;
  if (n == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v)
    if (std::isfinite(x)) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1))};
}

/// Per-grid-point summaries computed only from the run rows, and the
/// selected grid point of each method.
inline void summarize(StudyResult& r, SelectionMetric selection) {
  r.summary.clear();
  r.selected.clear();
  std::map<std::pair<int, int>, std::vector<const RunRecord*>> groups;
  for (const auto& run : r.runs) groups[{static_cast<int>(run.method), run.grid_id}].push_back(&run);
  for (const auto& [key, runs] : groups) {
    SummaryRow s;
    s.method = static_cast<Method>(key.first);
    s.grid_id = key.second;
    for (const auto* run : runs) (run->ok ? s.n_ok : s.n_failed) += 1;
    for (const auto& k : summary_metrics()) {
      std::vector<double> v;
      for (const auto* run : runs)
        if (run->ok) v.push_back(run_metric(*run, k));
      s.stats[k] = mean_sd(v);
    }
    r.summary.push_back(std::move(s));
  }
  for (auto& s : r.summary) {
    if (s.n_ok == 0) continue;
    const double v = selection == SelectionMetric::ValidationCIndex ? s.stats["validation_c"].first
                                                                     : s.stats["validation_loss"].first;
    if (!std::isfinite(v)) continue;
    auto it = r.selected.find(s.method);
    bool better = it == r.selected.end();
    if (!better) {
      const auto& cur = *std::find_if(r.summary.begin(), r.summary.end(), [&](const SummaryRow& o) {
        return o.method == s.method && o.grid_id == it->second;
      });
      const double w = selection == SelectionMetric::ValidationCIndex ? cur.stats.at("validation_c").first
                                                                       : cur.stats.at("validation_loss").first;
      better = selection == SelectionMetric::ValidationCIndex ? v > w : v < w;
    }
    if (better) r.selected[s.method] = s.grid_id;
  }
  for (auto& s : r.summary) {
    auto it = r.selected.find(s.method);
    s.selected = it != r.selected.end() && it->second == s.grid_id;
  }
}

struct StudyData {
  SurvivalDataset pool;
  std::optional<GroundTruth> pool_truth;
  std::optional<SurvivalDataset> test;
  std::optional<GroundTruth> test_truth;
};

inline StudyData load_study_data(const ExperimentConfig& cfg) {
  StudyData d;
  if (cfg.data.source == DataConfig::Source::Simulation) {
    auto [pool, pool_truth] = simulate(cfg.data.simulation(cfg.data.pool_size(), derive_seed(cfg.study.seed, {1})));
    auto [test, test_truth] = simulate(cfg.data.simulation(cfg.data.n_test, derive_seed(cfg.study.seed, {2})));
    d.pool = std::move(pool);
    d.pool_truth = std::move(pool_truth);
    d.test = std::move(test);
    d.test_truth = std::move(test_truth);
  } else {
    if (cfg.data.train_csv.empty()) throw ConfigError("data.train is required for csv sources");
    d.pool = load_csv(cfg.data.train_csv, cfg.data.schema);
    d.pool.validate();
    if (!cfg.data.test_csv.empty()) {
      auto schema = cfg.data.schema;
      d.test = load_csv(cfg.data.test_csv, schema);
      d.test->validate();
      if (d.test->feature_names != d.pool.feature_names) throw DataError("test csv: feature-name mismatch");
    }
  }
  return d;
}

struct RunOutput {
  RunRecord record;
  std::optional<FittedModel> model;
};

/// One (method, grid point, replicate) cell of a study.
inline RunOutput run_one(const ExperimentConfig& cfg, const StudyData& data, Method method, int grid_id,
                         const GridPoint& g, int replicate, bool keep_model) {
  RunOutput out;
  auto& r = out.record;
  r.method = method;
  r.grid_id = grid_id;
  r.replicate = replicate;
  r.split_seed = derive_seed(cfg.study.seed, {3, static_cast<std::uint64_t>(replicate)});
  r.model_seed = derive_seed(cfg.study.seed, {4, static_cast<std::uint64_t>(method),
                                              static_cast<std::uint64_t>(grid_id),
                                              static_cast<std::uint64_t>(replicate)});
  try {
    auto [train, val] = split(data.pool, cfg.data.train_fraction, r.split_seed, true);
    Standardizer st;
    if (cfg.data.standardize) {
      st = fit_standardizer(train.features);
    } else {
      st.mean = Vector::Zero(train.dim());
      st.sd = Vector::Ones(train.dim());
    }
    train = st.apply(train);
    val = st.apply(val);
    auto fitted = fit_method(method, g, train, val, r.model_seed);
    fitted.standardizer = st;
    r.validation_loss = fitted.validation_loss;
    r.epochs = fitted.epochs;
    r.best_epoch = fitted.best_epoch;
    {
      const auto sv = fitted.score(val.features, val.treatment, cfg.study.median_rule);
      std::vector<SurvivalCurve> factual;
      for (Index i = 0; i < val.size(); ++i)
        factual.push_back(sv.curves[static_cast<std::size_t>(val.treatment[static_cast<std::size_t>(i)])]
                                   [static_cast<std::size_t>(i)]);
      r.validation_c = antolini_c(factual, val.time, val.event);
    }
    if (data.test) {
      const auto test = st.apply(*data.test);
      const auto s = fitted.score(test.features, test.treatment, cfg.study.median_rule);
      std::vector<SurvivalCurve> factual;
      std::vector<int> rec;
      Vector tau(test.size());
      for (Index i = 0; i < test.size(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        factual.push_back(s.curves[static_cast<std::size_t>(test.treatment[k])][k]);
        rec.push_back(s.ite[k].recommended);
        tau[i] = s.ite[k].tau_median;
      }
      r.antolini_c = antolini_c(factual, test.time, test.event);
      r.harrell_c = harrell_c(s.factual_score, test.time, test.event);
      r.fraction_treat = static_cast<double>(std::count(rec.begin(), rec.end(), 1)) / static_cast<double>(rec.size());
      if (data.test_truth) {
        const auto& truth = *data.test_truth;
        r.pehe = pehe_effect(truth.y0, truth.y1, tau);
        r.correct_fraction = correct_treatment_fraction(rec, truth.best_treatment);
        r.always_treat_fraction =
            correct_treatment_fraction(std::vector<int>(rec.size(), 1), truth.best_treatment);
      }
    }
    r.ok = true;
    if (keep_model) out.model = std::move(fitted);
  } catch (const std::exception& e) {
    r.ok = false;
    const char* kind = dynamic_cast<const NumericalError*>(&e) ? "numerical"
                       : dynamic_cast<const DataError*>(&e)    ? "data"
                       : dynamic_cast<const ConfigError*>(&e)  ? "config"
                                                               : "error";
    r.error = std::string(kind) + ": " + e.what();
  }
  return out;
}

using ProgressFn = std::function<void(const RunRecord&, std::size_t done, std::size_t total)>;

struct StudyRun {
  StudyResult result;
  std::vector<std::optional<FittedModel>> models;  // parallel to result.runs when kept
};

/// Every (method, grid point, replicate) cell, dispatched to a worker pool;
/// results are collected by index so output order never depends on timing.
inline StudyRun execute_study(const ExperimentConfig& cfg, const StudyData& data, int workers, bool keep_models,
                              const ProgressFn& progress = {}) {
  struct Task {
    Method method;
    int grid_id;
    const GridPoint* grid;
    int replicate;
  };
  StudyRun run;
  for (const auto& mg : cfg.methods) run.result.grids.push_back(mg.expand());
  std::vector<Task> tasks;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m)
    for (std::size_t g = 0; g < run.result.grids[m].size(); ++g)
      for (int rep = 0; rep < cfg.study.replicates; ++rep)
        tasks.push_back({cfg.methods[m].method, static_cast<int>(g), &run.result.grids[m][g], rep});

  std::vector<RunOutput> outputs(tasks.size());
  std::mutex mu;
  std::size_t done = 0;
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    outputs[i] = run_one(cfg, data, t.method, t.grid_id, *t.grid, t.replicate, keep_models);
    if (progress) {
      std::lock_guard<std::mutex> lock(mu);
      progress(outputs[i].record, ++done, tasks.size());
    }
  });
  for (auto& o : outputs) {
    run.result.runs.push_back(o.record);
    run.models.push_back(std::move(o.model));
  }
  summarize(run.result, cfg.study.selection);
  if (std::none_of(run.result.runs.begin(), run.result.runs.end(), [](const RunRecord& r) { return r.ok; })) {
    const std::string first = run.result.runs.empty() ? "no runs" : run.result.runs.front().error;
    if (first.rfind("numerical", 0) == 0) throw NumericalError("every run failed; first error: " + first);
    throw DataError("every run failed; first error: " + first);
  }
  return run;
}

inline StudyResult run_study(const ExperimentConfig& cfg, int workers = 1, const ProgressFn& progress = {}) {
  const auto data = load_study_data(cfg);
  return execute_study(cfg, data, workers, false, progress).result;
}

inline const GridPoint& grid_of(const StudyResult& r, const ExperimentConfig& cfg, Method m, int grid_id) {
  for (std::size_t k = 0; k < cfg.methods.size(); ++k)
    if (cfg.methods[k].method == m) return r.grids[k][static_cast<std::size_t>(grid_id)];
  throw std::logic_error("method not configured");
}

inline Table runs_table(const StudyResult& r, const ExperimentConfig& cfg) {
  Table t;
  t.columns = {"method",          "grid_id",      "grid",          "replicate",  "split_seed",
               "model_seed",      "status",       "validation_loss", "validation_c", "antolini_c",
               "harrell_c",       "pehe",         "correct_fraction", "always_treat_fraction", "fraction_treat",
               "epochs",          "best_epoch"};
  for (const auto& run : r.runs) {
    t.add({to_string(run.method), static_cast<long long>(run.grid_id),
           grid_label(run.method, grid_of(r, cfg, run.method, run.grid_id)), static_cast<long long>(run.replicate),
           std::to_string(run.split_seed), std::to_string(run.model_seed), run.ok ? std::string("ok") : run.error,
           run.validation_loss, run.validation_c, run.antolini_c, run.harrell_c, run.pehe, run.correct_fraction,
           run.always_treat_fraction, run.fraction_treat, static_cast<long long>(run.epochs),
           static_cast<long long>(run.best_epoch)});
  }
  return t;
}

inline Table summary_table(const StudyResult& r, const ExperimentConfig& cfg) {
  Table t;
  t.columns = {"method", "grid_id", "grid", "selected", "n_ok", "n_failed"};
  for (const auto& k : summary_metrics()) {
    t.columns.push_back("mean_" + k);
    t.columns.push_back("sd_" + k);
  }
  for (const auto& s : r.summary) {
    std::vector<Cell> row{to_string(s.method), static_cast<long long>(s.grid_id),
                          grid_label(s.method, grid_of(r, cfg, s.method, s.grid_id)),
                          static_cast<long long>(s.selected ? 1 : 0), static_cast<long long>(s.n_ok),
                          static_cast<long long>(s.n_failed)};
    for (const auto& k : summary_metrics()) {
      row.emplace_back(s.stats.at(k).first);
      row.emplace_back(s.stats.at(k).second);
    }
    t.add(std::move(row));
  }
  return t;
}

/// runs, summary and manifest files for a finished study.
inline std::vector<std::string> write_study_outputs(const StudyResult& r, const ExperimentConfig& cfg,
                                                   const std::filesystem::path& dir, OutputFormat fmt,
                                                   const std::string& command = "study") {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  files.push_back(write_table_file(dir, "runs", runs_table(r, cfg), fmt));
  files.push_back(write_table_file(dir, "summary", summary_table(r, cfg), fmt));
  write_json_file(dir / "manifest.json", manifest(command, &cfg, cfg.study.seed, files));
  files.push_back("manifest.json");
  return files;
}

// ---------------------------------------------------------------------------
// CSV workflow: train, evaluate, recommend

struct TrainOutcome {
  StudyResult result;
  FittedModel best;
  Method best_method = Method::Bites;
  int best_grid = 0;
  int best_replicate = 0;
};

/// Grid search on a CSV cohort; returns the selected run's model. With
/// several methods configured, the one with the best selected summary wins.
inline TrainOutcome run_train(const ExperimentConfig& cfg, int workers = 1, const ProgressFn& progress = {}) {
  if (cfg.data.source != DataConfig::Source::Csv) throw ConfigError("train requires data.source = csv");
  const auto data = load_study_data(cfg);
  auto run = execute_study(cfg, data, workers, true, progress);
  const bool by_c = cfg.study.selection == SelectionMetric::ValidationCIndex;
  auto key = [&](double loss, double c) { return by_c ? -c : loss; };

  TrainOutcome out;
  double best_summary = std::numeric_limits<double>::infinity();
  for (const auto& [method, gid] : run.result.selected) {
    const auto& s = *std::find_if(run.result.summary.begin(), run.result.summary.end(),
                                  [&](const SummaryRow& o) { return o.method == method && o.grid_id == gid; });
    const double v = key(s.stats.at("validation_loss").first, s.stats.at("validation_c").first);
    if (v < best_summary) {
      best_summary = v;
      out.best_method = method;
      out.best_grid = gid;
    }
  }
  if (!std::isfinite(best_summary)) throw NumericalError("train: no run produced a finite selection metric");
  double best_run = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  for (std::size_t i = 0; i < run.result.runs.size(); ++i) {
    const auto& r = run.result.runs[i];
    if (!r.ok || r.method != out.best_method || r.grid_id != out.best_grid) continue;
    const double v = key(r.validation_loss, r.validation_c);
    if (v < best_run) {
      best_run = v;
      best_index = i;
    }
  }
  out.best = std::move(*run.models[best_index]);
  out.best_replicate = run.result.runs[best_index].replicate;
  out.result = std::move(run.result);
  return out;
}

inline Table km_rows(const std::string& group, const KmCurve& km) {
  Table t;
  t.columns = {"group", "time", "survival", "variance", "at_risk", "events", "censored"};
  for (Index k = 0; k < km.time.size(); ++k) {
    const auto i = static_cast<std::size_t>(k);
    t.add({group, km.time[k], km.survival[k], km.variance[k], static_cast<long long>(km.at_risk[i]),
           static_cast<long long>(km.events[i]), static_cast<long long>(km.censored[i])});
  }
  return t;
}

inline void append(Table& into, const Table& from) {
  if (into.columns.empty()) into.columns = from.columns;
  for (const auto& r : from.rows) into.add(r);
}

struct EvaluationOutput {
  Table report;
  Table km_recommendation;
  Table km_treatment;
  Table recommendations;
  double antolini_c = std::nan("");
  double logrank_p = std::nan("");
  double fraction_treat = std::nan("");
};

inline Table recommendation_table(const SurvivalDataset& ds, const std::vector<IteEstimate>& ite, bool debug,
                                  MedianRule rule) {
  Table t;
  t.columns = {"id", "tau_median", "median0", "median1", "restricted0", "restricted1", "recommended"};
  if (debug) t.columns.push_back("tau_swapped");
  for (Index i = 0; i < static_cast<Index>(ite.size()); ++i) {
    const auto& e = ite[static_cast<std::size_t>(i)];
    std::vector<Cell> row{ds.row_id(i),
                          e.tau_median,
                          median_survival(e.curve0, rule).time,
                          median_survival(e.curve1, rule).time,
                          static_cast<long long>(e.restricted0),
                          static_cast<long long>(e.restricted1),
                          static_cast<long long>(e.recommended)};
    if (debug) row.emplace_back(ite_from_curves(e.curve1, e.curve0, rule).tau_median);
    t.add(std::move(row));
  }
  return t;
}

/// Factual C-index, recommendation-stratified Kaplan-Meier curves with the
/// log-rank test between them, treatment-stratified curves and the fraction
/// recommended T = 1.
inline EvaluationOutput run_evaluate(const LoadedModel& m, const SurvivalDataset& raw) {
  raw.validate();
  const auto ds = m.fitted.standardizer.apply(raw);
  const auto s = m.fitted.score(ds.features, ds.treatment, m.median_rule);
  EvaluationOutput out;
  std::vector<SurvivalCurve> factual;
  std::vector<int> rec, group;
  for (Index i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    factual.push_back(s.curves[static_cast<std::size_t>(ds.treatment[k])][k]);
    rec.push_back(s.ite[k].recommended);
    group.push_back(s.ite[k].recommended == ds.treatment[k] ? 1 : 0);
  }
  out.antolini_c = antolini_c(factual, ds.time, ds.event);
  const double harrell = harrell_c(s.factual_score, ds.time, ds.event);
  out.fraction_treat = static_cast<double>(std::count(rec.begin(), rec.end(), 1)) / static_cast<double>(rec.size());

  std::array<std::vector<Index>, 2> rows;
  for (Index i = 0; i < ds.size(); ++i) rows[static_cast<std::size_t>(group[static_cast<std::size_t>(i)])].push_back(i);
  double chi2 = std::nan("");
  if (!rows[0].empty() && !rows[1].empty() && std::count(ds.event.begin(), ds.event.end(), 1) > 0) {
    const auto lr = logrank_test(group, ds.time, ds.event);
    chi2 = lr.chi_square;
    out.logrank_p = lr.p_value;
  }
  const std::array<const char*, 2> names{"anti_recommended", "recommended"};
  for (int g : {1, 0}) {
    if (rows[static_cast<std::size_t>(g)].empty()) continue;
    const auto sub = ds.subset(rows[static_cast<std::size_t>(g)]);
    append(out.km_recommendation, km_rows(names[static_cast<std::size_t>(g)], kaplan_meier(sub.time, sub.event)));
  }
  for (int arm : {0, 1}) {
    const auto r = ds.arm_rows(arm);
    if (r.empty()) continue;
    const auto sub = ds.subset(r);
    append(out.km_treatment, km_rows(arm ? "T=1" : "T=0", kaplan_meier(sub.time, sub.event)));
  }
  if (out.km_recommendation.columns.empty()) out.km_recommendation = km_rows("", KmCurve{});
  if (out.km_treatment.columns.empty()) out.km_treatment = km_rows("", KmCurve{});

  out.report.columns = {"method",  "n",          "c_index", "harrell_c",   "logrank_chi2",  "logrank_p",
                        "fraction_t1", "n_recommended", "n_anti_recommended"};
  out.report.add({to_string(m.fitted.method), static_cast<long long>(ds.size()), out.antolini_c, harrell, chi2,
                  out.logrank_p, out.fraction_treat, static_cast<long long>(rows[1].size()),
                  static_cast<long long>(rows[0].size())});
  out.recommendations = recommendation_table(raw, s.ite, false, m.median_rule);
  return out;
}

inline Table run_recommend(const LoadedModel& m, const SurvivalDataset& raw, bool debug) {
  const Matrix x = m.fitted.standardizer.apply(raw.features);
  const auto s = m.fitted.score(x, {}, m.median_rule);
  return recommendation_table(raw, s.ite, debug, m.median_rule);
}

}  // namespace bites
