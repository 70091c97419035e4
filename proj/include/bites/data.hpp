#pragma once

#include "bites/common.hpp"
#include "bites/rng.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bites {

/// Right-censored survival data with a binary treatment arm per sample.
struct SurvivalDataset {
  Matrix features;                 // n x d
  Vector time;                     // n, years
  std::vector<int> event;          // 1 = event observed, 0 = censored
  std::vector<int> treatment;      // 0 = control, 1 = treated
  std::vector<std::string> feature_names;
  std::vector<std::string> ids;    // optional row identifiers (empty => row index)

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }

  int arm_count(int arm) const {
    return static_cast<int>(std::count(treatment.begin(), treatment.end(), arm));
  }

  /// Checks the structural invariants; throws DataError on violation.
  void validate() const {
    const Index n = features.rows();
    if (n < 1) throw DataError("dataset is empty");
    if (time.size() != n || static_cast<Index>(event.size()) != n ||
        static_cast<Index>(treatment.size()) != n)
      throw DataError("dataset vectors disagree in length");
    if (!feature_names.empty() && static_cast<Index>(feature_names.size()) != features.cols())
      throw DataError("feature name count does not match matrix width");
    for (Index i = 0; i < n; ++i) {
      if (!(time[i] >= 0.0) || !std::isfinite(time[i]))
        throw DataError("row " + std::to_string(i) + ": time must be finite and >= 0");
      if (event[i] != 0 && event[i] != 1)
        throw DataError("row " + std::to_string(i) + ": event must be 0 or 1");
      if (treatment[i] != 0 && treatment[i] != 1)
        throw DataError("row " + std::to_string(i) + ": treatment must be 0 or 1");
    }
    if (!features.allFinite()) throw DataError("feature matrix contains non-finite values");
  }

  SurvivalDataset subset(const std::vector<Index>& rows) const {
    SurvivalDataset out;
    const auto m = static_cast<Index>(rows.size());
    out.features.resize(m, features.cols());
    out.time.resize(m);
    out.event.resize(rows.size());
    out.treatment.resize(rows.size());
    out.feature_names = feature_names;
    for (Index k = 0; k < m; ++k) {
      const Index r = rows[static_cast<std::size_t>(k)];
      out.features.row(k) = features.row(r);
      out.time[k] = time[r];
      out.event[static_cast<std::size_t>(k)] = event[static_cast<std::size_t>(r)];
      out.treatment[static_cast<std::size_t>(k)] = treatment[static_cast<std::size_t>(r)];
      if (!ids.empty()) out.ids.push_back(ids[static_cast<std::size_t>(r)]);
    }
    return out;
  }

  std::vector<Index> arm_rows(int arm) const {
    std::vector<Index> rows;
    for (Index i = 0; i < size(); ++i)
      if (treatment[static_cast<std::size_t>(i)] == arm) rows.push_back(i);
    return rows;
  }

  std::string row_id(Index i) const {
    return ids.empty() ? std::to_string(i) : ids[static_cast<std::size_t>(i)];
  }
};

// ---------------------------------------------------------------------------
// CSV ingestion

/// Column-name mapping for CSV files. Every column not named here is a feature.
struct CsvSchema {
  std::string time = "time";
  std::string event = "event";
  std::string treatment = "treatment";
  std::string id;                      // empty: no id column
  std::vector<std::string> exclude;    // extra non-feature columns
  bool require_outcomes = true;        // time and event must be present
  bool require_treatment = true;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
      cur.push_back(c);
    } else if (c == ',' && !quoted) {
      cells.emplace_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.emplace_back(trim(cur));
  return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses a comma-separated file with a header row. Rows keep file order.
/// Errors name the file line (header is line 1) and the column.
inline SurvivalDataset load_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: empty file (no header row)");
  const auto header = detail::split_csv_line(line);

  auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
    if (name.empty()) return std::nullopt;
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };

  const auto time_col = find_col(schema.time);
  const auto event_col = find_col(schema.event);
  const auto treat_col = find_col(schema.treatment);
  const auto id_col = find_col(schema.id);
  if (schema.require_outcomes && !time_col) throw DataError("csv: missing column '" + schema.time + "'");
  if (schema.require_outcomes && !event_col) throw DataError("csv: missing column '" + schema.event + "'");
  if (schema.require_treatment && !treat_col)
    throw DataError("csv: missing column '" + schema.treatment + "'");
  if (!schema.id.empty() && !id_col) throw DataError("csv: missing column '" + schema.id + "'");

  std::vector<std::size_t> feature_cols;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == time_col || c == event_col || c == treat_col || c == id_col) continue;
    if (std::find(schema.exclude.begin(), schema.exclude.end(), header[c]) != schema.exclude.end()) continue;
    // Outcome columns named in the schema but optional are never features.
    if (header[c] == schema.time || header[c] == schema.event || header[c] == schema.treatment) continue;
    feature_cols.push_back(c);
    names.push_back(header[c]);
  }

  std::vector<double> feats, times;
  std::vector<int> events, treats;
  std::vector<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " cells, found " + std::to_string(cells.size()));
    auto number = [&](std::size_t c) {
      auto v = detail::parse_double(cells[c]);
      if (!v)
        throw DataError("csv line " + std::to_string(line_no) + ", column '" + header[c] +
                        "': cannot parse '" + cells[c] + "' as a number");
      return *v;
    };
    auto flag = [&](std::size_t c) {
      const double v = number(c);
      if (v != 0.0 && v != 1.0)
        throw DataError("csv line " + std::to_string(line_no) + ", column '" + header[c] +
                        "': value " + cells[c] + " is not 0 or 1");
      return static_cast<int>(v);
    };
    for (auto c : feature_cols) feats.push_back(number(c));
    if (time_col) {
      const double t = number(*time_col);
      if (t < 0.0)
        throw DataError("csv line " + std::to_string(line_no) + ", column '" + header[*time_col] +
                        "': negative time");
      times.push_back(t);
    } else {
      times.push_back(0.0);
    }
    events.push_back(event_col ? flag(*event_col) : 0);
    treats.push_back(treat_col ? flag(*treat_col) : 0);
    if (id_col) ids.push_back(cells[*id_col]);
  }
  if (times.empty()) throw DataError("csv: no data rows");

  SurvivalDataset ds;
  const auto n = static_cast<Index>(times.size());
  const auto d = static_cast<Index>(feature_cols.size());
  ds.features = Eigen::Map<Matrix>(feats.data(), n, d);
  ds.time = Eigen::Map<Vector>(times.data(), n);
  ds.event = std::move(events);
  ds.treatment = std::move(treats);
  ds.feature_names = std::move(names);
  ds.ids = std::move(ids);
  return ds;
}

inline SurvivalDataset load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open '" + path + "'");
  return load_csv(in, schema);
}

/// Writes the dataset with columns id?, features..., time, event, treatment.
inline void write_csv(std::ostream& out, const SurvivalDataset& ds, const CsvSchema& schema = {}) {
  out.precision(17);
  if (!schema.id.empty()) out << schema.id << ',';
  for (const auto& n : ds.feature_names) out << n << ',';
  out << schema.time << ',' << schema.event << ',' << schema.treatment << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    if (!schema.id.empty()) out << ds.row_id(i) << ',';
    for (Index j = 0; j < ds.dim(); ++j) out << ds.features(i, j) << ',';
    out << ds.time[i] << ',' << ds.event[static_cast<std::size_t>(i)] << ','
        << ds.treatment[static_cast<std::size_t>(i)] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-feature affine transform fitted on one dataset and replayable on others.
struct Standardizer {
  Vector mean;
  Vector sd;

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw DataError("standardizer: feature count mismatch");
    Matrix out = x;
    for (Index j = 0; j < x.cols(); ++j) out.col(j) = (x.col(j).array() - mean[j]) / sd[j];
    return out;
  }

  SurvivalDataset apply(const SurvivalDataset& ds) const {
    SurvivalDataset out = ds;
    out.features = apply(ds.features);
    return out;
  }
};

/// Fits mean and sample sd per column. Constant columns keep sd = 1.
inline Standardizer fit_standardizer(const Matrix& x) {
  const Index n = x.rows();
  if (n < 2) throw DataError("standardize: need at least 2 rows");
  Standardizer s;
  s.mean = x.colwise().mean().transpose();
  s.sd.resize(x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double ss = (x.col(j).array() - s.mean[j]).square().sum();
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    const double scale = std::max(1.0, std::abs(s.mean[j]));
    s.sd[j] = (sd > 1e-12 * scale && std::isfinite(sd)) ? sd : 1.0;
  }
  return s;
}

inline std::pair<SurvivalDataset, Standardizer> standardize(const SurvivalDataset& ds) {
  auto s = fit_standardizer(ds.features);
  return {s.apply(ds), std::move(s)};
}

// ---------------------------------------------------------------------------
// Train / validation split

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> validation;
};

inline SplitIndices split_indices(const SurvivalDataset& ds, double fraction, std::uint64_t seed,
                                  bool stratify_by_treatment) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split: fraction must lie in (0, 1)");
  Rng rng(seed);
  SplitIndices out;
  auto take = [&](std::vector<Index> pool) {
    const auto m = static_cast<double>(pool.size());
    auto k = static_cast<std::size_t>(std::floor(fraction * m + 0.5));
    k = std::clamp<std::size_t>(k, 1, pool.size() - 1);
    rng.shuffle(pool);
    out.train.insert(out.train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    out.validation.insert(out.validation.end(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end());
  };
  if (stratify_by_treatment) {
    for (int arm : {0, 1}) {
      auto rows = ds.arm_rows(arm);
      if (rows.size() < 2)
        throw DataError("split: arm " + std::to_string(arm) + " has fewer than 2 samples; cannot stratify");
      take(std::move(rows));
    }
  } else {
    if (ds.size() < 2) throw DataError("split: need at least 2 samples");
    std::vector<Index> all(static_cast<std::size_t>(ds.size()));
    std::iota(all.begin(), all.end(), Index{0});
    take(std::move(all));
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  return out;
}

inline std::pair<SurvivalDataset, SurvivalDataset> split(const SurvivalDataset& ds, double fraction,
                                                         std::uint64_t seed, bool stratify_by_treatment) {
  auto idx = split_indices(ds, fraction, seed, stratify_by_treatment);
  return {ds.subset(idx.train), ds.subset(idx.validation)};
}

// ---------------------------------------------------------------------------
// Simulation

enum class Design { Linear, NonLinear, NonLinearBiased };

inline std::string to_string(Design d) {
  switch (d) {
    case Design::Linear: return "linear";
    case Design::NonLinear: return "nonlinear";
    case Design::NonLinearBiased: return "nonlinear_biased";
  }
  return "?";
}

inline Design parse_design(const std::string& s) {
  if (s == "linear") return Design::Linear;
  if (s == "nonlinear" || s == "non_linear") return Design::NonLinear;
  if (s == "nonlinear_biased" || s == "biased") return Design::NonLinearBiased;
  throw ConfigError("unknown simulation design '" + s + "'");
}

inline constexpr int kSimBlock = 10;       // length of x1 and of x2
inline constexpr int kBiasCoordinate = 4;  // 0-based position of the "5th entry"

struct SimulationConfig {
  Design design = Design::Linear;
  int n_samples = 1000;
  std::array<double, kSimBlock> gamma1{};
  std::array<double, kSimBlock> gamma2{};
  double scale_c = 1.0;
  double horizon = 10.0;
  double censor_fraction = 0.5;
  double bias_prob = 0.9;
  double noise_variance = 0.1;
  std::uint64_t seed = 0;

  /// Published parameterization of each design.
  static SimulationConfig defaults(Design design, int n_samples, std::uint64_t seed) {
    SimulationConfig c;
    c.design = design;
    c.n_samples = n_samples;
    c.seed = seed;
    for (int k = 0; k < kSimBlock; ++k) {
      if (design == Design::Linear) {
        c.gamma1[k] = 0.1;
        c.gamma2[k] = (15.0 + 20.0 * k) * 1e-2;
      } else {
        c.gamma1[k] = 2.0;
        c.gamma2[k] = 0.5 + 0.4 * k;
      }
    }
    if (design == Design::Linear) {
      c.scale_c = 1.0;
    } else {
      c.scale_c = 0.01;
    }
    if (design == Design::NonLinearBiased) {
      c.gamma1[kBiasCoordinate] = 0.0;
      c.gamma2[kBiasCoordinate] = 0.0;
    }
    return c;
  }

  void validate() const {
    if (n_samples < 1) throw ConfigError("simulation: n_samples must be positive");
    if (!(horizon > 0.0)) throw ConfigError("simulation: horizon must be > 0");
    if (!(censor_fraction >= 0.0 && censor_fraction <= 1.0))
      throw ConfigError("simulation: censor_fraction must lie in [0, 1]");
    if (!(bias_prob >= 0.0 && bias_prob <= 1.0)) throw ConfigError("simulation: bias_prob must lie in [0, 1]");
    if (!(noise_variance >= 0.0)) throw ConfigError("simulation: noise_variance must be >= 0");
  }
};

struct GroundTruth {
  Vector y0;                        // potential event time under control
  Vector y1;                        // potential event time under treatment
  std::vector<int> best_treatment;  // 1 iff y1 > y0
  Matrix clean_features;            // covariates before observation noise

  GroundTruth subset(const std::vector<Index>& rows) const {
    GroundTruth g;
    const auto m = static_cast<Index>(rows.size());
    g.y0.resize(m);
    g.y1.resize(m);
    g.clean_features.resize(m, clean_features.cols());
    for (Index k = 0; k < m; ++k) {
      const Index r = rows[static_cast<std::size_t>(k)];
      g.y0[k] = y0[r];
      g.y1[k] = y1[r];
      g.best_treatment.push_back(best_treatment[static_cast<std::size_t>(r)]);
      g.clean_features.row(k) = clean_features.row(r);
    }
    return g;
  }
};

/// Log-mean of the potential event times for one row of clean covariates
/// (x1 = first 10 entries, x2 = last 10). Returns {control, treated}.
inline std::pair<double, double> simulation_exponents(const SimulationConfig& cfg,
                                                      const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  double g1x1 = 0.0, g2x1 = 0.0, g1x2 = 0.0;
  for (int k = 0; k < kSimBlock; ++k) {
    g1x1 += cfg.gamma1[k] * x[k];
    g2x1 += cfg.gamma2[k] * x[k];
    g1x2 += cfg.gamma1[k] * x[kSimBlock + k];
  }
  if (cfg.design == Design::Linear) return {cfg.scale_c * (g1x1 + g1x2), cfg.scale_c * (g2x1 + g1x2)};
  return {cfg.scale_c * (g1x1 * g1x1 + g1x2), cfg.scale_c * (g2x1 * g2x1 + g1x2)};
}

struct CensoredTimes {
  Vector time;
  std::vector<int> event;
};

/// Administrative censoring at `horizon`, then floor(censor_fraction * m) of
/// the m remaining samples are censored at U(0,1) times their true time.
inline CensoredTimes apply_censoring(const Vector& times, double horizon, double censor_fraction,
                                     std::uint64_t seed) {
  if (!(horizon > 0.0)) throw ConfigError("censoring: horizon must be > 0");
  Rng rng(seed);
  CensoredTimes out;
  out.time = times;
  out.event.assign(static_cast<std::size_t>(times.size()), 1);
  std::vector<Index> within;
  for (Index i = 0; i < times.size(); ++i) {
    if (times[i] > horizon) {
      out.time[i] = horizon;
      out.event[static_cast<std::size_t>(i)] = 0;
    } else {
      within.push_back(i);
    }
  }
  const auto k = static_cast<std::size_t>(std::floor(censor_fraction * static_cast<double>(within.size())));
  // Partial Fisher-Yates: the first k entries form a uniform sample without replacement.
  for (std::size_t j = 0; j < k; ++j) {
    const auto r = j + static_cast<std::size_t>(rng.below(within.size() - j));
    std::swap(within[j], within[r]);
    const Index i = within[j];
    out.time[i] = rng.uniform_open() * times[i];
    out.event[static_cast<std::size_t>(i)] = 0;
  }
  return out;
}

/// Draws one simulated study. Potential times are exponential with mean
/// exp(exponent); order: covariates, potential times, treatment, horizon
/// censoring, random censoring, covariate noise. Each stage has its own stream.
inline std::pair<SurvivalDataset, GroundTruth> simulate(const SimulationConfig& cfg) {
  cfg.validate();
  const Index n = cfg.n_samples;
  const Index d = 2 * kSimBlock;
  Rng cov_rng(derive_seed(cfg.seed, {1}));
  Rng time_rng(derive_seed(cfg.seed, {2}));
  Rng treat_rng(derive_seed(cfg.seed, {3}));
  Rng noise_rng(derive_seed(cfg.seed, {5}));
  const std::uint64_t censor_seed = derive_seed(cfg.seed, {4});

  GroundTruth truth;
  truth.clean_features.resize(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) truth.clean_features(i, j) = cov_rng.normal();

  truth.y0.resize(n);
  truth.y1.resize(n);
  truth.best_treatment.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto [e0, e1] = simulation_exponents(cfg, truth.clean_features.row(i));
    truth.y0[i] = time_rng.exponential(std::exp(e0));
    truth.y1[i] = time_rng.exponential(std::exp(e1));
    truth.best_treatment[static_cast<std::size_t>(i)] = truth.y1[i] > truth.y0[i] ? 1 : 0;
  }

  SurvivalDataset ds;
  ds.treatment.resize(static_cast<std::size_t>(n));
  Vector factual(n);
  for (Index i = 0; i < n; ++i) {
    double p = 0.5;
    if (cfg.design == Design::NonLinearBiased &&
        (truth.clean_features(i, kBiasCoordinate) > 0.0 ||
         truth.clean_features(i, kSimBlock + kBiasCoordinate) > 0.0))
      p = cfg.bias_prob;
    const int t = treat_rng.uniform() < p ? 1 : 0;
    ds.treatment[static_cast<std::size_t>(i)] = t;
    factual[i] = t == 1 ? truth.y1[i] : truth.y0[i];
  }

  auto censored = apply_censoring(factual, cfg.horizon, cfg.censor_fraction, censor_seed);
  ds.time = std::move(censored.time);
  ds.event = std::move(censored.event);

  const double noise_sd = std::sqrt(cfg.noise_variance);
  ds.features = truth.clean_features;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) ds.features(i, j) += noise_sd * noise_rng.normal();
  for (Index j = 0; j < d; ++j)
    ds.feature_names.push_back((j < kSimBlock ? "x1_" : "x2_") + std::to_string(j % kSimBlock + 1));
  return {std::move(ds), std::move(truth)};
}

}  // namespace bites
