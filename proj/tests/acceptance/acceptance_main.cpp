// Acceptance runner: one PASS / FAIL / INCONCLUSIVE line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include "bites/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <sstream>

using namespace bites;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Inconclusive };

struct Outcome {
  Status status = Status::Fail;
  std::string detail;
};

const char* label(Status s) {
  switch (s) {
    case Status::Pass: return "PASS";
    case Status::Fail: return "FAIL";
    case Status::Inconclusive: return "INCONCLUSIVE";
  }
  return "?";
}

std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << x;
  return os.str();
}

/// Counts failed checks and keeps the first few messages.
struct Checker {
  int checks = 0;
  int failures = 0;
  std::string first;

  void expect(bool ok, const std::string& what) {
    ++checks;
    if (ok) return;
    if (failures++ < 3) first += (first.empty() ? "" : "; ") + what;
  }
  Outcome outcome(const std::string& summary) const {
    if (failures == 0) return {Status::Pass, summary + " (" + std::to_string(checks) + " checks)"};
    return {Status::Fail, std::to_string(failures) + "/" + std::to_string(checks) + " checks failed: " + first};
  }
};

Matrix random_points(Rng& rng, Index m, Index k, double shift = 0.0) {
  Matrix x(m, k);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < k; ++j) x(i, j) = rng.normal() + shift;
  return x;
}

SinkhornConfig tight(double eps, double scaling = 0.0) {
  return SinkhornConfig{2.0, eps, 200000, 1e-12, scaling};
}

SurvivalCurve make_curve(std::vector<double> t, std::vector<double> s) {
  SurvivalCurve c;
  c.time = Eigen::Map<Vector>(t.data(), static_cast<Index>(t.size()));
  c.survival = Eigen::Map<Vector>(s.data(), static_cast<Index>(s.size()));
  return c;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index k = 0;
  for (double x : v) out[k++] = x;
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const auto p = fs::temp_directory_path() / "bites_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + BITES_CLI_PATH + "\" " + args + " --quiet";
  const int rc = std::system(cmd.c_str());
#ifdef WEXITSTATUS
  return rc == -1 ? -1 : WEXITSTATUS(rc);
#else
  return rc;
#endif
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

int workers() {
  if (const char* w = std::getenv("BITES_WORKERS")) return std::max(1, std::atoi(w));
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

// ---------------------------------------------------------------------------
// 1. Gradients

void randomize_running_stats(BitesNetwork& net, Rng& rng) {
  auto touch = [&](Mlp& m) {
    for (auto& b : m.blocks())
      if (b.has_norm())
        for (Index k = 0; k < b.running_mean.size(); ++k) {
          b.running_mean[k] = 0.3 * rng.normal();
          b.running_var[k] = 0.5 + rng.uniform();
          b.bn_scale[k] = 0.5 + rng.uniform();
          b.bn_shift[k] = 0.2 * rng.normal();
        }
  };
  touch(net.trunk);
  for (auto& h : net.heads) touch(h);
}

SurvivalDataset random_batch(Rng& rng, int n, int d) {
  SurvivalDataset ds;
  ds.features.resize(n, d);
  for (Index i = 0; i < ds.features.size(); ++i) ds.features.data()[i] = rng.normal();
  ds.time.resize(n);
  for (Index i = 0; i < n; ++i) {
    ds.time[i] = 0.1 + 5.0 * rng.uniform();
    ds.event.push_back(rng.uniform() < 0.7 ? 1 : 0);
    ds.treatment.push_back(static_cast<int>(i % 2));
  }
  ds.event[0] = ds.event[1] = 1;
  return ds;
}

Outcome criterion_gradients() {
  Checker c;
  Rng rng(101);
  double worst_cox = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 10 + trial;
    Vector s(n), t(n);
    std::vector<int> e(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[i] = rng.normal();
      t[i] = trial % 2 ? std::floor(4.0 * rng.uniform()) + 1.0 : rng.exponential(1.0);
      e[static_cast<std::size_t>(i)] = rng.uniform() < 0.7;
    }
    e[0] = 1;
    const Vector g = cox_nll_grad(s, t, e);
    for (Index k = 0; k < n; ++k) {
      Vector up = s, down = s;
      up[k] += 1e-5;
      down[k] -= 1e-5;
      const double fd = (cox_nll(up, t, e) - cox_nll(down, t, e)) / 2e-5;
      const double rel = std::abs(g[k] - fd) / std::max(std::abs(fd), 1e-3);
      worst_cox = std::max(worst_cox, rel);
      c.expect(rel < 1e-6, "cox trial " + std::to_string(trial) + " rel " + fmt(rel));
    }
  }

  double worst_net = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 2 + trial % 3;
    NetworkSpec spec;
    spec.input_dim = d;
    spec.shared_layers = trial % 4 == 3 ? std::vector<int>{} : std::vector<int>{5, 4};
    spec.head_layers = {3};
    spec.dropout_rate = 0.0;
    spec.use_batch_norm = trial % 3 != 2;
    spec.seed = 200 + static_cast<std::uint64_t>(trial);
    BitesLossConfig loss;
    loss.alpha = trial % 2 ? 1.0 : 0.0;
    loss.sinkhorn = SinkhornConfig{2.0, 1.0, 200000, 1e-13, 0.0};
    loss.ipm_max_points = 0;
    BitesModel model(spec, loss);
    const Mode mode = trial % 4 < 2 ? Mode::Train : Mode::Eval;
    if (mode == Mode::Eval) randomize_running_stats(model.network(), rng);
    // Zero biases put dead-unit rows exactly on a ReLU kink.
    for (auto& p : model.network().parameters())
      if (!p.decay)
        for (double& v : p.values) v += 0.1 * rng.normal();
    const auto batch = random_batch(rng, 10 + trial % 7, static_cast<int>(d));
    const double q = 0.4;
    auto [parts, grad] = bites_backward(model, batch, mode, q);
    auto value = [&] {
      return evaluate_bites_loss(model, batch, q, mode, nullptr, nullptr, false, true).parts.total;
    };
    auto params = model.network().parameters();
    auto grads = grad.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].values.size(); ++i) {
        double& w = params[k].values[i];
        const double w0 = w;
        w = w0 + 1e-6;
        const double up = value();
        w = w0 - 1e-6;
        const double down = value();
        w = w0;
        const double fd = (up - down) / 2e-6;
        const double rel = std::abs(grads[k].values[i] - fd) / std::max(1.0, std::abs(fd));
        worst_net = std::max(worst_net, rel);
        c.expect(rel < 1e-4, "network trial " + std::to_string(trial) + " rel " + fmt(rel));
      }
  }
  return c.outcome("25 Cox instances, worst rel " + fmt(worst_cox, 3) + "; 20 network instances, worst rel " +
                   fmt(worst_net, 3));
}

// ---------------------------------------------------------------------------
// 2. Optimal transport oracles

Outcome criterion_ot() {
  Checker c;
  Rng rng(202);
  double worst_exact = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index k = 1 + trial % 2;
    const auto a = PointCloud::uniform(random_points(rng, 4, k));
    const auto b = PointCloud::uniform(random_points(rng, 4, k, 0.5));
    const double gap = std::abs(sinkhorn_divergence(a, b, tight(1e-3, 0.5)) - exhaustive_ot(a, b, 2.0));
    worst_exact = std::max(worst_exact, gap);
    c.expect(gap < 1e-2, "exact gap " + fmt(gap));
  }
  double worst_self = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = PointCloud::uniform(random_points(rng, 6 + trial, 1 + trial % 3));
    const double v = std::abs(sinkhorn_divergence(a, a, tight(0.05 + 0.1 * trial)));
    worst_self = std::max(worst_self, v);
    c.expect(v < 1e-7, "self divergence " + fmt(v));
  }
  double worst_mmd = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = PointCloud::uniform(random_points(rng, 6, 2));
    const auto b = PointCloud::uniform(random_points(rng, 6, 2, 1.5));
    Matrix both(12, 2);
    both << a.points, b.points;
    const double diam = (both.colwise().maxCoeff() - both.colwise().minCoeff()).norm();
    const double mmd = mmd_energy(a, b, 2.0);
    const double rel = std::abs(sinkhorn_divergence(a, b, tight(1e3 * diam * diam)) - mmd) / mmd;
    worst_mmd = std::max(worst_mmd, rel);
    c.expect(rel < 0.05, "mmd rel " + fmt(rel));
  }
  double worst_grad = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index k = 1 + trial % 2;
    const Index m = 3 + trial % 6;
    auto a = PointCloud::uniform(random_points(rng, m, k));
    const auto b = PointCloud::uniform(random_points(rng, m + 1, k, 0.5));
    const auto cfg = tight(0.1 + 0.1 * (trial % 3));
    const auto g = sinkhorn_divergence_grad(a, b, cfg);
    c.expect(g.converged, "gradient solve did not converge");
    for (Index i = 0; i < m; ++i)
      for (Index d = 0; d < k; ++d) {
        const double x0 = a.points(i, d);
        a.points(i, d) = x0 + 1e-5;
        const double up = sinkhorn_divergence(a, b, cfg);
        a.points(i, d) = x0 - 1e-5;
        const double down = sinkhorn_divergence(a, b, cfg);
        a.points(i, d) = x0;
        const double fd = (up - down) / 2e-5;
        const double rel = std::abs(g.grad(i, d) - fd) / std::max(std::abs(fd), 1e-2);
        worst_grad = std::max(worst_grad, rel);
        c.expect(rel < 1e-4, "gradient rel " + fmt(rel));
      }
  }
  return c.outcome("eps=1e-3 worst gap " + fmt(worst_exact, 3) + ", self " + fmt(worst_self, 3) + ", MMD rel " +
                   fmt(worst_mmd, 3) + ", grad rel " + fmt(worst_grad, 3));
}

// ---------------------------------------------------------------------------
// 3. Survival statistics fixtures

Outcome criterion_fixtures() {
  Checker c;
  auto near = [&](double got, double want, const std::string& what) {
    c.expect(std::abs(got - want) <= 1e-12, what + " got " + fmt(got, 17) + " want " + fmt(want, 17));
  };
  {
    const auto km = kaplan_meier(vec({1, 2, 2, 3, 4, 5}), std::vector<int>{1, 1, 0, 1, 0, 1});
    const std::vector<double> s{1.0, 5.0 / 6.0, 2.0 / 3.0, 4.0 / 9.0, 4.0 / 9.0, 0.0};
    const std::vector<long> risk{6, 6, 5, 3, 2, 1};
    c.expect(km.time.size() == 6, "km rows");
    for (int k = 0; k < 6 && k < km.time.size(); ++k) {
      near(km.survival[k], s[static_cast<std::size_t>(k)], "km survival");
      c.expect(km.at_risk[static_cast<std::size_t>(k)] == risk[static_cast<std::size_t>(k)], "km at-risk");
    }
    near(km.variance[1], (25.0 / 36.0) / 30.0, "greenwood t=1");
    near(km.variance[3], 4.0 / 81.0, "greenwood t=3");
  }
  {
    const auto r = logrank_test(std::vector<int>{0, 0, 0, 1, 1, 1}, vec({1, 3, 5, 2, 4, 6}),
                                std::vector<int>{1, 1, 1, 1, 1, 0});
    const double o_e = -0.5 + 0.4 - 0.5 + 1.0 / 3.0 - 0.5;
    const double v = 0.25 + 0.24 + 0.25 + 2.0 / 9.0 + 0.25;
    near(r.observed_minus_expected, o_e, "logrank O-E");
    near(r.variance, v, "logrank variance");
    near(r.chi_square, o_e * o_e / v, "logrank chi2");
    near(r.p_value, std::erfc(std::sqrt(o_e * o_e / v / 2.0)), "logrank p");
  }
  near(harrell_c(vec({0.5, 0.9, 0.5, 0.6}), vec({1, 2, 3, 4}), std::vector<int>{1, 0, 1, 1}), 0.125, "harrell");
  near(harrell_c(vec({4, 3, 2, 1}), vec({1, 2, 3, 4}), std::vector<int>{1, 1, 1, 1}), 1.0, "harrell perfect");
  {
    const std::vector<SurvivalCurve> curves{make_curve({0, 1, 2, 3}, {1, 0.9, 0.3, 0.2}),
                                            make_curve({0, 1, 2, 3}, {1, 0.5, 0.4, 0.1}),
                                            make_curve({0, 2}, {1, 0.3})};
    near(antolini_c(curves, vec({1, 2, 3}), std::vector<int>{1, 1, 0}), 1.0 / 3.0, "antolini crossing");
  }
  Rng rng(303);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 60;
    Vector t(n), s(n);
    std::vector<int> e(n);
    for (int i = 0; i < n; ++i) {
      t[i] = rng.exponential(1.0);
      s[i] = rng.normal();
      e[static_cast<std::size_t>(i)] = rng.uniform() < 0.7;
    }
    e[0] = 1;
    const auto base = breslow_baseline(s, t, e);
    std::vector<SurvivalCurve> curves;
    for (int i = 0; i < n; ++i) curves.push_back(survival_curve(base, s[i]));
    near(antolini_c(curves, t, e), harrell_c(s, t, e), "antolini == harrell on proportional curves");
  }
  return c.outcome("KM, log-rank, Harrell and Antolini fixtures to 1e-12; 20 proportional-curve reductions");
}

// ---------------------------------------------------------------------------
// 4-6. Simulation studies through the CLI

struct MethodStats {
  int grid_id = -1;
  std::string grid;
  double antolini = std::nan("");
  double correct = std::nan("");
  double always = std::nan("");
  std::map<int, double> correct_by_rep;
  std::map<int, double> antolini_by_rep;
};

struct StudyOutput {
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  std::map<std::string, MethodStats> selected;
};

StudyOutput run_config_study(const std::string& name) {
  StudyOutput out;
  const fs::path config = fs::path(BITES_SOURCE_DIR) / "configs" / (name + ".json");
  const fs::path dir = work_dir() / name;
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run_cli("study --config " + quoted(config) + " --out " + quoted(dir) + " --format json --workers " +
                         std::to_string(workers()));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (rc != 0) {
    out.error = "cli exit code " + std::to_string(rc);
    return out;
  }
  const auto summary = Json::parse(slurp(dir / "summary.json"));
  const auto runs = Json::parse(slurp(dir / "runs.json"));
  for (const auto& s : summary) {
    if (s["selected"] != 1) continue;
    MethodStats m;
    m.grid_id = s["grid_id"].get<int>();
    m.grid = s["grid"].get<std::string>();
    m.antolini = s["mean_antolini_c"].get<double>();
    m.correct = s["mean_correct_fraction"].get<double>();
    m.always = s["mean_always_treat_fraction"].get<double>();
    for (const auto& r : runs)
      if (r["method"] == s["method"] && r["grid_id"] == s["grid_id"] && r["status"] == "ok") {
        m.correct_by_rep[r["replicate"].get<int>()] = r["correct_fraction"].get<double>();
        m.antolini_by_rep[r["replicate"].get<int>()] = r["antolini_c"].get<double>();
      }
    out.selected[s["method"].get<std::string>()] = m;
  }
  out.ok = true;
  return out;
}

int paired_wins(const std::map<int, double>& a, const std::map<int, double>& b, int* pairs) {
  int wins = 0;
  *pairs = 0;
  for (const auto& [rep, x] : a) {
    auto it = b.find(rep);
    if (it == b.end()) continue;
    ++*pairs;
    wins += x > it->second ? 1 : 0;
  }
  return wins;
}

Outcome criterion_linear() {
  const auto s = run_config_study("linear_study");
  if (!s.ok) return {Status::Fail, s.error};
  Checker c;
  std::string detail;
  for (const char* m : {"cox_tlearner", "ites", "bites"}) {
    auto it = s.selected.find(m);
    if (it == s.selected.end()) {
      c.expect(false, std::string(m) + " missing");
      continue;
    }
    const auto& x = it->second;
    c.expect(x.antolini > 0.7, std::string(m) + " C " + fmt(x.antolini));
    c.expect(x.correct > x.always, std::string(m) + " fraction " + fmt(x.correct) + " <= always-treat " + fmt(x.always));
    detail += std::string(m) + " C " + fmt(x.antolini) + " frac " + fmt(x.correct) + "; ";
  }
  if (!s.selected.empty()) detail += "always-treat " + fmt(s.selected.begin()->second.always) + "; ";
  detail += fmt(s.seconds, 3) + " s";
  auto o = c.outcome(detail);
  if (o.status == Status::Fail) o.detail += " | " + detail;
  return o;
}

Outcome criterion_nonlinear() {
  const auto s = run_config_study("nonlinear_study");
  if (!s.ok) return {Status::Fail, s.error};
  if (!s.selected.count("cox_tlearner") || !s.selected.count("ites") || !s.selected.count("bites"))
    return {Status::Fail, "missing method in summary"};
  const auto& cox = s.selected.at("cox_tlearner");
  bool means_hold = true, majority_holds = true;
  std::string detail = "cox C " + fmt(cox.antolini) + " frac " + fmt(cox.correct);
  for (const char* m : {"ites", "bites"}) {
    const auto& x = s.selected.at(m);
    int pairs = 0, cpairs = 0;
    const int wins = paired_wins(x.correct_by_rep, cox.correct_by_rep, &pairs);
    const int cwins = paired_wins(x.antolini_by_rep, cox.antolini_by_rep, &cpairs);
    means_hold = means_hold && x.correct > cox.correct && x.antolini > cox.antolini;
    majority_holds = majority_holds && 2 * wins > pairs && 2 * cwins > cpairs;
    detail += "; " + std::string(m) + " C " + fmt(x.antolini) + " frac " + fmt(x.correct) + " (paired wins: fraction " +
              std::to_string(wins) + "/" + std::to_string(pairs) + ", C " + std::to_string(cwins) + "/" +
              std::to_string(cpairs) + ")";
  }
  detail += "; " + fmt(s.seconds, 3) + " s";
  if (!means_hold) return {Status::Fail, detail};
  if (!majority_holds) return {Status::Inconclusive, detail + " (means hold, no paired-seed majority)"};
  return {Status::Pass, detail};
}

Outcome criterion_biased() {
  const auto s = run_config_study("biased_study");
  if (!s.ok) return {Status::Fail, s.error};
  if (!s.selected.count("ites") || !s.selected.count("bites")) return {Status::Fail, "missing method in summary"};
  const auto& ites = s.selected.at("ites");
  const auto& bites = s.selected.at("bites");
  int pairs = 0, wins_or_ties = 0;
  for (const auto& [rep, x] : bites.correct_by_rep) {
    auto it = ites.correct_by_rep.find(rep);
    if (it == ites.correct_by_rep.end()) continue;
    ++pairs;
    wins_or_ties += x >= it->second ? 1 : 0;
  }
  const double diff = bites.correct - ites.correct;
  const std::string detail = "BITES (" + bites.grid + ") frac " + fmt(bites.correct) + " vs ITES " +
                             fmt(ites.correct) + ", diff " + fmt(diff, 3) + ", paired BITES>=ITES " +
                             std::to_string(wins_or_ties) + "/" + std::to_string(pairs) + "; " + fmt(s.seconds, 3) +
                             " s";
  if (diff < -0.01) return {Status::Fail, detail};
  if (diff > 0.01 && 2 * wins_or_ties > pairs) return {Status::Pass, detail};
  return {Status::Inconclusive, detail + " (within +-0.01 or no paired majority)"};
}

// ---------------------------------------------------------------------------
// 7. Evaluation pipeline on a synthetic stand-in cohort

void write_standin_cohort(const fs::path& path, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::ofstream out(path);
  out << "pid,age,meno,size,grade,nodes,pgr,er,hormon,rfs_time,rfs_event\n";
  out.precision(17);
  for (int i = 0; i < n; ++i) {
    const double age = 30 + 50 * rng.uniform();
    const int meno = age > 52 ? 1 : 0;
    const double size = 5 + 60 * rng.uniform();
    const int grade = 1 + static_cast<int>(rng.below(3));
    const int nodes = static_cast<int>(rng.below(12));
    const double pgr = std::exp(3 + rng.normal());
    const double er = std::exp(3 + rng.normal());
    const int hormon = rng.uniform() < 0.4 ? 1 : 0;
    const double benefit = hormon ? (meno ? -0.6 : 0.3) : 0.0;
    const double risk = 0.02 * size + 0.3 * grade + 0.1 * nodes - 0.2 * std::log(pgr) + benefit;
    const double event_time = rng.exponential(0.02 * std::exp(risk));
    const double censor = 5 + 80 * rng.uniform();
    out << "P" << i << ',' << age << ',' << meno << ',' << size << ',' << grade << ',' << nodes << ',' << pgr << ','
        << er << ',' << hormon << ',' << std::min(event_time, censor) << ',' << (event_time <= censor ? 1 : 0)
        << '\n';
  }
}

std::vector<std::string> csv_header(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  return cols;
}

Outcome criterion_evaluation() {
  Checker c;
  const fs::path dir = work_dir() / "standin";
  fs::create_directories(dir);
  write_standin_cohort(dir / "train.csv", 600, 701);
  write_standin_cohort(dir / "test.csv", 300, 702);
  write_json_file(dir / "train.json", Json::parse(R"({
    "study": {"name": "standin", "seed": 11},
    "data": {"source": "csv", "train": "train.csv", "id": "pid", "time": "rfs_time", "event": "rfs_event",
             "treatment": "hormon"},
    "methods": {
      "cox_tlearner": {"ridge": [0.1, 0.5]},
      "bites": {"shared_layers": [[15]], "head_layers": [5], "learning_rate": 0.01, "max_epochs": 300,
                "alpha": [0.01, 0.1], "ipm_max_points": 64, "sinkhorn_iter": 30}
    }
  })"));
  c.expect(run_cli("train --config " + quoted(dir / "train.json") + " --out " + quoted(dir / "model")) == 0,
           "train exit code");
  c.expect(run_cli("evaluate --model " + quoted(dir / "model" / "model.json") + " --data " + quoted(dir / "test.csv") +
                   " --out " + quoted(dir / "eval")) == 0,
           "evaluate exit code");
  if (c.failures) return c.outcome("");

  const auto report_cols = csv_header(dir / "eval" / "report.csv");
  for (const char* col : {"c_index", "logrank_p", "fraction_t1"})
    c.expect(std::find(report_cols.begin(), report_cols.end(), col) != report_cols.end(),
             std::string("report lacks ") + col);
  for (const char* f : {"km_recommendation.csv", "km_treatment.csv"}) {
    const auto cols = csv_header(dir / "eval" / f);
    for (const char* col : {"group", "time", "survival", "variance", "at_risk"})
      c.expect(std::find(cols.begin(), cols.end(), col) != cols.end(), std::string(f) + " lacks " + col);
  }
  // The JSON rendering carries the same numbers.
  c.expect(run_cli("evaluate --model " + quoted(dir / "model" / "model.json") + " --data " + quoted(dir / "test.csv") +
                   " --out " + quoted(dir / "eval_json") + " --format json") == 0,
           "evaluate json exit code");
  const auto report = Json::parse(slurp(dir / "eval_json" / "report.json")).at(0);
  const double cidx = report["c_index"].get<double>();
  const double p = report["logrank_p"].get<double>();
  const double frac = report["fraction_t1"].get<double>();
  c.expect(cidx >= 0.0 && cidx <= 1.0, "c_index out of range");
  c.expect(p > 0.0 && p <= 1.0, "p out of range");
  c.expect(frac >= 0.0 && frac <= 1.0, "fraction out of range");
  const auto km_rec = Json::parse(slurp(dir / "eval_json" / "km_recommendation.json"));
  const auto km_trt = Json::parse(slurp(dir / "eval_json" / "km_treatment.json"));
  std::set<std::string> rec_groups, trt_groups;
  long n_rec = 0;
  for (const auto& r : km_rec) {
    rec_groups.insert(r["group"].get<std::string>());
    if (r["time"].get<double>() == 0.0) n_rec += r["at_risk"].get<long>();
    c.expect(r["survival"].get<double>() >= 0.0 && r["survival"].get<double>() <= 1.0, "km survival range");
  }
  for (const auto& r : km_trt) trt_groups.insert(r["group"].get<std::string>());
  c.expect(n_rec == 300, "recommended + anti-recommended != cohort size");
  c.expect(trt_groups == std::set<std::string>{"T=0", "T=1"}, "treatment KM groups");
  const auto recs = Json::parse(slurp(dir / "eval_json" / "recommendations.json"));
  c.expect(recs.size() == 300 && recs.front()["id"] == "P0" && recs.back()["id"] == "P299",
           "recommendations not one per row in input order");
  long t1 = 0;
  for (const auto& r : recs) t1 += r["recommended"].get<long>();
  c.expect(std::abs(static_cast<double>(t1) / 300.0 - frac) < 1e-15, "fraction_t1 disagrees with rows");

  // Schema mismatch is a data error.
  {
    std::ifstream in(dir / "test.csv");
    std::ofstream out(dir / "renamed.csv");
    std::string line;
    std::getline(in, line);
    line.replace(line.find("age"), 3, "ages");
    out << line << '\n' << in.rdbuf();
  }
  c.expect(run_cli("evaluate --model " + quoted(dir / "model" / "model.json") + " --data " +
                   quoted(dir / "renamed.csv") + " --out " + quoted(dir / "bad")) == 2,
           "feature mismatch exit code");
  return c.outcome("stand-in cohort: C " + fmt(cidx) + ", log-rank p " + fmt(p) + ", fraction T=1 " + fmt(frac) +
                   ", KM groups " + std::to_string(rec_groups.size()) +
                   "+2 (published cohort numbers not reproducible without the data)");
}

// ---------------------------------------------------------------------------
// 8. Determinism

Outcome criterion_determinism() {
  Checker c;
  const fs::path config = fs::path(BITES_SOURCE_DIR) / "configs" / "smoke_study.json";
  int compared = 0;
  for (const char* format : {"csv", "json"}) {
    std::vector<fs::path> dirs;
    for (int w : {1, 1, 3}) {
      const auto d = work_dir() / ("det_" + std::string(format) + "_" + std::to_string(dirs.size()));
      fs::remove_all(d);
      c.expect(run_cli("study --config " + quoted(config) + " --out " + quoted(d) + " --format " + format +
                       " --seed 99 --workers " + std::to_string(w)) == 0,
               "study exit code");
      dirs.push_back(d);
    }
    for (const auto& entry : fs::directory_iterator(dirs[0])) {
      const auto name = entry.path().filename();
      const auto ref = slurp(entry.path());
      for (std::size_t k = 1; k < dirs.size(); ++k) {
        c.expect(slurp(dirs[k] / name) == ref, name.string() + " differs between reruns");
        ++compared;
      }
    }
  }
  {
    const auto a = work_dir() / "det_sim_a";
    const auto b = work_dir() / "det_sim_b";
    for (const auto& d : {a, b})
      c.expect(run_cli("simulate --config " + quoted(config) + " --out " + quoted(d) + " --seed 5") == 0, "simulate");
    for (const char* f : {"train.csv", "test.csv", "truth_test.csv", "manifest.json"}) {
      c.expect(slurp(a / f) == slurp(b / f), std::string(f) + " differs");
      ++compared;
    }
  }
  return c.outcome(std::to_string(compared) + " file comparisons byte-identical across reruns and worker counts");
}

// ---------------------------------------------------------------------------
// 9. Property suites

Outcome criterion_properties() {
  Checker c;
  Rng rng(909);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 30;
    Vector s(n), t(n);
    std::vector<int> e(n);
    for (int i = 0; i < n; ++i) {
      s[i] = rng.normal();
      t[i] = std::floor(6.0 * rng.uniform());
      e[static_cast<std::size_t>(i)] = rng.uniform() < 0.6;
    }
    e[0] = 1;
    const double shift = 40.0 * rng.normal();
    c.expect(std::abs(cox_nll((s.array() + shift).matrix(), t, e) - cox_nll(s, t, e)) < 1e-10, "cox shift");
  }
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = PointCloud::uniform(random_points(rng, 6, 2));
    const auto b = PointCloud::uniform(random_points(rng, 7, 2, 0.3 * trial));
    const auto cfg = tight(0.1);
    const double ab = sinkhorn_divergence(a, b, cfg);
    c.expect(std::abs(ab - sinkhorn_divergence(b, a, cfg)) < 1e-9, "sinkhorn symmetry");
    auto as = a, bs = b;
    as.points.rowwise() += Eigen::RowVector2d(2.0, -3.0);
    bs.points.rowwise() += Eigen::RowVector2d(2.0, -3.0);
    c.expect(std::abs(sinkhorn_divergence(as, bs, cfg) - ab) < 1e-9, "sinkhorn translation");
    auto ak = a, bk = b;
    ak.points *= 1.5;
    bk.points *= 1.5;
    auto ck = cfg;
    ck.epsilon *= 2.25;
    c.expect(std::abs(sinkhorn_divergence(ak, bk, ck) - 2.25 * ab) < 1e-6 * std::abs(2.25 * ab) + 1e-12,
             "sinkhorn scaling");
  }
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 15 + trial;
    Vector t(n);
    for (int i = 0; i < n; ++i) t[i] = 1.0 + static_cast<double>(rng.below(8));
    const auto km = kaplan_meier(t, std::vector<int>(static_cast<std::size_t>(n), 1));
    for (Index k = 0; k < km.time.size(); ++k) {
      const double empirical = static_cast<double>((t.array() > km.time[k]).count()) / n;
      c.expect(std::abs(km.survival[k] - empirical) < 1e-12, "km equals empirical survival");
    }
  }
  auto random_curve = [&](int points) {
    std::vector<double> t{0.0}, s{1.0};
    double time = 0.0, surv = 1.0;
    for (int k = 0; k < points; ++k) {
      time += 0.1 + rng.uniform();
      surv *= 0.6 + 0.4 * rng.uniform();
      t.push_back(time);
      s.push_back(surv);
    }
    return make_curve(t, s);
  };
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_curve(1 + static_cast<int>(rng.below(10)));
    const auto b = random_curve(1 + static_cast<int>(rng.below(10)));
    const auto ab = ite_from_curves(a, b);
    c.expect(ab.tau_median == -ite_from_curves(b, a).tau_median, "tau antisymmetry");
    c.expect((ab.recommended == 1) == (ab.tau_median > 0.0), "recommendation sign");
  }
  {
    const auto [ds, truth] = simulate(SimulationConfig::defaults(Design::Linear, 300, 32));
    auto [train, val] = split(ds, 0.6, 32, true);
    NetworkSpec spec;
    spec.shared_layers = {16};
    spec.head_layers = {8};
    spec.seed = 32;
    BitesLossConfig loss;
    loss.alpha = 0.1;
    TrainConfig tc;
    tc.learning_rate = 0.01;
    tc.max_epochs = 60;
    tc.patience = 10;
    tc.batch_size = 64;
    tc.seed = 32;
    auto model = fit_bites(train, val, spec, loss, tc);
    const auto& h = model.history();
    const double best = h.validation_loss[static_cast<std::size_t>(h.best_epoch - 1)];
    for (double v : h.validation_loss) c.expect(v >= best, "best epoch is the minimum");
    Rng seeds(derive_seed(32, {0x1A7}));
    Rng ipm(seeds.next_u64());
    const double now =
        evaluate_bites_loss(model, val, resolve_q(loss, train), Mode::Eval, nullptr, &ipm, false, false).parts.total;
    c.expect(std::abs(now - best) < 1e-12, "restored weights reproduce best validation loss");
    EarlyStopping stop(50);
    int stopped = 0;
    for (int epoch = 1; epoch <= 1000 && !stopped; ++epoch) {
      stop.observe(epoch, epoch <= 10 ? 10.0 - epoch : 5.0);
      if (stop.should_stop(epoch)) stopped = epoch;
    }
    c.expect(stop.best_epoch() == 10 && stopped == 60, "early stopping patience");
  }
  return c.outcome("Cox shift, Sinkhorn symmetry/translation/scaling, KM empirical, tau antisymmetry, best-epoch "
                   "restoration");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient suite", criterion_gradients},
      {"OT oracle suite", criterion_ot},
      {"survival-statistics fixtures", criterion_fixtures},
      {"linear study (n=2400, 10 replicates)", criterion_linear},
      {"non-linear study (n=1200, 10 replicates)", criterion_nonlinear},
      {"biased study (n=1200, paired, 10 replicates)", criterion_biased},
      {"evaluation pipeline on stand-in CSV", criterion_evaluation},
      {"CLI determinism", criterion_determinism},
      {"property suites", criterion_properties},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << id << ": " << label(o.status) << " - " << criteria[k].first << " - " << o.detail
              << " [" << fmt(secs, 3) << " s]" << std::endl;
    if (o.status == Status::Fail) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
