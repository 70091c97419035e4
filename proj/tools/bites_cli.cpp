// bites: command-line front end for simulation studies and CSV workflows.

#include "bites/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace bites;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out = ".";
  std::string format = "csv";
  std::string model;
  std::string data;
  bool debug = false;
  bool quiet = false;
};

ProgressFn progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const RunRecord& r, std::size_t done, std::size_t total) {
    std::cerr << "[" << done << "/" << total << "] " << to_string(r.method) << " grid " << r.grid_id << " replicate "
              << r.replicate << (r.ok ? "" : "  FAILED: " + r.error) << '\n';
  };
}

Table truth_table(const SurvivalDataset& ds, const GroundTruth& t) {
  Table out;
  out.columns = {"id", "y0", "y1", "best_treatment"};
  for (Index i = 0; i < ds.size(); ++i)
    out.add({ds.row_id(i), t.y0[i], t.y1[i], static_cast<long long>(t.best_treatment[static_cast<std::size_t>(i)])});
  return out;
}

int cmd_simulate(const Options& o) {
  const auto cfg = load_experiment_config(o.config, false, o.seed);
  if (cfg.data.source != DataConfig::Source::Simulation) throw ConfigError("simulate requires data.source = simulation");
  const auto fmt = parse_format(o.format);
  const auto data = load_study_data(cfg);
  fs::create_directories(o.out);
  CsvSchema schema;
  schema.id = "id";
  std::vector<std::string> files;
  auto write = [&](const std::string& name, const SurvivalDataset& ds) {
    std::ofstream out(fs::path(o.out) / name, std::ios::binary);
    if (!out) throw DataError("cannot write '" + name + "'");
    write_csv(out, ds, schema);
    files.push_back(name);
  };
  write("train.csv", data.pool);
  write("test.csv", *data.test);
  files.push_back(write_table_file(o.out, "truth_train", truth_table(data.pool, *data.pool_truth), fmt));
  files.push_back(write_table_file(o.out, "truth_test", truth_table(*data.test, *data.test_truth), fmt));
  write_json_file(fs::path(o.out) / "manifest.json", manifest("simulate", &cfg, cfg.study.seed, files));
  return kOk;
}

int cmd_study(const Options& o) {
  const auto cfg = load_experiment_config(o.config, true, o.seed);
  const auto fmt = parse_format(o.format);
  const auto result = run_study(cfg, o.workers, progress_printer(o.quiet));
  write_study_outputs(result, cfg, o.out, fmt, "study");
  if (!o.quiet) {
    for (const auto& s : result.summary) {
      if (!s.selected) continue;
      std::cerr << to_string(s.method) << " selected grid " << s.grid_id << ": antolini_c "
                << format_double(s.stats.at("antolini_c").first) << ", correct_fraction "
                << format_double(s.stats.at("correct_fraction").first) << '\n';
    }
  }
  return kOk;
}

int cmd_train(const Options& o) {
  const auto cfg = load_experiment_config(o.config, true, o.seed);
  const auto fmt = parse_format(o.format);
  const auto trained = run_train(cfg, o.workers, progress_printer(o.quiet));
  fs::create_directories(o.out);
  std::vector<std::string> files;
  files.push_back(write_table_file(o.out, "runs", runs_table(trained.result, cfg), fmt));
  files.push_back(write_table_file(o.out, "summary", summary_table(trained.result, cfg), fmt));
  write_json_file(fs::path(o.out) / "model.json", model_file_json(trained.best, cfg.data.schema, cfg.study.median_rule));
  files.push_back("model.json");
  Json m = manifest("train", &cfg, cfg.study.seed, files);
  m["selected"] = {{"method", to_string(trained.best_method)},
                   {"grid_id", trained.best_grid},
                   {"replicate", trained.best_replicate}};
  write_json_file(fs::path(o.out) / "manifest.json", m);
  if (!o.quiet)
    std::cerr << "selected " << to_string(trained.best_method) << " grid " << trained.best_grid << " ("
              << grid_label(trained.best_method, trained.best.grid) << ")\n";
  return kOk;
}

int cmd_evaluate(const Options& o) {
  const auto fmt = parse_format(o.format);
  const auto model = load_model_file(o.model);
  const auto ds = load_for_model(model, o.data, true);
  const auto ev = run_evaluate(model, ds);
  fs::create_directories(o.out);
  std::vector<std::string> files;
  files.push_back(write_table_file(o.out, "report", ev.report, fmt));
  files.push_back(write_table_file(o.out, "km_recommendation", ev.km_recommendation, fmt));
  files.push_back(write_table_file(o.out, "km_treatment", ev.km_treatment, fmt));
  files.push_back(write_table_file(o.out, "recommendations", ev.recommendations, fmt));
  write_json_file(fs::path(o.out) / "manifest.json", manifest("evaluate", nullptr, 0, files));
  if (!o.quiet)
    std::cerr << "c_index " << format_double(ev.antolini_c) << ", logrank_p " << format_double(ev.logrank_p)
              << ", fraction_t1 " << format_double(ev.fraction_treat) << '\n';
  return kOk;
}

int cmd_recommend(const Options& o) {
  const auto fmt = parse_format(o.format);
  const auto model = load_model_file(o.model);
  const auto ds = load_for_model(model, o.data, false);
  const auto table = run_recommend(model, ds, o.debug);
  fs::create_directories(o.out);
  std::vector<std::string> files{write_table_file(o.out, "recommendations", table, fmt)};
  write_json_file(fs::path(o.out) / "manifest.json", manifest("recommend", nullptr, 0, files));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BITES: balanced individual treatment effects for survival data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Options o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    if (needs_config) c->required();
    sub->add_option("--seed", seed, "master seed (overrides study.seed)");
    sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--format", o.format, "table format")->check(CLI::IsMember({"csv", "json"}));
    sub->add_flag("--quiet", o.quiet, "suppress progress on stderr");
  };
  auto* simulate = app.add_subcommand("simulate", "write simulated train/test CSVs with ground truth");
  common(simulate, true);
  auto* study = app.add_subcommand("study", "grid search with replicates on simulated or CSV data");
  common(study, true);
  auto* train = app.add_subcommand("train", "select and serialize a model on a CSV cohort");
  common(train, true);
  auto* evaluate = app.add_subcommand("evaluate", "C-index, log-rank and KM tables on a labelled CSV");
  common(evaluate, false);
  evaluate->add_option("--model", o.model, "model.json from train")->required();
  evaluate->add_option("--data", o.data, "test CSV")->required();
  auto* recommend = app.add_subcommand("recommend", "per-patient treatment recommendations");
  common(recommend, false);
  recommend->add_option("--model", o.model, "model.json from train")->required();
  recommend->add_option("--data", o.data, "covariate CSV")->required();
  recommend->add_flag("--debug", o.debug, "add the swapped-curve tau column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    for (auto* sub : app.get_subcommands())
      if (sub->count("--seed")) o.seed = seed;
    if (simulate->parsed()) return cmd_simulate(o);
    if (study->parsed()) return cmd_study(o);
    if (train->parsed()) return cmd_train(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (recommend->parsed()) return cmd_recommend(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumerical;
  }
  return kUsage;
}
