// partleak command-line driver.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "partleak/harness.hpp"

namespace fs = std::filesystem;
using namespace partleak;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::vector<std::string> sets;  // key=value overrides
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "flat JSON config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "seed for every random stream");
  app->add_option("--out", c.out, "output directory")->required();
  app->add_option("--data", c.data, "dataset directory written by gen-data")->check(CLI::ExistingDirectory);
  app->add_option("--set", c.sets, "override one config key (key=value, value in JSON syntax)");
}

harness::ExperimentConfig load_config(const Common& c) {
  harness::ExperimentConfig cfg;
  if (!c.config.empty()) harness::apply_config_json(cfg, harness::read_text(c.config));
  if (!c.sets.empty()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& kv : c.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      nlohmann::json parsed = nlohmann::json::parse(val, nullptr, false);
      j[key] = parsed.is_discarded() ? nlohmann::json(val) : parsed;
    }
    harness::apply_config_json(cfg, j.dump());
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

// Dataset from --data (its spec then replaces the config's) or generated in
// memory from the config.
synth::Dataset load_data(const Common& c, harness::ExperimentConfig& cfg) {
  if (c.data.empty()) return synth::generate(cfg.dataset_spec());
  synth::Dataset ds = synth::read_dataset(c.data);
  cfg.data = ds.spec;
  cfg.data_seed_set = true;
  cfg.validate();
  return ds;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

ParamStore backbone_for(const Common& c, const std::string& backbone_dir, harness::ExperimentConfig& cfg,
                        const synth::Dataset& ds) {
  if (!backbone_dir.empty()) return load_checkpoint(fs::path(backbone_dir) / "backbone", "backbone");
  log_line("no --backbone given; pretraining inline");
  auto pre = harness::pretrain_backbone(cfg, ds, log_line);
  const fs::path dir = fs::path(c.out) / "pretrain";
  harness::write_pretrain_artifacts(dir, pre);
  harness::write_run_record(dir, "pretrain", cfg);
  return pre.backbone;
}

int run(int argc, char** argv) {
  CLI::App app{"partleak: part-level leakage experiments on synthetic data"};
  app.require_subcommand(1);

  Common gen_c, pre_c, bench_c, train_c;
  std::string bench_backbone, train_backbone, variant = "ste";
  std::vector<std::string> report_runs;
  std::string report_out;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, gen_c);
  auto* pre = app.add_subcommand("pretrain", "pretrain the toy backbone on CLS attribute prediction");
  add_common(pre, pre_c);
  auto* bench = app.add_subcommand("benchmark", "late vs early masking probes with ground-truth masks");
  add_common(bench, bench_c);
  bench->add_option("--backbone", bench_backbone, "pretrain output directory")->check(CLI::ExistingDirectory);
  auto* train = app.add_subcommand("train", "train a single- or two-stage part model");
  add_common(train, train_c);
  train->add_option("--backbone", train_backbone, "pretrain output directory")->check(CLI::ExistingDirectory);
  train->add_option("--variant", variant, "single | soft | hard | ste")
      ->check(CLI::IsMember({"single", "soft", "hard", "ste"}));
  auto* rep = app.add_subcommand("report", "aggregate run directories into report.csv");
  rep->add_option("runs", report_runs, "run directories")->required();
  rep->add_option("--out", report_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  harness::tune_allocator();

  if (*gen) {
    auto cfg = load_config(gen_c);
    auto ds = synth::generate(cfg.dataset_spec());
    synth::write_dataset(ds, gen_c.out);
    harness::write_run_record(gen_c.out, "gen-data", cfg);
    return 0;
  }
  if (*pre) {
    auto cfg = load_config(pre_c);
    auto ds = load_data(pre_c, cfg);
    auto r = harness::pretrain_backbone(cfg, ds, log_line);
    harness::write_pretrain_artifacts(pre_c.out, r);
    harness::write_run_record(pre_c.out, "pretrain", cfg);
    log_line("train mAP " + harness::fmt(r.train_map) + " test mAP " + harness::fmt(r.test_map));
    return 0;
  }
  if (*bench) {
    auto cfg = load_config(bench_c);
    auto ds = load_data(bench_c, cfg);
    auto backbone = backbone_for(bench_c, bench_backbone, cfg, ds);
    auto r = harness::run_benchmark(cfg, ds, backbone, log_line);
    harness::write_benchmark_artifacts(bench_c.out, r, ds.attribute_spec());
    harness::write_run_record(bench_c.out, "benchmark", cfg);
    for (const auto& w : r.warnings) log_line("warning: " + w);
    log_line("PS late " + harness::fmt(r.late.ps.ps) + " early " + harness::fmt(r.early.ps.ps));
    return 0;
  }
  if (*train) {
    auto cfg = load_config(train_c);
    auto ds = load_data(train_c, cfg);
    auto backbone = backbone_for(train_c, train_backbone, cfg, ds);
    const auto v = partmodel::parse_model_variant(variant);
    auto r = harness::train_model(cfg, ds, backbone, v, log_line);
    harness::write_train_artifacts(train_c.out, r, v);
    harness::write_run_record(train_c.out, "train", cfg, {{"variant", variant}});
    for (const auto& w : r.eval.warnings) log_line("warning: " + w);
    log_line("NMI " + harness::fmt(r.eval.nmi) + " ARI " + harness::fmt(r.eval.ari) + " MPPO " +
             harness::fmt(r.eval.mppo));
    return 0;
  }
  if (*rep) {
    std::vector<fs::path> dirs(report_runs.begin(), report_runs.end());
    harness::write_text(fs::path(report_out) / "report.csv", harness::make_report(dirs));
    harness::write_report_record(report_out, dirs);
    return 0;
  }
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << std::endl;
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
