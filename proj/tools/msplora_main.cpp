// Command-line front end: parameter counting, training runs, spectral
// analysis and method comparison sweeps over the experiment library.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "msplora/msplora.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

// --out flag > config output_dir > $MSPLORA_OUT_ROOT/<config stem>
fs::path resolve_out_dir(const std::string& flag_out, const std::string& cfg_out,
                         const fs::path& config_path) {
  if (!flag_out.empty()) return fs::path(flag_out);
  if (!cfg_out.empty()) return fs::path(cfg_out);
  return msplora::default_output_root() / config_path.stem();
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(msplora::read_text_file(path));
  } catch (const json::exception& e) {
    throw msplora::ConfigError("cannot parse '" + path.string() + "': " + e.what());
  }
}

int cmd_counts(std::size_t layers, std::size_t dmodel, std::size_t rank,
               const std::string& format) {
  const msplora::ParamBudget b = msplora::count_params(layers, dmodel, rank);
  if (format == "json") {
    json j{{"layers", b.n_layers},
           {"d_model", b.d_model},
           {"rank", b.rank},
           {"lora_params", b.lora_total},
           {"msplora_params", b.msplora_total},
           {"ratio", b.ratio()}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("layers          %zu\n", b.n_layers);
    std::printf("d_model         %zu\n", b.d_model);
    std::printf("rank            %zu\n", b.rank);
    std::printf("lora_params     %lld\n", b.lora_total);
    std::printf("msplora_params  %lld\n", b.msplora_total);
    std::printf("ratio           %.6g\n", b.ratio());
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_flag, bool force) {
  msplora::ExperimentConfig cfg =
      msplora::experiment_from_json(parse_json_file(config_path));
  cfg.output_dir = resolve_out_dir(out_flag, cfg.output_dir, config_path).string();
  const msplora::RunResult r = msplora::run_experiment(cfg, force);
  std::printf("run directory   %s\n", r.run_dir.string().c_str());
  std::printf("params          %lld\n", r.param_count);
  std::printf("initial loss    %.6f\n", r.log.initial_loss);
  std::printf("final loss      %.6f\n", r.log.final_loss);
  std::printf("eval accuracy   %.4f -> %.4f\n", r.eval_before.accuracy,
              r.eval_after.accuracy);
  return kExitOk;
}

int cmd_analyze(const std::string& run, const std::string& run_b, const std::string& mode,
                const std::string& out, std::size_t top_k, double epsilon,
                const std::string& smoothing, bool force) {
  msplora::AnalyzeOptions opts;
  opts.mode = mode;
  opts.top_k = top_k;
  opts.epsilon = epsilon;
  opts.force = force;
  if (smoothing == "truncate") {
    opts.smoothing = msplora::SpectrumSmoothing::truncate_min_rank;
  } else if (smoothing == "epsilon") {
    opts.smoothing = msplora::SpectrumSmoothing::epsilon_smooth;
  } else {
    throw msplora::ConfigError("unknown smoothing '" + smoothing +
                               "' (expected truncate or epsilon)");
  }
  if (!out.empty()) opts.out_dir = out;
  const auto written = msplora::run_analyze(run, run_b, opts);
  for (const fs::path& p : written) std::printf("wrote %s\n", p.string().c_str());
  return kExitOk;
}

int cmd_compare(const std::string& config_path, const std::string& out_flag, bool force) {
  msplora::SweepConfig sweep = msplora::sweep_from_json(parse_json_file(config_path));
  sweep.output_dir = resolve_out_dir(out_flag, sweep.output_dir, config_path).string();
  const msplora::CompareResult r = msplora::run_compare(sweep, force);

  std::printf("%-10s %-8s %-12s %-14s %-10s\n", "method", "seed", "params", "final_loss",
              "accuracy");
  for (const msplora::CompareRow& row : r.rows) {
    std::printf("%-10s %-8llu %-12lld %-14.6f %-10.4f\n", row.method.c_str(),
                static_cast<unsigned long long>(row.seed), row.params, row.final_loss,
                row.accuracy);
  }
  if (!r.rows.empty()) {
    std::printf("\n%-10s %-12s %-22s %-20s\n", "method", "params", "final_loss (mean+-sd)",
                "accuracy (mean+-sd)");
    for (const msplora::MethodAggregate& a : r.aggregates) {
      if (a.runs == 0) continue;
      std::printf("%-10s %-12lld %.6f +- %-10.6f %.4f +- %-8.4f\n", a.method.c_str(),
                  a.params, a.loss_mean, a.loss_sd, a.accuracy_mean, a.accuracy_sd);
    }
    if (r.param_ratio) std::printf("param ratio (msplora/lora): %.6g\n", *r.param_ratio);
  }
  std::printf("sweep directory: %s\n", r.out_dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale pyramid low-rank adapter experiments"};
  app.require_subcommand(1);

  auto* counts = app.add_subcommand("counts", "trainable-parameter budgets and their ratio");
  std::size_t layers = 12, dmodel = 768, rank = 8;
  std::string counts_format = "table";
  counts->add_option("--layers", layers, "number of transformer layers")->required();
  counts->add_option("--dmodel", dmodel, "embedding dimension")->required();
  counts->add_option("--rank", rank, "adapter rank r0 (= top pyramid rank)")->required();
  counts->add_option("--format", counts_format, "table or json")
      ->check(CLI::IsMember({"table", "json"}));

  auto* train = app.add_subcommand("train", "run one training experiment from a JSON config");
  std::string train_config, train_out;
  bool train_force = false;
  train->add_option("--config", train_config, "experiment config JSON")->required();
  train->add_option("--out", train_out, "run directory (overrides config output_dir)");
  train->add_flag("--force", train_force, "overwrite an existing run directory");

  auto* analyze = app.add_subcommand("analyze", "emit spectral analysis data for runs");
  std::string an_run, an_run_b, an_mode = "divergence", an_out, an_smoothing = "truncate";
  std::size_t an_top_k = 8;
  double an_epsilon = 1e-10;
  bool an_force = false;
  analyze->add_option("--run", an_run, "run directory")->required();
  analyze->add_option("--run-b", an_run_b, "second run directory (diff mode)");
  analyze->add_option("--mode", an_mode, "spectrum, divergence or diff")
      ->check(CLI::IsMember({"spectrum", "divergence", "diff"}));
  analyze->add_option("--out", an_out, "artifact directory (default <run>/analysis)");
  analyze->add_option("--top-k", an_top_k, "singular values per spectrum row");
  analyze->add_option("--epsilon", an_epsilon, "smoothing constant for spectra");
  analyze->add_option("--smoothing", an_smoothing, "truncate or epsilon");
  analyze->add_flag("--force", an_force, "overwrite existing artifacts");

  auto* compare = app.add_subcommand("compare", "run a method/seed sweep and summarize it");
  std::string cmp_config, cmp_out;
  bool cmp_force = false;
  compare->add_option("--config", cmp_config, "sweep config JSON")->required();
  compare->add_option("--out", cmp_out, "sweep directory (overrides config output_dir)");
  compare->add_flag("--force", cmp_force, "overwrite an existing sweep directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (counts->parsed()) return cmd_counts(layers, dmodel, rank, counts_format);
    if (train->parsed()) return cmd_train(train_config, train_out, train_force);
    if (analyze->parsed()) {
      return cmd_analyze(an_run, an_run_b, an_mode, an_out, an_top_k, an_epsilon,
                         an_smoothing, an_force);
    }
    if (compare->parsed()) return cmd_compare(cmp_config, cmp_out, cmp_force);
  } catch (const msplora::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msplora::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msplora::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const msplora::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
