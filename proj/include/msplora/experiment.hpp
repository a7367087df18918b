#pragma once

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msplora/analysis.hpp"
#include "msplora/error.hpp"
#include "msplora/io.hpp"
#include "msplora/model.hpp"
#include "msplora/pyramid.hpp"
#include "msplora/serialize.hpp"
#include "msplora/trainer.hpp"

namespace msplora {

// ---------------------------------------------------------------------------
// Experiment configuration (JSON in, JSON echo out)
// ---------------------------------------------------------------------------

struct PretrainSpec {
  bool enabled = false;
  TaskKind kind = TaskKind::copy;
  std::size_t samples = 256;
  TrainConfig train;

  PretrainSpec() {
    train.lr_init = 1e-2;
    train.epochs = 2;
  }

  friend bool operator==(const PretrainSpec&, const PretrainSpec&) = default;
};

struct TierScaleConfig {
  double global = 1.0;
  double mid = 1.0;
  double layer = 1.0;
  friend bool operator==(const TierScaleConfig&, const TierScaleConfig&) = default;
};

/// One training run, fully specified: model, adapter method and ranks, task,
/// optimizer settings and seeds. Persisting the echoed config and re-running
/// it reproduces every artifact byte for byte.
struct ExperimentConfig {
  std::string method = "msplora";  // or "lora"
  TinyTransformerConfig model;
  std::size_t r_high = 8;
  std::size_t r_mid = 4;
  std::size_t r_low = 2;
  std::size_t lora_rank = 8;
  double sigma = 0.02;
  std::uint64_t adapter_seed = 7;
  TierScaleConfig tier_scales;
  SyntheticTask task;
  TrainConfig train = recommended_train_config();
  PretrainSpec pretrain;
  std::string output_dir;

  void validate() const {
    if (method != "msplora" && method != "lora") {
      throw ConfigError("method must be 'msplora' or 'lora', got '" + method + "'");
    }
    model.validate();
    train.validate();
    RankSchedule::custom(r_high, r_mid, r_low);  // ordering check
    if (method == "lora" && (lora_rank < 1 || lora_rank > model.d_model)) {
      throw ConfigError("lora rank must lie in [1, d_model]");
    }
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline void check_keys(const json& j, const char* where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) {
      if (it.key() == a) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline json train_config_to_json(const TrainConfig& t) {
  return json{{"lr_init", t.lr_init},   {"epochs", t.epochs},
              {"batch_size", t.batch_size}, {"weight_decay", t.weight_decay},
              {"beta1", t.beta1},       {"beta2", t.beta2},
              {"eps", t.eps},           {"clip_norm", t.clip_norm},
              {"seed", t.seed}};
}

inline TrainConfig train_config_from_json(const json& j, const TrainConfig& defaults) {
  detail::check_keys(j, "train", {"lr_init", "epochs", "batch_size", "weight_decay",
                                  "beta1", "beta2", "eps", "clip_norm", "seed"});
  TrainConfig t = defaults;
  t.lr_init = detail::get_or(j, "lr_init", t.lr_init);
  t.epochs = detail::get_or(j, "epochs", t.epochs);
  t.batch_size = detail::get_or(j, "batch_size", t.batch_size);
  t.weight_decay = detail::get_or(j, "weight_decay", t.weight_decay);
  t.beta1 = detail::get_or(j, "beta1", t.beta1);
  t.beta2 = detail::get_or(j, "beta2", t.beta2);
  t.eps = detail::get_or(j, "eps", t.eps);
  t.clip_norm = detail::get_or(j, "clip_norm", t.clip_norm);
  t.seed = detail::get_or(j, "seed", t.seed);
  return t;
}

inline json experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["method"] = c.method;
  j["model"] = config_to_json(c.model);
  j["adapter"] = json{{"r_high", c.r_high},
                      {"r_mid", c.r_mid},
                      {"r_low", c.r_low},
                      {"rank", c.lora_rank},
                      {"sigma", c.sigma},
                      {"seed", c.adapter_seed},
                      {"tier_scales", json{{"global", c.tier_scales.global},
                                           {"mid", c.tier_scales.mid},
                                           {"layer", c.tier_scales.layer}}}};
  j["task"] = json{{"kind", to_string(c.task.kind)},
                   {"seed", c.task.seed},
                   {"samples", c.task.samples},
                   {"eval_samples", c.task.eval_samples},
                   {"seq_len", c.task.seq_len},
                   {"teacher_seed", c.task.teacher_seed}};
  j["train"] = train_config_to_json(c.train);
  j["pretrain"] = json{{"enabled", c.pretrain.enabled},
                       {"kind", to_string(c.pretrain.kind)},
                       {"samples", c.pretrain.samples},
                       {"train", train_config_to_json(c.pretrain.train)}};
  j["output_dir"] = c.output_dir;
  return j;
}

inline ExperimentConfig experiment_from_json(const json& j) {
  detail::check_keys(j, "config", {"method", "model", "adapter", "task", "train",
                                   "pretrain", "output_dir"});
  ExperimentConfig c;
  c.method = detail::get_or<std::string>(j, "method", c.method);

  if (j.contains("model")) {
    const json& m = j["model"];
    detail::check_keys(m, "model", {"n_layers", "d_model", "n_heads", "d_ff", "vocab",
                                    "seq_len", "seed"});
    c.model.n_layers = detail::get_or(m, "n_layers", c.model.n_layers);
    c.model.d_model = detail::get_or(m, "d_model", c.model.d_model);
    c.model.n_heads = detail::get_or(m, "n_heads", c.model.n_heads);
    c.model.d_ff = detail::get_or(m, "d_ff", c.model.d_ff);
    c.model.vocab = detail::get_or(m, "vocab", c.model.vocab);
    c.model.seq_len = detail::get_or(m, "seq_len", c.model.seq_len);
    c.model.seed = detail::get_or(m, "seed", c.model.seed);
  }

  if (j.contains("adapter")) {
    const json& a = j["adapter"];
    detail::check_keys(a, "adapter",
                       {"r_high", "r_mid", "r_low", "rank", "sigma", "seed", "tier_scales"});
    c.r_high = detail::get_or(a, "r_high", c.r_high);
    if (a.contains("r_mid") != a.contains("r_low")) {
      throw ConfigError("give both r_mid and r_low to override the geometric schedule");
    }
    if (a.contains("r_mid")) {
      const RankSchedule s = RankSchedule::custom(c.r_high, a.at("r_mid").get<std::size_t>(),
                                                  a.at("r_low").get<std::size_t>());
      c.r_mid = s.mid;
      c.r_low = s.low;
    } else {
      const RankSchedule s = RankSchedule::geometric(c.r_high);
      c.r_mid = s.mid;
      c.r_low = s.low;
    }
    c.lora_rank = detail::get_or(a, "rank", c.lora_rank);
    c.sigma = detail::get_or(a, "sigma", c.sigma);
    c.adapter_seed = detail::get_or(a, "seed", c.adapter_seed);
    if (a.contains("tier_scales")) {
      const json& ts = a["tier_scales"];
      detail::check_keys(ts, "tier_scales", {"global", "mid", "layer"});
      c.tier_scales.global = detail::get_or(ts, "global", 1.0);
      c.tier_scales.mid = detail::get_or(ts, "mid", 1.0);
      c.tier_scales.layer = detail::get_or(ts, "layer", 1.0);
    }
  } else {
    const RankSchedule s = RankSchedule::geometric(c.r_high);
    c.r_mid = s.mid;
    c.r_low = s.low;
  }

  if (j.contains("task")) {
    const json& t = j["task"];
    detail::check_keys(t, "task", {"kind", "seed", "samples", "eval_samples", "seq_len",
                                   "teacher_seed"});
    c.task.kind = task_kind_from_string(
        detail::get_or<std::string>(t, "kind", to_string(c.task.kind)));
    c.task.seed = detail::get_or(t, "seed", c.task.seed);
    c.task.samples = detail::get_or(t, "samples", c.task.samples);
    c.task.eval_samples = detail::get_or(t, "eval_samples", c.task.eval_samples);
    c.task.seq_len = detail::get_or(t, "seq_len", c.task.seq_len);
    c.task.teacher_seed = detail::get_or(t, "teacher_seed", c.task.teacher_seed);
  }

  if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);

  if (j.contains("pretrain")) {
    const json& p = j["pretrain"];
    detail::check_keys(p, "pretrain", {"enabled", "kind", "samples", "train"});
    c.pretrain.enabled = detail::get_or(p, "enabled", c.pretrain.enabled);
    c.pretrain.kind = task_kind_from_string(
        detail::get_or<std::string>(p, "kind", to_string(c.pretrain.kind)));
    c.pretrain.samples = detail::get_or(p, "samples", c.pretrain.samples);
    if (p.contains("train")) {
      c.pretrain.train = train_config_from_json(p["train"], c.pretrain.train);
    }
  }

  c.output_dir = detail::get_or<std::string>(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

/// Builds the adapter set an experiment config describes.
inline std::unique_ptr<AdapterSet> build_adapters(const ExperimentConfig& c) {
  if (c.method == "lora") {
    return std::make_unique<PlainLoraSet>(c.model.n_layers, c.model.d_model, c.lora_rank,
                                          c.adapter_seed, c.sigma);
  }
  auto set = std::make_unique<PyramidAdapterSet>(
      c.model.n_layers, c.model.d_model, RankSchedule::custom(c.r_high, c.r_mid, c.r_low),
      c.adapter_seed, c.sigma);
  set->tier_scales().global = c.tier_scales.global;
  set->tier_scales().mid = c.tier_scales.mid;
  set->tier_scales().layer = c.tier_scales.layer;
  return set;
}

// ---------------------------------------------------------------------------
// Analysis artifact formats
// ---------------------------------------------------------------------------

inline std::string spectrum_csv(const TierTrace& trace) {
  std::string out = "tier,epoch,k,value\n";
  auto emit = [&](const char* tier, const std::vector<std::vector<double>>& rows) {
    for (std::size_t e = 0; e < rows.size(); ++e) {
      for (std::size_t k = 0; k < rows[e].size(); ++k) {
        out += tier;
        out += ',' + std::to_string(e) + ',' + std::to_string(k + 1) + ',' +
               format_double(rows[e][k]) + '\n';
      }
    }
  };
  emit("global", trace.global);
  emit("mid", trace.mid);
  emit("layer", trace.layer);
  return out;
}

inline std::string grid_csv(const std::vector<std::vector<double>>& grid) {
  std::string out = "layer";
  for (std::size_t j = 0; j < grid.size(); ++j) out += ',' + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < grid[i].size(); ++j) out += ',' + format_double(grid[i][j]);
    out += '\n';
  }
  return out;
}

inline std::string divergence_csv(const DivergenceMatrix& dm) {
  std::vector<std::vector<double>> grid(dm.n, std::vector<double>(dm.n, 0.0));
  for (std::size_t i = 0; i < dm.n; ++i)
    for (std::size_t j = 0; j < dm.n; ++j) grid[i][j] = dm.at(i, j);
  return grid_csv(grid);
}

/// Reads back a grid CSV produced by grid_csv(); returns the dense row-major
/// values. Header indices are validated.
inline std::vector<std::vector<double>> read_grid_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0].empty() || rows[0][0] != "layer") {
    throw IoError("'" + path.string() + "' is not a grid CSV");
  }
  const std::size_t n = rows[0].size() - 1;
  if (rows.size() != n + 1) {
    throw IoError("grid CSV has " + std::to_string(rows.size() - 1) + " rows for " +
                  std::to_string(n) + " columns");
  }
  std::vector<std::vector<double>> grid(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rows[i + 1];
    if (row.size() != n + 1 || row[0] != std::to_string(i)) {
      throw IoError("grid CSV row " + std::to_string(i) + " malformed");
    }
    for (std::size_t j = 0; j < n; ++j) grid[i][j] = parse_double(row[j + 1]);
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

struct RunResult {
  fs::path run_dir;
  TrainLog log;
  EvalMetrics eval_before;
  EvalMetrics eval_after;
  long long param_count = 0;
};

inline std::string train_log_csv(const TrainLog& log) {
  std::string out = "step,loss,lr,grad_norm_global,grad_norm_mid,grad_norm_layer\n";
  for (const StepRecord& r : log.steps) {
    out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' +
           format_double(r.lr) + ',' + format_double(r.grad_norm_global) + ',' +
           format_double(r.grad_norm_mid) + ',' + format_double(r.grad_norm_layer) + '\n';
  }
  return out;
}

namespace detail {

inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!force) {
      throw IoError("output directory '" + dir.string() +
                    "' already exists; pass --force to overwrite");
    }
    fs::remove_all(dir);
  }
  ensure_dir(dir);
}

}  // namespace detail

/// Runs one experiment end to end and writes the run directory:
/// effective-config.json, train_log.csv, snapshots/epoch_*.json,
/// adapters.json, summary.json. Refuses an existing directory unless forced.
inline RunResult run_experiment(const ExperimentConfig& cfg, bool force = false) {
  cfg.validate();
  if (cfg.output_dir.empty()) throw ConfigError("experiment has no output_dir");
  const fs::path dir(cfg.output_dir);
  detail::prepare_out_dir(dir, force);
  ensure_dir(dir / "snapshots");

  write_text_file(dir / "effective-config.json", experiment_to_json(cfg).dump(2) + "\n");

  FrozenBackbone backbone(cfg.model);
  json pretrain_summary;
  if (cfg.pretrain.enabled) {
    SyntheticTask ptask;
    ptask.kind = cfg.pretrain.kind;
    ptask.samples = cfg.pretrain.samples;
    ptask.seed = derive_seed(cfg.task.seed, {0xFEEDULL});
    ptask.seq_len = cfg.task.seq_len;
    TrainLog plog = pretrain_backbone(backbone, ptask, cfg.pretrain.train);
    pretrain_summary = json{{"enabled", true},
                            {"kind", to_string(ptask.kind)},
                            {"initial_loss", plog.initial_loss},
                            {"final_loss", plog.final_loss},
                            {"steps", plog.steps.size()}};
  } else {
    pretrain_summary = json{{"enabled", false}};
  }

  std::unique_ptr<AdapterSet> adapters = build_adapters(cfg);
  RunResult result;
  result.run_dir = dir;
  result.param_count = adapters->trainable_count();
  result.eval_before = eval(backbone, *adapters, cfg.task);

  SnapshotList snapshots;
  result.log = train(backbone, *adapters, cfg.task, cfg.train, &snapshots);
  result.eval_after = eval(backbone, *adapters, cfg.task);

  write_text_file(dir / "train_log.csv", train_log_csv(result.log));
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    write_text_file(dir / "snapshots" / ("epoch_" + std::to_string(i) + ".json"),
                    adapter_to_json(*snapshots[i]).dump() + "\n");
  }
  write_text_file(dir / "adapters.json", adapter_to_json(*adapters).dump() + "\n");

  const ParamBudget budget =
      count_params(cfg.model.n_layers, cfg.model.d_model,
                   cfg.method == "lora" ? cfg.lora_rank : cfg.r_high);
  json summary;
  summary["method"] = cfg.method;
  summary["param_count"] = result.param_count;
  summary["budget"] = json{{"lora_total", budget.lora_total},
                           {"msplora_total", budget.msplora_total},
                           {"ratio", budget.ratio()}};
  summary["initial_loss"] = result.log.initial_loss;
  summary["final_loss"] = result.log.final_loss;
  summary["eval_before"] = json{{"loss", result.eval_before.loss},
                                {"accuracy", result.eval_before.accuracy},
                                {"tokens", result.eval_before.tokens}};
  summary["eval_after"] = json{{"loss", result.eval_after.loss},
                               {"accuracy", result.eval_after.accuracy},
                               {"tokens", result.eval_after.tokens}};
  summary["steps"] = result.log.steps.size();
  summary["epochs"] = cfg.train.epochs;
  summary["pretrain"] = pretrain_summary;
  write_text_file(dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

inline ExperimentConfig load_run_config(const fs::path& run_dir) {
  const fs::path p = run_dir / "effective-config.json";
  if (!fs::exists(p)) throw IoError("'" + p.string() + "' not found; is this a run directory?");
  return experiment_from_json(json::parse(read_text_file(p)));
}

inline std::unique_ptr<AdapterSet> load_run_adapters(const fs::path& run_dir) {
  const fs::path p = run_dir / "adapters.json";
  if (!fs::exists(p)) throw IoError("'" + p.string() + "' not found; is this a run directory?");
  return adapter_from_json(json::parse(read_text_file(p)));
}

inline SnapshotList load_run_snapshots(const fs::path& run_dir) {
  const ExperimentConfig cfg = load_run_config(run_dir);
  SnapshotList out;
  for (std::size_t i = 0; i <= cfg.train.epochs; ++i) {
    const fs::path p = run_dir / "snapshots" / ("epoch_" + std::to_string(i) + ".json");
    if (!fs::exists(p)) throw IoError("missing snapshot '" + p.string() + "'");
    out.push_back(adapter_from_json(json::parse(read_text_file(p))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analysis over run directories
// ---------------------------------------------------------------------------

struct AnalyzeOptions {
  std::string mode = "divergence";  // spectrum | divergence | diff
  std::size_t top_k = 8;
  SpectrumSmoothing smoothing = SpectrumSmoothing::truncate_min_rank;
  double epsilon = 1e-10;
  bool force = false;
  fs::path out_dir;  // defaults to <run>/analysis
};

namespace detail {

inline void write_artifact(const fs::path& path, const std::string& content, bool force) {
  if (fs::exists(path) && !force) {
    throw IoError("artifact '" + path.string() + "' already exists; pass --force to overwrite");
  }
  write_text_file(path, content);
}

inline json run_meta(const fs::path& run_dir, const ExperimentConfig& cfg) {
  return json{{"run", run_dir.string()},
              {"method", cfg.method},
              {"task", to_string(cfg.task.kind)},
              {"seeds", json{{"model", cfg.model.seed},
                             {"task", cfg.task.seed},
                             {"train", cfg.train.seed},
                             {"adapter", cfg.adapter_seed}}}};
}

}  // namespace detail

/// Emits analysis artifacts for a run (or a pair of runs for mode "diff").
/// Returns the paths written.
inline std::vector<fs::path> run_analyze(const fs::path& run_dir, const fs::path& run_b,
                                         const AnalyzeOptions& opts) {
  const fs::path out = opts.out_dir.empty() ? run_dir / "analysis" : opts.out_dir;
  ensure_dir(out);
  std::vector<fs::path> written;

  if (opts.mode == "spectrum") {
    const ExperimentConfig cfg = load_run_config(run_dir);
    if (cfg.method != "msplora") {
      throw ConfigError("spectrum mode needs an msplora run; '" + run_dir.string() +
                        "' used method '" + cfg.method + "'");
    }
    SnapshotList snaps = load_run_snapshots(run_dir);
    std::vector<const PyramidAdapterSet*> views;
    for (const auto& s : snaps) {
      views.push_back(dynamic_cast<const PyramidAdapterSet*>(s.get()));
    }
    const TierTrace trace = tier_spectrum_trace(views, opts.top_k);
    detail::write_artifact(out / "spectrum.csv", spectrum_csv(trace), opts.force);
    json meta = detail::run_meta(run_dir, cfg);
    meta["mode"] = "spectrum";
    meta["top_k"] = opts.top_k;
    meta["epochs"] = trace.epochs;
    detail::write_artifact(out / "spectrum_meta.json", meta.dump(2) + "\n", opts.force);
    written = {out / "spectrum.csv", out / "spectrum_meta.json"};
  } else if (opts.mode == "divergence") {
    const ExperimentConfig cfg = load_run_config(run_dir);
    std::unique_ptr<AdapterSet> adapters = load_run_adapters(run_dir);
    const DivergenceMatrix dm = layer_divergence_matrix(*adapters, opts.smoothing, opts.epsilon);
    detail::write_artifact(out / "divergence.csv", divergence_csv(dm), opts.force);
    json meta = detail::run_meta(run_dir, cfg);
    meta["mode"] = "divergence";
    meta["smoothing"] = dm.smoothing;
    meta["epsilon"] = dm.epsilon;
    detail::write_artifact(out / "divergence_meta.json", meta.dump(2) + "\n", opts.force);
    written = {out / "divergence.csv", out / "divergence_meta.json"};
  } else if (opts.mode == "diff") {
    if (run_b.empty()) throw ConfigError("diff mode needs a second run directory");
    ExperimentConfig cfg_a = load_run_config(run_dir);
    ExperimentConfig cfg_b = load_run_config(run_b);
    fs::path dir_m = run_dir, dir_l = run_b;
    // The usual pairing is one msplora and one lora run; orient the diff as
    // msplora minus lora regardless of argument order. Same-method pairs
    // (e.g. a run against itself) diff in the order given.
    if (cfg_a.method == "lora" && cfg_b.method == "msplora") {
      std::swap(cfg_a, cfg_b);
      std::swap(dir_m, dir_l);
    }
    if (cfg_a.task.kind != cfg_b.task.kind || cfg_a.task.seed != cfg_b.task.seed) {
      throw ConfigError("diff mode needs matching task kind and seed across the two runs");
    }
    std::unique_ptr<AdapterSet> am = load_run_adapters(dir_m);
    std::unique_ptr<AdapterSet> al = load_run_adapters(dir_l);
    const DivergenceMatrix dm = layer_divergence_matrix(*am, opts.smoothing, opts.epsilon);
    const DivergenceMatrix dl = layer_divergence_matrix(*al, opts.smoothing, opts.epsilon);
    const auto diff = divergence_difference(dm, dl);
    detail::write_artifact(out / "divergence_diff.csv", grid_csv(diff), opts.force);
    json meta;
    meta["mode"] = "diff";
    meta["minuend"] = detail::run_meta(dir_m, cfg_a);
    meta["subtrahend"] = detail::run_meta(dir_l, cfg_b);
    meta["smoothing"] = to_string(opts.smoothing);
    meta["epsilon"] = opts.epsilon;
    detail::write_artifact(out / "divergence_diff_meta.json", meta.dump(2) + "\n", opts.force);
    written = {out / "divergence_diff.csv", out / "divergence_diff_meta.json"};
  } else {
    throw ConfigError("unknown analyze mode '" + opts.mode +
                      "' (expected spectrum, divergence or diff)");
  }
  return written;
}

// ---------------------------------------------------------------------------
// Compare sweeps
// ---------------------------------------------------------------------------

struct SweepConfig {
  ExperimentConfig base;
  std::vector<std::string> methods;  // run order
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
};

inline SweepConfig sweep_from_json(const json& j) {
  detail::check_keys(j, "sweep", {"base", "methods", "seeds", "output_dir"});
  SweepConfig s;
  if (j.contains("base")) s.base = experiment_from_json(j.at("base"));
  s.methods = detail::get_or(j, "methods", std::vector<std::string>{"msplora", "lora"});
  s.seeds = detail::get_or(j, "seeds", std::vector<std::uint64_t>{0});
  s.output_dir = detail::get_or<std::string>(j, "output_dir", "");
  for (const std::string& m : s.methods) {
    if (m != "msplora" && m != "lora") throw ConfigError("unknown method '" + m + "' in sweep");
  }
  return s;
}

struct CompareRow {
  std::string method;
  std::uint64_t seed = 0;
  long long params = 0;
  double final_loss = 0.0;
  double accuracy = 0.0;
};

struct MethodAggregate {
  std::string method;
  long long params = 0;
  std::size_t runs = 0;
  double loss_mean = 0.0;
  double loss_sd = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_sd = 0.0;
};

struct CompareResult {
  fs::path out_dir;
  std::vector<CompareRow> rows;
  std::vector<MethodAggregate> aggregates;
  std::optional<double> param_ratio;  // msplora params / lora params when both ran
};

/// Derives the per-cell config for (method, seed) from the sweep base: the
/// backbone stays fixed while task data, adapter init and batch order all
/// follow the cell seed.
inline ExperimentConfig sweep_cell_config(const SweepConfig& sweep, const std::string& method,
                                          std::uint64_t seed, const fs::path& cell_dir) {
  ExperimentConfig c = sweep.base;
  c.method = method;
  c.task.seed = seed;
  c.task.teacher_seed = derive_seed(seed, {3});
  c.train.seed = derive_seed(seed, {1});
  c.adapter_seed = derive_seed(seed, {2});
  c.output_dir = cell_dir.string();
  return c;
}

inline CompareResult run_compare(const SweepConfig& sweep, bool force = false) {
  if (sweep.output_dir.empty()) throw ConfigError("sweep has no output_dir");
  const fs::path out(sweep.output_dir);
  detail::prepare_out_dir(out, force);

  CompareResult result;
  result.out_dir = out;
  for (const std::string& method : sweep.methods) {
    for (std::uint64_t seed : sweep.seeds) {
      const fs::path cell_dir =
          out / "cells" / (method + "-seed" + std::to_string(seed));
      const ExperimentConfig cell = sweep_cell_config(sweep, method, seed, cell_dir);
      const RunResult run = run_experiment(cell, /*force=*/true);
      result.rows.push_back(CompareRow{method, seed, run.param_count,
                                       run.log.final_loss, run.eval_after.accuracy});
    }
  }

  for (const std::string& method : sweep.methods) {
    MethodAggregate agg;
    agg.method = method;
    std::vector<double> losses, accs;
    for (const CompareRow& r : result.rows) {
      if (r.method != method) continue;
      agg.params = r.params;
      losses.push_back(r.final_loss);
      accs.push_back(r.accuracy);
    }
    agg.runs = losses.size();
    auto mean_sd = [](const std::vector<double>& xs) -> std::pair<double, double> {
      if (xs.empty()) return {0.0, 0.0};
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      if (xs.size() < 2) return {mean, 0.0};
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= static_cast<double>(xs.size() - 1);
      return {mean, std::sqrt(var)};
    };
    std::tie(agg.loss_mean, agg.loss_sd) = mean_sd(losses);
    std::tie(agg.accuracy_mean, agg.accuracy_sd) = mean_sd(accs);
    result.aggregates.push_back(agg);
  }

  const MethodAggregate* msp = nullptr;
  const MethodAggregate* lra = nullptr;
  for (const MethodAggregate& a : result.aggregates) {
    if (a.method == "msplora" && a.runs > 0) msp = &a;
    if (a.method == "lora" && a.runs > 0) lra = &a;
  }
  if (msp && lra && lra->params > 0) {
    result.param_ratio = static_cast<double>(msp->params) / static_cast<double>(lra->params);
  }

  std::string csv = "method,seed,params,final_loss,eval_accuracy\n";
  for (const CompareRow& r : result.rows) {
    csv += r.method + ',' + std::to_string(r.seed) + ',' + std::to_string(r.params) + ',' +
           format_double(r.final_loss) + ',' + format_double(r.accuracy) + '\n';
  }
  write_text_file(out / "compare.csv", csv);

  json jr;
  jr["rows"] = json::array();
  for (const CompareRow& r : result.rows) {
    jr["rows"].push_back(json{{"method", r.method},
                              {"seed", r.seed},
                              {"params", r.params},
                              {"final_loss", r.final_loss},
                              {"eval_accuracy", r.accuracy}});
  }
  jr["aggregates"] = json::array();
  for (const MethodAggregate& a : result.aggregates) {
    jr["aggregates"].push_back(json{{"method", a.method},
                                    {"params", a.params},
                                    {"runs", a.runs},
                                    {"final_loss_mean", a.loss_mean},
                                    {"final_loss_sd", a.loss_sd},
                                    {"eval_accuracy_mean", a.accuracy_mean},
                                    {"eval_accuracy_sd", a.accuracy_sd}});
  }
  if (result.param_ratio) jr["param_ratio"] = *result.param_ratio;
  write_text_file(out / "compare.json", jr.dump(2) + "\n");
  return result;
}

/// Root for run directories when a config gives no output_dir:
/// $MSPLORA_OUT_ROOT if set, otherwise ./runs.
inline fs::path default_output_root() {
  if (const char* env = std::getenv("MSPLORA_OUT_ROOT")) return fs::path(env);
  return fs::path("runs");
}

}  // namespace msplora
