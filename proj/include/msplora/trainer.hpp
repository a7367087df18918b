#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"
#include "msplora/model.hpp"
#include "msplora/pyramid.hpp"
#include "msplora/rng.hpp"
#include "msplora/tape.hpp"

namespace msplora {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr_init = 3e-4;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  std::uint64_t seed = 0;

  void validate() const {
    if (lr_init <= 0.0) throw ConfigError("lr_init must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("betas must lie in [0, 1)");
    }
    if (eps <= 0.0) throw ConfigError("eps must be positive");
    if (weight_decay < 0.0 || clip_norm < 0.0) {
      throw ConfigError("weight_decay and clip_norm must be >= 0");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Desk-scale learning rate that converges within the default 3 epochs on the
// synthetic tasks; the stock lr_init default above follows the large-model
// convention and is far too timid for a 6-layer d=32 net.
inline TrainConfig recommended_train_config(std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.lr_init = 3e-2;
  cfg.seed = seed;
  return cfg;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class TaskKind { copy, reverse, teacher_distill };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    default: return "teacher-distill";
  }
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "teacher-distill") return TaskKind::teacher_distill;
  throw ConfigError("unknown task kind '" + s + "'");
}

/// Sequence-labelling tasks over random token streams. Train and eval splits
/// draw from disjoint sub-streams of the task seed, so they never share a
/// sample path. teacher-distill labels every position with the argmax of a
/// differently-seeded reference network's logits.
struct SyntheticTask {
  TaskKind kind = TaskKind::copy;
  std::uint64_t seed = 0;
  std::size_t samples = 512;       // train split
  std::size_t eval_samples = 64;   // eval split
  std::size_t seq_len = 16;
  std::uint64_t teacher_seed = 1;  // teacher-distill only

  friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;
};

struct Example {
  std::vector<int> tokens;
  std::vector<int> targets;
};

enum class Split { train, eval };

inline std::vector<Example> make_split(const SyntheticTask& task,
                                       const TinyTransformerConfig& model_cfg,
                                       Split split) {
  if (task.seq_len < 1 || task.seq_len > model_cfg.seq_len) {
    throw ConfigError("task seq_len " + std::to_string(task.seq_len) +
                      " outside [1, " + std::to_string(model_cfg.seq_len) + "]");
  }
  const std::size_t n = split == Split::train ? task.samples : task.eval_samples;
  Rng rng(derive_seed(task.seed, {split == Split::train ? 1ULL : 2ULL}));

  std::unique_ptr<FrozenBackbone> teacher;
  if (task.kind == TaskKind::teacher_distill) {
    TinyTransformerConfig tcfg = model_cfg;
    tcfg.seed = task.teacher_seed;
    teacher = std::make_unique<FrozenBackbone>(tcfg);
  }

  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.tokens.resize(task.seq_len);
    for (int& t : ex.tokens) {
      t = static_cast<int>(rng.below(model_cfg.vocab));
    }
    switch (task.kind) {
      case TaskKind::copy:
        ex.targets = ex.tokens;
        break;
      case TaskKind::reverse:
        ex.targets.assign(ex.tokens.rbegin(), ex.tokens.rend());
        break;
      case TaskKind::teacher_distill: {
        Tape tape;
        const Matrix& logits = tape.value(forward(tape, *teacher, nullptr, ex.tokens));
        ex.targets.resize(task.seq_len);
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          std::size_t best = 0;
          for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits(r, j) > logits(r, best)) best = j;
          }
          ex.targets[r] = static_cast<int>(best);
        }
        break;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Adam moments with bias correction and decoupled weight decay (decay is
/// applied to the parameter directly, never through the gradient path).
/// The learning rate decays linearly to zero over the configured number of
/// steps, so step i uses lr_init * (1 - i/total_steps).
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, TrainConfig cfg, std::size_t total_steps)
      : params_(std::move(params)), cfg_(cfg), total_steps_(std::max<std::size_t>(total_steps, 1)) {
    cfg_.validate();
    state_.reserve(params_.size());
    for (Parameter* p : params_) {
      state_.push_back(Moments{Matrix(p->value.rows(), p->value.cols()),
                               Matrix(p->value.rows(), p->value.cols())});
    }
  }

  double lr_for_step(std::size_t step_index) const {
    const double frac = static_cast<double>(step_index) / static_cast<double>(total_steps_);
    return cfg_.lr_init * (1.0 - frac);
  }

  std::size_t step_index() const { return t_; }

  /// Applies one update; grads must align with the parameter list.
  /// Returns the learning rate that was used.
  double step(const std::vector<Matrix>& grads) {
    if (grads.size() != params_.size()) {
      throw ShapeError("adam_w_step: got " + std::to_string(grads.size()) +
                       " gradients for " + std::to_string(params_.size()) +
                       " parameters");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].rows() != params_[i]->value.rows() ||
          grads[i].cols() != params_[i]->value.cols()) {
        throw ShapeError("adam_w_step: gradient shape " + grads[i].shape() +
                         " does not match parameter '" + params_[i]->name + "' " +
                         params_[i]->value.shape());
      }
      if (!grads[i].all_finite()) {
        throw NumericError("adam_w_step: non-finite gradient for parameter '" +
                           params_[i]->name + "'");
      }
    }

    double clip_scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Matrix& g : grads) sq += g.squared_frobenius_norm();
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
    }

    const double lr = lr_for_step(t_);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix& p = params_[i]->value;
      Matrix& m = state_[i].m;
      Matrix& v = state_[i].v;
      const Matrix& g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g.data()[j] * clip_scale;
        m.data()[j] = cfg_.beta1 * m.data()[j] + (1.0 - cfg_.beta1) * gj;
        v.data()[j] = cfg_.beta2 * v.data()[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m.data()[j] / bc1;
        const double vhat = v.data()[j] / bc2;
        double x = p.data()[j];
        x -= lr * cfg_.weight_decay * x;  // decoupled decay
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p.data()[j] = x;
      }
    }
    return lr;
  }

 private:
  struct Moments {
    Matrix m, v;
  };

  std::vector<Parameter*> params_;
  TrainConfig cfg_;
  std::size_t total_steps_;
  std::size_t t_ = 0;
  std::vector<Moments> state_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm_global = 0.0;
  double grad_norm_mid = 0.0;
  double grad_norm_layer = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  double initial_loss = 0.0;  // full train split, before any update
  double final_loss = 0.0;    // full train split, after the last update
};

namespace detail {

inline Var batch_loss(Tape& tape, const FrozenBackbone& bb, const AdapterSet* adapters,
                      const std::vector<const Example*>& batch,
                      bool train_backbone = false) {
  Var total;
  for (const Example* ex : batch) {
    Var logits = forward(tape, bb, adapters, ex->tokens, nullptr, train_backbone);
    Var l = loss_cross_entropy(tape, logits, ex->targets);
    total = total.valid() ? tape.add(total, l) : l;
  }
  return tape.scale(total, 1.0 / static_cast<double>(batch.size()));
}

inline double dataset_loss(const FrozenBackbone& bb, const AdapterSet* adapters,
                           const std::vector<Example>& data) {
  constexpr std::size_t kChunk = 32;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    std::vector<const Example*> chunk;
    for (std::size_t j = i; j < std::min(i + kChunk, data.size()); ++j) {
      chunk.push_back(&data[j]);
    }
    Tape tape;
    total += tape.value(batch_loss(tape, bb, adapters, chunk))(0, 0) *
             static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(data.size());
}

}  // namespace detail

using SnapshotList = std::vector<std::unique_ptr<AdapterSet>>;

/// Trains the adapter set in place on a synthetic task. Deterministic under
/// the task/train seeds; the backbone is read-only throughout. When
/// `snapshots` is given, receives a deep copy of the adapter state at
/// initialization and after each epoch.
inline TrainLog train(const FrozenBackbone& bb, AdapterSet& adapters,
                      const SyntheticTask& task, const TrainConfig& cfg,
                      SnapshotList* snapshots = nullptr) {
  cfg.validate();
  const std::vector<Example> data = make_split(task, bb.config(), Split::train);
  if (data.empty()) throw ConfigError("train: task generated no samples");

  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<Parameter*> params = adapters.trainable_parameters();
  AdamW opt(params, cfg, total_steps);

  TrainLog log;
  log.initial_loss = detail::dataset_loss(bb, &adapters, data);
  if (snapshots) snapshots->push_back(adapters.clone());

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with an epoch-derived stream
    Rng shuffle_rng(derive_seed(cfg.seed, {0xE40C5ULL, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }

    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t j = start; j < std::min(start + cfg.batch_size, data.size()); ++j) {
        batch.push_back(&data[order[j]]);
      }
      Tape tape;
      Var loss = detail::batch_loss(tape, bb, &adapters, batch);
      const double loss_value = tape.value(loss)(0, 0);
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      }
      GradientMap gm = tape.backward(loss);

      StepRecord rec;
      rec.step = step;
      rec.loss = loss_value;
      std::vector<Matrix> grads;
      grads.reserve(params.size());
      double sq_global = 0.0, sq_mid = 0.0, sq_layer = 0.0;
      for (Parameter* p : params) {
        if (gm.contains(*p)) {
          const Matrix& g = gm.at(*p);
          const double sq = g.squared_frobenius_norm();
          switch (adapters.tier_of(*p)) {
            case Tier::global: sq_global += sq; break;
            case Tier::mid: sq_mid += sq; break;
            case Tier::layer: sq_layer += sq; break;
          }
          grads.push_back(g);
        } else {
          grads.push_back(Matrix(p->value.rows(), p->value.cols()));
        }
      }
      rec.grad_norm_global = std::sqrt(sq_global);
      rec.grad_norm_mid = std::sqrt(sq_mid);
      rec.grad_norm_layer = std::sqrt(sq_layer);
      rec.lr = opt.step(grads);
      log.steps.push_back(rec);
      ++step;
    }
    if (snapshots) snapshots->push_back(adapters.clone());
  }

  log.final_loss = detail::dataset_loss(bb, &adapters, data);
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;   // argmax token accuracy
  std::size_t tokens = 0;

  friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

/// Loss and token accuracy on the task's eval split. Pure: no parameter is
/// mutated and repeated calls return identical metrics.
inline EvalMetrics eval(const FrozenBackbone& bb, const AdapterSet& adapters,
                        const SyntheticTask& task) {
  const std::vector<Example> data = make_split(task, bb.config(), Split::eval);
  if (data.empty()) throw ConfigError("eval: task generated no samples");
  EvalMetrics m;
  double loss_total = 0.0;
  std::size_t correct = 0;
  for (const Example& ex : data) {
    Tape tape;
    Var logits_var = forward(tape, bb, &adapters, ex.tokens);
    const Matrix& logits = tape.value(logits_var);
    loss_total += tape.value(loss_cross_entropy(tape, logits_var, ex.targets))(0, 0);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits(r, j) > logits(r, best)) best = j;
      }
      if (static_cast<int>(best) == ex.targets[r]) ++correct;
      ++m.tokens;
    }
  }
  m.loss = loss_total / static_cast<double>(data.size());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.tokens);
  return m;
}

// ---------------------------------------------------------------------------
// Backbone pre-training
// ---------------------------------------------------------------------------

/// Trains the backbone itself (no adapters) on a synthetic task, then leaves
/// it to be frozen for adapter runs. Used to give analysis runs a backbone
/// with structured representations instead of raw random weights.
inline TrainLog pretrain_backbone(FrozenBackbone& bb, const SyntheticTask& task,
                                  const TrainConfig& cfg) {
  cfg.validate();
  const std::vector<Example> data = make_split(task, bb.config(), Split::train);
  if (data.empty()) throw ConfigError("pretrain: task generated no samples");
  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<Parameter*> params = bb.all_parameters();
  AdamW opt(params, cfg, steps_per_epoch * cfg.epochs);

  TrainLog log;
  log.initial_loss = detail::dataset_loss(bb, nullptr, data);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, {0xBB5EEDULL, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t j = start; j < std::min(start + cfg.batch_size, data.size()); ++j) {
        batch.push_back(&data[order[j]]);
      }
      Tape tape;
      Var loss = detail::batch_loss(tape, bb, nullptr, batch, /*train_backbone=*/true);
      const double loss_value = tape.value(loss)(0, 0);
      if (!std::isfinite(loss_value)) {
        throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
      }
      GradientMap gm = tape.backward(loss);
      std::vector<Matrix> grads;
      grads.reserve(params.size());
      for (Parameter* p : params) {
        grads.push_back(gm.contains(*p) ? gm.at(*p)
                                        : Matrix(p->value.rows(), p->value.cols()));
      }
      const double lr = opt.step(grads);
      log.steps.push_back(StepRecord{step, loss_value, lr, 0.0, 0.0, 0.0});
      ++step;
    }
  }
  log.final_loss = detail::dataset_loss(bb, nullptr, data);
  return log;
}

}  // namespace msplora
