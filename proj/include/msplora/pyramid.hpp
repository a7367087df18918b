#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"
#include "msplora/rng.hpp"
#include "msplora/tape.hpp"

namespace msplora {

// ---------------------------------------------------------------------------
// Projection kinds
// ---------------------------------------------------------------------------

/// Attention projections that receive adapters. Query and value are the
/// conventional injection points.
enum class Proj { query, value };

inline const char* to_string(Proj p) {
  return p == Proj::query ? "query" : "value";
}

inline Proj proj_from_string(const std::string& s) {
  if (s == "query") return Proj::query;
  if (s == "value") return Proj::value;
  throw ConfigError("unknown projection kind '" + s + "'");
}

inline std::vector<Proj> default_projections() {
  return {Proj::query, Proj::value};
}

// ---------------------------------------------------------------------------
// LoraPair
// ---------------------------------------------------------------------------

/// One low-rank factor pair: delta() == A * B with A (d_in x r) drawn from
/// N(0, sigma^2) and B (r x d_out) all-zero at construction, so a fresh pair
/// contributes exactly nothing.
struct LoraPair {
  Parameter a;
  Parameter b;
  std::size_t rank = 0;
  double sigma = 0.0;

  static LoraPair init(const std::string& name_prefix, std::size_t d_in,
                       std::size_t d_out, std::size_t rank, double sigma,
                       std::uint64_t seed) {
    if (rank < 1) throw ConfigError("rank must be >= 1 for '" + name_prefix + "'");
    if (rank > std::min(d_in, d_out)) {
      throw ConfigError("rank " + std::to_string(rank) + " exceeds min dimension of " +
                        shape_string(d_in, d_out) + " for '" + name_prefix + "'");
    }
    Rng rng(seed);
    LoraPair p;
    p.a = Parameter{name_prefix + "/A", Matrix::gaussian(d_in, rank, rng, sigma)};
    p.b = Parameter{name_prefix + "/B", Matrix(rank, d_out)};
    p.rank = rank;
    p.sigma = sigma;
    return p;
  }

  Matrix delta() const { return matmul(a.value, b.value); }

  std::size_t param_count() const { return a.value.size() + b.value.size(); }
};

// ---------------------------------------------------------------------------
// RankSchedule
// ---------------------------------------------------------------------------

/// Ranks of the three tiers. The default schedule halves twice: r, r/2, r/4.
struct RankSchedule {
  std::size_t high = 0;
  std::size_t mid = 0;
  std::size_t low = 0;

  static RankSchedule geometric(std::size_t r_high) {
    if (r_high < 4 || r_high % 4 != 0) {
      const std::size_t down = r_high < 4 ? 4 : (r_high / 4) * 4;
      const std::size_t up = down + 4;
      throw ConfigError(
          "r_high must be a positive multiple of 4 so the mid and layer ranks "
          "halve cleanly (r_high/2, r_high/4); got " + std::to_string(r_high) +
          ", nearest valid values are " + std::to_string(std::max<std::size_t>(down, 4)) +
          " and " + std::to_string(up));
    }
    return RankSchedule{r_high, r_high / 2, r_high / 4};
  }

  static RankSchedule custom(std::size_t high, std::size_t mid, std::size_t low) {
    if (low < 1 || mid < low || high < mid) {
      throw ConfigError("rank schedule must satisfy high >= mid >= low >= 1, got " +
                        std::to_string(high) + "/" + std::to_string(mid) + "/" +
                        std::to_string(low));
    }
    return RankSchedule{high, mid, low};
  }

  bool is_geometric() const { return mid * 2 == high && low * 2 == mid; }
};

// ---------------------------------------------------------------------------
// LayerPartition
// ---------------------------------------------------------------------------

enum class Group { lower = 0, middle = 1, upper = 2 };

inline const char* to_string(Group g) {
  switch (g) {
    case Group::lower: return "lower";
    case Group::middle: return "middle";
    default: return "upper";
  }
}

/// Depth-wise split of N layers into three contiguous groups whose sizes
/// differ by at most one. Lower layers receive extras first: the lower group
/// gets ceil(N/3) layers, the middle ceil(rest/2), the upper the remainder.
class LayerPartition {
 public:
  explicit LayerPartition(std::size_t n_layers) : n_layers_(n_layers) {
    if (n_layers < 3) {
      throw ConfigError("need at least 3 layers to form lower/middle/upper groups, got " +
                        std::to_string(n_layers));
    }
    sizes_[0] = (n_layers + 2) / 3;
    const std::size_t rest = n_layers - sizes_[0];
    sizes_[1] = (rest + 1) / 2;
    sizes_[2] = rest - sizes_[1];
  }

  std::size_t n_layers() const { return n_layers_; }

  std::array<std::size_t, 3> sizes() const { return sizes_; }

  Group group_of(std::size_t layer) const {
    if (layer >= n_layers_) {
      throw ConfigError("layer " + std::to_string(layer) + " out of range for " +
                        std::to_string(n_layers_) + " layers");
    }
    if (layer < sizes_[0]) return Group::lower;
    if (layer < sizes_[0] + sizes_[1]) return Group::middle;
    return Group::upper;
  }

  // [begin, end) layer range of a group.
  std::pair<std::size_t, std::size_t> range(Group g) const {
    switch (g) {
      case Group::lower: return {0, sizes_[0]};
      case Group::middle: return {sizes_[0], sizes_[0] + sizes_[1]};
      default: return {sizes_[0] + sizes_[1], n_layers_};
    }
  }

  friend bool operator==(const LayerPartition&, const LayerPartition&) = default;

 private:
  std::size_t n_layers_;
  std::array<std::size_t, 3> sizes_{};
};

inline LayerPartition partition_layers(std::size_t n_layers) {
  return LayerPartition(n_layers);
}

// ---------------------------------------------------------------------------
// Parameter budgets
// ---------------------------------------------------------------------------

/// Closed-form trainable-parameter counts for plain per-layer adapters
/// (4*N*r0*d) and the pyramid layout ((10+N)*r0*d) at equal top rank.
struct ParamBudget {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t rank = 0;
  long long lora_total = 0;
  long long msplora_total = 0;

  double ratio() const {
    return static_cast<double>(msplora_total) / static_cast<double>(lora_total);
  }
};

inline ParamBudget count_params(std::size_t n_layers, std::size_t d_model,
                                std::size_t r0) {
  if (n_layers < 1 || d_model < 1 || r0 < 1) {
    throw ConfigError("count_params: all inputs must be >= 1");
  }
  ParamBudget b;
  b.n_layers = n_layers;
  b.d_model = d_model;
  b.rank = r0;
  const long long n = static_cast<long long>(n_layers);
  const long long rd = static_cast<long long>(r0) * static_cast<long long>(d_model);
  b.lora_total = 4 * n * rd;
  b.msplora_total = (10 + n) * rd;
  return b;
}

// ---------------------------------------------------------------------------
// AdapterSet interface
// ---------------------------------------------------------------------------

enum class Tier { global, mid, layer };

inline const char* to_string(Tier t) {
  switch (t) {
    case Tier::global: return "global";
    case Tier::mid: return "mid";
    default: return "layer";
  }
}

/// Common surface of the pyramid adapters and the plain per-layer baseline:
/// per-(layer, projection) weight deltas, on-tape or as plain values, plus a
/// stable trainable-parameter registry.
class AdapterSet {
 public:
  virtual ~AdapterSet() = default;

  virtual std::string method() const = 0;
  virtual std::size_t n_layers() const = 0;
  virtual std::size_t d_model() const = 0;
  virtual const std::vector<Proj>& kinds() const = 0;

  // Tape-tracked delta for one (layer, kind); gradients flow to every factor
  // involved, accumulating across layers for shared pairs.
  virtual Var delta(Tape& tape, std::size_t layer, Proj kind) const = 0;

  // Same composition evaluated outside any tape.
  virtual Matrix delta_value(std::size_t layer, Proj kind) const = 0;

  // The layer-local component only: for the pyramid this is the
  // layer-specific tier's contribution, for the baseline the full delta.
  virtual Matrix layer_local_delta_value(std::size_t layer, Proj kind) const = 0;
  virtual std::size_t layer_local_rank() const = 0;

  // Every factor matrix exactly once, in a stable order, with hierarchical
  // names (tier/group-or-layer/kind/A-or-B).
  virtual std::vector<Parameter*> trainable_parameters() = 0;
  virtual std::vector<const Parameter*> trainable_parameters() const = 0;

  virtual std::unique_ptr<AdapterSet> clone() const = 0;

  // Tier of a parameter, decided by its hierarchical name prefix.
  Tier tier_of(const Parameter& p) const {
    if (p.name.rfind("global/", 0) == 0) return Tier::global;
    if (p.name.rfind("mid/", 0) == 0) return Tier::mid;
    return Tier::layer;
  }

  long long trainable_count() const {
    long long total = 0;
    for (const Parameter* p : trainable_parameters()) {
      total += static_cast<long long>(p->value.size());
    }
    return total;
  }

  /// W + delta(layer, kind). Folding the update into the base weight this way
  /// is additive, not idempotent: merging twice adds the delta twice.
  Matrix merge_into_base(std::size_t layer, Proj kind, const Matrix& w) const {
    Matrix d = delta_value(layer, kind);
    if (w.rows() != d.rows() || w.cols() != d.cols()) {
      throw ShapeError("merge_into_base: base weight is " + w.shape() +
                       " but delta is " + d.shape());
    }
    d += w;
    return d;
  }

 protected:
  std::size_t kind_index(Proj kind) const {
    const auto& ks = kinds();
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == kind) return i;
    throw ConfigError(std::string("projection kind '") + to_string(kind) +
                      "' is not registered with this adapter set");
  }

  void check_layer(std::size_t layer) const {
    if (layer >= n_layers()) {
      throw ConfigError("layer " + std::to_string(layer) + " out of range for " +
                        std::to_string(n_layers()) + " layers");
    }
  }
};

// ---------------------------------------------------------------------------
// PyramidAdapterSet
// ---------------------------------------------------------------------------

/// The three-tier pyramid: one global pair per projection kind (rank high,
/// shared by all layers), one pair per (depth group, kind) at rank mid, and
/// one pair per (layer, kind) at rank low. A layer's weight update is the sum
/// of its three tier contributions; shared pairs are referenced, not copied.
class PyramidAdapterSet : public AdapterSet {
 public:
  struct TierScales {
    double global = 1.0;
    double mid = 1.0;
    double layer = 1.0;
  };

  PyramidAdapterSet(std::size_t n_layers, std::size_t d_model, RankSchedule schedule,
                    std::uint64_t seed, double sigma = 0.02,
                    std::vector<Proj> kinds = default_projections())
      : partition_(n_layers),
        schedule_(schedule),
        kinds_(std::move(kinds)),
        d_model_(d_model),
        seed_(seed),
        sigma_(sigma) {
    if (kinds_.empty()) throw ConfigError("adapter set needs at least one projection kind");
    if (schedule_.high > d_model) {
      throw ConfigError("r_high " + std::to_string(schedule_.high) +
                        " exceeds d_model " + std::to_string(d_model));
    }
    for (std::size_t ki = 0; ki < kinds_.size(); ++ki) {
      global_.push_back(LoraPair::init(std::string("global/") + to_string(kinds_[ki]),
                                       d_model, d_model, schedule_.high, sigma,
                                       derive_seed(seed, {1, ki})));
    }
    for (std::size_t g = 0; g < 3; ++g) {
      for (std::size_t ki = 0; ki < kinds_.size(); ++ki) {
        mid_.push_back(LoraPair::init(
            std::string("mid/") + to_string(static_cast<Group>(g)) + "/" +
                to_string(kinds_[ki]),
            d_model, d_model, schedule_.mid, sigma, derive_seed(seed, {2, g, ki})));
      }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t ki = 0; ki < kinds_.size(); ++ki) {
        layer_.push_back(LoraPair::init(
            "layer/" + std::to_string(l) + "/" + to_string(kinds_[ki]), d_model,
            d_model, schedule_.low, sigma, derive_seed(seed, {3, l, ki})));
      }
    }
  }

  std::string method() const override { return "msplora"; }
  std::size_t n_layers() const override { return partition_.n_layers(); }
  std::size_t d_model() const override { return d_model_; }
  const std::vector<Proj>& kinds() const override { return kinds_; }
  const LayerPartition& partition() const { return partition_; }
  const RankSchedule& schedule() const { return schedule_; }
  std::uint64_t seed() const { return seed_; }
  double sigma() const { return sigma_; }

  TierScales& tier_scales() { return scales_; }
  const TierScales& tier_scales() const { return scales_; }

  const LoraPair& global_pair(Proj kind) const { return global_[kind_index(kind)]; }
  LoraPair& global_pair(Proj kind) { return global_[kind_index(kind)]; }

  const LoraPair& mid_pair(Group g, Proj kind) const {
    return mid_[static_cast<std::size_t>(g) * kinds_.size() + kind_index(kind)];
  }
  LoraPair& mid_pair(Group g, Proj kind) {
    return mid_[static_cast<std::size_t>(g) * kinds_.size() + kind_index(kind)];
  }

  const LoraPair& layer_pair(std::size_t layer, Proj kind) const {
    check_layer(layer);
    return layer_[layer * kinds_.size() + kind_index(kind)];
  }
  LoraPair& layer_pair(std::size_t layer, Proj kind) {
    check_layer(layer);
    return layer_[layer * kinds_.size() + kind_index(kind)];
  }

  Var delta(Tape& tape, std::size_t layer, Proj kind) const override {
    check_layer(layer);
    const LoraPair& g = global_pair(kind);
    const LoraPair& m = mid_pair(partition_.group_of(layer), kind);
    const LoraPair& l = layer_pair(layer, kind);
    Var dg = tape.matmul(tape.watch(g.a), tape.watch(g.b));
    if (scales_.global != 1.0) dg = tape.scale(dg, scales_.global);
    Var dm = tape.matmul(tape.watch(m.a), tape.watch(m.b));
    if (scales_.mid != 1.0) dm = tape.scale(dm, scales_.mid);
    Var dl = tape.matmul(tape.watch(l.a), tape.watch(l.b));
    if (scales_.layer != 1.0) dl = tape.scale(dl, scales_.layer);
    return tape.add(tape.add(dg, dm), dl);
  }

  Matrix delta_value(std::size_t layer, Proj kind) const override {
    check_layer(layer);
    Matrix d = global_delta_value(kind);
    d += mid_delta_value(partition_.group_of(layer), kind);
    d += layer_local_delta_value(layer, kind);
    return d;
  }

  Matrix global_delta_value(Proj kind) const {
    Matrix d = global_pair(kind).delta();
    if (scales_.global != 1.0) d *= scales_.global;
    return d;
  }

  Matrix mid_delta_value(Group g, Proj kind) const {
    Matrix d = mid_pair(g, kind).delta();
    if (scales_.mid != 1.0) d *= scales_.mid;
    return d;
  }

  Matrix layer_local_delta_value(std::size_t layer, Proj kind) const override {
    Matrix d = layer_pair(layer, kind).delta();
    if (scales_.layer != 1.0) d *= scales_.layer;
    return d;
  }

  std::size_t layer_local_rank() const override { return schedule_.low; }

  std::vector<Parameter*> trainable_parameters() override {
    std::vector<Parameter*> out;
    for (LoraPair& p : global_) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
    for (LoraPair& p : mid_) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
    for (LoraPair& p : layer_) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
    return out;
  }

  std::vector<const Parameter*> trainable_parameters() const override {
    std::vector<const Parameter*> out;
    auto& self = const_cast<PyramidAdapterSet&>(*this);
    for (Parameter* p : self.trainable_parameters()) out.push_back(p);
    return out;
  }

  std::unique_ptr<AdapterSet> clone() const override {
    return std::make_unique<PyramidAdapterSet>(*this);
  }

 private:
  LayerPartition partition_;
  RankSchedule schedule_;
  std::vector<Proj> kinds_;
  std::size_t d_model_;
  std::uint64_t seed_;
  double sigma_;
  TierScales scales_;
  std::vector<LoraPair> global_;  // one per kind
  std::vector<LoraPair> mid_;     // 3 groups x kinds
  std::vector<LoraPair> layer_;   // layers x kinds
};

/// Builds a pyramid set with the geometric rank schedule (r, r/2, r/4).
inline PyramidAdapterSet build_pyramid(std::size_t n_layers, std::size_t d_model,
                                       std::size_t r_high, std::uint64_t seed,
                                       double sigma = 0.02) {
  return PyramidAdapterSet(n_layers, d_model, RankSchedule::geometric(r_high),
                           seed, sigma);
}

// ---------------------------------------------------------------------------
// PlainLoraSet: the per-layer baseline
// ---------------------------------------------------------------------------

/// Conventional per-layer adapters: one independent rank-r pair per
/// (layer, projection kind), nothing shared. Serves as the comparison
/// baseline for training sweeps and redundancy analysis.
class PlainLoraSet : public AdapterSet {
 public:
  PlainLoraSet(std::size_t n_layers, std::size_t d_model, std::size_t rank,
               std::uint64_t seed, double sigma = 0.02,
               std::vector<Proj> kinds = default_projections())
      : kinds_(std::move(kinds)),
        n_layers_(n_layers),
        d_model_(d_model),
        rank_(rank),
        seed_(seed),
        sigma_(sigma) {
    if (n_layers < 1) throw ConfigError("need at least 1 layer");
    if (kinds_.empty()) throw ConfigError("adapter set needs at least one projection kind");
    if (rank > d_model) {
      throw ConfigError("rank " + std::to_string(rank) + " exceeds d_model " +
                        std::to_string(d_model));
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t ki = 0; ki < kinds_.size(); ++ki) {
        pairs_.push_back(LoraPair::init(
            "layer/" + std::to_string(l) + "/" + to_string(kinds_[ki]), d_model,
            d_model, rank, sigma, derive_seed(seed, {4, l, ki})));
      }
    }
  }

  std::string method() const override { return "lora"; }
  std::size_t n_layers() const override { return n_layers_; }
  std::size_t d_model() const override { return d_model_; }
  const std::vector<Proj>& kinds() const override { return kinds_; }
  std::size_t rank() const { return rank_; }
  std::uint64_t seed() const { return seed_; }
  double sigma() const { return sigma_; }

  const LoraPair& pair(std::size_t layer, Proj kind) const {
    check_layer(layer);
    return pairs_[layer * kinds_.size() + kind_index(kind)];
  }
  LoraPair& pair(std::size_t layer, Proj kind) {
    check_layer(layer);
    return pairs_[layer * kinds_.size() + kind_index(kind)];
  }

  Var delta(Tape& tape, std::size_t layer, Proj kind) const override {
    const LoraPair& p = pair(layer, kind);
    return tape.matmul(tape.watch(p.a), tape.watch(p.b));
  }

  Matrix delta_value(std::size_t layer, Proj kind) const override {
    return pair(layer, kind).delta();
  }

  Matrix layer_local_delta_value(std::size_t layer, Proj kind) const override {
    return delta_value(layer, kind);
  }

  std::size_t layer_local_rank() const override { return rank_; }

  std::vector<Parameter*> trainable_parameters() override {
    std::vector<Parameter*> out;
    for (LoraPair& p : pairs_) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
    return out;
  }

  std::vector<const Parameter*> trainable_parameters() const override {
    std::vector<const Parameter*> out;
    auto& self = const_cast<PlainLoraSet&>(*this);
    for (Parameter* p : self.trainable_parameters()) out.push_back(p);
    return out;
  }

  std::unique_ptr<AdapterSet> clone() const override {
    return std::make_unique<PlainLoraSet>(*this);
  }

 private:
  std::vector<Proj> kinds_;
  std::size_t n_layers_;
  std::size_t d_model_;
  std::size_t rank_;
  std::uint64_t seed_;
  double sigma_;
  std::vector<LoraPair> pairs_;
};

}  // namespace msplora
