#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"
#include "msplora/pyramid.hpp"
#include "msplora/rng.hpp"
#include "msplora/tape.hpp"

namespace msplora {

struct TinyTransformerConfig {
  std::size_t n_layers = 6;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t vocab = 32;
  std::size_t seq_len = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers < 3) {
      throw ConfigError("model needs n_layers >= 3, got " + std::to_string(n_layers));
    }
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " must be divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_model < 1 || d_ff < 1 || seq_len < 1) {
      throw ConfigError("model dimensions must be >= 1");
    }
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
  }

  friend bool operator==(const TinyTransformerConfig&,
                         const TinyTransformerConfig&) = default;
};

struct LayerWeights {
  Parameter w_q, w_k, w_v, w_o;          // d x d
  Parameter ln1_gain, ln1_bias;          // 1 x d
  Parameter ln2_gain, ln2_bias;          // 1 x d
  Parameter ff_in, ff_out;               // d x d_ff, d_ff x d
};

/// A pre-LN causal decoder stack with tied input/output embeddings. All
/// weights are plain Parameters; during adapter training they enter the tape
/// as frozen leaves, so nothing here receives or applies gradients.
/// Deterministic from config().seed.
class FrozenBackbone {
 public:
  explicit FrozenBackbone(TinyTransformerConfig cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    const double embed_std = 0.15;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double ff_out_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));

    embedding = gaussian_param("embedding", cfg.vocab, d, embed_std, {1});
    positional = gaussian_param("positional", cfg.seq_len, d, embed_std, {2});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string base = "layer/" + std::to_string(l) + "/";
      LayerWeights lw;
      lw.w_q = gaussian_param(base + "w_q", d, d, w_std, {3, l, 0});
      lw.w_k = gaussian_param(base + "w_k", d, d, w_std, {3, l, 1});
      lw.w_v = gaussian_param(base + "w_v", d, d, w_std, {3, l, 2});
      lw.w_o = gaussian_param(base + "w_o", d, d, w_std, {3, l, 3});
      lw.ff_in = gaussian_param(base + "ff_in", d, cfg.d_ff, w_std, {3, l, 4});
      lw.ff_out = gaussian_param(base + "ff_out", cfg.d_ff, d, ff_out_std, {3, l, 5});
      lw.ln1_gain = Parameter{base + "ln1_gain", Matrix(1, d, 1.0)};
      lw.ln1_bias = Parameter{base + "ln1_bias", Matrix(1, d, 0.0)};
      lw.ln2_gain = Parameter{base + "ln2_gain", Matrix(1, d, 1.0)};
      lw.ln2_bias = Parameter{base + "ln2_bias", Matrix(1, d, 0.0)};
      layers.push_back(std::move(lw));
    }
    final_gain = Parameter{"final/gain", Matrix(1, d, 1.0)};
    final_bias = Parameter{"final/bias", Matrix(1, d, 0.0)};
  }

  const TinyTransformerConfig& config() const { return cfg_; }

  std::vector<Parameter*> all_parameters() {
    std::vector<Parameter*> out{&embedding, &positional};
    for (LayerWeights& lw : layers) {
      for (Parameter* p : {&lw.w_q, &lw.w_k, &lw.w_v, &lw.w_o, &lw.ln1_gain,
                           &lw.ln1_bias, &lw.ff_in, &lw.ff_out, &lw.ln2_gain,
                           &lw.ln2_bias}) {
        out.push_back(p);
      }
    }
    out.push_back(&final_gain);
    out.push_back(&final_bias);
    return out;
  }

  std::vector<const Parameter*> all_parameters() const {
    auto& self = const_cast<FrozenBackbone&>(*this);
    std::vector<const Parameter*> out;
    for (Parameter* p : self.all_parameters()) out.push_back(p);
    return out;
  }

  // FNV-1a over every parameter's name, shape and value bits; used to detect
  // backbone drift across training runs.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&h](const void* data, std::size_t n) {
      const unsigned char* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const Parameter* p : all_parameters()) {
      mix_bytes(p->name.data(), p->name.size());
      const std::uint64_t dims[2] = {p->value.rows(), p->value.cols()};
      mix_bytes(dims, sizeof(dims));
      mix_bytes(p->value.data().data(), p->value.size() * sizeof(double));
    }
    return h;
  }

  Parameter embedding;
  Parameter positional;
  std::vector<LayerWeights> layers;
  Parameter final_gain;
  Parameter final_bias;

 private:
  Parameter gaussian_param(const std::string& name, std::size_t rows,
                           std::size_t cols, double stddev,
                           std::initializer_list<std::uint64_t> tag) {
    Rng rng(derive_seed(cfg_.seed, tag));
    return Parameter{name, Matrix::gaussian(rows, cols, rng, stddev)};
  }

  TinyTransformerConfig cfg_;
};

/// Post-layer residual activations, recorded when a probe asks for them.
struct ForwardTrace {
  std::vector<Matrix> layer_outputs;
};

namespace detail {

inline Matrix causal_mask(std::size_t t) {
  Matrix m(t, t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m(i, j) = -1e9;
  return m;
}

}  // namespace detail

/// Forward pass over one token sequence; returns the T x vocab logits node.
/// Adapters (optional) add their deltas to each layer's query and value
/// projections; every other path uses frozen weights, so gradients reach only
/// adapter factors. With `train_backbone` the backbone weights are watched
/// instead of frozen (used for synthetic pre-training only).
inline Var forward(Tape& tape, const FrozenBackbone& bb, const AdapterSet* adapters,
                   const std::vector<int>& tokens, ForwardTrace* trace = nullptr,
                   bool train_backbone = false) {
  const TinyTransformerConfig& cfg = bb.config();
  if (tokens.empty() || tokens.size() > cfg.seq_len) {
    throw ShapeError("forward: sequence length " + std::to_string(tokens.size()) +
                     " outside [1, " + std::to_string(cfg.seq_len) + "]");
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw ShapeError("forward: token id " + std::to_string(t) +
                       " outside vocab of " + std::to_string(cfg.vocab));
    }
  }
  if (adapters) {
    if (adapters->n_layers() != cfg.n_layers) {
      throw ShapeError("forward: adapter set spans " +
                       std::to_string(adapters->n_layers()) + " layers, model has " +
                       std::to_string(cfg.n_layers));
    }
    if (adapters->d_model() != cfg.d_model) {
      throw ShapeError("forward: adapter d_model " +
                       std::to_string(adapters->d_model()) + " != model d_model " +
                       std::to_string(cfg.d_model));
    }
  }

  auto leaf = [&](const Parameter& p) {
    return train_backbone ? tape.watch(p) : tape.frozen(p);
  };

  const std::size_t T = tokens.size();
  const std::size_t dh = cfg.d_model / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var embed = leaf(bb.embedding);
  Var h = tape.gather_rows(embed, tokens);
  std::vector<int> pos(T);
  std::iota(pos.begin(), pos.end(), 0);
  h = tape.add(h, tape.gather_rows(leaf(bb.positional), pos));
  Var mask = tape.constant(detail::causal_mask(T));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = bb.layers[l];
    Var x = tape.layer_norm(h);
    x = tape.mul_row(x, leaf(lw.ln1_gain));
    x = tape.add_row(x, leaf(lw.ln1_bias));

    Var wq = leaf(lw.w_q);
    Var wv = leaf(lw.w_v);
    if (adapters) {
      wq = tape.add(wq, adapters->delta(tape, l, Proj::query));
      wv = tape.add(wv, adapters->delta(tape, l, Proj::value));
    }
    Var q = tape.matmul(x, wq);
    Var k = tape.matmul(x, leaf(lw.w_k));
    Var v = tape.matmul(x, wv);

    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Var qh = tape.slice_cols(q, hd * dh, dh);
      Var kh = tape.slice_cols(k, hd * dh, dh);
      Var vh = tape.slice_cols(v, hd * dh, dh);
      Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale);
      scores = tape.add(scores, mask);
      heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
    }
    Var ctx = cfg.n_heads == 1 ? heads[0] : tape.concat_cols(heads);
    h = tape.add(h, tape.matmul(ctx, leaf(lw.w_o)));

    Var y = tape.layer_norm(h);
    y = tape.mul_row(y, leaf(lw.ln2_gain));
    y = tape.add_row(y, leaf(lw.ln2_bias));
    Var f = tape.matmul(tape.gelu(tape.matmul(y, leaf(lw.ff_in))), leaf(lw.ff_out));
    h = tape.add(h, f);

    if (trace) trace->layer_outputs.push_back(tape.value(h));
  }

  Var hf = tape.layer_norm(h);
  hf = tape.mul_row(hf, leaf(bb.final_gain));
  hf = tape.add_row(hf, leaf(bb.final_bias));
  // tied unembedding
  return tape.matmul(hf, tape.transpose(embed));
}

/// Mean token-level negative log-likelihood of `targets` under `logits`.
inline Var loss_cross_entropy(Tape& tape, Var logits, const std::vector<int>& targets) {
  return tape.cross_entropy_mean(logits, targets);
}

}  // namespace msplora
