#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"

namespace msplora {

/// A named trainable matrix. Parameters live outside any tape and persist
/// across training steps; tapes reference them by address.
struct Parameter {
  std::string name;
  Matrix value;
};

// ---------------------------------------------------------------------------
// Value-level neural-net primitives. The tape ops below wrap these so the
// forward math has a single definition.
// ---------------------------------------------------------------------------

inline Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      y(i, j) = std::exp(x(i, j) - mx);
      sum += y(i, j);
    }
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= sum;
  }
  return y;
}

// Row-wise normalization to mean 0 / variance 1 (population variance).
// inv_std, when given, receives 1/sqrt(var + eps) per row for the backward.
inline Matrix layer_norm(const Matrix& x, std::vector<double>* inv_std = nullptr) {
  constexpr double kEps = 1e-12;
  Matrix y(x.rows(), x.cols());
  if (inv_std) inv_std->assign(x.rows(), 0.0);
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kEps);
    if (inv_std) (*inv_std)[i] = inv;
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) * inv;
  }
  return y;
}

// Exact (erf-based) GELU.
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad_scalar(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline Matrix gelu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data()) v = gelu_scalar(v);
  return y;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a node on a Tape.
struct Var {
  std::size_t idx = static_cast<std::size_t>(-1);
  bool valid() const { return idx != static_cast<std::size_t>(-1); }
};

/// Reverse-mode gradients keyed by the parameters watched on the tape.
class GradientMap {
 public:
  const Matrix& at(const Parameter& p) const {
    auto it = grads_.find(&p);
    if (it == grads_.end()) {
      throw ConfigError("no gradient recorded for parameter '" + p.name + "'");
    }
    return it->second;
  }

  bool contains(const Parameter& p) const { return grads_.count(&p) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const Parameter*, Matrix> grads_;
};

/// Define-by-run reverse-mode gradient tape over whole matrices. A fresh tape
/// is built on every forward pass; backward() replays the recorded nodes once
/// in reverse topological order (which is construction order).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Non-trainable leaf holding a copy of `value`.
  Var constant(Matrix value) { return push(std::move(value), BackwardFn()); }

  // Non-trainable leaf for a persistent matrix. Memoized per tape so repeated
  // uses share one node; gradients flow through it but are not reported.
  Var frozen(const Parameter& p) { return leaf_for(p, false); }

  // Trainable leaf. Memoized per tape, so gradient contributions from every
  // use accumulate on one node; reported in the GradientMap.
  Var watch(const Parameter& p) { return leaf_for(p, true); }

  const Matrix& value(Var v) const { return node(v).value; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    Matrix out = msplora::matmul(av, bv);  // shape-checked there
    const std::size_t pa = a.idx, pb = b.idx;
    return push(std::move(out), [pa, pb](Tape& t, const Matrix& g) {
      t.grad(pa) += matmul_nt(g, t.nodes_[pb].value);
      t.grad(pb) += matmul_tn(t.nodes_[pa].value, g);
    });
  }

  Var add(Var a, Var b) {
    Matrix out = msplora::add(value(a), value(b));
    const std::size_t pa = a.idx, pb = b.idx;
    return push(std::move(out), [pa, pb](Tape& t, const Matrix& g) {
      t.grad(pa) += g;
      t.grad(pb) += g;
    });
  }

  Var scale(Var a, double s) {
    Matrix out = msplora::scale(value(a), s);
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa, s](Tape& t, const Matrix& g) {
      axpy(t.grad(pa), s, g);
    });
  }

  Var transpose(Var a) {
    Matrix out = value(a).transposed();
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa](Tape& t, const Matrix& g) {
      t.grad(pa) += g.transposed();
    });
  }

  // a: n x d, row: 1 x d, broadcast over rows.
  Var add_row(Var a, Var row) {
    const Matrix& av = value(a);
    const Matrix& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
      throw ShapeError("add_row: expected 1x" + std::to_string(av.cols()) +
                       " row, got " + rv.shape());
    }
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
    const std::size_t pa = a.idx, pr = row.idx;
    return push(std::move(out), [pa, pr](Tape& t, const Matrix& g) {
      t.grad(pa) += g;
      Matrix& gr = t.grad(pr);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    });
  }

  Var mul_row(Var a, Var row) {
    const Matrix& av = value(a);
    const Matrix& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
      throw ShapeError("mul_row: expected 1x" + std::to_string(av.cols()) +
                       " row, got " + rv.shape());
    }
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= rv(0, j);
    const std::size_t pa = a.idx, pr = row.idx;
    return push(std::move(out), [pa, pr](Tape& t, const Matrix& g) {
      const Matrix& avv = t.nodes_[pa].value;
      const Matrix& rvv = t.nodes_[pr].value;
      Matrix& ga = t.grad(pa);
      Matrix& gr = t.grad(pr);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          ga(i, j) += g(i, j) * rvv(0, j);
          gr(0, j) += g(i, j) * avv(i, j);
        }
    });
  }

  Var softmax_rows(Var a) {
    Matrix out = msplora::softmax_rows(value(a));
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa](Tape& t, const Matrix& g, const Matrix& y) {
      Matrix& ga = t.grad(pa);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j)
          ga(i, j) += y(i, j) * (g(i, j) - dot);
      }
    });
  }

  Var layer_norm(Var a) {
    std::vector<double> inv_std;
    Matrix out = msplora::layer_norm(value(a), &inv_std);
    const std::size_t pa = a.idx;
    return push(std::move(out),
                [pa, inv = std::move(inv_std)](Tape& t, const Matrix& g, const Matrix& y) {
                  Matrix& ga = t.grad(pa);
                  const double d = static_cast<double>(g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i) {
                    double gmean = 0.0, gydot = 0.0;
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                      gmean += g(i, j);
                      gydot += g(i, j) * y(i, j);
                    }
                    gmean /= d;
                    gydot /= d;
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      ga(i, j) += inv[i] * (g(i, j) - gmean - y(i, j) * gydot);
                  }
                });
  }

  Var gelu(Var a) {
    Matrix out = msplora::gelu(value(a));
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa](Tape& t, const Matrix& g) {
      const Matrix& x = t.nodes_[pa].value;
      Matrix& ga = t.grad(pa);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.data()[i] += g.data()[i] * gelu_grad_scalar(x.data()[i]);
    });
  }

  Var slice_cols(Var a, std::size_t first, std::size_t count) {
    const Matrix& av = value(a);
    if (first + count > av.cols() || count == 0) {
      throw ShapeError("slice_cols: [" + std::to_string(first) + ", " +
                       std::to_string(first + count) + ") out of range for " +
                       av.shape());
    }
    Matrix out(av.rows(), count);
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, first + j);
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa, first](Tape& t, const Matrix& g) {
      Matrix& ga = t.grad(pa);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, first + j) += g(i, j);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t total = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) {
        throw ShapeError("concat_cols: row mismatch " + value(p).shape() +
                         " vs " + value(parts[0]).shape());
      }
      total += value(p).cols();
    }
    Matrix out(rows, total);
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // (node, offset)
    std::size_t off = 0;
    for (Var p : parts) {
      const Matrix& pv = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
      spans.emplace_back(p.idx, off);
      off += pv.cols();
    }
    return push(std::move(out), [spans](Tape& t, const Matrix& g) {
      for (const auto& [idx, offset] : spans) {
        Matrix& gp = t.grad(idx);
        for (std::size_t i = 0; i < gp.rows(); ++i)
          for (std::size_t j = 0; j < gp.cols(); ++j)
            gp(i, j) += g(i, offset + j);
      }
    });
  }

  Var gather_rows(Var a, std::vector<int> indices) {
    const Matrix& av = value(a);
    if (indices.empty()) throw ShapeError("gather_rows: empty index list");
    for (int r : indices) {
      if (r < 0 || static_cast<std::size_t>(r) >= av.rows()) {
        throw ShapeError("gather_rows: row index " + std::to_string(r) +
                         " out of range for " + av.shape());
      }
    }
    Matrix out(indices.size(), av.cols());
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < av.cols(); ++j)
        out(i, j) = av(static_cast<std::size_t>(indices[i]), j);
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa, idx = std::move(indices)](Tape& t, const Matrix& g) {
      Matrix& ga = t.grad(pa);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
          ga(static_cast<std::size_t>(idx[i]), j) += g(i, j);
    });
  }

  // Full reduction to a 1x1 node.
  Var sum(Var a) {
    const Matrix& av = value(a);
    Matrix out(1, 1);
    out(0, 0) = std::accumulate(av.data().begin(), av.data().end(), 0.0);
    const std::size_t pa = a.idx;
    return push(std::move(out), [pa](Tape& t, const Matrix& g) {
      Matrix& ga = t.grad(pa);
      const double gv = g(0, 0);
      for (double& x : ga.data()) x += gv;
    });
  }

  // Mean token-level negative log-likelihood over the rows of `logits`.
  Var cross_entropy_mean(Var logits, const std::vector<int>& targets) {
    const Matrix& z = value(logits);
    if (targets.size() != z.rows()) {
      throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                       " targets for " + z.shape() + " logits");
    }
    for (int t : targets) {
      if (t < 0 || static_cast<std::size_t>(t) >= z.cols()) {
        throw ShapeError("cross_entropy_mean: target id " + std::to_string(t) +
                         " out of range for " + std::to_string(z.cols()) +
                         " classes");
      }
    }
    Matrix probs = msplora::softmax_rows(z);
    double total = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      // -log p[target]; computed from the stabilized softmax row
      total -= std::log(probs(i, static_cast<std::size_t>(targets[i])));
    }
    Matrix out(1, 1);
    const double n = static_cast<double>(z.rows());
    out(0, 0) = total / n;
    const std::size_t pz = logits.idx;
    return push(std::move(out),
                [pz, probs = std::move(probs), tgt = targets, n](Tape& t, const Matrix& g) {
                  Matrix& gz = t.grad(pz);
                  const double gs = g(0, 0) / n;
                  for (std::size_t i = 0; i < probs.rows(); ++i)
                    for (std::size_t j = 0; j < probs.cols(); ++j) {
                      const double onehot =
                          (j == static_cast<std::size_t>(tgt[i])) ? 1.0 : 0.0;
                      gz(i, j) += gs * (probs(i, j) - onehot);
                    }
                });
  }

  /// Runs the reverse pass from a scalar loss node, visiting each node exactly
  /// once, and returns gradients for every watched parameter. Parameters with
  /// no path to the loss get zero gradients.
  GradientMap backward(Var loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be a 1x1 scalar node, got " +
                       lv.shape());
    }
    if (ran_backward_) {
      throw Error("backward already ran on this tape; build a fresh tape per pass");
    }
    ran_backward_ = true;
    for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
    nodes_[loss.idx].grad(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, n.grad, n.value);
    }
    GradientMap gm;
    for (const auto& [param, idx] : registered_) {
      gm.grads_.emplace(param, std::move(nodes_[idx].grad));
    }
    return gm;
  }

 private:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad, const Matrix& value)>;

  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;  // null for leaves
  };

  Var push(Matrix value, BackwardFn bw) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(bw)});
    return Var{nodes_.size() - 1};
  }

  // Convenience overload for backwards that ignore the node's own value.
  Var push(Matrix value, std::function<void(Tape&, const Matrix&)> bw) {
    if (!bw) return push(std::move(value), BackwardFn());
    return push(std::move(value),
                BackwardFn([f = std::move(bw)](Tape& t, const Matrix& g, const Matrix&) {
                  f(t, g);
                }));
  }

  Var leaf_for(const Parameter& p, bool trainable) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return Var{it->second};
    Var v = push(p.value, BackwardFn());
    leaf_cache_.emplace(&p, v.idx);
    if (trainable) registered_.emplace_back(&p, v.idx);
    return v;
  }

  Node& node(Var v) {
    if (!v.valid() || v.idx >= nodes_.size()) throw Error("invalid tape handle");
    return nodes_[v.idx];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.idx >= nodes_.size()) throw Error("invalid tape handle");
    return nodes_[v.idx];
  }

  Matrix& grad(std::size_t idx) { return nodes_[idx].grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> leaf_cache_;
  std::vector<std::pair<const Parameter*, std::size_t>> registered_;
  bool ran_backward_ = false;
};

}  // namespace msplora
