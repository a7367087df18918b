#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"
#include "msplora/pyramid.hpp"
#include "msplora/svd.hpp"

namespace msplora {

// ---------------------------------------------------------------------------
// Effective rank mass
// ---------------------------------------------------------------------------

/// Singular spectrum of one matrix plus its effective-rank mass: for each
/// requested k, the fraction of the total singular-value sum carried by the
/// top k values. Near 1 means strongly low-rank; low values mean a flat,
/// high-complexity spectrum. A zero matrix is reported as mass 1 for every k
/// (perfectly low rank) with `zero_matrix` set.
struct SpectrumReport {
  std::string source;
  std::vector<double> singular_values;  // descending
  std::size_t full_rank = 0;            // M = min(rows, cols)
  std::map<std::size_t, double> m_eff;  // k -> mass in [0, 1]
  bool zero_matrix = false;
};

inline SpectrumReport effective_rank(const Matrix& m, const std::vector<std::size_t>& ks,
                                     std::string source = "") {
  SpectrumReport rep;
  rep.source = std::move(source);
  rep.full_rank = std::min(m.rows(), m.cols());
  rep.singular_values = svd_values(m);
  double total = 0.0;
  for (double s : rep.singular_values) total += s;
  rep.zero_matrix = total == 0.0;
  for (std::size_t k : ks) {
    if (k < 1 || k > rep.full_rank) {
      throw ConfigError("effective_rank: k=" + std::to_string(k) +
                        " outside [1, " + std::to_string(rep.full_rank) + "]");
    }
    if (rep.zero_matrix) {
      rep.m_eff[k] = 1.0;
      continue;
    }
    double top = 0.0;
    for (std::size_t i = 0; i < k; ++i) top += rep.singular_values[i];
    rep.m_eff[k] = top / total;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Spectral KL divergence
// ---------------------------------------------------------------------------

/// KL divergence between two singular-value spectra after epsilon-smoothing
/// and normalization to probability vectors: D = sum_k p_k log(p_k / q_k).
/// With epsilon = 0 and disjoint support the result is +infinity; two spectra
/// that cannot be normalized (all zero, epsilon 0) are an error.
inline double spectral_kl(const std::vector<double>& sv_i,
                          const std::vector<double>& sv_j, double epsilon) {
  if (sv_i.size() != sv_j.size()) {
    throw ShapeError("spectral_kl: spectra have different lengths " +
                     std::to_string(sv_i.size()) + " vs " + std::to_string(sv_j.size()));
  }
  if (sv_i.empty()) throw ShapeError("spectral_kl: empty spectra");
  if (epsilon < 0.0) throw ConfigError("spectral_kl: epsilon must be >= 0");
  double sum_i = 0.0, sum_j = 0.0;
  for (std::size_t k = 0; k < sv_i.size(); ++k) {
    if (sv_i[k] < 0.0 || sv_j[k] < 0.0) {
      throw NumericError("spectral_kl: singular values must be nonnegative");
    }
    sum_i += sv_i[k] + epsilon;
    sum_j += sv_j[k] + epsilon;
  }
  if (sum_i == 0.0 || sum_j == 0.0) {
    throw NumericError("spectral_kl: all-zero spectrum cannot be normalized with epsilon=0");
  }
  double d = 0.0;
  for (std::size_t k = 0; k < sv_i.size(); ++k) {
    const double p = (sv_i[k] + epsilon) / sum_i;
    const double q = (sv_j[k] + epsilon) / sum_j;
    if (p == 0.0) continue;  // lim p->0 of p log p/q
    if (q == 0.0) return std::numeric_limits<double>::infinity();
    d += p * std::log(p / q);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Per-tier spectrum traces (heatmap data)
// ---------------------------------------------------------------------------

/// Heatmap-ready trace: for each tier and each snapshot (epoch), the top-k
/// singular values of every tier member's delta contribution, averaged
/// position-wise across members. Averaging is over the members' descending
/// singular-value vectors, not over reports.
struct TierTrace {
  std::size_t top_k = 0;
  std::size_t epochs = 0;                         // number of snapshots
  std::vector<std::vector<double>> global;        // [epoch][k]
  std::vector<std::vector<double>> mid;
  std::vector<std::vector<double>> layer;
};

namespace detail {

inline std::vector<double> top_k_padded(const std::vector<double>& sv, std::size_t k) {
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < std::min(k, sv.size()); ++i) out[i] = sv[i];
  return out;
}

inline void accumulate_spectrum(std::vector<double>& acc, const Matrix& delta,
                                std::size_t k) {
  const std::vector<double> sv = top_k_padded(svd_values(delta), k);
  for (std::size_t i = 0; i < k; ++i) acc[i] += sv[i];
}

}  // namespace detail

inline TierTrace tier_spectrum_trace(const std::vector<const PyramidAdapterSet*>& snapshots,
                                     std::size_t top_k = 8) {
  if (snapshots.empty()) throw ConfigError("tier_spectrum_trace: need at least one snapshot");
  if (top_k < 1) throw ConfigError("tier_spectrum_trace: top_k must be >= 1");
  TierTrace trace;
  trace.top_k = top_k;
  trace.epochs = snapshots.size();
  for (const PyramidAdapterSet* snap : snapshots) {
    if (!snap) throw ConfigError("tier_spectrum_trace: null snapshot");
    const auto& kinds = snap->kinds();
    const std::size_t n = snap->n_layers();

    std::vector<double> g(top_k, 0.0), m(top_k, 0.0), l(top_k, 0.0);
    for (Proj kind : kinds) {
      detail::accumulate_spectrum(g, snap->global_delta_value(kind), top_k);
    }
    for (double& x : g) x /= static_cast<double>(kinds.size());

    for (int gi = 0; gi < 3; ++gi) {
      for (Proj kind : kinds) {
        detail::accumulate_spectrum(m, snap->mid_delta_value(static_cast<Group>(gi), kind),
                                    top_k);
      }
    }
    for (double& x : m) x /= static_cast<double>(3 * kinds.size());

    for (std::size_t li = 0; li < n; ++li) {
      for (Proj kind : kinds) {
        detail::accumulate_spectrum(l, snap->layer_local_delta_value(li, kind), top_k);
      }
    }
    for (double& x : l) x /= static_cast<double>(n * kinds.size());

    trace.global.push_back(std::move(g));
    trace.mid.push_back(std::move(m));
    trace.layer.push_back(std::move(l));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Layer divergence matrices
// ---------------------------------------------------------------------------

/// How the zero entries of low-rank spectra are handled before Eq-style
/// normalization: truncate both spectra to the top min(rank_i, rank_j)
/// positions (default for cross-method comparison), or keep full length and
/// rely on epsilon smoothing alone.
enum class SpectrumSmoothing { truncate_min_rank, epsilon_smooth };

inline const char* to_string(SpectrumSmoothing s) {
  return s == SpectrumSmoothing::truncate_min_rank ? "truncate-min-rank"
                                                   : "epsilon-smooth";
}

/// All-pairs spectral KL grid over the layer-local deltas of one adapter set.
/// KL is asymmetric, so the grid carries both orders; the diagonal is zero.
struct DivergenceMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // n x n row-major
  double epsilon = 0.0;
  std::string smoothing;
  std::string method;  // adapter method the deltas came from

  double& at(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }

  double mean_off_diagonal() const {
    if (n < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += at(i, j);
    return s / static_cast<double>(n * (n - 1));
  }
};

/// Per-layer spectra of the layer-local deltas, averaged position-wise over
/// projection kinds.
inline std::vector<std::vector<double>> layer_local_spectra(const AdapterSet& adapters) {
  std::vector<std::vector<double>> out;
  const auto& kinds = adapters.kinds();
  for (std::size_t l = 0; l < adapters.n_layers(); ++l) {
    std::vector<double> acc;
    for (Proj kind : kinds) {
      const std::vector<double> sv = svd_values(adapters.layer_local_delta_value(l, kind));
      if (acc.empty()) acc.assign(sv.size(), 0.0);
      for (std::size_t i = 0; i < sv.size(); ++i) acc[i] += sv[i];
    }
    for (double& x : acc) x /= static_cast<double>(kinds.size());
    out.push_back(std::move(acc));
  }
  return out;
}

inline DivergenceMatrix divergence_from_spectra(
    const std::vector<std::vector<double>>& spectra, SpectrumSmoothing smoothing,
    double epsilon, std::size_t rank_limit) {
  DivergenceMatrix dm;
  dm.n = spectra.size();
  dm.values.assign(dm.n * dm.n, 0.0);
  dm.epsilon = epsilon;
  dm.smoothing = to_string(smoothing);
  for (std::size_t i = 0; i < dm.n; ++i) {
    for (std::size_t j = 0; j < dm.n; ++j) {
      if (i == j) continue;
      if (smoothing == SpectrumSmoothing::truncate_min_rank) {
        const std::size_t keep =
            std::max<std::size_t>(1, std::min({rank_limit, spectra[i].size(), spectra[j].size()}));
        std::vector<double> a(spectra[i].begin(), spectra[i].begin() + keep);
        std::vector<double> b(spectra[j].begin(), spectra[j].begin() + keep);
        dm.at(i, j) = spectral_kl(a, b, epsilon);
      } else {
        dm.at(i, j) = spectral_kl(spectra[i], spectra[j], epsilon);
      }
    }
  }
  return dm;
}

/// Pairwise spectral KL between the layer-local deltas of every layer pair:
/// layer-specific tier contributions for the pyramid, full per-layer deltas
/// for the plain baseline.
inline DivergenceMatrix layer_divergence_matrix(
    const AdapterSet& adapters,
    SpectrumSmoothing smoothing = SpectrumSmoothing::truncate_min_rank,
    double epsilon = 1e-10) {
  DivergenceMatrix dm = divergence_from_spectra(layer_local_spectra(adapters), smoothing,
                                                epsilon, adapters.layer_local_rank());
  dm.method = adapters.method();
  return dm;
}

/// Elementwise difference a - b of two divergence grids of equal size.
inline std::vector<std::vector<double>> divergence_difference(const DivergenceMatrix& a,
                                                              const DivergenceMatrix& b) {
  if (a.n != b.n) {
    throw ShapeError("divergence_difference: grids are " + std::to_string(a.n) + "x" +
                     std::to_string(a.n) + " vs " + std::to_string(b.n) + "x" +
                     std::to_string(b.n));
  }
  std::vector<std::vector<double>> out(a.n, std::vector<double>(a.n, 0.0));
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j) out[i][j] = a.at(i, j) - b.at(i, j);
  return out;
}

}  // namespace msplora
