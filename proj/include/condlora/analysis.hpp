#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "condlora/adapters.hpp"
#include "condlora/linalg.hpp"
#include "condlora/matrix.hpp"
#include "condlora/model.hpp"
#include "condlora/rng.hpp"

namespace condlora {

/// Which unitary factor of the SVD spans the compared subspace.
enum class Side { left, right };

inline std::string to_string(Side s) { return s == Side::left ? "left" : "right"; }

inline Side parse_side(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw ConfigError("unknown side '" + s + "' (expected left|right)");
}

/// Orthonormal columns spanning the top-`count` singular directions of `x`.
inline Matrix singular_basis(const Matrix& x, Side side, std::size_t count) {
  const std::size_t available = std::min(x.rows(), x.cols());
  if (count < 1 || count > available)
    throw ShapeError("subspace rank " + std::to_string(count) + " outside 1.." +
                     std::to_string(available) + " for " + x.shape());
  const SvdResult r = svd(x);
  if (side == Side::left) return leading_columns(r.u, count);
  Matrix v(x.cols(), count);
  for (std::size_t k = 0; k < count; ++k)
    for (std::size_t j = 0; j < x.cols(); ++j) v(j, k) = r.vt(k, j);
  return v;
}

/// ||Ux^T Uy||_F^2 / min(i, j) for precomputed bases with i and j columns.
inline double basis_similarity(const Matrix& ux, const Matrix& uy) {
  if (ux.rows() != uy.rows())
    throw ShapeError("subspace similarity: ambient dimensions differ (" + ux.shape() + " vs " +
                     uy.shape() + ")");
  const double overlap = frobenius_norm(matmul_tn(ux, uy));
  const double phi =
      overlap * overlap / static_cast<double>(std::min(ux.cols(), uy.cols()));
  if (phi < -1e-9 || phi > 1.0 + 1e-9)
    throw NumericError("subspace similarity " + format_double(phi) + " outside [0, 1]");
  return std::clamp(phi, 0.0, 1.0);
}

/// Normalized subspace similarity between the top-i and top-j singular
/// subspaces of x and y, on the chosen side.
inline double subspace_similarity(const Matrix& x, const Matrix& y, std::size_t i, std::size_t j,
                                  Side side) {
  return basis_similarity(singular_basis(x, side, i), singular_basis(y, side, j));
}

namespace detail {

inline Matrix inverse_for_conversion(const Matrix& w0, bool use_pinv) {
  if (w0.rows() != w0.cols())
    throw ShapeError("conversion requires square W0, got " + w0.shape());
  return use_pinv ? pseudoinverse(w0) : invert(w0);
}

} // namespace detail

/// W0^{-1} A^T, the map taking W0 to the transposed factor A (d2 x r).
inline Matrix conversion_A(const Matrix& w0, const Matrix& a, bool use_pinv = false) {
  const Matrix inv = detail::inverse_for_conversion(w0, use_pinv);
  if (a.cols() != w0.rows())
    throw ShapeError("conversion_A: A " + a.shape() + " incompatible with W0 " + w0.shape());
  return matmul(inv, transpose(a));
}

/// W0^{-1} B (d2 x r).
inline Matrix conversion_B(const Matrix& w0, const Matrix& b, bool use_pinv = false) {
  const Matrix inv = detail::inverse_for_conversion(w0, use_pinv);
  if (b.rows() != w0.rows())
    throw ShapeError("conversion_B: B " + b.shape() + " incompatible with W0 " + w0.shape());
  return matmul(inv, b);
}

struct SimilarityGrid {
  std::vector<std::string> labels;
  Matrix values;
  Side side = Side::left;
  std::size_t i = 0;
  std::size_t j = 0;
  double average_offdiagonal = 0.0;
  bool pinv = false;

  /// Header `labels,<l1>,...`, one row per label, trailing `#` metadata line.
  void write_csv(std::ostream& os) const {
    os << "labels";
    for (const auto& l : labels) os << ',' << l;
    os << '\n';
    for (std::size_t p = 0; p < labels.size(); ++p) {
      os << labels[p];
      for (std::size_t q = 0; q < labels.size(); ++q) os << ',' << format_double(values(p, q));
      os << '\n';
    }
    os << "# side=" << to_string(side) << " i=" << i << " j=" << j
       << " avg_offdiag=" << format_double(average_offdiagonal);
    if (pinv) os << " pinv=true";
    os << '\n';
  }
};

/// Mean of the off-diagonal entries of a square matrix.
inline double average_offdiagonal(const Matrix& v) {
  const std::size_t n = v.rows();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      if (p != q) s += v(p, q);
  return s / static_cast<double>(n * (n - 1));
}

inline SimilarityGrid layer_similarity_grid(const std::vector<Matrix>& matrices,
                                            std::vector<std::string> labels, std::size_t i,
                                            std::size_t j, Side side) {
  if (matrices.empty()) throw ShapeError("similarity grid: no matrices");
  if (labels.empty())
    for (std::size_t k = 0; k < matrices.size(); ++k) labels.push_back(std::to_string(k + 1));
  if (labels.size() != matrices.size())
    throw ShapeError("similarity grid: label count does not match matrix count");
  for (const auto& m : matrices)
    if (m.rows() != matrices.front().rows() || m.cols() != matrices.front().cols())
      throw ShapeError("similarity grid: matrices differ in shape (" + m.shape() + " vs " +
                       matrices.front().shape() + ")");

  const std::size_t n = matrices.size();
  std::vector<Matrix> bx, by;
  for (const auto& m : matrices) {
    bx.push_back(singular_basis(m, side, i));
    by.push_back(i == j ? bx.back() : singular_basis(m, side, j));
  }
  SimilarityGrid g{std::move(labels), Matrix(n, n), side, i, j, 0.0, false};
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) {
      // With i == j the grid is symmetric; mirror so it is exactly so.
      if (i == j && q < p) g.values(p, q) = g.values(q, p);
      else g.values(p, q) = basis_similarity(bx[p], by[q]);
    }
  g.average_offdiagonal = average_offdiagonal(g.values);
  return g;
}

/// Grid over n independent standard Gaussian rows x cols matrices.
inline SimilarityGrid random_baseline_grid(std::size_t rows, std::size_t cols, std::size_t n,
                                           std::size_t i, std::size_t j, Side side,
                                           std::uint64_t seed) {
  if (n < 2) throw ConfigError("random baseline: need at least 2 matrices");
  std::vector<Matrix> ms;
  for (std::size_t k = 0; k < n; ++k)
    ms.push_back(gaussian(rows, cols, 0.0, 1.0, derive_seed(seed, k)));
  return layer_similarity_grid(ms, {}, i, j, side);
}

enum class Factor { a, b };

/// Per-layer conversion matrices of one module: W0^{-1} A^T or W0^{-1} B.
inline std::vector<Matrix> conversion_matrices(const BaseWeights& w, const Adapter& ad,
                                               Module module, Factor factor,
                                               bool use_pinv = false) {
  std::vector<Matrix> out;
  for (int l : ad.spec.layers) {
    const Target t{module, l};
    const Matrix& w0 = w.projection(t);
    const LoraPair f = factors(ad, w0, t);
    out.push_back(factor == Factor::a ? conversion_A(w0, f.a, use_pinv)
                                      : conversion_B(w0, f.b, use_pinv));
  }
  return out;
}

inline SimilarityGrid conversion_grid(const BaseWeights& w, const Adapter& ad, Module module,
                                      Factor factor, Side side, std::size_t i, std::size_t j,
                                      bool use_pinv = false) {
  std::vector<std::string> labels;
  for (int l : ad.spec.layers) labels.push_back(std::to_string(l));
  SimilarityGrid g =
      layer_similarity_grid(conversion_matrices(w, ad, module, factor, use_pinv), labels, i, j, side);
  g.pinv = use_pinv;
  return g;
}

struct ComparisonRow {
  Module module;
  int layer;
  double phi_a;   // right unitary, i = j = r
  double phi_b;   // left unitary
  double phi_dw;  // left unitary
};

/// Per-target similarity between the factors and deltas of two adapters
/// sharing targets and rank.
inline std::vector<ComparisonRow> compare_adapters(const Adapter& x, const Adapter& y,
                                                   const BaseWeights& w) {
  if (x.spec.modules != y.spec.modules || x.spec.layers != y.spec.layers)
    throw ConfigError("compare: adapters target different (module, layer) sets");
  if (x.spec.rank != y.spec.rank) throw ConfigError("compare: adapters differ in rank");
  const auto r = static_cast<std::size_t>(x.spec.rank);
  std::vector<ComparisonRow> rows;
  for (Target t : x.spec.targets()) {
    const Matrix& w0 = w.projection(t);
    const LoraPair fx = factors(x, w0, t);
    const LoraPair fy = factors(y, w0, t);
    rows.push_back({t.module, t.layer, subspace_similarity(fx.a, fy.a, r, r, Side::right),
                    subspace_similarity(fx.b, fy.b, r, r, Side::left),
                    subspace_similarity(delta_w(x, w0, t), delta_w(y, w0, t), r, r, Side::left)});
  }
  return rows;
}

inline std::vector<ComparisonRow> compare_lora_condlora(const Adapter& lora, const Adapter& cond,
                                                        const BaseWeights& w) {
  if (lora.spec.method != Method::lora || cond.spec.method != Method::condlora)
    throw ConfigError("compare_lora_condlora: expected a lora and a condlora adapter");
  return compare_adapters(lora, cond, w);
}

inline void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRow>& rows) {
  os << "module,layer,phi_A,phi_B,phi_dW\n";
  for (const auto& r : rows)
    os << to_string(r.module) << ',' << r.layer << ',' << format_double(r.phi_a) << ','
       << format_double(r.phi_b) << ',' << format_double(r.phi_dw) << '\n';
}

} // namespace condlora
