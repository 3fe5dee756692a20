#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "condlora/matrix.hpp"

namespace condlora {

/// Pivot-ratio limit above which inversion is refused.
constexpr double kMaxCondition = 1e12;
constexpr int kSvdMaxSweeps = 500;
constexpr double kSvdTolerance = 1e-12;
/// Singular values at or below this fraction of the largest are dropped by pinv.
constexpr double kPinvCutoff = 1e-10;

/// Partial-pivot LU factorization of a square matrix, stored compactly.
struct LuFactors {
  Matrix lu;
  std::vector<std::size_t> perm;
  double max_pivot = 0.0;
  double min_pivot = 0.0;

  /// |largest pivot / smallest pivot|; infinite when a pivot is exactly zero.
  double condition_estimate() const {
    return min_pivot == 0.0 ? std::numeric_limits<double>::infinity() : max_pivot / min_pivot;
  }
};

inline LuFactors lu_factor(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("lu_factor: matrix must be square, got " + a.shape());
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n), 0.0, std::numeric_limits<double>::infinity()};
  std::iota(f.perm.begin(), f.perm.end(), std::size_t{0});
  Matrix& m = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m(i, k)) > std::abs(m(p, k))) p = i;
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(p, j));
      std::swap(f.perm[k], f.perm[p]);
    }
    const double pivot = m(k, k);
    f.max_pivot = std::max(f.max_pivot, std::abs(pivot));
    f.min_pivot = std::min(f.min_pivot, std::abs(pivot));
    if (pivot == 0.0) continue;
    for (std::size_t i = k + 1; i < n; ++i) {
      const double l = m(i, k) / pivot;
      m(i, k) = l;
      if (l == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= l * m(k, j);
    }
  }
  if (n == 0) f.min_pivot = 0.0;
  return f;
}

inline double condition_estimate(const Matrix& a) { return lu_factor(a).condition_estimate(); }

/// Solves a * x = rhs for every column of rhs using precomputed factors.
inline Matrix lu_solve(const LuFactors& f, const Matrix& rhs) {
  const std::size_t n = f.lu.rows();
  if (rhs.rows() != n) throw ShapeError("lu_solve: rhs " + rhs.shape() + " vs " + f.lu.shape());
  Matrix x(n, rhs.cols());
  std::vector<double> y(n);
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(f.perm[i], c);
      for (std::size_t j = 0; j < i; ++j) s -= f.lu(i, j) * y[j];
      y[i] = s;
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t j = ii + 1; j < n; ++j) s -= f.lu(ii, j) * x(j, c);
      x(ii, c) = s / f.lu(ii, ii);
    }
  }
  return x;
}

inline Matrix invert(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("invert: matrix must be square, got " + a.shape());
  const LuFactors f = lu_factor(a);
  const double cond = f.condition_estimate();
  if (!(cond <= kMaxCondition)) {
    std::ostringstream msg;
    msg << "singular matrix: condition estimate " << cond << " exceeds " << kMaxCondition;
    throw SingularMatrixError(msg.str(), cond);
  }
  return lu_solve(f, Matrix::identity(a.rows()));
}

/// Thin SVD: a = u * diag(s) * vt with k = min(rows, cols) singular triplets.
struct SvdResult {
  Matrix u;
  std::vector<double> s;
  Matrix vt;
};

namespace detail {

// Hestenes one-sided Jacobi on a tall matrix (rows >= cols). Columns of `a`
// are held as rows of `work` so rotations touch contiguous memory.
inline SvdResult jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix work = transpose(a);
  Matrix v = Matrix::identity(n);

  auto dot = [](std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  };
  auto rotate = [](std::span<double> x, std::span<double> y, double c, double s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      const double yi = y[i];
      x[i] = c * xi - s * yi;
      y[i] = s * xi + c * yi;
    }
  };

  bool converged = n < 2;
  for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(work.row(p), work.row(p));
        const double beta = dot(work.row(q), work.row(q));
        const double gamma = dot(work.row(p), work.row(q));
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kSvdTolerance * std::sqrt(alpha) * std::sqrt(beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = c * t;
        rotate(work.row(p), work.row(q), c, s);
        rotate(v.row(p), v.row(q), c, s);
      }
    }
  }
  if (!converged)
    throw NumericError("svd: no convergence after " + std::to_string(kSvdMaxSweeps) + " sweeps");

  std::vector<double> norms(n);
  for (std::size_t k = 0; k < n; ++k) norms[k] = std::sqrt(dot(work.row(k), work.row(k)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double smax = n ? norms[order[0]] : 0.0;
  const double negligible = 1e-13 * smax;
  std::vector<bool> filled(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    out.s[k] = norms[src];
    for (std::size_t j = 0; j < n; ++j) out.vt(k, j) = v(src, j);
    if (norms[src] > negligible && norms[src] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = work(src, i) / norms[src];
      filled[k] = true;
    }
  }

  // Null directions carry no information; complete u to an orthonormal set.
  std::vector<double> cand(m);
  for (std::size_t k = 0; k < n; ++k) {
    if (filled[k]) continue;
    for (std::size_t e = 0; e < m; ++e) {
      std::fill(cand.begin(), cand.end(), 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < n; ++c) {
          if (!filled[c]) continue;
          double proj = 0.0;
          for (std::size_t i = 0; i < m; ++i) proj += out.u(i, c) * cand[i];
          for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * out.u(i, c);
        }
      }
      double nrm = 0.0;
      for (double x : cand) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 0.5) {
        for (std::size_t i = 0; i < m; ++i) out.u(i, k) = cand[i] / nrm;
        filled[k] = true;
        break;
      }
    }
  }
  return out;
}

inline void fix_signs(SvdResult& r) {
  for (std::size_t k = 0; k < r.u.cols(); ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.u.rows(); ++i)
      if (std::abs(r.u(i, k)) > std::abs(r.u(best, k))) best = i;
    if (r.u(best, k) < 0.0) {
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
      for (std::size_t j = 0; j < r.vt.cols(); ++j) r.vt(k, j) = -r.vt(k, j);
    }
  }
}

} // namespace detail

/// Thin SVD by one-sided Jacobi. Each left singular vector is signed so its
/// largest-magnitude entry is non-negative.
inline SvdResult svd(const Matrix& a) {
  if (!a.all_finite()) throw NumericError("svd: input has non-finite entries");
  SvdResult r;
  if (a.rows() >= a.cols()) {
    r = detail::jacobi_svd_tall(a);
  } else {
    SvdResult t = detail::jacobi_svd_tall(transpose(a));
    r.u = transpose(t.vt);
    r.s = std::move(t.s);
    r.vt = transpose(t.u);
  }
  detail::fix_signs(r);
  return r;
}

/// Moore-Penrose pseudoinverse with relative singular-value cutoff.
inline Matrix pseudoinverse(const Matrix& a, double rel_cutoff = kPinvCutoff) {
  const SvdResult r = svd(a);
  const double smax = r.s.empty() ? 0.0 : r.s.front();
  Matrix out(a.cols(), a.rows());
  for (std::size_t k = 0; k < r.s.size(); ++k) {
    if (!(r.s[k] > rel_cutoff * smax) || r.s[k] == 0.0) continue;
    const double inv = 1.0 / r.s[k];
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double vik = r.vt(k, i) * inv;
      for (std::size_t j = 0; j < a.rows(); ++j) out(i, j) += vik * r.u(j, k);
    }
  }
  return out;
}

} // namespace condlora
