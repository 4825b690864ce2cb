#include "lrlab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "lrlab/errors.hpp"

namespace lrlab {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kRotationTol = 1e-12;
constexpr int kMaxSweeps = 60;

// Column-major scratch storage so Jacobi rotations touch contiguous memory.
struct ColumnBlock {
  std::size_t len = 0;
  std::size_t count = 0;
  std::vector<double> data;

  ColumnBlock(std::size_t len_, std::size_t count_) : len(len_), count(count_), data(len_ * count_) {}
  double* col(std::size_t j) { return data.data() + j * len; }
  const double* col(std::size_t j) const { return data.data() + j * len; }
};

double col_dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void rotate(double* a, double* b, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i];
    const double y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// Orthogonalises the columns of `work` in place (Hestenes one-sided Jacobi),
// accumulating the rotations into `v` when given. Requires len >= count.
void jacobi_sweeps(ColumnBlock& work, ColumnBlock* v) {
  const std::size_t n = work.count;
  const std::size_t m = work.len;
  const double frob2 = col_dot(work.data.data(), work.data.data(), work.data.size());
  const double negligible = frob2 * kEps * kEps;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = work.col(p);
        double* aq = work.col(q);
        const double alpha = col_dot(ap, ap, m);
        const double beta = col_dot(aq, aq, m);
        if (alpha <= negligible || beta <= negligible) continue;
        const double gamma = col_dot(ap, aq, m);
        if (std::abs(gamma) <= kRotationTol * std::sqrt(alpha * beta)) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(ap, aq, m, c, s);
        if (v != nullptr) rotate(v->col(p), v->col(q), v->len, c, s);
        rotated = true;
      }
    }
    if (!rotated) return;
  }
}

ColumnBlock to_columns(const Matrix& a, bool transpose) {
  const std::size_t len = transpose ? a.cols() : a.rows();
  const std::size_t count = transpose ? a.rows() : a.cols();
  ColumnBlock block(len, count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (transpose) {
        block.data[i * len + j] = a(i, j);
      } else {
        block.data[j * len + i] = a(i, j);
      }
    }
  }
  return block;
}

std::vector<std::size_t> descending_order(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return values[x] > values[y]; });
  return order;
}

// Fills column j of `u` with a unit vector orthogonal to every column flagged
// in `filled`, drawn from the standard basis.
void complete_column(Matrix& u, std::size_t j, const std::vector<bool>& filled) {
  const std::size_t m = u.rows();
  std::vector<double> cand(m);
  for (std::size_t e = 0; e < m; ++e) {
    std::fill(cand.begin(), cand.end(), 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t c = 0; c < u.cols(); ++c) {
        if (!filled[c]) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < m; ++i) proj += u(i, c) * cand[i];
        for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * u(i, c);
      }
    }
    double norm = 0.0;
    for (double x : cand) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (std::size_t i = 0; i < m; ++i) u(i, j) = cand[i] / norm;
      return;
    }
  }
  throw NumericsError("svd: failed to complete orthonormal basis");
}

// SVD for a tall (or square) problem given as column blocks.
SvdResult tall_svd(ColumnBlock work) {
  const std::size_t m = work.len;
  const std::size_t n = work.count;
  ColumnBlock v(n, n);
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;
  jacobi_sweeps(work, &v);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(col_dot(work.col(j), work.col(j), m));
  const auto order = descending_order(norms);
  const double cutoff = norms[order.front()] * static_cast<double>(std::max(m, n)) * kEps;

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  std::vector<bool> filled(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    const double s = norms[src];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v.col(src)[i];
    if (s > cutoff && s > 0.0) {
      out.sigma[k] = s;
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = work.col(src)[i] / s;
      filled[k] = true;
    } else {
      out.sigma[k] = 0.0;
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!filled[k]) {
      complete_column(out.u, k, filled);
      filled[k] = true;
    }
  }
  return out;
}

void normalize_signs(SvdResult& s) {
  for (std::size_t k = 0; k < s.rank(); ++k) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t i = 0; i < s.u.rows(); ++i) {
      const double a = std::abs(s.u(i, k));
      if (a > best_abs) {
        best_abs = a;
        best = i;
      }
    }
    if (s.u(best, k) < 0.0) {
      for (std::size_t i = 0; i < s.u.rows(); ++i) s.u(i, k) = -s.u(i, k);
      for (std::size_t i = 0; i < s.v.rows(); ++i) s.v(i, k) = -s.v(i, k);
    }
  }
}

void require_svd_input(const Matrix& a) {
  if (a.empty()) throw InvalidInput("svd: empty matrix");
  a.require_finite("svd input");
}

}  // namespace

SvdResult svd(const Matrix& a) {
  require_svd_input(a);
  SvdResult out;
  if (a.rows() >= a.cols()) {
    out = tall_svd(to_columns(a, false));
  } else {
    SvdResult t = tall_svd(to_columns(a, true));
    out = SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }
  normalize_signs(out);
  return out;
}

std::vector<double> singular_values(const Matrix& a) {
  require_svd_input(a);
  ColumnBlock work = to_columns(a, a.rows() < a.cols());
  jacobi_sweeps(work, nullptr);
  std::vector<double> sigma(work.count);
  for (std::size_t j = 0; j < work.count; ++j)
    sigma[j] = std::sqrt(col_dot(work.col(j), work.col(j), work.len));
  std::sort(sigma.begin(), sigma.end(), std::greater<>());
  const double cutoff = sigma.front() * static_cast<double>(std::max(a.rows(), a.cols())) * kEps;
  for (double& s : sigma)
    if (s <= cutoff) s = 0.0;
  return sigma;
}

SvdResult truncate(const SvdResult& s, std::size_t r) {
  if (r < 1 || r > s.rank()) {
    throw RankError("truncate: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(s.rank()) + "]");
  }
  return SvdResult{s.u.leading_columns(r),
                   std::vector<double>(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(r)),
                   s.v.leading_columns(r)};
}

Matrix recompose(const SvdResult& s) {
  Matrix scaled = s.u;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t k = 0; k < s.rank(); ++k) scaled(i, k) *= s.sigma[k];
  return matmul_nt(scaled, s.v);
}

double frobenius_norm(const Matrix& a) {
  a.require_finite("frobenius_norm");
  return std::sqrt(sum_squares(a));
}

double nuclear_norm(const Matrix& a) {
  const auto sigma = singular_values(a);
  return std::accumulate(sigma.begin(), sigma.end(), 0.0);
}

double operator_norm(const Matrix& a) { return singular_values(a).front(); }

double effective_rank_from_sigma(const std::vector<double>& sigma) {
  if (sigma.empty() || sigma.front() <= 0.0) {
    throw DegenerateInput("effective rank of a zero matrix is undefined");
  }
  return std::accumulate(sigma.begin(), sigma.end(), 0.0) / sigma.front();
}

double effective_rank(const Matrix& a) { return effective_rank_from_sigma(singular_values(a)); }

void validate(const MpParams& p) {
  if (!(p.sigma2 > 0.0) || !std::isfinite(p.sigma2)) {
    throw InvalidInput("Marchenko-Pastur sigma2 must be positive");
  }
  if (p.n_cols < 1 || p.n_rows < p.n_cols) {
    throw InvalidInput("Marchenko-Pastur requires n_rows >= n_cols >= 1");
  }
}

MpEdges mp_edges(const MpParams& p) {
  validate(p);
  const double root = std::sqrt(static_cast<double>(p.n_cols) / static_cast<double>(p.n_rows));
  const double lo = (1.0 - root) * (1.0 - root);
  const double hi = (1.0 + root) * (1.0 + root);
  return {p.sigma2 * lo, p.sigma2 * hi};
}

double mp_density(double lambda, const MpParams& p) {
  const auto [lo, hi] = mp_edges(p);
  if (lambda < lo || lambda > hi) return 0.0;
  if (lambda == 0.0) return std::numeric_limits<double>::infinity();
  const double scale = static_cast<double>(p.n_rows) /
                       (2.0 * std::numbers::pi * p.sigma2 * static_cast<double>(p.n_cols));
  return scale * std::sqrt((hi - lambda) * (lambda - lo)) / lambda;
}

double mp_cdf(double lambda, const MpParams& p, std::size_t intervals) {
  const auto [lo, hi] = mp_edges(p);
  if (lambda <= lo) return 0.0;
  const double width = hi - lo;
  const double x = std::min(lambda, hi);
  // lambda(theta) = lo + width (1 - cos theta) / 2 removes both square-root
  // singularities at the edges of the support.
  const double theta_end = std::acos(std::clamp(1.0 - 2.0 * (x - lo) / width, -1.0, 1.0));
  const double scale = static_cast<double>(p.n_rows) /
                       (2.0 * std::numbers::pi * p.sigma2 * static_cast<double>(p.n_cols));
  const double half = 0.5 * width;
  auto integrand = [&](double theta) {
    const double c = std::cos(theta);
    if (lo == 0.0) return scale * half * (1.0 + c);
    const double s = std::sin(theta);
    return scale * half * half * s * s / (lo + half * (1.0 - c));
  };
  if (intervals % 2 == 1) ++intervals;
  const double h = theta_end / static_cast<double>(intervals);
  double sum = integrand(0.0) + integrand(theta_end);
  for (std::size_t i = 1; i < intervals; ++i)
    sum += (i % 2 == 1 ? 4.0 : 2.0) * integrand(h * static_cast<double>(i));
  return sum * h / 3.0;
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std) {
  if (!(std > 0.0) || !std::isfinite(std)) {
    throw InvalidInput("gaussian_matrix: std must be positive and finite");
  }
  Matrix m(rows, cols);
  for (double& x : m.data()) x = std * rng.normal();
  return m;
}

}  // namespace lrlab
