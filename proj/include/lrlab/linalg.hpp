#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "lrlab/matrix.hpp"
#include "lrlab/rng.hpp"

namespace lrlab {

// Thin SVD a = u * diag(sigma) * vᵀ with k = min(rows, cols).
struct SvdResult {
  Matrix u;                   // rows x k, orthonormal columns
  std::vector<double> sigma;  // k values, non-increasing, non-negative
  Matrix v;                   // cols x k, orthonormal columns

  std::size_t rank() const noexcept { return sigma.size(); }
};

// One-sided Jacobi SVD with cyclic sweeps. Deterministic: the largest-magnitude
// entry of every left singular vector is made positive.
SvdResult svd(const Matrix& a);

// Singular values only (skips accumulation of the right factor).
std::vector<double> singular_values(const Matrix& a);

// Keeps the leading r singular triplets. Throws RankError unless 1 <= r <= k.
SvdResult truncate(const SvdResult& s, std::size_t r);

// u * diag(sigma) * vᵀ
Matrix recompose(const SvdResult& s);

double frobenius_norm(const Matrix& a);
double nuclear_norm(const Matrix& a);
double operator_norm(const Matrix& a);

// Nuclear norm over operator norm. Throws DegenerateInput for the zero matrix.
double effective_rank(const Matrix& a);
double effective_rank_from_sigma(const std::vector<double>& sigma);

// Marchenko-Pastur parameters. sigma2 is the scale parameter of the law and
// n_rows >= n_cols (the long side first).
struct MpParams {
  double sigma2 = 1.0;
  std::size_t n_rows = 1;
  std::size_t n_cols = 1;
};

struct MpEdges {
  double lambda_minus;
  double lambda_plus;
};

void validate(const MpParams& p);
MpEdges mp_edges(const MpParams& p);
double mp_density(double lambda, const MpParams& p);
// Cumulative distribution by quadrature of mp_density over [lambda_minus, lambda].
double mp_cdf(double lambda, const MpParams& p, std::size_t intervals = 2048);

// i.i.d. N(0, std^2) entries. Throws InvalidInput unless std > 0.
Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std);

}  // namespace lrlab
