#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrlab/dataset.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/net.hpp"

namespace lrlab {

// One factorized gradient step (U − α∇U)(V − α∇V)ᵀ with ∇U = ∇W·V and
// ∇V = ∇Wᵀ·U, compared against its closed-form expansion
//   UVᵀ − α(∇W·VVᵀ + UUᵀ·∇W) + α²·∇W·(UVᵀ)ᵀ·∇W.
// Returns the largest absolute entrywise difference.
double update_identity_check(const Matrix& u, const Matrix& v, const Matrix& grad_w, double alpha);

struct NormalizedUpdateReport {
  std::vector<double> alphas;
  std::vector<double> residuals;
  // residuals[i] / residuals[i + 1]; NaN when the denominator is zero.
  std::vector<double> ratios;
};

// Exact one-step change of the unit direction vec(W)/‖W‖ under a factorized
// update versus the first-order prediction
//   −(α/‖W‖²)(I − ŵŵᵀ) vec(G̃VVᵀ + UUᵀG̃),   G̃ = (I − ŵŵᵀ) vec(grad_w_hat),
// where grad_w_hat is the gradient with respect to W/‖W‖. The residual is
// second order in α, so halving α divides it by about four.
NormalizedUpdateReport normalized_update_check(const FactorizedParam& factors,
                                               const Matrix& grad_w_hat,
                                               std::span<const double> alphas);
// Uses the balanced full-rank spectral factors of w.
NormalizedUpdateReport normalized_update_check(const Matrix& w, const Matrix& grad_w_hat,
                                               std::span<const double> alphas);

// Kendall rank correlation (tau-a); 0 when either series is constant.
double kendall_tau(std::span<const double> x, std::span<const double> y);

struct TrajectoryReport {
  std::string layer;
  std::vector<std::size_t> steps;
  std::vector<std::vector<double>> singular_values;
  std::vector<double> top1_share;  // σ₁ / Σσᵢ
  std::vector<double> effective_rank;
  double top1_trend = 0.0;  // Kendall tau of top1_share against step
};

using CheckpointSeries = std::vector<std::pair<std::size_t, ParamSet>>;

// Weight of `layer` in params: composed U Vᵀ for factorized layers. Throws
// KeyError when the layer has no weight.
Matrix layer_weight(const ParamSet& params, const std::string& layer);
// Names of every layer that has a weight (".w" or ".u"/".v") in params.
std::vector<std::string> weight_layers(const ParamSet& params);

TrajectoryReport sv_trajectory(const CheckpointSeries& checkpoints, const std::string& layer);

struct LayerRank {
  std::string layer;
  double effective_rank = 0.0;
};

struct EffectiveRankReport {
  std::vector<LayerRank> layers;
  double mean = 0.0;
};

// Effective rank of every low-rank-eligible or factorized layer of spec.
EffectiveRankReport effective_rank_report(const NetworkSpec& spec, const ParamSet& params);
// Effective rank of every weight tensor in params.
EffectiveRankReport effective_rank_report(const ParamSet& params);

struct HistogramBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mp_expected = 0.0;  // expected count under the reference law
};

struct EsdReport {
  double ks_distance = 0.0;
  MpParams params;
  MpEdges edges{0.0, 0.0};
  std::vector<double> eigenvalues;  // squared singular values, ascending
  std::vector<HistogramBin> histogram;
};

// Compares the squared singular values of w with the Marchenko-Pastur law.
// w is oriented so the long side N comes first; the law's scale is
// sigma2 = assumed_std² · N, which matches entries drawn with std assumed_std.
// Requires N >= 200 and M >= 100 (InsufficientData otherwise).
EsdReport esd_vs_mp(const Matrix& w, double assumed_std, std::size_t bins = 50);
// The same statistic without the size floor, for small diagnostic runs.
double ks_distance_to_mp(std::span<const double> sorted_eigenvalues, const MpParams& p);

struct InterpolationResult {
  std::vector<double> ts;
  std::vector<double> loss;
  std::vector<double> accuracy;
};

// 0, 1/(points-1), ..., 1.
std::vector<double> interpolation_grid(std::size_t points = 11);

// Evaluates θ(t) = (1 − t)θ_b + tθ_l on data for each t. Factorized layers of
// either endpoint are composed first so both live in the parameter space of
// spec.unfactorized(). Throws ShapeError on an architecture mismatch.
InterpolationResult interpolate(const ParamSet& theta_b, const ParamSet& theta_l,
                                const NetworkSpec& spec, const Dataset& data,
                                std::span<const double> ts);

// Plain-weight parameters for spec.unfactorized() from params that may hold
// factor pairs.
ParamSet composed_params(const NetworkSpec& spec, const ParamSet& params);

// max over the path minus the larger endpoint loss.
double loss_barrier(const InterpolationResult& r);

struct CostReport {
  std::size_t rows = 0;  // m, or h*w*c_in for conv
  std::size_t cols = 0;  // n, or c_out
  std::size_t rank = 0;
  std::size_t full_flops = 0;
  std::size_t fact_flops = 0;
  std::size_t full_params = 0;
  std::size_t fact_params = 0;
  std::size_t full_train_memory = 0;  // mn + n
  std::size_t fact_train_memory = 0;  // mr + rn + n + r
  std::size_t breakeven_rank = 0;     // floor(mn / (m + n))
  bool economical = false;            // fact_flops < full_flops
};

CostReport dense_cost(std::size_t m, std::size_t n, std::size_t r);
CostReport conv_cost(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out, std::size_t r);
// Cost of an affine layer at its own rank (factorized) or at `rank`.
CostReport cost_model(const LayerSpec& layer, std::size_t rank = 0);

}  // namespace lrlab
