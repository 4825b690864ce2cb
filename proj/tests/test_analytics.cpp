#include <gtest/gtest.h>

#include <cmath>

#include "lrlab/analytics.hpp"
#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/schemes.hpp"
#include "lrlab/trainer.hpp"

using namespace lrlab;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) { return gaussian_matrix(rng, r, c, 1.0); }

ParamSet with_weight(const std::string& layer, Matrix w) {
  ParamSet p;
  p.insert(weight_key(layer), std::move(w));
  return p;
}

NetworkSpec tiny_classifier() {
  NetworkSpec s;
  s.input = {1, 1, 4};
  s.layers = {LayerSpec::dense(4, 6), LayerSpec::relu(), LayerSpec::dense(6, 6), LayerSpec::relu(),
              LayerSpec::dense(6, 3)};
  s.validate();
  s.layers[0].low_rank_eligible = false;
  s.layers[4].low_rank_eligible = false;
  return s;
}

Dataset tiny_data(std::uint64_t seed) {
  BlobsSpec b;
  b.classes = 3;
  b.dim = 4;
  b.n = 64;
  b.eval_n = 32;
  b.seed = seed;
  return make_blobs(b).eval;
}

}  // namespace

TEST(UpdateIdentity, Examples) {
  EXPECT_EQ(update_identity_check(Matrix{{1.0}}, Matrix{{1.0}}, Matrix{{0.0}}, 0.1), 0.0);
  // (1 − 0.1)² = 0.81 and 1 − 0.1·2 + 0.01 = 0.81.
  EXPECT_LE(update_identity_check(Matrix{{1.0}}, Matrix{{1.0}}, Matrix{{1.0}}, 0.1), 1e-16);
  Rng rng(1);
  EXPECT_EQ(update_identity_check(random_matrix(rng, 4, 2), random_matrix(rng, 3, 2), Matrix(4, 3), 0.3), 0.0);
  EXPECT_THROW(update_identity_check(Matrix(4, 2), Matrix(3, 2), Matrix(3, 4), 0.1), ShapeError);
  EXPECT_THROW(update_identity_check(Matrix(4, 2), Matrix(3, 1), Matrix(4, 3), 0.1), ShapeError);
}

TEST(UpdateIdentity, RandomInstancesExact) {
  Rng rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix u = random_matrix(rng, 8, 3), v = random_matrix(rng, 6, 3);
    const double d = update_identity_check(u, v, random_matrix(rng, 8, 6), 0.1);
    worst = std::max(worst, d / max_abs(matmul_nt(u, v)));
  }
  EXPECT_LT(worst, 1e-12);
}

// ∇W·W·∇Wᵀ is not shape-compatible for rectangular W; ∇W·Wᵀ·∇W equals ∇U ∇Vᵀ.
TEST(UpdateIdentity, SecondOrderTermUsesTranspose) {
  Rng rng(3);
  const Matrix u = random_matrix(rng, 5, 2), v = random_matrix(rng, 3, 2), g = random_matrix(rng, 5, 3);
  const double alpha = 0.2;
  const Matrix gu = matmul(g, v), gv = matmul_tn(g, u);
  const Matrix direct_second = matmul_nt(gu, gv);  // ∇U ∇Vᵀ
  EXPECT_LE(max_abs_diff(direct_second, matmul(matmul_nt(g, matmul_nt(u, v)), g)), 1e-12);
  EXPECT_THROW(matmul(matmul(g, matmul_nt(u, v)), g.transposed()), ShapeError);
  EXPECT_LE(update_identity_check(u, v, g, alpha), 1e-13);
}

TEST(NormalizedUpdate, RatiosNearFour) {
  Rng rng(4);
  const double alphas[] = {1e-2, 5e-3, 2.5e-3};
  for (int trial = 0; trial < 20; ++trial) {
    const NormalizedUpdateReport r =
        normalized_update_check(random_matrix(rng, 6, 4), random_matrix(rng, 6, 4), alphas);
    ASSERT_EQ(r.ratios.size(), 2u);
    for (double ratio : r.ratios) {
      EXPECT_GE(ratio, 3.5);
      EXPECT_LE(ratio, 4.5);
    }
    EXPECT_LT(r.residuals[2], r.residuals[0]);
  }
}

TEST(NormalizedUpdate, ParallelGradientHasNoFirstOrderChange) {
  Rng rng(5);
  const Matrix w = random_matrix(rng, 5, 3);
  const double alphas[] = {1e-2, 5e-3};
  const NormalizedUpdateReport r = normalized_update_check(w, w * 3.0, alphas);
  for (double res : r.residuals) EXPECT_LE(res, 1e-14);
}

TEST(NormalizedUpdate, ResidualVanishesWithAlpha) {
  Rng rng(6);
  const double alphas[] = {1e-1, 1e-3, 1e-5};
  const NormalizedUpdateReport r = normalized_update_check(random_matrix(rng, 4, 4), random_matrix(rng, 4, 4), alphas);
  EXPECT_LT(r.residuals[2], 1e-8);
}

TEST(NormalizedUpdate, Preconditions) {
  const double alphas[] = {1e-2, 5e-3};
  EXPECT_THROW(normalized_update_check(Matrix(3, 3), Matrix(3, 3), alphas), DegenerateInput);
  const double increasing[] = {1e-3, 1e-2};
  EXPECT_THROW(normalized_update_check(Matrix::identity(3), Matrix::identity(3), increasing), InvalidInput);
}

TEST(KendallTau, HandCounted) {
  const double x[] = {1, 2, 3, 4};
  const double y[] = {1, 3, 2, 4};  // one discordant pair of six
  EXPECT_DOUBLE_EQ(kendall_tau(x, y), 4.0 / 6.0);
  const double rev[] = {4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(kendall_tau(x, rev), -1.0);
  const double flat[] = {2, 2, 2, 2};
  EXPECT_EQ(kendall_tau(x, flat), 0.0);
}

TEST(SvTrajectory, ConstantCheckpointsAreFlat) {
  Rng rng(7);
  const ParamSet p = with_weight("fc1", random_matrix(rng, 6, 4));
  const CheckpointSeries series{{10, p}, {20, p}, {30, p}};
  const TrajectoryReport r = sv_trajectory(series, "fc1");
  EXPECT_EQ(r.steps, (std::vector<std::size_t>{10, 20, 30}));
  EXPECT_EQ(r.top1_trend, 0.0);
  EXPECT_EQ(r.singular_values[0], r.singular_values[2]);
  for (const auto& sv : r.singular_values)
    for (std::size_t i = 0; i + 1 < sv.size(); ++i) EXPECT_GE(sv[i], sv[i + 1]);
}

TEST(SvTrajectory, ScalingLeavesEffectiveRank) {
  Rng rng(8);
  const Matrix w = random_matrix(rng, 6, 4);
  CheckpointSeries series;
  for (std::size_t k = 1; k <= 4; ++k) series.emplace_back(k, with_weight("fc1", w * static_cast<double>(k * k)));
  const TrajectoryReport r = sv_trajectory(series, "fc1");
  for (double e : r.effective_rank) EXPECT_NEAR(e, r.effective_rank[0], 1e-12);
}

TEST(SvTrajectory, ConcentratingSpectrumHasPositiveTrend) {
  CheckpointSeries series;
  for (std::size_t k = 0; k < 5; ++k) {
    series.emplace_back(k * 100, with_weight("fc1", Matrix::diagonal({1.0 + static_cast<double>(k), 1.0, 0.5})));
  }
  EXPECT_DOUBLE_EQ(sv_trajectory(series, "fc1").top1_trend, 1.0);
}

TEST(SvTrajectory, Errors) {
  const ParamSet p = with_weight("fc1", Matrix::identity(3));
  EXPECT_THROW(sv_trajectory({{1, p}}, "fc1"), InsufficientData);
  EXPECT_THROW(sv_trajectory({{1, p}, {2, p}}, "fc9"), KeyError);
}

TEST(EffectiveRankReport, Examples) {
  ParamSet p;
  p.insert("a.w", Matrix::identity(4));
  p.insert("b.u", Matrix{{1.0}, {2.0}, {3.0}});
  p.insert("b.v", Matrix{{1.0}, {1.0}});
  p.insert("b.b", Matrix(1, 2));
  const EffectiveRankReport r = effective_rank_report(p);
  ASSERT_EQ(r.layers.size(), 2u);
  EXPECT_NEAR(r.layers[0].effective_rank, 4.0, 1e-12);
  EXPECT_NEAR(r.layers[1].effective_rank, 1.0, 1e-12);
  EXPECT_NEAR(r.mean, 2.5, 1e-12);
  EXPECT_THROW(effective_rank_report(ParamSet{}), DegenerateInput);
}

TEST(EffectiveRankReport, SpectralOnesGivesRankExactly) {
  const NetworkSpec base = tiny_classifier();
  const NetworkSpec low = base.factorized(0.5);
  const ParamSet p = initialize_params(Network(low), Rng(3), InitKind::SpectralOnes);
  const EffectiveRankReport r = effective_rank_report(base, p);
  ASSERT_EQ(r.layers.size(), 1u);
  EXPECT_EQ(r.layers[0].layer, "fc2");
  EXPECT_NEAR(r.layers[0].effective_rank, 3.0, 1e-9);
}

TEST(Esd, GaussianMatchesMarchenkoPastur) {
  Rng rng(9);
  const double std = 1.0 / std::sqrt(1000.0);
  const EsdReport r = esd_vs_mp(gaussian_matrix(rng, 500, 1000, std), std);
  EXPECT_LT(r.ks_distance, 0.05);
  EXPECT_EQ(r.params.n_rows, 1000u);
  EXPECT_EQ(r.params.n_cols, 500u);
  std::size_t total = 0;
  for (const auto& b : r.histogram) total += b.count;
  EXPECT_EQ(total, 500u);
}

TEST(Esd, DeterministicMatrixIsFarFromLaw) {
  Matrix w(300, 150);
  for (std::size_t i = 0; i < 150; ++i) w(i, i) = 3.0;
  const EsdReport r = esd_vs_mp(w, 1.0 / std::sqrt(300.0));
  EXPECT_GT(r.ks_distance, 0.99);
}

TEST(Esd, EdgesScaleWithStd) {
  Rng rng(10);
  const Matrix w = gaussian_matrix(rng, 200, 100, 1.0);
  EXPECT_DOUBLE_EQ(esd_vs_mp(w, 2.0).edges.lambda_plus, 4.0 * esd_vs_mp(w, 1.0).edges.lambda_plus);
  EXPECT_THROW(esd_vs_mp(Matrix(199, 100), 1.0), InsufficientData);
  EXPECT_THROW(esd_vs_mp(Matrix(300, 99), 1.0), InsufficientData);
}

TEST(Interpolate, EndpointsExactAndFlatWhenEqual) {
  const NetworkSpec spec = tiny_classifier();
  const Network net(spec);
  const ParamSet a = initialize_params(net, Rng(1), InitKind::He);
  const ParamSet b = initialize_params(net, Rng(2), InitKind::He);
  const Dataset data = tiny_data(4);
  const auto ts = interpolation_grid();
  ASSERT_EQ(ts.size(), 11u);
  EXPECT_DOUBLE_EQ(ts[3], 0.3);
  const InterpolationResult r = interpolate(a, b, spec, data, ts);
  const EvalResult ea = evaluate(net, a, data), eb = evaluate(net, b, data);
  EXPECT_EQ(r.loss.front(), ea.loss);
  EXPECT_EQ(r.loss.back(), eb.loss);
  EXPECT_EQ(r.accuracy.front(), ea.accuracy);
  EXPECT_EQ(r.accuracy.back(), eb.accuracy);

  const InterpolationResult flat = interpolate(a, a, spec, data, ts);
  for (double l : flat.loss) EXPECT_NEAR(l, ea.loss, 1e-12);
  EXPECT_NEAR(loss_barrier(flat), 0.0, 1e-12);
}

TEST(Interpolate, FactorizedEndpointIsComposed) {
  const NetworkSpec spec = tiny_classifier();
  const NetworkSpec low = spec.factorized(0.5);
  const ParamSet a = initialize_params(Network(spec), Rng(1), InitKind::He);
  const ParamSet b = initialize_params(Network(low), Rng(2), InitKind::Spectral);
  const Dataset data = tiny_data(5);
  const double ts[] = {0.0, 0.5, 1.0};
  const InterpolationResult r = interpolate(a, b, spec, data, ts);
  EXPECT_EQ(r.loss.back(), evaluate(Network(low), b, data).loss);
  const ParamSet composed = composed_params(spec, b);
  EXPECT_EQ(composed.at("fc2.w"), matmul_nt(b.at("fc2.u"), b.at("fc2.v")));
}

TEST(Interpolate, ArchitectureMismatch) {
  const NetworkSpec spec = tiny_classifier();
  const ParamSet a = initialize_params(Network(spec), Rng(1), InitKind::He);
  ParamSet wrong = a;
  wrong.mutable_at("fc2.w") = Matrix(5, 6);
  const double ts[] = {0.0, 1.0};
  EXPECT_THROW(interpolate(a, wrong, spec, tiny_data(1), ts), ShapeError);
  ParamSet missing;
  missing.insert("fc0.w", a.at("fc0.w"));
  EXPECT_THROW(interpolate(a, missing, spec, tiny_data(1), ts), ShapeError);
}

TEST(LossBarrier, Definition) {
  InterpolationResult r;
  r.loss = {1.0, 3.0, 2.0, 1.5};
  EXPECT_DOUBLE_EQ(loss_barrier(r), 1.5);
  r.loss = {2.0, 1.0, 0.5};
  EXPECT_DOUBLE_EQ(loss_barrier(r), 0.0);
}

TEST(CostModel, SquareLayerExample) {
  const CostReport c = dense_cost(1024, 1024, 128);
  EXPECT_EQ(c.full_flops, 1048576u);
  EXPECT_EQ(c.fact_flops, 262144u);
  EXPECT_EQ(c.full_flops / c.fact_flops, 4u);
  EXPECT_EQ(c.breakeven_rank, 512u);
  EXPECT_TRUE(c.economical);
  EXPECT_EQ(c.fact_train_memory, 1024u * 128 + 128 * 1024 + 1024 + 128);
}

TEST(CostModel, BreakevenProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(3000), n = 1 + rng.below(3000);
    const std::size_t b = dense_cost(m, n, 1).breakeven_rank;
    EXPECT_LE(m * b + b * n, m * n);
    EXPECT_LT(m * n, m * (b + 1) + (b + 1) * n);
    EXPECT_FALSE(dense_cost(m, n, b + 1).economical);
  }
  EXPECT_EQ(dense_cost(64, 64, 1).breakeven_rank, 32u);
}

TEST(CostModel, ConvFormula) {
  const CostReport c = conv_cost(3, 3, 16, 32, 4);
  EXPECT_EQ(c.full_flops, 3u * 3 * 16 * 32);
  EXPECT_EQ(c.fact_flops, 3u * 3 * 16 * 4 + 4 * 32);
  const LayerSpec l = LayerSpec::factorized_conv(3, 3, 16, 32, 4);
  EXPECT_EQ(cost_model(l).fact_flops, c.fact_flops);
  EXPECT_THROW(cost_model(LayerSpec::relu()), InvalidInput);
}
