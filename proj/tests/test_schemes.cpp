#include <gtest/gtest.h>

#include <cmath>

#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/net.hpp"
#include "lrlab/rng.hpp"
#include "lrlab/schemes.hpp"

using namespace lrlab;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) { return gaussian_matrix(rng, r, c, 1.0); }

// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
Matrix random_orthogonal(Rng& rng, std::size_t n) {
  Matrix q = random_matrix(rng, n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= d * q(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
  }
  return q;
}

using PenaltyFn = PenaltyResult (*)(const Matrix&, const Matrix&, double);

// Largest relative deviation of a penalty's gradient from central differences.
double penalty_fd_error(PenaltyFn fn, const Matrix& u, const Matrix& v, double lambda) {
  const PenaltyResult r = fn(u, v, lambda);
  const double eps = 1e-6;
  double worst = 0.0;
  auto probe = [&](const Matrix& analytic, bool on_u) {
    Matrix uu = u, vv = v;
    Matrix& target = on_u ? uu : vv;
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double x = target.data()[k];
      target.data()[k] = x + eps;
      const double up = fn(uu, vv, lambda).loss;
      target.data()[k] = x - eps;
      const double down = fn(uu, vv, lambda).loss;
      target.data()[k] = x;
      const double num = (up - down) / (2 * eps);
      const double a = analytic.data()[k];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
  };
  probe(r.grad_u, true);
  probe(r.grad_v, false);
  return worst;
}

}  // namespace

TEST(Names, RoundTripAndRejectUnknown) {
  for (InitKind k : {InitKind::He, InitKind::Spectral, InitKind::SpectralOnes})
    EXPECT_EQ(parse_init_kind(to_string(k)), k);
  for (PenaltyKind k : {PenaltyKind::None, PenaltyKind::L2Factors, PenaltyKind::FrobeniusDecay,
                        PenaltyKind::WeightDecayFull})
    EXPECT_EQ(parse_penalty_kind(to_string(k)), k);
  EXPECT_EQ(to_string(InitKind::SpectralOnes), "spectral_ones");
  EXPECT_EQ(to_string(PenaltyKind::FrobeniusDecay), "frobenius_decay");
  EXPECT_THROW(parse_init_kind("xavier"), ConfigError);
  EXPECT_THROW(parse_penalty_kind("nuclear"), ConfigError);
}

TEST(HeInit, MomentsAndDeterminism) {
  Rng rng(1);
  const Matrix w = he_init(rng, 1000, 1000, 2);
  double s2 = 0.0;
  for (double x : w.data()) s2 += x * x;
  EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(w.size())), 1.0, 0.01);
  Rng a(9), b(9);
  EXPECT_EQ(he_init(a, 3, 4, 3), he_init(b, 3, 4, 3));
}

TEST(HeInit, FactorStatistics) {
  Rng rng(2);
  const FactorizedParam p = he_factor_init(rng, 400, 300, 50);
  EXPECT_EQ(p.u.rows(), 400u);
  EXPECT_EQ(p.v.rows(), 300u);
  EXPECT_NEAR(sum_squares(p.u) / static_cast<double>(p.u.size()), 2.0 / 400, 0.05 * 2.0 / 400);
  EXPECT_NEAR(sum_squares(p.v) / static_cast<double>(p.v.size()), 2.0 / 50, 0.05 * 2.0 / 50);
}

TEST(SpectralInit, DiagonalExample) {
  const FactorizedParam p = spectral_init(Matrix::diagonal({4.0, 1.0}), 1);
  EXPECT_EQ(p.u, (Matrix{{2.0}, {0.0}}));
  EXPECT_EQ(p.v, (Matrix{{2.0}, {0.0}}));
  EXPECT_THROW(spectral_init(Matrix::diagonal({4.0, 1.0}), 0), RankError);
  EXPECT_THROW(spectral_init(Matrix::diagonal({4.0, 1.0}), 3), RankError);
}

TEST(SpectralInit, LosslessAtFullRankAndEckartYoung) {
  Rng rng(3);
  const Matrix w = random_matrix(rng, 6, 4);
  EXPECT_LE(frobenius_norm(compose(spectral_init(w, 4)) - w), 1e-10 * frobenius_norm(w));
  const auto sigma = singular_values(w);
  const FactorizedParam p = spectral_init(w, 2);
  EXPECT_NEAR(frobenius_norm(compose(p) - w), std::hypot(sigma[2], sigma[3]), 1e-9);
}

TEST(SpectralInit, FactorBalanceProperty) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(12), n = 2 + rng.below(12);
    const Matrix w = random_matrix(rng, m, n);
    const std::size_t r = 1 + rng.below(std::min(m, n));
    const FactorizedParam p = spectral_init(w, r);
    const auto sigma = singular_values(w);
    double head = 0.0;
    for (std::size_t i = 0; i < r; ++i) head += sigma[i];
    EXPECT_NEAR(sum_squares(p.u), head, 1e-12 * head);
    EXPECT_NEAR(sum_squares(p.v), head, 1e-12 * head);
  }
}

TEST(SpectralOnes, Examples) {
  const FactorizedParam p = spectral_ones_init(Matrix::diagonal({4.0, 1.0}), 1);
  EXPECT_EQ(compose(p), (Matrix{{1.0, 0.0}, {0.0, 0.0}}));
  Rng rng(5);
  const Matrix w = random_matrix(rng, 7, 5);
  const FactorizedParam q = spectral_ones_init(w, 3);
  EXPECT_LE(max_abs_diff(matmul_tn(q.u, q.u), Matrix::identity(3)), 1e-10);
  EXPECT_LE(max_abs_diff(matmul_tn(q.v, q.v), Matrix::identity(3)), 1e-10);
  const auto sigma = singular_values(compose(q));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(sigma[i], 1.0, 1e-9);
  EXPECT_NEAR(effective_rank(compose(q)), 3.0, 1e-9);
}

TEST(SpectralOnes, OrthogonalFixedPoint) {
  Rng rng(6);
  const Matrix q = random_orthogonal(rng, 5);
  EXPECT_LE(max_abs_diff(compose(spectral_ones_init(q, 5)), q), 1e-10);
}

TEST(L2Penalty, ScalarExampleAndZero) {
  const PenaltyResult r = l2_factor_penalty(Matrix{{3.0}}, Matrix{{2.0}}, 1.0);
  EXPECT_DOUBLE_EQ(r.loss, 6.5);
  EXPECT_DOUBLE_EQ(r.grad_u(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(r.grad_v(0, 0), 2.0);
  const PenaltyResult z = l2_factor_penalty(Matrix{{3.0}}, Matrix{{2.0}}, 0.0);
  EXPECT_EQ(z.loss, 0.0);
  EXPECT_EQ(max_abs(z.grad_u), 0.0);
}

TEST(FrobeniusDecay, ScalarExampleAndZero) {
  const PenaltyResult r = frobenius_decay_penalty(Matrix{{3.0}}, Matrix{{2.0}}, 1.0);
  EXPECT_DOUBLE_EQ(r.loss, 18.0);
  EXPECT_DOUBLE_EQ(r.grad_u(0, 0), 12.0);
  EXPECT_DOUBLE_EQ(r.grad_v(0, 0), 18.0);
  const PenaltyResult z = frobenius_decay_penalty(Matrix(4, 2), Matrix{{1, 2}, {3, 4}, {5, 6}}, 1.0);
  EXPECT_EQ(z.loss, 0.0);
  EXPECT_EQ(max_abs(z.grad_u), 0.0);
  EXPECT_EQ(max_abs(z.grad_v), 0.0);
}

TEST(FrobeniusDecay, MatchesComposedDefinition) {
  Rng rng(7);
  const Matrix u = random_matrix(rng, 5, 2), v = random_matrix(rng, 3, 2);
  const Matrix w = matmul_nt(u, v);
  const PenaltyResult r = frobenius_decay_penalty(u, v, 0.3);
  EXPECT_NEAR(r.loss, 0.15 * sum_squares(w), 1e-12);
  EXPECT_LE(max_abs_diff(r.grad_u, 0.3 * matmul(w, v)), 1e-12);
  EXPECT_LE(max_abs_diff(r.grad_v, 0.3 * matmul_tn(w, u)), 1e-12);
}

TEST(Penalties, FiniteDifferenceGradients) {
  Rng rng(8);
  const Matrix u = random_matrix(rng, 5, 2), v = random_matrix(rng, 3, 2);
  EXPECT_LT(penalty_fd_error(&l2_factor_penalty, u, v, 0.7), 1e-8);
  EXPECT_LT(penalty_fd_error(&frobenius_decay_penalty, u, v, 0.7), 1e-8);
}

TEST(Penalties, RotationInvariance) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix u = random_matrix(rng, 6, 3), v = random_matrix(rng, 4, 3);
    const Matrix q = random_orthogonal(rng, 3);
    const Matrix uq = matmul(u, q), vq = matmul(v, q);
    EXPECT_NEAR(frobenius_decay_penalty(uq, vq, 1.0).loss, frobenius_decay_penalty(u, v, 1.0).loss, 1e-10);
    EXPECT_NEAR(l2_factor_penalty(uq, vq, 1.0).loss, l2_factor_penalty(u, v, 1.0).loss, 1e-10);
    EXPECT_NEAR(nuclear_gap(uq, vq), nuclear_gap(u, v), 1e-9);
  }
}

TEST(NuclearGap, NonNegativeAndZeroWhenBalanced) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(4);
    const Matrix u = random_matrix(rng, 2 + rng.below(6), r);
    const Matrix v = random_matrix(rng, 2 + rng.below(6), r);
    EXPECT_GE(nuclear_gap(u, v), -1e-9);
  }
  const Matrix w = random_matrix(rng, 6, 5);
  const FactorizedParam p = spectral_init(w, 3);
  EXPECT_NEAR(nuclear_gap(p.u, p.v), 0.0, 1e-9);
  EXPECT_GT(nuclear_gap(p.u * 2.0, p.v * 0.5), 1e-3);
  EXPECT_EQ(nuclear_gap(Matrix(3, 2), Matrix(4, 2)), 0.0);
}

TEST(InitializeParams, PerLayerStreamsSurviveFactorization) {
  NetworkSpec base;
  base.input = {1, 1, 6};
  base.layers = {LayerSpec::dense(6, 8), LayerSpec::relu(), LayerSpec::dense(8, 8), LayerSpec::relu(),
                 LayerSpec::dense(8, 3)};
  base.validate();
  base.layers[0].low_rank_eligible = false;
  base.layers[4].low_rank_eligible = false;
  const Rng root(42);
  const ParamSet full = initialize_params(Network(base), root, InitKind::He);
  const NetworkSpec low = base.factorized(0.5);
  const ParamSet spec_init = initialize_params(Network(low), root, InitKind::Spectral);
  const FactorizedParam expected = spectral_init(full.at("fc2.w"), 4);
  EXPECT_EQ(spec_init.at("fc2.u"), expected.u);
  EXPECT_EQ(spec_init.at("fc2.v"), expected.v);
  EXPECT_EQ(spec_init.at("fc0.w"), full.at("fc0.w"));
  EXPECT_EQ(max_abs(spec_init.at("fc0.b")), 0.0);
  EXPECT_EQ(factorize_params(low, full, InitKind::Spectral), spec_init);
  EXPECT_THROW(factorize_params(low, full, InitKind::He), ConfigError);
}

TEST(ApplyPenalties, BiasesNeverDecayed) {
  NetworkSpec s;
  s.input = {1, 1, 4};
  s.layers = {LayerSpec::factorized_dense(4, 4, 2), LayerSpec::relu(), LayerSpec::dense(4, 2)};
  s.validate();
  const Network net(s);
  ParamSet p = initialize_params(net, Rng(1), InitKind::He);
  for (auto& [name, m] : p.mutable_entries())
    if (name.ends_with(".b")) m = Matrix(1, m.cols(), 1.0);
  Gradients g = p.zeros_like();
  const double loss = apply_penalties(s, p, {PenaltyKind::L2Factors, 0.5}, 0.25, &g);
  const double expected = 0.25 * (sum_squares(p.at("fc0.u")) + sum_squares(p.at("fc0.v"))) +
                          0.125 * sum_squares(p.at("fc2.w"));
  EXPECT_NEAR(loss, expected, 1e-12);
  EXPECT_EQ(max_abs(g.at("fc0.b")), 0.0);
  EXPECT_EQ(max_abs(g.at("fc2.b")), 0.0);
  EXPECT_LE(max_abs_diff(g.at("fc2.w"), 0.25 * p.at("fc2.w")), 1e-15);
  EXPECT_LE(max_abs_diff(g.at("fc0.u"), 0.5 * p.at("fc0.u")), 1e-15);
}
