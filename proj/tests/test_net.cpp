#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/net.hpp"
#include "lrlab/rng.hpp"
#include "lrlab/schemes.hpp"

using namespace lrlab;

namespace {

NetworkSpec make_spec(TensorShape input, std::vector<LayerSpec> layers, HeadKind head) {
  NetworkSpec s;
  s.input = input;
  s.layers = std::move(layers);
  s.head = head;
  s.validate();
  return s;
}

Batch regression_batch(Matrix x, Matrix y) {
  Batch b;
  b.inputs = std::move(x);
  b.targets = std::move(y);
  return b;
}

// Direct nested-loop convolution over NHWC with an HWIO kernel, stride 1.
Matrix naive_conv(const Matrix& input, const TensorShape& in, const Matrix& kernel, std::size_t kh,
                  std::size_t kw, std::size_t c_out, Padding padding) {
  const long pt = padding == Padding::Same ? static_cast<long>((kh - 1) / 2) : 0;
  const long pl = padding == Padding::Same ? static_cast<long>((kw - 1) / 2) : 0;
  const std::size_t oh = padding == Padding::Same ? in.h : in.h - kh + 1;
  const std::size_t ow = padding == Padding::Same ? in.w : in.w - kw + 1;
  Matrix out(input.rows(), oh * ow * c_out);
  for (std::size_t b = 0; b < input.rows(); ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t o = 0; o < c_out; ++o) {
          double acc = 0.0;
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long iy = static_cast<long>(y + dy) - pt;
              const long ix = static_cast<long>(x + dx) - pl;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) continue;
              for (std::size_t c = 0; c < in.c; ++c) {
                acc += input(b, (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * in.c + c) *
                       kernel((dy * kw + dx) * in.c + c, o);
              }
            }
          out(b, (y * ow + x) * c_out + o) = acc;
        }
  return out;
}

// Central differences of the batch loss, compared with backward().
double max_fd_error(const Network& net, const ParamSet& params, const Batch& batch) {
  const Gradients g = net.backward(params, net.forward(params, batch).cache);
  ParamSet probe = params;
  const double eps = 1e-5;
  double worst = 0.0;
  for (const auto& [name, value] : params.entries()) {
    for (std::size_t i = 0; i < value.rows(); ++i)
      for (std::size_t j = 0; j < value.cols(); ++j) {
        probe.mutable_at(name)(i, j) = value(i, j) + eps;
        const double up = net.forward(probe, batch).loss;
        probe.mutable_at(name)(i, j) = value(i, j) - eps;
        const double down = net.forward(probe, batch).loss;
        probe.mutable_at(name)(i, j) = value(i, j);
        const double num = (up - down) / (2 * eps);
        const double a = g.at(name)(i, j);
        worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-3}));
      }
  }
  return worst;
}

ParamSet random_params(const Network& net, std::uint64_t seed) {
  ParamSet p = initialize_params(net, Rng(seed), InitKind::He);
  Rng rng(seed + 100);
  for (auto& [name, m] : p.mutable_entries())
    if (name.ends_with(".b")) m = gaussian_matrix(rng, 1, m.cols(), 0.1);
  return p;
}

}  // namespace

TEST(LayerSpec, RankForFraction) {
  EXPECT_EQ(rank_for_fraction(0.25, 128), 32u);
  EXPECT_EQ(rank_for_fraction(0.625, 10), 7u);
  EXPECT_EQ(rank_for_fraction(0.001, 10), 1u);
  EXPECT_EQ(rank_for_fraction(1.0, 10), 10u);
  EXPECT_EQ(LayerSpec::factorized_conv(3, 3, 4, 8, 2).max_rank(), 8u);
  EXPECT_EQ(LayerSpec::factorized_conv(1, 1, 4, 8, 2).max_rank(), 4u);
}

TEST(NetworkSpec, ValidationErrors) {
  NetworkSpec bad_rank;
  bad_rank.input = {1, 1, 4};
  bad_rank.layers = {LayerSpec::factorized_dense(4, 3, 4)};
  EXPECT_THROW(bad_rank.validate(), RankError);

  NetworkSpec zero_rank;
  zero_rank.input = {1, 1, 4};
  zero_rank.layers = {LayerSpec::factorized_dense(4, 3, 0)};
  EXPECT_THROW(zero_rank.validate(), RankError);

  NetworkSpec no_flatten;
  no_flatten.input = {4, 4, 1};
  no_flatten.layers = {LayerSpec::conv(3, 3, 1, 2), LayerSpec::dense(32, 2)};
  EXPECT_THROW(no_flatten.validate(), ShapeError);

  NetworkSpec mismatch;
  mismatch.input = {1, 1, 4};
  mismatch.layers = {LayerSpec::dense(5, 2)};
  EXPECT_THROW(mismatch.validate(), ShapeError);
}

TEST(NetworkSpec, FactorizedRespectsEligibility) {
  NetworkSpec s = make_spec({1, 1, 8},
                            {LayerSpec::dense(8, 16), LayerSpec::relu(), LayerSpec::dense(16, 16),
                             LayerSpec::relu(), LayerSpec::dense(16, 4)},
                            HeadKind::SoftmaxCrossEntropy);
  s.layers[0].low_rank_eligible = false;
  s.layers[4].low_rank_eligible = false;
  const NetworkSpec f = s.factorized(0.25);
  EXPECT_EQ(f.layers[0].kind, LayerKind::Dense);
  EXPECT_EQ(f.layers[2].kind, LayerKind::FactorizedDense);
  EXPECT_EQ(f.layers[2].rank, 4u);
  EXPECT_EQ(f.layers[2].name, s.layers[2].name);
  EXPECT_EQ(f.layers[4].kind, LayerKind::Dense);
  EXPECT_TRUE(f.has_factorized_layers());
  EXPECT_FALSE(f.unfactorized().has_factorized_layers());
}

TEST(ParamSet, UniqueNamesAndVersions) {
  ParamSet p;
  p.insert("a", Matrix(1, 1));
  EXPECT_THROW(p.insert("a", Matrix(1, 1)), KeyError);
  EXPECT_THROW(p.at("missing"), KeyError);
  const auto v = p.version();
  p.mutable_at("a")(0, 0) = 1.0;
  EXPECT_NE(p.version(), v);
  p.insert("0first", Matrix(2, 2));
  EXPECT_EQ(p.entries()[0].first, "a");  // insertion order, not lexical
  EXPECT_EQ(p.scalar_count(), 5u);
}

TEST(Compose, ExamplesAndErrors) {
  const FactorizedParam p{Matrix{{2}, {0}}, Matrix{{2}, {0}}, {}};
  EXPECT_EQ(compose(p), (Matrix{{4, 0}, {0, 0}}));
  EXPECT_THROW(compose(FactorizedParam{}), RankError);
  EXPECT_THROW(compose(FactorizedParam{Matrix(3, 2), Matrix(3, 1), {}}), ShapeError);
}

TEST(Compose, TransposeIdentity) {
  Rng rng(1);
  const Matrix u = gaussian_matrix(rng, 5, 2, 1.0), v = gaussian_matrix(rng, 3, 2, 1.0);
  EXPECT_EQ(compose({u, v, {}}).transposed(), compose({v, u, {}}));
}

TEST(Forward, LossExamples) {
  const Network lin(make_spec({1, 1, 1}, {LayerSpec::dense(1, 1, false)}, HeadKind::MSE));
  ParamSet p;
  p.insert("fc0.w", Matrix{{2.0}});
  EXPECT_DOUBLE_EQ(lin.forward(p, regression_batch(Matrix{{3.0}}, Matrix{{0.0}})).loss, 18.0);
  p.mutable_at("fc0.w")(0, 0) = 0.0;
  EXPECT_DOUBLE_EQ(lin.forward(p, regression_batch(Matrix{{3.0}}, Matrix{{0.0}})).loss, 0.0);

  const Network soft(make_spec({1, 1, 3}, {LayerSpec::dense(3, 5, false)}, HeadKind::SoftmaxCrossEntropy));
  ParamSet q;
  q.insert("fc0.w", Matrix(3, 5));
  Batch b;
  b.inputs = Matrix{{1, 2, 3}, {4, 5, 6}};
  b.labels = {0, 4};
  EXPECT_NEAR(soft.forward(q, b).loss, std::log(5.0), 1e-15);
}

TEST(Forward, ShapeAndLabelErrors) {
  const Network net(make_spec({1, 1, 3}, {LayerSpec::dense(3, 2)}, HeadKind::SoftmaxCrossEntropy));
  const ParamSet p = random_params(net, 1);
  Batch b;
  b.inputs = Matrix(2, 4);
  b.labels = {0, 1};
  EXPECT_THROW(net.forward(p, b), ShapeError);
  b.inputs = Matrix(2, 3);
  b.labels = {0, 7};
  EXPECT_THROW(net.forward(p, b), ShapeError);
  ParamSet missing;
  EXPECT_THROW(net.check_params(missing), KeyError);
}

TEST(Forward, NonFiniteActivationNamesLayer) {
  const Network net(make_spec({1, 1, 2}, {LayerSpec::dense(2, 2), LayerSpec::relu(), LayerSpec::dense(2, 1)},
                              HeadKind::MSE));
  ParamSet p = random_params(net, 2);
  p.mutable_at("fc0.w")(0, 0) = 1e308;
  p.mutable_at("fc0.w")(1, 0) = 1e308;
  try {
    net.forward(p, regression_batch(Matrix{{10.0, 10.0}}, Matrix{{0.0}}));
    FAIL() << "expected NumericsError";
  } catch (const NumericsError& e) {
    EXPECT_NE(std::string(e.what()).find("fc0"), std::string::npos) << e.what();
  }
}

TEST(Backward, ScalarFactorizedChainRule) {
  const Network net(make_spec({1, 1, 1}, {LayerSpec::factorized_dense(1, 1, 1, false)}, HeadKind::MSE));
  ParamSet p;
  const double u = 1.5, v = -0.7, x = 2.0, y = 0.3;
  p.insert("fc0.u", Matrix{{u}});
  p.insert("fc0.v", Matrix{{v}});
  const auto fwd = net.forward(p, regression_batch(Matrix{{x}}, Matrix{{y}}));
  const Gradients g = net.backward(p, fwd.cache);
  const double r = u * v * x - y;
  EXPECT_NEAR(fwd.loss, 0.5 * r * r, 1e-15);
  EXPECT_NEAR(g.at("fc0.u")(0, 0), r * x * v, 1e-15);
  EXPECT_NEAR(g.at("fc0.v")(0, 0), r * x * u, 1e-15);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const Network net(make_spec({1, 1, 4}, {LayerSpec::factorized_dense(4, 3, 2), LayerSpec::relu(),
                                          LayerSpec::dense(3, 2)},
                              HeadKind::MSE));
  const ParamSet p = random_params(net, 3);
  Rng rng(4);
  const auto fwd = net.forward(p, regression_batch(gaussian_matrix(rng, 5, 4, 1.0), Matrix(5, 2)));
  const Gradients g = net.backward_from(p, fwd.cache, Matrix(5, 2));
  for (const auto& [name, m] : g.entries()) EXPECT_EQ(max_abs(m), 0.0) << name;
}

TEST(Backward, StaleCacheRejected) {
  const Network net(make_spec({1, 1, 2}, {LayerSpec::dense(2, 1)}, HeadKind::MSE));
  ParamSet p = random_params(net, 5);
  const auto fwd = net.forward(p, regression_batch(Matrix{{1.0, 2.0}}, Matrix{{0.0}}));
  p.mutable_at("fc0.w")(0, 0) += 1.0;
  EXPECT_THROW(net.backward(p, fwd.cache), StateError);
  EXPECT_THROW(net.backward(p, ForwardCache{}), StateError);
}

// ∇U = ∇W·V and ∇V = ∇Wᵀ·U, with ∇W from the unfactorized network at W = UVᵀ.
TEST(Backward, FactorGradientsFromComposedGradient) {
  const NetworkSpec fs = make_spec({1, 1, 6}, {LayerSpec::factorized_dense(6, 5, 3), LayerSpec::relu(),
                                               LayerSpec::dense(5, 2)},
                                   HeadKind::MSE);
  const Network fnet(fs);
  const Network dnet(fs.unfactorized());
  const ParamSet fp = random_params(fnet, 6);
  const ParamSet dp = compose_params(fs, fp);
  Rng rng(7);
  const Batch b = regression_batch(gaussian_matrix(rng, 8, 6, 1.0), gaussian_matrix(rng, 8, 2, 1.0));
  const Gradients gf = fnet.backward(fp, fnet.forward(fp, b).cache);
  const Gradients gd = dnet.backward(dp, dnet.forward(dp, b).cache);
  const Matrix& gw = gd.at("fc0.w");
  EXPECT_LE(max_abs_diff(gf.at("fc0.u"), matmul(gw, fp.at("fc0.v"))), 1e-12);
  EXPECT_LE(max_abs_diff(gf.at("fc0.v"), matmul_tn(gw, fp.at("fc0.u"))), 1e-12);
}

TEST(Backward, FiniteDifferenceMlp) {
  const Network net(make_spec({1, 1, 5}, {LayerSpec::dense(5, 8), LayerSpec::relu(),
                                          LayerSpec::factorized_dense(8, 6, 3), LayerSpec::relu(),
                                          LayerSpec::dense(6, 3)},
                              HeadKind::SoftmaxCrossEntropy));
  const ParamSet p = random_params(net, 8);
  Rng rng(9);
  Batch b;
  b.inputs = gaussian_matrix(rng, 4, 5, 1.0);
  b.labels = {0, 2, 1, 2};
  EXPECT_LT(max_fd_error(net, p, b), 1e-6);
}

TEST(Backward, FiniteDifferenceCnnAllLayerKinds) {
  const Network net(make_spec({4, 5, 2}, {LayerSpec::conv(3, 3, 2, 3), LayerSpec::relu(),
                                          LayerSpec::factorized_conv(3, 2, 3, 4, 2, Padding::Valid),
                                          LayerSpec::relu(), LayerSpec::flatten(),
                                          LayerSpec::factorized_dense(2 * 4 * 4, 3, 2)},
                              HeadKind::MSE));
  const ParamSet p = random_params(net, 10);
  Rng rng(11);
  const Batch b = regression_batch(gaussian_matrix(rng, 3, 40, 1.0), gaussian_matrix(rng, 3, 3, 1.0));
  EXPECT_LT(max_fd_error(net, p, b), 1e-6);
}

TEST(Forward, FactorizedMatchesComposedDense) {
  Rng rng(12);
  const NetworkSpec fs = make_spec({1, 1, 7}, {LayerSpec::factorized_dense(7, 9, 4)}, HeadKind::MSE);
  const Network fnet(fs), dnet(fs.unfactorized());
  const ParamSet fp = random_params(fnet, 13);
  const Matrix x = gaussian_matrix(rng, 6, 7, 1.0);
  EXPECT_LE(max_abs_diff(fnet.predict(fp, x), dnet.predict(compose_params(fs, fp), x)), 1e-10);
}

TEST(Forward, FullRankSvdFactorsMatchUnfactorized) {
  const NetworkSpec ds = make_spec({1, 1, 6}, {LayerSpec::dense(6, 4), LayerSpec::relu(), LayerSpec::dense(4, 3)},
                                   HeadKind::MSE);
  const Network dnet(ds);
  const ParamSet dp = random_params(dnet, 14);
  const NetworkSpec fs = ds.factorized(1.0);
  const Network fnet(fs);
  const ParamSet fp = factorize_params(fs, dp, InitKind::Spectral);
  Rng rng(15);
  const Matrix x = gaussian_matrix(rng, 5, 6, 1.0);
  EXPECT_LE(max_abs_diff(fnet.predict(fp, x), dnet.predict(dp, x)), 1e-10);
}

TEST(Conv, MatchesNaiveLoops) {
  Rng rng(16);
  const TensorShape in{5, 4, 3};
  const Matrix x = gaussian_matrix(rng, 2, in.size(), 1.0);
  for (Padding pad : {Padding::Same, Padding::Valid}) {
    const Matrix k = gaussian_matrix(rng, 3 * 2 * 3, 4, 1.0);
    EXPECT_LE(max_abs_diff(conv_forward(x, in, k, 3, 2, pad), naive_conv(x, in, k, 3, 2, 4, pad)), 1e-12);
  }
  EXPECT_EQ(conv_output_shape(in, 3, 3, 7, Padding::Valid), (TensorShape{3, 2, 7}));
  EXPECT_EQ(conv_output_shape(in, 3, 3, 7, Padding::Same), (TensorShape{5, 4, 7}));
}

TEST(Conv, OneByOneIdentity) {
  Rng rng(17);
  const TensorShape in{3, 3, 1};
  const Matrix x = gaussian_matrix(rng, 2, 9, 1.0);
  const FactorizedParam p{Matrix{{1.0}}, Matrix{{1.0}}, KernelShape{1, 1, 1, 1}};
  EXPECT_EQ(conv_forward_factorized(x, in, p, Padding::Same), x);
}

TEST(Conv, ZeroVGivesZeroOutput) {
  Rng rng(18);
  const TensorShape in{4, 4, 2};
  const Matrix x = gaussian_matrix(rng, 2, in.size(), 1.0);
  const FactorizedParam p{gaussian_matrix(rng, 18, 2, 1.0), Matrix(3, 2), KernelShape{3, 3, 2, 3}};
  EXPECT_EQ(max_abs(conv_forward_factorized(x, in, p, Padding::Same)), 0.0);
}

TEST(Conv, FullRankFactorsMatchUnfactorized) {
  Rng rng(19);
  const TensorShape in{5, 5, 2};
  const Matrix kernel = gaussian_matrix(rng, 3 * 3 * 2, 4, 1.0);
  FactorizedParam p = spectral_init(kernel, 4);
  p.kernel = KernelShape{3, 3, 2, 4};
  const Matrix x = gaussian_matrix(rng, 3, in.size(), 1.0);
  EXPECT_LE(max_abs_diff(conv_forward_factorized(x, in, p, Padding::Same),
                         conv_forward(x, in, kernel, 3, 3, Padding::Same)),
            1e-10);
}

TEST(Forward, DeterministicLoss) {
  const Network net(make_spec({1, 1, 4}, {LayerSpec::factorized_dense(4, 4, 2), LayerSpec::relu(),
                                          LayerSpec::dense(4, 2)},
                              HeadKind::SoftmaxCrossEntropy));
  const ParamSet p1 = random_params(net, 20), p2 = random_params(net, 20);
  EXPECT_EQ(p1, p2);
  Rng rng(21);
  Batch b;
  b.inputs = gaussian_matrix(rng, 3, 4, 1.0);
  b.labels = {1, 0, 1};
  EXPECT_EQ(net.forward(p1, b).loss, net.forward(p2, b).loss);
}
