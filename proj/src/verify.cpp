#include "lrlab/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "lrlab/analytics.hpp"
#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/rng.hpp"

namespace lrlab {

namespace {

double objective(const Network& net, const ParamSet& params, const Batch& batch,
                 const RegPenalty& reg, double weight_decay) {
  const double data = net.forward(params, batch).loss;
  return data + apply_penalties(net.spec(), params, reg, weight_decay, nullptr);
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  return gaussian_matrix(rng, rows, cols, 1.0);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

CheckResult timed(const std::string& name, const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const Error& e) {
    r.passed = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

Batch reference_batch(const Network& net, Rng& rng, std::size_t n) {
  Batch b;
  const std::size_t in = net.spec().input.size();
  const std::size_t out = net.spec().output_size();
  b.inputs = random_matrix(rng, n, in);
  if (net.spec().head == HeadKind::SoftmaxCrossEntropy) {
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(out));
  } else {
    b.targets = random_matrix(rng, n, out);
  }
  return b;
}

void check_update_identity(CheckResult& r, Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 2 + rng.below(15);
    const std::size_t n = 2 + rng.below(15);
    const std::size_t r_max = std::min(m, n) / 2;
    const std::size_t rank = 1 + rng.below(r_max);
    const Matrix u = random_matrix(rng, m, rank);
    const Matrix v = random_matrix(rng, n, rank);
    const Matrix g = random_matrix(rng, m, n);
    const double alpha = 0.01 + 0.2 * rng.uniform();
    const double scale = max_abs(matmul_nt(u, v));
    worst = std::max(worst, update_identity_check(u, v, g, alpha) / scale);
  }
  r.value = worst;
  r.threshold = 1e-12;
  r.passed = worst <= r.threshold;
  r.detail = "max |A - B| / max|W| over 100 instances";
}

void check_normalized_update(CheckResult& r, Rng& rng) {
  const double alphas[] = {1e-2, 5e-3, 2.5e-3};
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_matrix(rng, 6, 4);
    const Matrix g = random_matrix(rng, 6, 4);
    const NormalizedUpdateReport rep = normalized_update_check(w, g, alphas);
    for (double ratio : rep.ratios) {
      const double dev = std::isfinite(ratio) ? std::abs(ratio - 4.0) : INFINITY;
      worst = std::max(worst, dev);
    }
  }
  r.value = worst;
  r.threshold = 0.5;
  r.passed = worst <= r.threshold;
  r.detail = "max |r(a)/r(a/2) - 4| over 20 instances";
}

void check_gradients(CheckResult& r, const NetworkSpec& spec, std::uint64_t seed,
                     const RegPenalty& reg, double weight_decay) {
  const Network net(spec);
  const Rng root(seed);
  ParamSet params = initialize_params(net, root, InitKind::He);
  Rng data = root.split(1000);
  // Non-zero biases so their gradients are exercised away from the origin.
  for (auto& [name, value] : params.mutable_entries()) {
    if (name.ends_with(".b")) value = gaussian_matrix(data, value.rows(), value.cols(), 0.1);
  }
  const Batch batch = reference_batch(net, data, 4);
  const GradientCheckResult g = gradient_check(net, params, batch, reg, weight_decay);
  r.value = g.max_rel_error;
  r.threshold = 1e-6;
  r.passed = g.max_rel_error < r.threshold;
  r.detail = std::to_string(g.checked) + " parameters, worst " + g.worst_param;
}

void check_spectral_init(CheckResult& r, Rng& rng) {
  double worst_recon = 0.0, worst_tail = 0.0, worst_balance = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 4 + rng.below(20);
    const std::size_t n = 4 + rng.below(20);
    const Matrix w = random_matrix(rng, m, n);
    const std::size_t k = std::min(m, n);
    const FactorizedParam full = spectral_init(w, k);
    worst_recon = std::max(worst_recon, frobenius_norm(compose(full) - w) / frobenius_norm(w));
    const std::size_t rank = 1 + rng.below(k - 1);
    const FactorizedParam low = spectral_init(w, rank);
    const std::vector<double> sigma = singular_values(w);
    double tail = 0.0;
    for (std::size_t i = rank; i < sigma.size(); ++i) tail += sigma[i] * sigma[i];
    worst_tail = std::max(worst_tail, std::abs(frobenius_norm(w - compose(low)) - std::sqrt(tail)));
    const double nu = frobenius_norm(low.u), nv = frobenius_norm(low.v);
    worst_balance = std::max(worst_balance, std::abs(nu - nv) / nu);
  }
  r.value = std::max({worst_recon / 1e-10, worst_tail / 1e-9, worst_balance / 1e-12});
  r.threshold = 1.0;
  r.passed = r.value <= 1.0;
  r.detail = "recon " + fmt(worst_recon) + " (<=1e-10), tail " + fmt(worst_tail) +
             " (<=1e-9), balance " + fmt(worst_balance) + " (<=1e-12)";
}

void check_spectral_ones(CheckResult& r, Rng& rng) {
  double worst_sigma = 0.0, worst_rank = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 4 + rng.below(20);
    const std::size_t n = 4 + rng.below(20);
    const std::size_t rank = 1 + rng.below(std::min(m, n));
    const FactorizedParam p = spectral_ones_init(random_matrix(rng, m, n), rank);
    const Matrix w = compose(p);
    const std::vector<double> sigma = singular_values(w);
    for (std::size_t i = 0; i < rank; ++i)
      worst_sigma = std::max(worst_sigma, std::abs(sigma[i] - 1.0));
    worst_rank = std::max(worst_rank, std::abs(effective_rank(w) - static_cast<double>(rank)));
  }
  r.value = std::max(worst_sigma, worst_rank);
  r.threshold = 1e-9;
  r.passed = r.value <= r.threshold;
  r.detail = "max |sigma - 1| " + fmt(worst_sigma) + ", max |eff_rank - r| " + fmt(worst_rank);
}

void check_mp(CheckResult& r, Rng& rng) {
  const double std = 1.0 / std::sqrt(1000.0);
  const Matrix w = gaussian_matrix(rng, 1000, 500, std);
  const EsdReport rep = esd_vs_mp(w, std);
  const double ratio = std::sqrt(500.0 / 1000.0);
  const double s2 = std * std * 1000.0;
  const double edge_err = std::max(std::abs(rep.edges.lambda_minus - s2 * (1 - ratio) * (1 - ratio)),
                                   std::abs(rep.edges.lambda_plus - s2 * (1 + ratio) * (1 + ratio)));
  r.value = rep.ks_distance;
  r.threshold = 0.05;
  r.passed = rep.ks_distance < 0.05 && edge_err <= 1e-12;
  r.detail = "KS distance; edge error " + fmt(edge_err) + " (<=1e-12)";
}

void check_cost(CheckResult& r, Rng& rng) {
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(2048);
    const std::size_t n = 1 + rng.below(2048);
    const CostReport c = dense_cost(m, n, 1);
    const std::size_t b = c.breakeven_rank;
    const std::size_t fact_b = m * b + b * n;
    const std::size_t fact_b1 = m * (b + 1) + (b + 1) * n;
    if (!(fact_b <= c.full_flops && c.full_flops < fact_b1)) ++violations;
  }
  const CostReport big = dense_cost(1024, 1024, 128);
  const double reduction = static_cast<double>(big.full_flops) / static_cast<double>(big.fact_flops);
  r.value = static_cast<double>(violations);
  r.threshold = 0.0;
  r.passed = violations == 0 && big.fact_flops == 262144 && big.full_flops == 1048576 &&
             big.breakeven_rank == 512;
  r.detail = "breakeven violations over 1000 shapes; 1024x1024 r=128 reduction " + fmt(reduction) +
             "x, breakeven " + std::to_string(big.breakeven_rank);
}

}  // namespace

GradientCheckResult gradient_check(const Network& net, const ParamSet& params, const Batch& batch,
                                   const RegPenalty& reg, double weight_decay, double eps) {
  const ForwardResult fwd = net.forward(params, batch);
  Gradients grads = net.backward(params, fwd.cache);
  apply_penalties(net.spec(), params, reg, weight_decay, &grads);

  GradientCheckResult out;
  ParamSet probe = params;
  for (std::size_t e = 0; e < params.entries().size(); ++e) {
    const std::string& name = params.entries()[e].first;
    const Matrix& analytic = grads.at(name);
    const Matrix& value = params.entries()[e].second;
    for (std::size_t i = 0; i < value.rows(); ++i) {
      for (std::size_t j = 0; j < value.cols(); ++j) {
        const double x = value(i, j);
        probe.mutable_at(name)(i, j) = x + eps;
        const double up = objective(net, probe, batch, reg, weight_decay);
        probe.mutable_at(name)(i, j) = x - eps;
        const double down = objective(net, probe, batch, reg, weight_decay);
        probe.mutable_at(name)(i, j) = x;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic(i, j);
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
        if (out.checked == 0 || rel > out.max_rel_error) {
          out.max_rel_error = rel;
          out.worst_param = name + "[" + std::to_string(i) + "," + std::to_string(j) + "]";
        }
        ++out.checked;
      }
    }
  }
  return out;
}

NetworkSpec reference_mlp_spec() {
  NetworkSpec s;
  s.input = {1, 1, 6};
  s.layers = {LayerSpec::factorized_dense(6, 8, 3), LayerSpec::relu(),
              LayerSpec::factorized_dense(8, 5, 2), LayerSpec::relu(), LayerSpec::dense(5, 3)};
  s.head = HeadKind::SoftmaxCrossEntropy;
  s.validate();
  return s;
}

NetworkSpec reference_cnn_spec() {
  NetworkSpec s;
  s.input = {5, 5, 2};
  s.layers = {LayerSpec::conv(3, 3, 2, 3), LayerSpec::relu(),
              LayerSpec::factorized_conv(3, 3, 3, 4, 2), LayerSpec::relu(), LayerSpec::flatten(),
              LayerSpec::dense(5 * 5 * 4, 2)};
  s.head = HeadKind::MSE;
  s.validate();
  return s;
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed) {
  const Rng root(seed);
  std::vector<CheckResult> out;
  out.push_back(timed("update_identity", [&](CheckResult& r) {
    Rng rng = root.split(1);
    check_update_identity(r, rng);
  }));
  out.push_back(timed("normalized_update", [&](CheckResult& r) {
    Rng rng = root.split(2);
    check_normalized_update(r, rng);
  }));
  out.push_back(timed("gradient_mlp", [&](CheckResult& r) {
    check_gradients(r, reference_mlp_spec(), seed + 3,
                    RegPenalty{PenaltyKind::FrobeniusDecay, 1e-2}, 1e-2);
  }));
  out.push_back(timed("gradient_cnn", [&](CheckResult& r) {
    check_gradients(r, reference_cnn_spec(), seed + 4, RegPenalty{PenaltyKind::L2Factors, 1e-2},
                    1e-2);
  }));
  out.push_back(timed("spectral_init", [&](CheckResult& r) {
    Rng rng = root.split(5);
    check_spectral_init(r, rng);
  }));
  out.push_back(timed("spectral_ones", [&](CheckResult& r) {
    Rng rng = root.split(6);
    check_spectral_ones(r, rng);
  }));
  out.push_back(timed("marchenko_pastur", [&](CheckResult& r) {
    Rng rng = root.split(8);
    check_mp(r, rng);
  }));
  out.push_back(timed("cost_model", [&](CheckResult& r) {
    Rng rng = root.split(11);
    check_cost(r, rng);
  }));
  return out;
}

}  // namespace lrlab
