#include "lrlab/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lrlab/errors.hpp"
#include "lrlab/schemes.hpp"
#include "lrlab/trainer.hpp"

namespace lrlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// v − ŵ(ŵ·v), all matrices read as vectors.
Matrix project_out(const Matrix& v, const Matrix& w_hat) {
  Matrix out = v;
  out.axpy(-dot(w_hat, v), w_hat);
  return out;
}

int sign(double x) { return (x > 0.0) - (x < 0.0); }

bool is_weight_layer(const LayerSpec& l) {
  return l.affine() && (l.factorized() || l.low_rank_eligible);
}

EffectiveRankReport summarize(std::vector<LayerRank> layers) {
  if (layers.empty()) throw DegenerateInput("no eligible layers for an effective-rank report");
  double sum = 0.0;
  for (const auto& l : layers) sum += l.effective_rank;
  const double mean = sum / static_cast<double>(layers.size());
  return {std::move(layers), mean};
}

}  // namespace

double update_identity_check(const Matrix& u, const Matrix& v, const Matrix& grad_w, double alpha) {
  if (u.cols() != v.cols()) throw ShapeError("update_identity_check: factor ranks differ");
  if (grad_w.rows() != u.rows() || grad_w.cols() != v.rows()) {
    throw ShapeError("update_identity_check: gradient shape does not match U Vᵀ");
  }
  const Matrix grad_u = matmul(grad_w, v);
  const Matrix grad_v = matmul_tn(grad_w, u);
  const Matrix stepped = matmul_nt(u - alpha * grad_u, v - alpha * grad_v);

  const Matrix w = matmul_nt(u, v);
  Matrix first_order = matmul_nt(grad_u, v);        // ∇W V Vᵀ
  first_order += matmul(matmul_nt(u, u), grad_w);  // U Uᵀ ∇W
  const Matrix second_order = matmul(matmul_nt(grad_w, w), grad_w);  // ∇W Wᵀ ∇W

  Matrix expansion = w;
  expansion.axpy(-alpha, first_order);
  expansion.axpy(alpha * alpha, second_order);
  return max_abs_diff(stepped, expansion);
}

NormalizedUpdateReport normalized_update_check(const FactorizedParam& factors,
                                               const Matrix& grad_w_hat,
                                               std::span<const double> alphas) {
  const Matrix w = compose(factors);
  require_same_shape(w, grad_w_hat, "normalized_update_check gradient");
  const double norm = std::sqrt(sum_squares(w));
  if (!(norm > 0.0)) throw DegenerateInput("normalized_update_check: zero weight");
  if (alphas.size() < 2) throw InvalidInput("normalized_update_check needs at least two step sizes");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0) || (i > 0 && !(alphas[i] < alphas[i - 1]))) {
      throw InvalidInput("normalized_update_check: step sizes must be positive and decreasing");
    }
  }
  const Matrix w_hat = w * (1.0 / norm);
  // Gradient with respect to W through the normalisation: ∇W = G̃ / ‖W‖.
  const Matrix g_tilde = project_out(grad_w_hat, w_hat);
  const Matrix grad_w = g_tilde * (1.0 / norm);
  const Matrix& u = factors.u;
  const Matrix& v = factors.v;
  const Matrix grad_u = matmul(grad_w, v);
  const Matrix grad_v = matmul_tn(grad_w, u);

  Matrix direction = matmul(g_tilde, matmul_nt(v, v));
  direction += matmul(matmul_nt(u, u), g_tilde);
  const Matrix tangent = project_out(direction, w_hat);

  NormalizedUpdateReport report;
  for (double alpha : alphas) {
    const Matrix stepped = matmul_nt(u - alpha * grad_u, v - alpha * grad_v);
    Matrix change = stepped * (1.0 / std::sqrt(sum_squares(stepped)));
    change -= w_hat;
    change.axpy(alpha / (norm * norm), tangent);
    report.alphas.push_back(alpha);
    report.residuals.push_back(std::sqrt(sum_squares(change)));
  }
  for (std::size_t i = 0; i + 1 < report.residuals.size(); ++i) {
    const double denom = report.residuals[i + 1];
    report.ratios.push_back(denom > 0.0 ? report.residuals[i] / denom : kNaN);
  }
  return report;
}

NormalizedUpdateReport normalized_update_check(const Matrix& w, const Matrix& grad_w_hat,
                                               std::span<const double> alphas) {
  if (!(sum_squares(w) > 0.0)) throw DegenerateInput("normalized_update_check: zero weight");
  return normalized_update_check(spectral_init(w, std::min(w.rows(), w.cols())), grad_w_hat, alphas);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("kendall_tau: series lengths differ");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  long long score = 0;
  for (std::size_t i = 0; i + 1 < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) score += sign(x[j] - x[i]) * sign(y[j] - y[i]);
  return static_cast<double>(score) / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

Matrix layer_weight(const ParamSet& params, const std::string& layer) {
  if (params.contains(u_key(layer)) && params.contains(v_key(layer))) {
    return compose(FactorizedParam{params.at(u_key(layer)), params.at(v_key(layer)), {}});
  }
  if (params.contains(weight_key(layer))) return params.at(weight_key(layer));
  throw KeyError("no weight for layer '" + layer + "'");
}

std::vector<std::string> weight_layers(const ParamSet& params) {
  std::vector<std::string> names;
  for (const auto& [key, m] : params.entries()) {
    if (key.ends_with(".w") || key.ends_with(".u")) names.push_back(key.substr(0, key.size() - 2));
  }
  return names;
}

TrajectoryReport sv_trajectory(const CheckpointSeries& checkpoints, const std::string& layer) {
  if (checkpoints.size() < 2) throw InsufficientData("sv_trajectory needs at least two checkpoints");
  TrajectoryReport r;
  r.layer = layer;
  for (const auto& [step, params] : checkpoints) {
    const auto sigma = singular_values(layer_weight(params, layer));
    const double total = std::accumulate(sigma.begin(), sigma.end(), 0.0);
    r.steps.push_back(step);
    r.top1_share.push_back(total > 0.0 ? sigma.front() / total : kNaN);
    r.effective_rank.push_back(sigma.front() > 0.0 ? total / sigma.front() : kNaN);
    r.singular_values.push_back(sigma);
  }
  std::vector<double> steps(r.steps.begin(), r.steps.end());
  r.top1_trend = kendall_tau(steps, r.top1_share);
  return r;
}

EffectiveRankReport effective_rank_report(const NetworkSpec& spec, const ParamSet& params) {
  std::vector<LayerRank> layers;
  for (const LayerSpec& l : spec.layers) {
    if (!is_weight_layer(l)) continue;
    layers.push_back({l.name, effective_rank(layer_weight(params, l.name))});
  }
  return summarize(std::move(layers));
}

EffectiveRankReport effective_rank_report(const ParamSet& params) {
  std::vector<LayerRank> layers;
  for (const auto& name : weight_layers(params)) {
    layers.push_back({name, effective_rank(layer_weight(params, name))});
  }
  return summarize(std::move(layers));
}

double ks_distance_to_mp(std::span<const double> sorted_eigenvalues, const MpParams& p) {
  const auto n = static_cast<double>(sorted_eigenvalues.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted_eigenvalues.size(); ++i) {
    const double f = mp_cdf(sorted_eigenvalues[i], p);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

EsdReport esd_vs_mp(const Matrix& w, double assumed_std, std::size_t bins) {
  if (!(assumed_std > 0.0)) throw InvalidInput("esd_vs_mp: assumed std must be positive");
  if (bins < 1) throw InvalidInput("esd_vs_mp: need at least one histogram bin");
  const std::size_t long_side = std::max(w.rows(), w.cols());
  const std::size_t short_side = std::min(w.rows(), w.cols());
  if (long_side < 200 || short_side < 100) {
    throw InsufficientData("esd_vs_mp needs at least a 200 x 100 matrix, got " +
                           std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  }
  EsdReport r;
  r.params = MpParams{assumed_std * assumed_std * static_cast<double>(long_side), long_side, short_side};
  r.edges = mp_edges(r.params);
  const auto sigma = singular_values(w);
  r.eigenvalues.reserve(sigma.size());
  for (auto it = sigma.rbegin(); it != sigma.rend(); ++it) r.eigenvalues.push_back(*it * *it);
  r.ks_distance = ks_distance_to_mp(r.eigenvalues, r.params);

  const double lo = std::min(r.eigenvalues.front(), r.edges.lambda_minus);
  const double hi = std::max(r.eigenvalues.back(), r.edges.lambda_plus);
  const double width = (hi - lo) / static_cast<double>(bins);
  const auto n = static_cast<double>(r.eigenvalues.size());
  for (std::size_t b = 0; b < bins; ++b) {
    HistogramBin bin;
    bin.lower = lo + width * static_cast<double>(b);
    bin.upper = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
    bin.mp_expected = n * (mp_cdf(bin.upper, r.params) - mp_cdf(bin.lower, r.params));
    r.histogram.push_back(bin);
  }
  for (double x : r.eigenvalues) {
    auto b = width > 0.0 ? static_cast<std::size_t>((x - lo) / width) : 0;
    r.histogram[std::min(b, bins - 1)].count += 1;
  }
  return r;
}

std::vector<double> interpolation_grid(std::size_t points) {
  if (points < 2) throw InvalidInput("interpolation grid needs at least two points");
  std::vector<double> ts(points);
  for (std::size_t i = 0; i < points; ++i)
    ts[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  return ts;
}

ParamSet composed_params(const NetworkSpec& spec, const ParamSet& params) {
  ParamSet out;
  std::size_t consumed = 0;
  for (const LayerSpec& l : spec.unfactorized().layers) {
    if (!l.affine()) continue;
    if (params.contains(u_key(l.name))) {
      out.insert(weight_key(l.name), layer_weight(params, l.name));
      consumed += 2;
    } else if (params.contains(weight_key(l.name))) {
      out.insert(weight_key(l.name), params.at(weight_key(l.name)));
      ++consumed;
    } else {
      throw ShapeError("parameters have no weight for layer '" + l.name + "'");
    }
    if (l.bias) {
      if (!params.contains(bias_key(l.name))) {
        throw ShapeError("parameters have no bias for layer '" + l.name + "'");
      }
      out.insert(bias_key(l.name), params.at(bias_key(l.name)));
      ++consumed;
    }
  }
  if (consumed != params.size()) {
    throw ShapeError("parameters hold tensors the architecture does not use");
  }
  return out;
}

namespace {

// The architecture params were trained in: spec.unfactorized() with every
// layer that holds a factor pair factorized at that pair's rank.
NetworkSpec spec_for_params(const NetworkSpec& spec, const ParamSet& params) {
  NetworkSpec out = spec.unfactorized();
  for (LayerSpec& l : out.layers) {
    if (!l.affine() || !params.contains(u_key(l.name))) continue;
    l.kind = l.convolutional() ? LayerKind::FactorizedConv : LayerKind::FactorizedDense;
    l.rank = params.at(u_key(l.name)).cols();
  }
  return out;
}

}  // namespace

InterpolationResult interpolate(const ParamSet& theta_b, const ParamSet& theta_l,
                                const NetworkSpec& spec, const Dataset& data,
                                std::span<const double> ts) {
  const Network net(spec.unfactorized());
  const ParamSet a = composed_params(net.spec(), theta_b);
  const ParamSet b = composed_params(net.spec(), theta_l);
  try {
    net.check_params(a);
    net.check_params(b);
  } catch (const KeyError& e) {
    throw ShapeError(e.what());
  }
  InterpolationResult r;
  for (double t : ts) {
    if (!(t >= 0.0 && t <= 1.0)) throw InvalidInput("interpolation coefficients must lie in [0, 1]");
    EvalResult ev;
    if (t == 0.0 || t == 1.0) {
      // Endpoints run in their own architecture so they match evaluate() on
      // the source checkpoint bit for bit.
      const ParamSet& source = t == 0.0 ? theta_b : theta_l;
      ev = evaluate(Network(spec_for_params(spec, source)), source, data);
    } else {
      ParamSet theta;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const auto& [name, ma] = a.entries()[k];
        Matrix m = ma * (1.0 - t);
        m.axpy(t, b.entries()[k].second);
        theta.insert(name, std::move(m));
      }
      ev = evaluate(net, theta, data);
    }
    r.ts.push_back(t);
    r.loss.push_back(ev.loss);
    r.accuracy.push_back(ev.accuracy);
  }
  return r;
}

double loss_barrier(const InterpolationResult& r) {
  if (r.loss.empty()) throw InvalidInput("empty interpolation result");
  const double peak = *std::max_element(r.loss.begin(), r.loss.end());
  return peak - std::max(r.loss.front(), r.loss.back());
}

CostReport dense_cost(std::size_t m, std::size_t n, std::size_t r) {
  if (m == 0 || n == 0 || r == 0) throw InvalidInput("cost model needs positive m, n and r");
  CostReport c;
  c.rows = m;
  c.cols = n;
  c.rank = r;
  c.full_flops = m * n;
  c.fact_flops = m * r + r * n;
  c.full_params = m * n;
  c.fact_params = m * r + r * n;
  c.full_train_memory = m * n + n;
  c.fact_train_memory = m * r + r * n + n + r;
  c.breakeven_rank = (m * n) / (m + n);
  c.economical = c.fact_flops < c.full_flops;
  return c;
}

CostReport conv_cost(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out,
                     std::size_t r) {
  return dense_cost(kh * kw * c_in, c_out, r);
}

CostReport cost_model(const LayerSpec& layer, std::size_t rank) {
  if (!layer.affine()) throw InvalidInput("cost model applies to dense and conv layers only");
  const std::size_t r = rank > 0 ? rank : layer.rank;
  if (r == 0) throw RankError("cost model needs a rank for layer '" + layer.name + "'");
  if (layer.convolutional()) return conv_cost(layer.kernel_h, layer.kernel_w, layer.in, layer.out, r);
  return dense_cost(layer.in, layer.out, r);
}

}  // namespace lrlab
