#include "lrlab/schemes.hpp"

#include <cmath>
#include <numeric>

#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"

namespace lrlab {

namespace {

void require_lambda(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw InvalidInput("penalty coefficient must be a finite value >= 0");
  }
}

void require_factor_pair(const Matrix& u, const Matrix& v) {
  if (u.empty() || v.empty()) throw RankError("factor pair is empty");
  if (u.cols() != v.cols()) throw ShapeError("factor ranks differ");
}

FactorizedParam spectral_factors(const Matrix& w0, std::size_t r, bool keep_scale) {
  const std::size_t k = std::min(w0.rows(), w0.cols());
  if (r < 1 || r > k) {
    throw RankError("spectral init: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(k) + "]");
  }
  const SvdResult s = truncate(svd(w0), r);
  FactorizedParam p{s.u, s.v, {}};
  if (keep_scale) {
    for (std::size_t j = 0; j < r; ++j) {
      const double root = std::sqrt(s.sigma[j]);
      for (std::size_t i = 0; i < p.u.rows(); ++i) p.u(i, j) *= root;
      for (std::size_t i = 0; i < p.v.rows(); ++i) p.v(i, j) *= root;
    }
  }
  return p;
}

}  // namespace

std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::He: return "he";
    case InitKind::Spectral: return "spectral";
    case InitKind::SpectralOnes: return "spectral_ones";
  }
  return "unknown";
}

std::string to_string(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::None: return "none";
    case PenaltyKind::L2Factors: return "l2";
    case PenaltyKind::FrobeniusDecay: return "frobenius_decay";
    case PenaltyKind::WeightDecayFull: return "weight_decay";
  }
  return "unknown";
}

InitKind parse_init_kind(std::string_view name) {
  if (name == "he") return InitKind::He;
  if (name == "spectral") return InitKind::Spectral;
  if (name == "spectral_ones") return InitKind::SpectralOnes;
  throw ConfigError("unknown init scheme '" + std::string(name) +
                    "' (expected he, spectral or spectral_ones)");
}

PenaltyKind parse_penalty_kind(std::string_view name) {
  if (name == "none") return PenaltyKind::None;
  if (name == "l2") return PenaltyKind::L2Factors;
  if (name == "frobenius_decay") return PenaltyKind::FrobeniusDecay;
  if (name == "weight_decay") return PenaltyKind::WeightDecayFull;
  throw ConfigError("unknown regulariser '" + std::string(name) +
                    "' (expected none, l2, frobenius_decay or weight_decay)");
}

Matrix he_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  if (fan_in < 1) throw InvalidInput("he_init: fan_in must be >= 1");
  return gaussian_matrix(rng, rows, cols, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

FactorizedParam he_factor_init(Rng& rng, std::size_t m, std::size_t n, std::size_t r) {
  if (r < 1 || r > std::min(m, n)) throw RankError("he_factor_init: rank out of range");
  Matrix u = he_init(rng, m, r, m);
  Matrix v = he_init(rng, n, r, r);
  return {std::move(u), std::move(v), {}};
}

FactorizedParam spectral_init(const Matrix& w0, std::size_t r) {
  return spectral_factors(w0, r, true);
}

FactorizedParam spectral_ones_init(const Matrix& w0, std::size_t r) {
  return spectral_factors(w0, r, false);
}

FactorizedParam init_factors(const InitScheme& scheme, Rng& rng, std::size_t m, std::size_t n,
                             std::size_t r) {
  if (scheme.kind == InitKind::He) return he_factor_init(rng, m, n, r);
  if (!scheme.source) throw InvalidInput("spectral schemes need a source matrix");
  if (scheme.source->rows() != m || scheme.source->cols() != n) {
    throw ShapeError("spectral source matrix has the wrong shape");
  }
  return scheme.kind == InitKind::Spectral ? spectral_init(*scheme.source, r)
                                           : spectral_ones_init(*scheme.source, r);
}

PenaltyResult l2_factor_penalty(const Matrix& u, const Matrix& v, double lambda) {
  require_lambda(lambda);
  require_factor_pair(u, v);
  return {0.5 * lambda * (sum_squares(u) + sum_squares(v)), lambda * u, lambda * v};
}

PenaltyResult frobenius_decay_penalty(const Matrix& u, const Matrix& v, double lambda) {
  require_lambda(lambda);
  require_factor_pair(u, v);
  // (UVᵀ)V = U(VᵀV) and (UVᵀ)ᵀU = V(UᵀU); only r x r Gram matrices are formed.
  const Matrix gram_u = matmul_tn(u, u);
  const Matrix gram_v = matmul_tn(v, v);
  const double norm2 = dot(gram_u, gram_v);
  return {0.5 * lambda * norm2, lambda * matmul(u, gram_v), lambda * matmul(v, gram_u)};
}

PenaltyResult factor_penalty(const RegPenalty& reg, const Matrix& u, const Matrix& v) {
  switch (reg.kind) {
    case PenaltyKind::None: return {0.0, Matrix(u.rows(), u.cols()), Matrix(v.rows(), v.cols())};
    case PenaltyKind::L2Factors: return l2_factor_penalty(u, v, reg.lambda);
    case PenaltyKind::FrobeniusDecay:
    case PenaltyKind::WeightDecayFull: return frobenius_decay_penalty(u, v, reg.lambda);
  }
  throw InvalidInput("unknown penalty kind");
}

double nuclear_gap(const Matrix& u, const Matrix& v) {
  require_factor_pair(u, v);
  const auto sigma = singular_values(matmul_nt(u, v));
  const double nuclear = std::accumulate(sigma.begin(), sigma.end(), 0.0);
  return 0.5 * (sum_squares(u) + sum_squares(v)) - nuclear;
}

ParamSet initialize_params(const Network& net, const Rng& rng, InitKind factor_init) {
  ParamSet params;
  const auto& layers = net.spec().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (!l.affine()) continue;
    Rng stream = rng.split(i);
    const std::size_t m = l.weight_rows();
    const std::size_t n = l.weight_cols();
    if (!l.factorized()) {
      params.insert(weight_key(l.name), he_init(stream, m, n, l.fan_in()));
    } else {
      InitScheme scheme{factor_init, std::nullopt};
      if (factor_init != InitKind::He) scheme.source = he_init(stream, m, n, l.fan_in());
      FactorizedParam p = init_factors(scheme, stream, m, n, l.rank);
      params.insert(u_key(l.name), std::move(p.u));
      params.insert(v_key(l.name), std::move(p.v));
    }
    if (l.bias) params.insert(bias_key(l.name), Matrix(1, l.out));
  }
  return params;
}

ParamSet factorize_params(const NetworkSpec& target, const ParamSet& params, InitKind kind) {
  if (kind == InitKind::He) {
    throw ConfigError("switching to low rank needs a spectral scheme, not he");
  }
  ParamSet out;
  for (const LayerSpec& l : target.layers) {
    if (!l.affine()) continue;
    if (l.factorized()) {
      const Matrix& w = params.at(weight_key(l.name));
      FactorizedParam p = kind == InitKind::Spectral ? spectral_init(w, l.rank)
                                                     : spectral_ones_init(w, l.rank);
      out.insert(u_key(l.name), std::move(p.u));
      out.insert(v_key(l.name), std::move(p.v));
    } else {
      out.insert(weight_key(l.name), params.at(weight_key(l.name)));
    }
    if (l.bias) out.insert(bias_key(l.name), params.at(bias_key(l.name)));
  }
  return out;
}

double apply_penalties(const NetworkSpec& spec, const ParamSet& params, const RegPenalty& factor_reg,
                       double weight_decay, Gradients* grads) {
  require_lambda(weight_decay);
  double loss = 0.0;
  for (const LayerSpec& l : spec.layers) {
    if (!l.affine()) continue;
    if (l.factorized()) {
      if (factor_reg.kind == PenaltyKind::None || factor_reg.lambda == 0.0) continue;
      const std::string uk = u_key(l.name), vk = v_key(l.name);
      PenaltyResult p = factor_penalty(factor_reg, params.at(uk), params.at(vk));
      loss += p.loss;
      if (grads != nullptr) {
        grads->mutable_at(uk) += p.grad_u;
        grads->mutable_at(vk) += p.grad_v;
      }
    } else if (weight_decay > 0.0) {
      const std::string wk = weight_key(l.name);
      const Matrix& w = params.at(wk);
      loss += 0.5 * weight_decay * sum_squares(w);
      if (grads != nullptr) grads->mutable_at(wk).axpy(weight_decay, w);
    }
  }
  return loss;
}

}  // namespace lrlab
