#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "lrlab/matrix.hpp"
#include "lrlab/net.hpp"
#include "lrlab/rng.hpp"

namespace lrlab {

enum class InitKind { He, Spectral, SpectralOnes };

// Penalty on factor pairs (L2Factors, FrobeniusDecay) or on plain weight
// matrices (WeightDecayFull).
enum class PenaltyKind { None, L2Factors, FrobeniusDecay, WeightDecayFull };

struct InitScheme {
  InitKind kind = InitKind::He;
  // Reference matrix for the spectral schemes.
  std::optional<Matrix> source;
};

struct RegPenalty {
  PenaltyKind kind = PenaltyKind::None;
  double lambda = 0.0;
};

// Config names: "he", "spectral", "spectral_ones", "none", "l2",
// "frobenius_decay", "weight_decay".
std::string to_string(InitKind k);
std::string to_string(PenaltyKind k);
InitKind parse_init_kind(std::string_view name);
PenaltyKind parse_penalty_kind(std::string_view name);

// N(0, 2 / fan_in) entries.
Matrix he_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in);

// Factors initialised directly with He statistics: U ~ N(0, 2/m), V ~ N(0, 2/r).
FactorizedParam he_factor_init(Rng& rng, std::size_t m, std::size_t n, std::size_t r);

// U = Û[:, :r] sqrt(Σr), V = V̂[:, :r] sqrt(Σr), so U Vᵀ is the best rank-r
// approximation of w0 and the two factors carry equal energy.
FactorizedParam spectral_init(const Matrix& w0, std::size_t r);

// The singular directions of w0 alone: U = Û[:, :r], V = V̂[:, :r].
FactorizedParam spectral_ones_init(const Matrix& w0, std::size_t r);

// Factors for scheme.kind. He draws from rng; the spectral kinds use
// scheme.source.
FactorizedParam init_factors(const InitScheme& scheme, Rng& rng, std::size_t m, std::size_t n,
                             std::size_t r);

struct PenaltyResult {
  double loss = 0.0;
  Matrix grad_u;
  Matrix grad_v;
};

// λ/2 (‖U‖² + ‖V‖²)
PenaltyResult l2_factor_penalty(const Matrix& u, const Matrix& v, double lambda);
// λ/2 ‖U Vᵀ‖²
PenaltyResult frobenius_decay_penalty(const Matrix& u, const Matrix& v, double lambda);
PenaltyResult factor_penalty(const RegPenalty& reg, const Matrix& u, const Matrix& v);

// ½(‖U‖² + ‖V‖²) − ‖U Vᵀ‖_*, non-negative up to rounding.
double nuclear_gap(const Matrix& u, const Matrix& v);

// Fresh parameters for a network. Every affine layer draws from its own
// stream rng.split(layer index), so layer i's reference weight is identical
// whether the layer is later factorized or not. Biases start at zero.
ParamSet initialize_params(const Network& net, const Rng& rng, InitKind factor_init);

// Parameters for `target` (a factorized version of the architecture that
// produced `params`). Factorized layers get spectral or spectral-ones factors
// of the trained weight; everything else is copied.
ParamSet factorize_params(const NetworkSpec& target, const ParamSet& params, InitKind kind);

// Adds the regularisation gradient into grads and returns the penalty value.
// Factor pairs use `factor_reg`; plain weight matrices use λ = weight_decay.
// Biases are never decayed.
double apply_penalties(const NetworkSpec& spec, const ParamSet& params, const RegPenalty& factor_reg,
                       double weight_decay, Gradients* grads);

}  // namespace lrlab
