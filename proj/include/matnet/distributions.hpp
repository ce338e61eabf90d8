#pragma once

#include "matnet/ops.hpp"
#include "matnet/rng.hpp"

#include <string>
#include <vector>

namespace matnet {

inline constexpr double kMinLogVar = -6.0;
inline constexpr double kMaxLogVar = 3.0;
inline constexpr double kProbFloor = 1e-12;

/// Diagonal Gaussian with log-variance clamped to [kMinLogVar, kMaxLogVar].
template <typename S>
struct DiagGaussian {
  Var<S> mu;
  Var<S> log_var;
  /// True when construction had to clamp at least one log-variance.
  bool clamped = false;

  DiagGaussian() = default;
  DiagGaussian(Var<S> mean, Var<S> raw_log_var);

  /// Splits (b, 2m, ...) feature maps into mean (first m) and log-variance.
  static DiagGaussian from_stacked(Var<S> params);
  static DiagGaussian standard(Tape<S>& tape, const Shape& shape);

  Shape shape() const { return mu.shape(); }
};

/// z = mu + exp(log_var / 2) * eps. `eps` is data; gradients reach mu and
/// log_var only.
template <typename S>
Var<S> reparam_sample(const DiagGaussian<S>& q, const Tensor<S>& eps);

/// Per-example KL(q || p), summed over every non-batch axis.
template <typename S>
Var<S> kl_diag_gauss(const DiagGaussian<S>& q, const DiagGaussian<S>& p);

/// Per-example log N(z; mu, exp(log_var)).
template <typename S>
Var<S> log_density(const DiagGaussian<S>& q, Var<S> z);

/// Uniform-weight Gaussian mixture; components carry a leading batch dim of 1.
template <typename S>
struct MixturePrior {
  std::vector<DiagGaussian<S>> components;
  Index k() const { return static_cast<Index>(components.size()); }
};

/// (b, k) matrix of KL(q || p_i).
template <typename S>
Var<S> mixture_component_kls(const DiagGaussian<S>& q, const MixturePrior<S>& p);

/// log(1 / sum_i exp(-KL(q || p_i))), via max-shifted log-sum-exp. Can be
/// negative when q sits far from every component but one.
template <typename S>
Var<S> kl_mixture_approx(const DiagGaussian<S>& q, const MixturePrior<S>& p);

/// Softmax over components of -KL(q || p_i); rows sum to one.
template <typename S>
Var<S> mixture_responsibilities(const DiagGaussian<S>& q, const MixturePrior<S>& p);

/// Batch mean of the row entropies of a responsibility matrix.
template <typename S>
Var<S> entropy_penalty(Var<S> responsibilities);

/// Exact per-example log density of the mixture at z.
template <typename S>
Var<S> mixture_log_density(const MixturePrior<S>& p, Var<S> z);

enum class LikelihoodKind { kBernoulli, kDiagGaussian, kIntegratedLogistic };

std::string to_string(LikelihoodKind kind);
LikelihoodKind likelihood_from_string(const std::string& name);
/// Feature maps emitted per image channel.
int params_per_channel(LikelihoodKind kind);

/// Per-pixel output distribution. `params` stacks the parameter planes
/// along the feature axis: first the means (or logits), then the
/// log-variances (or log-scales), `channels` planes each.
template <typename S>
struct OutputLikelihood {
  LikelihoodKind kind = LikelihoodKind::kBernoulli;
  Var<S> params;
  Index channels = 1;

  Var<S> location() const;
  Var<S> log_spread() const;
};

/// Elementwise negative log-likelihood, shape of x. With `soft_targets`
/// Bernoulli accepts targets in [0,1] (cross-entropy).
template <typename S>
Var<S> nll_elementwise(const OutputLikelihood<S>& like, Var<S> x, bool soft_targets = false);

/// Per-example negative log-likelihood in nats.
template <typename S>
Var<S> nll(const OutputLikelihood<S>& like, Var<S> x, bool soft_targets = false);

template <typename S>
Tensor<S> likelihood_mean(const OutputLikelihood<S>& like);
/// One draw from a scalar output distribution; integrated-logistic draws are
/// snapped to their bin centre.
double sample_value(LikelihoodKind kind, double location, double log_spread, Rng& rng);
template <typename S>
Tensor<S> likelihood_sample(const OutputLikelihood<S>& like, Rng& rng);

/// log-mean-exp over the k importance weights of each row of (b, k).
template <typename S>
Var<S> iwae_bound(Var<S> log_weights);

/// Converts a continuous NLL on [0,1]-scaled, dequantized data to bits per
/// sub-pixel of the underlying 256-level data.
double bits_per_pixel(double nll_nats, Index num_subpixels);

}  // namespace matnet
