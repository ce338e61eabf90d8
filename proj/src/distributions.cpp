#include "matnet/distributions.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

namespace matnet {

template <typename S>
DiagGaussian<S>::DiagGaussian(Var<S> mean, Var<S> raw_log_var) : mu(mean) {
  if (mean.shape() != raw_log_var.shape()) {
    throw ShapeError("DiagGaussian: mean " + mean.shape().str() + " vs log-variance " +
                     raw_log_var.shape().str());
  }
  const auto& lv = raw_log_var.value().array();
  clamped = (lv < S(kMinLogVar)).any() || (lv > S(kMaxLogVar)).any();
  log_var = clamp(raw_log_var, S(kMinLogVar), S(kMaxLogVar));
}

template <typename S>
DiagGaussian<S> DiagGaussian<S>::from_stacked(Var<S> params) {
  const Index features = params.shape()[1];
  if (features % 2 != 0) throw ShapeError("DiagGaussian: odd parameter feature count");
  return DiagGaussian(slice_features(params, 0, features / 2),
                      slice_features(params, features / 2, features / 2));
}

template <typename S>
DiagGaussian<S> DiagGaussian<S>::standard(Tape<S>& tape, const Shape& shape) {
  return DiagGaussian(tape.constant(Tensor<S>::zeros(shape)),
                      tape.constant(Tensor<S>::zeros(shape)));
}

template <typename S>
Var<S> reparam_sample(const DiagGaussian<S>& q, const Tensor<S>& eps) {
  if (eps.shape() != q.shape()) {
    throw ShapeError("reparam_sample: eps " + eps.shape().str() + " vs " + q.shape().str());
  }
  Tape<S>& t = *q.mu.tape;
  return q.mu + exp(scale(q.log_var, S(0.5))) * t.constant(eps);
}

template <typename S>
Var<S> kl_diag_gauss(const DiagGaussian<S>& q, const DiagGaussian<S>& p) {
  if (q.shape() != p.shape()) {
    throw ShapeError("kl_diag_gauss: " + q.shape().str() + " vs " + p.shape().str());
  }
  // 0.5 * (s_q^2/s_p^2 + (mu_p - mu_q)^2 / s_p^2 - 1 + log s_p^2 - log s_q^2)
  const Var<S> inv_var_p = exp(-p.log_var);
  const Var<S> ratio = exp(q.log_var - p.log_var);
  const Var<S> mahal = square(p.mu - q.mu) * inv_var_p;
  const Var<S> terms = add_scalar(ratio + mahal + p.log_var - q.log_var, S(-1));
  return scale(sum_per_example(terms), S(0.5));
}

template <typename S>
Var<S> log_density(const DiagGaussian<S>& q, Var<S> z) {
  const S log_two_pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
  const Var<S> mahal = square(z - q.mu) * exp(-q.log_var);
  return scale(sum_per_example(add_scalar(mahal + q.log_var, log_two_pi)), S(-0.5));
}

namespace {

template <typename S>
DiagGaussian<S> broadcast_component(const DiagGaussian<S>& c, Index batch) {
  if (c.shape()[0] == batch) return c;
  DiagGaussian<S> out;
  out.mu = broadcast_batch(c.mu, batch);
  out.log_var = broadcast_batch(c.log_var, batch);
  out.clamped = c.clamped;
  return out;
}

template <typename S>
void require_components(const DiagGaussian<S>& q, const MixturePrior<S>& p) {
  if (p.components.empty()) throw std::invalid_argument("mixture prior has no components");
  const Shape& cs = p.components.front().shape();
  if (cs.inner() != q.shape().inner() || cs.rank() != q.shape().rank()) {
    throw ShapeError("mixture component shape " + cs.str() + " vs posterior " + q.shape().str());
  }
}

}  // namespace

template <typename S>
Var<S> mixture_component_kls(const DiagGaussian<S>& q, const MixturePrior<S>& p) {
  require_components(q, p);
  const Index batch = q.shape()[0];
  std::vector<Var<S>> cols;
  for (const auto& c : p.components) cols.push_back(kl_diag_gauss(q, broadcast_component(c, batch)));
  return stack_columns(cols);
}

template <typename S>
Var<S> kl_mixture_approx(const DiagGaussian<S>& q, const MixturePrior<S>& p) {
  const Var<S> kl = -logsumexp_rows(-mixture_component_kls(q, p));
  if ((kl.value().array() < S(0)).any() && checked_mode()) {
    std::cerr << "note: mixture KL approximation is negative for some examples\n";
  }
  return kl;
}

template <typename S>
Var<S> mixture_responsibilities(const DiagGaussian<S>& q, const MixturePrior<S>& p) {
  return softmax_rows(-mixture_component_kls(q, p));
}

template <typename S>
Var<S> entropy_penalty(Var<S> responsibilities) {
  const auto& r = responsibilities.value();
  if (r.shape().rank() != 2) throw ShapeError("entropy_penalty: expected (b, k)");
  if (checked_mode()) {
    const Index b = r.dim(0), k = r.dim(1);
    for (Index n = 0; n < b; ++n) {
      S row = 0;
      for (Index j = 0; j < k; ++j) row += r[n * k + j];
      if (std::abs(row - S(1)) > S(1e-4)) {
        throw std::invalid_argument("entropy_penalty: responsibilities not normalised");
      }
    }
  }
  const Var<S> plogp = responsibilities * log(responsibilities, S(kProbFloor));
  return scale(mean(sum_per_example(plogp)), S(-1));
}

template <typename S>
Var<S> mixture_log_density(const MixturePrior<S>& p, Var<S> z) {
  if (p.components.empty()) throw std::invalid_argument("mixture prior has no components");
  const Index batch = z.shape()[0];
  std::vector<Var<S>> cols;
  for (const auto& c : p.components) cols.push_back(log_density(broadcast_component(c, batch), z));
  return add_scalar(logsumexp_rows(stack_columns(cols)),
                    static_cast<S>(-std::log(static_cast<double>(p.k()))));
}

std::string to_string(LikelihoodKind kind) {
  switch (kind) {
    case LikelihoodKind::kBernoulli: return "bernoulli";
    case LikelihoodKind::kDiagGaussian: return "diag_gaussian";
    case LikelihoodKind::kIntegratedLogistic: return "integrated_logistic";
  }
  return "?";
}

LikelihoodKind likelihood_from_string(const std::string& name) {
  if (name == "bernoulli") return LikelihoodKind::kBernoulli;
  if (name == "diag_gaussian") return LikelihoodKind::kDiagGaussian;
  if (name == "integrated_logistic") return LikelihoodKind::kIntegratedLogistic;
  throw std::invalid_argument("unknown output likelihood '" + name + "'");
}

int params_per_channel(LikelihoodKind kind) {
  return kind == LikelihoodKind::kBernoulli ? 1 : 2;
}

template <typename S>
Var<S> OutputLikelihood<S>::location() const {
  if (params_per_channel(kind) == 1) return params;
  return slice_features(params, 0, channels);
}

template <typename S>
Var<S> OutputLikelihood<S>::log_spread() const {
  if (params_per_channel(kind) == 1) throw std::logic_error("Bernoulli has no spread parameter");
  return slice_features(params, channels, channels);
}

namespace {
constexpr double kMinLogScale = -7.0;
constexpr double kMaxLogScale = 3.0;
}

template <typename S>
Var<S> nll_elementwise(const OutputLikelihood<S>& like, Var<S> x, bool soft_targets) {
  const Shape expected = like.params.shape().with_dim(1, like.channels);
  if (x.shape() != expected || like.params.shape()[1] != like.channels * params_per_channel(like.kind)) {
    throw ShapeError("nll: data " + x.shape().str() + " vs parameters " + like.params.shape().str());
  }
  switch (like.kind) {
    case LikelihoodKind::kBernoulli: {
      if (checked_mode() && !soft_targets) {
        const auto& xv = x.value().array();
        if (!((xv == S(0)) || (xv == S(1))).all()) {
          throw std::invalid_argument("nll: Bernoulli likelihood given non-binary data");
        }
      }
      return bernoulli_nll(like.params, x);
    }
    case LikelihoodKind::kDiagGaussian: {
      const DiagGaussian<S> g(like.location(), like.log_spread());
      const S log_two_pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
      const Var<S> mahal = square(x - g.mu) * exp(-g.log_var);
      return scale(add_scalar(mahal + g.log_var, log_two_pi), S(0.5));
    }
    case LikelihoodKind::kIntegratedLogistic: {
      if (checked_mode()) {
        const auto& xv = x.value().array();
        if ((xv < S(0)).any() || (xv > S(1)).any()) {
          throw std::invalid_argument("nll: integrated logistic data outside [0,1]");
        }
      }
      return logistic_bin_nll(like.location(),
                              clamp(like.log_spread(), S(kMinLogScale), S(kMaxLogScale)), x);
    }
  }
  throw std::logic_error("unreachable");
}

template <typename S>
Var<S> nll(const OutputLikelihood<S>& like, Var<S> x, bool soft_targets) {
  return sum_per_example(nll_elementwise(like, x, soft_targets));
}

template <typename S>
Tensor<S> likelihood_mean(const OutputLikelihood<S>& like) {
  const Tensor<S>& loc = like.location().value();
  if (like.kind == LikelihoodKind::kBernoulli) {
    return Tensor<S>(loc.shape(), loc.array().unaryExpr([](S l) {
      return l >= 0 ? S(1) / (S(1) + std::exp(-l)) : std::exp(l) / (S(1) + std::exp(l));
    }));
  }
  return loc;
}

double sample_value(LikelihoodKind kind, double location, double log_spread, Rng& rng) {
  switch (kind) {
    case LikelihoodKind::kBernoulli: {
      const double p = location >= 0 ? 1.0 / (1.0 + std::exp(-location))
                                     : std::exp(location) / (1.0 + std::exp(location));
      return rng.uniform() < p ? 1.0 : 0.0;
    }
    case LikelihoodKind::kDiagGaussian: {
      const double v = std::clamp(log_spread, kMinLogVar, kMaxLogVar);
      return location + std::exp(0.5 * v) * rng.normal();
    }
    case LikelihoodKind::kIntegratedLogistic: {
      const double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
      const double s = std::exp(std::clamp(log_spread, kMinLogScale, kMaxLogScale));
      const double v = location + s * std::log(u / (1.0 - u));
      const double bin = std::clamp(std::floor(v * 256.0), 0.0, 255.0);
      return (bin + 0.5) / 256.0;
    }
  }
  throw std::logic_error("unreachable");
}

template <typename S>
Tensor<S> likelihood_sample(const OutputLikelihood<S>& like, Rng& rng) {
  const Tensor<S> loc = like.location().value();
  const bool spread = params_per_channel(like.kind) == 2;
  const Tensor<S> ls = spread ? like.log_spread().value() : Tensor<S>();
  Tensor<S> out(loc.shape());
  for (Index i = 0; i < out.size(); ++i) {
    out[i] = static_cast<S>(sample_value(like.kind, static_cast<double>(loc[i]),
                                         spread ? static_cast<double>(ls[i]) : 0.0, rng));
  }
  return out;
}

template <typename S>
Var<S> iwae_bound(Var<S> log_weights) {
  if (log_weights.shape().rank() != 2) throw ShapeError("iwae_bound: expected (b, k)");
  const Index k = log_weights.shape()[1];
  return add_scalar(logsumexp_rows(log_weights), static_cast<S>(-std::log(static_cast<double>(k))));
}

double bits_per_pixel(double nll_nats, Index num_subpixels) {
  if (num_subpixels <= 0) throw std::invalid_argument("bits_per_pixel: num_subpixels must be positive");
  return (nll_nats / static_cast<double>(num_subpixels) + std::log(256.0)) / std::log(2.0);
}

#define MATNET_INSTANTIATE_DISTRIBUTIONS(S)                                              \
  template struct DiagGaussian<S>;                                                       \
  template struct OutputLikelihood<S>;                                                   \
  template Var<S> reparam_sample(const DiagGaussian<S>&, const Tensor<S>&);              \
  template Var<S> kl_diag_gauss(const DiagGaussian<S>&, const DiagGaussian<S>&);         \
  template Var<S> log_density(const DiagGaussian<S>&, Var<S>);                           \
  template Var<S> mixture_component_kls(const DiagGaussian<S>&, const MixturePrior<S>&); \
  template Var<S> kl_mixture_approx(const DiagGaussian<S>&, const MixturePrior<S>&);     \
  template Var<S> mixture_responsibilities(const DiagGaussian<S>&, const MixturePrior<S>&); \
  template Var<S> entropy_penalty(Var<S>);                                               \
  template Var<S> mixture_log_density(const MixturePrior<S>&, Var<S>);                   \
  template Var<S> nll_elementwise(const OutputLikelihood<S>&, Var<S>, bool);             \
  template Var<S> nll(const OutputLikelihood<S>&, Var<S>, bool);                         \
  template Tensor<S> likelihood_mean(const OutputLikelihood<S>&);                        \
  template Tensor<S> likelihood_sample(const OutputLikelihood<S>&, Rng&);                \
  template Var<S> iwae_bound(Var<S>);

MATNET_INSTANTIATE_DISTRIBUTIONS(float)
MATNET_INSTANTIATE_DISTRIBUTIONS(double)

}  // namespace matnet
