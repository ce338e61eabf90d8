#include <doctest.h>

#include "matnet/distributions.hpp"
#include "matnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace matnet;

namespace {

TensorD uniform(Rng& r, const Shape& s, double lo, double hi) {
  TensorD t = r.uniform_tensor<double>(s);
  t.array() = lo + (hi - lo) * t.array();
  return t;
}

double scalar(Var<double> v) { return v.value()[0]; }

}  // namespace

TEST_CASE("closed-form KL agrees with Monte Carlo") {
  Rng rng(21);
  const Shape s{1, 3};
  auto log_normal = [](const TensorD& z, const TensorD& mu, const TensorD& lv) {
    double total = 0;
    for (Index i = 0; i < z.size(); ++i) {
      const double d = z[i] - mu[i];
      total -= 0.5 * (std::log(2 * std::numbers::pi) + lv[i] + d * d / std::exp(lv[i]));
    }
    return total;
  };
  for (int pair = 0; pair < 10; ++pair) {
    const TensorD qm = uniform(rng, s, -1, 1), qv = uniform(rng, s, -1.5, 1);
    const TensorD pm = uniform(rng, s, -1, 1), pv = uniform(rng, s, -1.5, 1);
    Tape<double> tape;
    const double closed = scalar(kl_diag_gauss(DiagGaussian<double>(tape.constant(qm), tape.constant(qv)),
                                               DiagGaussian<double>(tape.constant(pm), tape.constant(pv))));
    const int n = 20000;
    double s1 = 0, s2 = 0;
    TensorD z(s);
    for (int i = 0; i < n; ++i) {
      for (Index j = 0; j < z.size(); ++j) z[j] = qm[j] + std::exp(0.5 * qv[j]) * rng.normal();
      const double d = log_normal(z, qm, qv) - log_normal(z, pm, pv);
      s1 += d;
      s2 += d * d;
    }
    const double mean = s1 / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - closed) < 3.5 * se);
  }
}

TEST_CASE("log variance is clamped") {
  Tape<double> tape;
  const DiagGaussian<double> g(tape.constant(TensorD(Shape{3})), tape.constant(TensorD::from(Shape{3}, {10.0, -10.0, 0.5})));
  CHECK(g.clamped);
  CHECK(g.log_var.value()[0] == kMaxLogVar);
  CHECK(g.log_var.value()[1] == kMinLogVar);
  CHECK(g.log_var.value()[2] == 0.5);
}

TEST_CASE("reparameterized sample") {
  Tape<double> tape;
  const DiagGaussian<double> g(tape.constant(TensorD::from(Shape{1, 2}, {1.0, -2.0})),
                               tape.constant(TensorD::from(Shape{1, 2}, {0.0, 2.0})));
  const auto z = reparam_sample(g, TensorD::from(Shape{1, 2}, {0.5, -1.0}));
  CHECK(z.value()[0] == doctest::Approx(1.5));
  CHECK(z.value()[1] == doctest::Approx(-2.0 - std::exp(1.0)));
}

TEST_CASE("Gaussian log density at the mean") {
  Tape<double> tape;
  const DiagGaussian<double> g(tape.constant(TensorD::from(Shape{1, 2}, {0.3, 0.1})),
                               tape.constant(TensorD::from(Shape{1, 2}, {0.0, std::log(4.0)})));
  const double expected = -std::log(2 * std::numbers::pi) - 0.5 * std::log(4.0);
  CHECK(scalar(log_density(g, g.mu)) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("mixture KL approximation identities") {
  Rng rng(3);
  const Shape s{4, 5};
  Tape<double> tape;
  const DiagGaussian<double> q(tape.constant(rng.normal_tensor<double>(s)), tape.constant(uniform(rng, s, -1, 1)));
  const DiagGaussian<double> c(tape.constant(rng.normal_tensor<double>(Shape{1, 5})),
                               tape.constant(uniform(rng, Shape{1, 5}, -1, 1)));
  const DiagGaussian<double> cb(broadcast_batch(c.mu, 4), broadcast_batch(c.log_var, 4));
  const TensorD single = kl_diag_gauss(q, cb).value();

  MixturePrior<double> one{{c}};
  const TensorD k1 = kl_mixture_approx(q, one).value();
  CHECK((k1.array() == single.array()).all());

  MixturePrior<double> three{{c, c, c}};
  const TensorD k3 = kl_mixture_approx(q, three).value();
  for (Index i = 0; i < 4; ++i) {
    const double expected = single[i] - std::log(3.0);
    CHECK(std::abs(k3[i] - expected) <= 1e-6 * std::abs(expected));
  }
  const TensorD r = mixture_responsibilities(q, three).value();
  for (Index i = 0; i < r.size(); ++i) CHECK(r[i] == doctest::Approx(1.0 / 3.0));

  const auto z = tape.constant(rng.normal_tensor<double>(s));
  const TensorD lp3 = mixture_log_density(three, z).value();
  const TensorD lp1 = log_density(cb, z).value();
  for (Index i = 0; i < 4; ++i) CHECK(lp3[i] == doctest::Approx(lp1[i]).epsilon(1e-12));
}

TEST_CASE("responsibilities and entropy") {
  Rng rng(4);
  Tape<double> tape;
  const Shape s{6, 3};
  const DiagGaussian<double> q(tape.constant(rng.normal_tensor<double>(s)), tape.constant(uniform(rng, s, -1, 1)));
  MixturePrior<double> prior;
  for (int k = 0; k < 4; ++k) {
    prior.components.emplace_back(tape.constant(rng.normal_tensor<double>(Shape{1, 3})),
                                  tape.constant(uniform(rng, Shape{1, 3}, -1, 1)));
  }
  const TensorD r = mixture_responsibilities(q, prior).value();
  REQUIRE(r.shape() == (Shape{6, 4}));
  for (Index i = 0; i < 6; ++i) CHECK(r.array().segment(i * 4, 4).sum() == doctest::Approx(1.0));

  auto uniform_rows = tape.constant(TensorD::constant(Shape{2, 4}, 0.25));
  CHECK(scalar(entropy_penalty(uniform_rows)) == doctest::Approx(std::log(4.0)));
  auto one_hot = tape.constant(TensorD::from(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0}));
  CHECK(scalar(entropy_penalty(one_hot)) == doctest::Approx(0.0));
}

TEST_CASE("Bernoulli NLL") {
  Tape<double> tape;
  const auto logits = tape.constant(TensorD(Shape{2, 1, 2, 2}));
  const auto x = tape.constant(TensorD::from(Shape{2, 1, 2, 2}, {0, 1, 1, 0, 1, 1, 1, 1}));
  const TensorD out = nll(OutputLikelihood<double>{LikelihoodKind::kBernoulli, logits, 1}, x).value();
  CHECK(out[0] == doctest::Approx(4 * std::log(2.0)));
  // Extreme logits stay finite.
  const auto big = tape.constant(TensorD::constant(Shape{1, 1, 1, 1}, 800.0));
  const auto zero = tape.constant(TensorD(Shape{1, 1, 1, 1}));
  const double v = nll(OutputLikelihood<double>{LikelihoodKind::kBernoulli, big, 1}, zero).value()[0];
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("Gaussian output NLL") {
  Tape<double> tape;
  const auto params = tape.constant(TensorD::from(Shape{1, 2, 1, 1}, {0.5, std::log(2.0)}));
  const auto x = tape.constant(TensorD::from(Shape{1, 1, 1, 1}, {1.5}));
  const double v = nll(OutputLikelihood<double>{LikelihoodKind::kDiagGaussian, params, 1}, x).value()[0];
  CHECK(v == doctest::Approx(0.5 * std::log(2 * std::numbers::pi * 2.0) + 0.25));
}

TEST_CASE("integrated logistic bins form a distribution") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const double mean = rng.uniform() * 1.4 - 0.2;
    const double log_scale = -5.0 + 4.0 * rng.uniform();
    Tape<double> tape;
    TensorD xs(Shape{256, 1, 1, 1});
    for (Index k = 0; k < 256; ++k) xs[k] = (static_cast<double>(k) + 0.5) / 256.0;
    const auto params = tape.constant(TensorD(Shape{256, 2, 1, 1}, [&] {
      TensorD::Array a(512);
      for (Index k = 0; k < 256; ++k) {
        a[2 * k] = mean;
        a[2 * k + 1] = log_scale;
      }
      return a;
    }()));
    const TensorD out =
        nll(OutputLikelihood<double>{LikelihoodKind::kIntegratedLogistic, params, 1}, tape.constant(xs)).value();
    double total = 0;
    for (Index k = 0; k < 256; ++k) total += std::exp(-out[k]);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("integrated logistic edge bins are open") {
  Tape<double> tape;
  // A mean far below zero puts nearly all mass in the first bin.
  const auto params = tape.constant(TensorD::from(Shape{1, 2, 1, 1}, {-5.0, -3.0}));
  const auto x = tape.constant(TensorD::from(Shape{1, 1, 1, 1}, {0.5 / 256.0}));
  CHECK(nll(OutputLikelihood<double>{LikelihoodKind::kIntegratedLogistic, params, 1}, x).value()[0] < 1e-6);
}

TEST_CASE("importance bound") {
  Tape<double> tape;
  const auto lw = tape.constant(TensorD::from(Shape{2, 3}, {0.0, 0.0, 0.0, -1.0, 2.0, 0.5}));
  const TensorD b = iwae_bound(lw).value();
  CHECK(b[0] == doctest::Approx(0.0));
  CHECK(b[1] == doctest::Approx(std::log((std::exp(-1.0) + std::exp(2.0) + std::exp(0.5)) / 3.0)));
  const auto huge = tape.constant(TensorD::from(Shape{1, 2}, {-2000.0, -2000.0}));
  CHECK(iwae_bound(huge).value()[0] == doctest::Approx(-2000.0));
}

TEST_CASE("bits per pixel") {
  CHECK(bits_per_pixel(0.0, 3072) == doctest::Approx(8.0));
  CHECK(bits_per_pixel(-3072 * std::log(256.0), 3072) == doctest::Approx(0.0));
  CHECK_THROWS(bits_per_pixel(1.0, 0));
}

TEST_CASE("continuous bits match discrete counts") {
  // Levels drawn from a discretized Gaussian, then dequantized.
  Rng rng(14);
  const int n = 200000;
  const double centre = 120.0, sd = 18.0;
  std::vector<int> levels(n);
  for (int& l : levels) l = static_cast<int>(std::clamp(std::round(centre + sd * rng.normal()), 0.0, 255.0));
  double s1 = 0, s2 = 0;
  std::vector<double> deq(n);
  for (int i = 0; i < n; ++i) {
    deq[i] = (levels[i] + rng.uniform()) / 256.0;
    s1 += deq[i];
    s2 += deq[i] * deq[i];
  }
  const double mu = s1 / n, var = s2 / n - mu * mu;
  double nll = 0;
  for (double v : deq) nll += 0.5 * (std::log(2 * std::numbers::pi * var) + (v - mu) * (v - mu) / var);
  const double bits = bits_per_pixel(nll / n, 1);

  // Oracle: code length of the raw levels under the empirical histogram.
  std::vector<double> counts(256, 0.0);
  for (int l : levels) counts[static_cast<std::size_t>(l)] += 1;
  double oracle = 0;
  for (double c : counts) {
    if (c > 0) oracle -= c / n * std::log2(c / n);
  }
  CHECK(std::abs(bits - oracle) < 0.01);
}

TEST_CASE("sampling matches the output distribution") {
  Rng rng(10);
  const int n = 40000;
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += sample_value(LikelihoodKind::kBernoulli, std::log(0.3 / 0.7), 0.0, rng) > 0.5;
  const double se = std::sqrt(0.3 * 0.7 / n);
  CHECK(std::abs(ones / static_cast<double>(n) - 0.3) < 4 * se);

  double s1 = 0;
  for (int i = 0; i < n; ++i) s1 += sample_value(LikelihoodKind::kDiagGaussian, 2.0, std::log(0.25), rng);
  CHECK(std::abs(s1 / n - 2.0) < 4 * 0.5 / std::sqrt(n));

  for (int i = 0; i < 100; ++i) {
    const double v = sample_value(LikelihoodKind::kIntegratedLogistic, 0.4, -3.0, rng);
    const double bin = v * 256.0 - 0.5;
    CHECK(bin == std::round(bin));
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}
