#include <doctest.h>

#include "matnet/ar_head.hpp"
#include "matnet/training.hpp"

#include <cmath>

using namespace matnet;

namespace {

struct HeadFixture {
  Rng rng{41};
  ParamStore<double> store;
  ArHead head;

  HeadFixture(Index channels, LikelihoodKind kind, Index layers = 3, Index hidden = 4, Index cond = 2)
      : head(make_ar_head(store, "ar", channels, cond, hidden, layers, kind, 0.1, rng)) {}

  void randomize(double sd = 0.5) {
    for (auto& e : store.entries()) {
      e.value = rng.normal_tensor<double>(e.value.shape());
      e.value.array() *= sd;
    }
  }
  void zero_masked() {
    for (const auto& l : head.layers) store[l.masked.kernel].value.array() = 0.0;
  }
};

TensorD binary(Rng& rng, const Shape& s, double p = 0.5) {
  TensorD t = rng.uniform_tensor<double>(s);
  t.array() = (t.array() < p).cast<double>();
  return t;
}

// Each row holds one horizontal run of two lit pixels at a random offset.
TensorD runs(Rng& rng, Index n, Index side) {
  TensorD t(Shape{n, 1, side, side});
  for (Index i = 0; i < n; ++i) {
    for (Index r = 0; r < side; ++r) {
      const Index c = static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - 1)));
      t.at(i, 0, r, c) = 1.0;
      t.at(i, 0, r, c + 1) = 1.0;
    }
  }
  return t;
}

}  // namespace

TEST_CASE("raster masks") {
  const TensorD a = raster_mask<double>(Shape{2, 3, 3, 3}, MaskType::kA);
  const TensorD b = raster_mask<double>(Shape{2, 3, 3, 3}, MaskType::kB);
  for (Index o = 0; o < 2; ++o) {
    for (Index c = 0; c < 3; ++c) {
      for (Index t = 0; t < 9; ++t) {
        const Index i = (o * 3 + c) * 9 + t;
        CHECK(a[i] == (t < 4 ? 1.0 : 0.0));
        CHECK(b[i] == (t <= 4 ? 1.0 : 0.0));
      }
    }
  }
}

TEST_CASE("outputs never depend on current or later pixels") {
  HeadFixture f(2, LikelihoodKind::kDiagGaussian);
  f.randomize();
  const Index side = 5, pixels = side * side;
  const TensorD x = f.rng.normal_tensor<double>(Shape{1, 2, side, side});
  const TensorD td = f.rng.normal_tensor<double>(Shape{1, 2, side, side});
  for (Index pos = 0; pos < pixels; ++pos) {
    Tape<double> tape;
    const BoundParams<double> p(tape, f.store, GroupSet::all());
    const auto xv = tape.leaf(x);
    const auto out = ar_forward(f.head, p, xv, tape.constant(td));
    TensorD pick(out.params.shape());
    for (Index c = 0; c < pick.dim(1); ++c) pick[c * pixels + pos] = 1.0;
    tape.backward(sum(out.params * tape.constant(pick)));
    const TensorD g = tape.grad(xv);
    double future = 0.0, past = 0.0;
    for (Index c = 0; c < 2; ++c) {
      for (Index q = 0; q < pixels; ++q) {
        (q >= pos ? future : past) += std::abs(g[c * pixels + q]);
      }
    }
    CHECK(future == 0.0);
    if (pos > 0) CHECK(past > 0.0);
  }
}

TEST_CASE("zeroed masked kernels reduce to a factorized readout") {
  HeadFixture f(1, LikelihoodKind::kBernoulli);
  f.randomize();
  f.zero_masked();
  const TensorD x = binary(f.rng, Shape{3, 1, 6, 6});
  const TensorD td = f.rng.normal_tensor<double>(Shape{3, 2, 6, 6});
  Tape<double> tape;
  const BoundParams<double> p(tape, f.store, GroupSet::all());
  const TensorD ar = ar_nll(f.head, p, tape.constant(x), tape.constant(td)).value();

  // The same stack rebuilt from plain convolutions of the conditioning input.
  const auto tdv = tape.constant(td);
  Var<double> a;
  for (std::size_t l = 0; l < f.head.layers.size(); ++l) {
    const auto& layer = f.head.layers[l];
    a = conv2d_same(tdv, p[layer.conditioning], p[layer.masked.bias]);
    if (l + 1 < f.head.layers.size()) a = lrelu(a, 0.1);
  }
  const TensorD plain = nll(OutputLikelihood<double>{LikelihoodKind::kBernoulli, a, 1}, tape.constant(x)).value();
  for (Index i = 0; i < 3; ++i) CHECK(std::abs(ar[i] - plain[i]) <= 1e-6 * std::abs(plain[i]));
}

TEST_CASE("neutral head costs ln 2 per pixel") {
  HeadFixture f(1, LikelihoodKind::kBernoulli);
  f.store.set_zero();
  Tape<double> tape;
  const BoundParams<double> p(tape, f.store, GroupSet::all());
  const TensorD v = ar_nll(f.head, p, tape.constant(binary(f.rng, Shape{2, 1, 4, 4})),
                           tape.constant(TensorD(Shape{2, 2, 4, 4})))
                        .value();
  CHECK(v[0] == doctest::Approx(16 * std::log(2.0)));
}

TEST_CASE("sampling agrees with teacher forcing") {
  for (LikelihoodKind kind : {LikelihoodKind::kBernoulli, LikelihoodKind::kDiagGaussian,
                              LikelihoodKind::kIntegratedLogistic}) {
    HeadFixture f(1, kind);
    f.randomize();
    const TensorD td = f.rng.normal_tensor<double>(Shape{3, 2, 5, 5});
    Rng a(7), b(7);
    const ArSample<double> s = ar_sample(f.head, f.store, td, a);
    CHECK((s.x.array() == ar_sample(f.head, f.store, td, b).x.array()).all());
    Tape<double> tape;
    const BoundParams<double> p(tape, f.store, GroupSet::all());
    const TensorD forced = ar_nll(f.head, p, tape.constant(s.x), tape.constant(td)).value();
    for (Index i = 0; i < 3; ++i) CHECK(std::abs(-s.log_prob[i] - forced[i]) <= 1e-6 * std::abs(forced[i]));
  }
}

TEST_CASE("known pixels are copied and prefixes stay fixed") {
  HeadFixture f(1, LikelihoodKind::kBernoulli);
  f.randomize();
  const TensorD td = f.rng.normal_tensor<double>(Shape{2, 2, 4, 4});
  Rng a(1);
  const TensorD first = ar_sample(f.head, f.store, td, a).x;
  TensorD mask(first.shape());
  for (Index n = 0; n < 2; ++n) {
    for (Index q = 0; q < 8; ++q) mask[n * 16 + q] = 1.0;
  }
  Rng b(2);
  const ArSample<double> again = ar_sample(f.head, f.store, td, b, &first, &mask);
  for (Index i = 0; i < first.size(); ++i) {
    if (mask[i] == 1.0) CHECK(again.x[i] == first[i]);
  }
}

TEST_CASE("masked head learns local runs") {
  Rng data_rng(5);
  const Index side = 6;
  auto fit = [&](bool factorized) {
    HeadFixture f(1, LikelihoodKind::kBernoulli, 3, 8, 1);
    if (factorized) f.zero_masked();
    OptimState<double> opt;
    opt.learning_rate = 1e-2;
    Rng rng(9);
    const TensorD td = TensorD::constant(Shape{32, 1, side, side}, 1.0);
    for (int step = 0; step < 300; ++step) {
      const TensorD x = runs(rng, 32, side);
      Tape<double> tape;
      const BoundParams<double> p(tape, f.store, GroupSet::all());
      tape.backward(mean(ar_nll(f.head, p, tape.constant(x), tape.constant(td))));
      auto grads = p.gradients();
      if (factorized) {
        for (const auto& l : f.head.layers) grads[static_cast<std::size_t>(l.masked.kernel)].array() = 0.0;
      }
      adam_step(f.store, grads, opt);
    }
    return f;
  };
  HeadFixture ar = fit(false);
  HeadFixture flat = fit(true);
  const TensorD test = runs(data_rng, 256, side);
  const TensorD td = TensorD::constant(Shape{256, 1, side, side}, 1.0);
  auto score = [&](HeadFixture& f) {
    Tape<double> tape;
    const BoundParams<double> p(tape, f.store, GroupSet::all());
    return mean(ar_nll(f.head, p, tape.constant(test), tape.constant(td))).value()[0];
  };
  CHECK(score(ar) < score(flat) - 1.0);

  // Neighbour statistics of samples match the teacher-forced conditionals.
  Rng srng(3);
  const ArSample<double> s = ar_sample(ar.head, ar.store, td, srng);
  Tape<double> tape;
  const BoundParams<double> p(tape, ar.store, GroupSet::all());
  const TensorD logits = ar_forward(ar.head, p, tape.constant(s.x), tape.constant(td)).params.value();
  double hits = 0, expected = 0, count = 0, var = 0;
  for (Index n = 0; n < 256; ++n) {
    for (Index r = 0; r < side; ++r) {
      for (Index c = 0; c + 1 < side; ++c) {
        if (s.x.at(n, 0, r, c) != 1.0) continue;
        const double prob = 1.0 / (1.0 + std::exp(-logits.at(n, 0, r, c + 1)));
        hits += s.x.at(n, 0, r, c + 1);
        expected += prob;
        var += prob * (1 - prob);
        count += 1;
      }
    }
  }
  REQUIRE(count > 100);
  CHECK(std::abs(hits - expected) < 4.0 * std::sqrt(var));
}
