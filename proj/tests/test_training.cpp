#include <doctest.h>

#include "matnet/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace matnet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("matnet_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_run() {
  RunConfig run;
  ModelConfig& m = run.model;
  m.image_height = 8;
  m.image_width = 8;
  m.scales = {8, 4};
  m.modules = {1, 1};
  m.channels = {4, 4};
  m.latent_channels = 2;
  m.fc_latent = 4;
  m.fc_width = 8;
  TrainConfig& t = run.train;
  t.epochs = 2;
  t.batch_size = 16;
  t.learning_rate = 1e-3;
  t.eval_k = 4;
  t.seed = 11;
  return run;
}

ParamStore<double> single_param(const std::vector<double>& values) {
  ParamStore<double> store;
  TensorD w(Shape{static_cast<Index>(values.size())});
  for (std::size_t i = 0; i < values.size(); ++i) w[static_cast<Index>(i)] = values[i];
  store.add("w", ParamGroup::kTd, w);
  return store;
}

}  // namespace

TEST_CASE("adam first step moves each coordinate by the learning rate against the gradient") {
  ParamStore<double> store = single_param({1.0, -2.0, 0.5});
  OptimState<double> st;
  st.learning_rate = 0.01;
  st.clip_norm = 0;
  const TensorD g = TensorD::from(Shape{3}, {0.3, -4.0, 1e-3});
  REQUIRE(adam_step(store, {g}, st).applied);
  const auto& w = store.entries()[0].value;
  // Bias correction makes the first step lr * g / (|g| + eps).
  CHECK(w[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(-2.0 + 0.01 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
  CHECK(w[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-12));
  CHECK(st.step == 1);
}

TEST_CASE("adam leaves parameters alone on a zero gradient") {
  ParamStore<double> store = single_param({1.0, -2.0});
  OptimState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(store, {TensorD(Shape{2})}, st);
  CHECK(store.entries()[0].value[0] == 1.0);
  CHECK(store.entries()[0].value[1] == -2.0);
}

TEST_CASE("adam converges on a quadratic") {
  ParamStore<double> store = single_param({1.0, -0.7, 0.3, 2.0});
  OptimState<double> st;
  st.learning_rate = 0.05;
  double norm = 1.0;
  int steps = 0;
  for (; steps < 2000 && norm >= 1e-3; ++steps) {
    adam_step(store, {store.entries()[0].value}, st);  // gradient of |w|^2 / 2
    norm = store.entries()[0].value.array().matrix().norm();
  }
  CHECK(norm < 1e-3);
}

TEST_CASE("gradient clipping rescales before the moments") {
  ParamStore<double> store = single_param({0.0, 0.0});
  OptimState<double> st;
  st.clip_norm = 5.0;
  const StepResult r = adam_step(store, {TensorD::from(Shape{2}, {6.0, 8.0})}, st);
  CHECK(r.clipped);
  CHECK(r.grad_norm == doctest::Approx(10.0));
  CHECK(st.m[0][0] == doctest::Approx(0.1 * 3.0));
  CHECK(st.m[0][1] == doctest::Approx(0.1 * 4.0));
}

TEST_CASE("non-finite gradients skip the step") {
  ParamStore<double> store = single_param({1.0, 2.0});
  OptimState<double> st;
  adam_step(store, {TensorD::from(Shape{2}, {0.5, 0.5})}, st);
  const TensorD before = store.entries()[0].value;
  const TensorD m_before = st.m[0];
  for (double bad : {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::infinity()}) {
    const StepResult r = adam_step(store, {TensorD::from(Shape{2}, {bad, 0.1})}, st);
    CHECK_FALSE(r.applied);
    CHECK(store.entries()[0].value.array().isApprox(before.array(), 0.0));
    CHECK(st.m[0][0] == m_before[0]);
    CHECK(st.step == 1);
  }
}

TEST_CASE("adam rejects mismatched gradients") {
  ParamStore<double> store = single_param({1.0, 2.0});
  OptimState<double> st;
  CHECK_THROWS_AS(adam_step(store, {TensorD(Shape{3})}, st), ShapeError);
  CHECK_THROWS_AS(adam_step(store, {}, st), ShapeError);
}

TEST_CASE("kl profile csv round trip and row totals") {
  KlProfile p;
  p.groups = {"z0", "4x4", "8x8"};
  p.updates = {0, 1};
  p.rows = {{0.5, 1.25, 3.0}, {0.1, 0.2, 0.3}};
  TempDir dir("klprof");
  fs::create_directories(dir.path);
  const std::string path = (dir.path / "kl.csv").string();
  p.write_csv(path);
  const KlProfile back = KlProfile::read_csv(path);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.updates == p.updates);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(back.rows[r][c] == doctest::Approx(p.rows[r][c]).epsilon(1e-12));
  }
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "update,module_0,module_1,module_2,total");
  std::string row;
  std::getline(is, row);
  CHECK(row.substr(row.rfind(',') + 1) == "4.75");
}

TEST_CASE("regularizer only adds inference gradients") {
  RunConfig run = tiny_run();
  Rng init(3);
  MatNet<float> net(run.model, init);
  const Dataset data = two_pattern_dataset(8, 5);
  Observation<float> batch;
  batch.x = data.images;

  run.train.regularizer = false;
  const BatchResult plain = batch_gradients(net, batch, run.train, 0, 1.0);
  run.train.regularizer = true;
  run.train.lambda_q = 0.5;
  const BatchResult reg = batch_gradients(net, batch, run.train, 0, 1.0);

  CHECK(reg.generator_leak == 0.0);
  CHECK(reg.metrics.lq_term != 0.0);
  bool inference_changed = false;
  const auto& entries = net.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const bool same = (plain.grads[i].array() == reg.grads[i].array()).all();
    if (GroupSet::generator().contains(entries[i].group)) {
      CHECK_MESSAGE(same, entries[i].name);
    } else if (!same) {
      inference_changed = true;
    }
  }
  CHECK(inference_changed);

  run.train.lambda_q = 0.0;
  const BatchResult zero = batch_gradients(net, batch, run.train, 0, 1.0);
  for (std::size_t i = 0; i < entries.size(); ++i) CHECK((plain.grads[i].array() == zero.grads[i].array()).all());
}

TEST_CASE("shard count does not change the gradient beyond rounding") {
  RunConfig run = tiny_run();
  Rng init(4);
  MatNet<float> net(run.model, init);
  Observation<float> batch;
  batch.x = two_pattern_dataset(8, 6).images;
  const BatchResult one = batch_gradients(net, batch, run.train, 0, 1.0);
  run.train.shards = 2;
  run.train.threads = 2;
  const BatchResult a = batch_gradients(net, batch, run.train, 0, 1.0);
  const BatchResult b = batch_gradients(net, batch, run.train, 0, 1.0);
  for (std::size_t i = 0; i < a.grads.size(); ++i) CHECK((a.grads[i].array() == b.grads[i].array()).all());
  CHECK(a.metrics.loss == b.metrics.loss);
  CHECK(std::isfinite(one.metrics.loss));
}

TEST_CASE("identical seeds give byte-identical run files") {
  const RunConfig run = tiny_run();
  const Dataset data = two_pattern_dataset(64, 9);
  const auto [train_set, val_set] = split_dataset(data, 0.25, 1);
  TempDir a("run_a"), b("run_b");
  for (const TempDir* dir : {&a, &b}) {
    Rng init(run.train.seed);
    MatNet<float> net(run.model, init);
    TrainOptions opt;
    opt.out_dir = dir->path.string();
    std::ostringstream log;
    opt.log = &log;
    train(net, train_set, val_set, run, opt);
  }
  for (const char* name : {"metrics.csv", "kl_profile.csv", "val.csv", "config.txt"}) {
    const std::string left = slurp(a.path / name);
    CHECK_MESSAGE(!left.empty(), name);
    CHECK_MESSAGE(left == slurp(b.path / name), name);
  }
  CHECK(slurp(a.path / "checkpoints" / "last.mtn") == slurp(b.path / "checkpoints" / "last.mtn"));

  std::ifstream is(a.path / "kl_profile.csv");
  std::string line;
  std::getline(is, line);
  int rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    const double total = values.back();
    values.pop_back();
    CHECK(KlProfile::row_total(values) == doctest::Approx(total).epsilon(1e-6));
    ++rows;
  }
  CHECK(rows == 6);  // 48 images, batches of 16, 2 epochs
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  RunConfig run = tiny_run();
  const Dataset data = two_pattern_dataset(48, 2);
  const auto [train_set, val_set] = split_dataset(data, 0.25, 1);
  std::ostringstream log;
  TempDir whole("whole"), parts("parts");
  {
    Rng init(run.train.seed);
    MatNet<float> net(run.model, init);
    train(net, train_set, val_set, run, {whole.path.string(), false, &log});
  }
  {
    RunConfig first = run;
    first.train.epochs = 1;
    Rng init(run.train.seed);
    MatNet<float> net(run.model, init);
    train(net, train_set, val_set, first, {parts.path.string(), false, &log});
    MatNet<float> resumed(run.model, init);
    train(resumed, train_set, val_set, run, {parts.path.string(), true, &log});
  }
  CHECK(slurp(whole.path / "metrics.csv") == slurp(parts.path / "metrics.csv"));
  CHECK(slurp(whole.path / "checkpoints" / "last.mtn") == slurp(parts.path / "checkpoints" / "last.mtn"));
}

TEST_CASE("training refuses a non-empty run directory without resume") {
  const RunConfig run = tiny_run();
  const Dataset data = two_pattern_dataset(16, 2);
  TempDir dir("busy");
  fs::create_directories(dir.path);
  std::ofstream(dir.path / "stray") << "x";
  Rng init(1);
  MatNet<float> net(run.model, init);
  std::ostringstream log;
  CHECK_THROWS(train(net, data, Dataset{}, run, {dir.path.string(), false, &log}));
}

TEST_CASE("non-finite loss skips updates and leaves parameters untouched") {
  RunConfig run = tiny_run();
  run.train.epochs = 1;
  Rng init(2);
  MatNet<float> net(run.model, init);
  net.params().entries().front().value.array() = std::numeric_limits<float>::quiet_NaN();
  const ParamStore<float> before = net.params();
  std::ostringstream log;
  TrainOptions opt;
  opt.log = &log;
  const TrainSummary s = train(net, two_pattern_dataset(32, 3), Dataset{}, run, opt);
  CHECK(s.updates == 2);
  CHECK(s.skipped == 2);
  for (std::size_t i = 1; i < before.size(); ++i) {
    CHECK((net.params().entries()[i].value.array() == before.entries()[i].value.array()).all());
  }
  CHECK(log.str().find("skipped") != std::string::npos);
}

TEST_CASE("training loss falls on the two-pattern data") {
  RunConfig run = tiny_run();
  run.train.epochs = 20;
  Rng init(run.train.seed);
  MatNet<float> net(run.model, init);
  std::ostringstream log;
  TrainOptions opt;
  opt.log = &log;
  const TrainSummary s = train(net, two_pattern_dataset(128, 4), Dataset{}, run, opt);
  double first = 0, last = 0;
  for (int i = 0; i < 8; ++i) {
    first += s.history[static_cast<std::size_t>(i)].loss;
    last += s.history[s.history.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < 0.8 * first);
}

TEST_CASE("independent-pixel baseline") {
  const TensorF images = TensorF::from(Shape{4, 1, 1, 2}, {1, 0, 1, 1, 0, 0, 1, 1});
  const TensorF p = bernoulli_marginals(images);
  CHECK(p[0] == doctest::Approx(0.75));
  CHECK(p[1] == doctest::Approx(0.5));
  const std::vector<double> nll = marginal_nll(p, images);
  CHECK(nll[0] == doctest::Approx(-std::log(0.75) - std::log(0.5)));
  CHECK(nll[2] == doctest::Approx(-std::log(0.25) - std::log(0.5)));
  const TensorF mask = TensorF::from(Shape{4, 1, 1, 2}, {1, 0, 0, 1, 1, 1, 0, 0});
  const std::vector<double> masked = marginal_nll(p, images, &mask);
  CHECK(masked[0] == doctest::Approx(-std::log(0.5)));
  CHECK(masked[2] == 0.0);
  // Degenerate probabilities are floored rather than infinite.
  const TensorF certain = TensorF::from(Shape{1, 1, 1, 2}, {1, 1});
  CHECK(std::isfinite(marginal_nll(certain, images)[1]));
}

TEST_CASE("neutral conditional net on one known quadrant") {
  ModelConfig c;
  c.kind = NetKind::kConditional;
  c.scales = {14, 7};
  c.modules = {1, 1};
  c.channels = {4, 4};
  c.fc_modules = 1;
  c.fc_latent = 4;
  c.fc_width = 8;
  Rng init(1);
  MatNet<float> net(c, init);
  net.params().set_zero();
  Rng data_rng(2);
  TensorF images = data_rng.uniform_tensor<float>(Shape{3, 1, 28, 28});
  images = binarize_fixed(images);
  TensorF half(Shape{784});
  half.array() = 0.5f;
  Rng rng(3);
  const QuadrantScore s = quadrant_task(net, images, half, 1, 4, rng);
  CHECK(s.model_nll == doctest::Approx(588 * std::log(2.0)).epsilon(1e-5));
  CHECK(s.baseline_nll == doctest::Approx(588 * std::log(2.0)).epsilon(1e-9));
}
