#include "matnet/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace matnet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTrainStream = 0x7472;
constexpr std::uint64_t kShuffleStream = 0x7368;
constexpr std::uint64_t kMaskStream = 0x6d61;
constexpr std::uint64_t kValStream = 0x7661;
constexpr std::uint64_t kEvalStream = 0x6576;
constexpr std::uint64_t kGuessStream = 0x6775;
constexpr const char* kProgressKey = "__progress__";

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double sum_of(const Tensor<float>& t) { return static_cast<double>(t.array().template cast<double>().sum()); }

/// Rows [start, start + count) of an observation, with a guess when needed.
Observation<float> rows_of(const TensorF& images, const std::vector<Index>& order, Index start, Index count) {
  Observation<float> obs;
  const Index inner = images.shape().inner();
  obs.x = TensorF(images.shape().with_dim(0, count));
  for (Index i = 0; i < count; ++i) {
    obs.x.array().segment(i * inner, inner) =
        images.array().segment(order[static_cast<std::size_t>(start + i)] * inner, inner);
  }
  return obs;
}

MaskSpec mask_spec(const TrainConfig& cfg) {
  MaskSpec spec;
  spec.kind = cfg.mask == MaskKind::kNone ? MaskKind::kQuadrants : cfg.mask;
  spec.q_known = cfg.q_known;
  return spec;
}

}  // namespace

template <typename S>
OptimState<S> OptimState<S>::from(const TrainConfig& cfg) {
  OptimState s;
  s.learning_rate = cfg.learning_rate;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.eps = cfg.adam_eps;
  s.clip_norm = cfg.clip_norm;
  return s;
}

template <typename S>
StepResult adam_step(ParamStore<S>& params, const std::vector<Tensor<S>>& grads, OptimState<S>& state) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw ShapeError("adam_step: gradient count does not match parameters");
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.value.shape());
      state.v.emplace_back(e.value.shape());
    }
  }
  StepResult r;
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != entries[i].value.shape()) {
      throw ShapeError("adam_step: gradient for " + entries[i].name + " has shape " + grads[i].shape().str());
    }
    sq += grads[i].array().template cast<double>().square().sum();
  }
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) return r;
  double factor = 1.0;
  if (state.clip_norm > 0 && r.grad_norm > state.clip_norm) {
    factor = state.clip_norm / r.grad_norm;
    r.clipped = true;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const S b1 = static_cast<S>(state.beta1), b2 = static_cast<S>(state.beta2);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(state.beta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(state.beta2, t)));
  const S lr = static_cast<S>(state.learning_rate), eps = static_cast<S>(state.eps);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto g = grads[i].array() * static_cast<S>(factor);
    auto& m = state.m[i].array();
    auto& v = state.v[i].array();
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    entries[i].value.array() -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
  r.applied = true;
  return r;
}

double KlProfile::row_total(const std::vector<double>& row) {
  return std::accumulate(row.begin(), row.end(), 0.0);
}

void KlProfile::write_csv(std::ostream& os) const {
  const std::size_t cols = rows.empty() ? groups.size() : rows.front().size();
  os << "update";
  for (std::size_t i = 0; i < cols; ++i) os << ",module_" << i;
  os << ",total\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << updates[r];
    for (double v : rows[r]) os << "," << fmt(v);
    os << "," << fmt(row_total(rows[r])) << "\n";
  }
}

void KlProfile::write_csv(const std::string& path) const {
  if (rows.empty()) throw std::invalid_argument("kl profile is empty");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_csv(os);
}

void KlProfile::write_groups(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "module,group\n";
  for (std::size_t i = 0; i < groups.size(); ++i) os << "module_" << i << "," << groups[i] << "\n";
}

KlProfile KlProfile::read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  KlProfile p;
  std::string line;
  if (!std::getline(is, line) || line.rfind("update,", 0) != 0) throw DataError(path + ": not a KL profile");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> values;
    std::getline(ss, cell, ',');
    const Index update = std::stoll(cell);
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    if (values.size() < 2) throw DataError(path + ": short row");
    values.pop_back();  // total
    p.updates.push_back(update);
    p.rows.push_back(std::move(values));
  }
  return p;
}

BatchResult batch_gradients(const MatNet<float>& net, const Observation<float>& batch, const TrainConfig& cfg,
                            Index update, double kl_weight) {
  const Index b = batch.batch();
  const Index shards = std::clamp<Index>(cfg.shards, 1, b);
  const double lambda = cfg.effective_lambda();
  const bool mixture = net.config().prior == PriorKind::kMixture;
  const GroupSet generator = GroupSet::generator();

  struct ShardOut {
    std::vector<TensorF> grads;
    double loss = 0, recon = 0, kl = 0, lq = 0, leak = 0;
    std::vector<double> layer_kls;
    std::exception_ptr error;
  };
  std::vector<ShardOut> outs(static_cast<std::size_t>(shards));

  auto run_shard = [&](Index s) {
    ShardOut& out = outs[static_cast<std::size_t>(s)];
    try {
      const Index start = b * s / shards, stop = b * (s + 1) / shards, n = stop - start;
      const Observation<float> part = batch.slice(start, n);
      Rng rng = Rng(cfg.seed, kTrainStream).split(static_cast<std::uint64_t>(update)).split(static_cast<std::uint64_t>(s));
      const float inv_b = 1.0f / static_cast<float>(b);
      {
        Tape<float> tape;
        const BoundParams<float> p(tape, net.params(), GroupSet::all());
        const FreeEnergyReport<float> fe = net.free_energy(p, part, rng, cfg.mc_samples);
        Var<float> objective = fe.recon_nll;
        for (const auto& kl : fe.layer_kls) objective = objective + scale(kl, static_cast<float>(kl_weight));
        Var<float> loss = scale(sum(objective), inv_b);
        if (mixture && cfg.entropy_weight > 0) {
          loss = loss + scale(fe.entropy, static_cast<float>(cfg.entropy_weight * static_cast<double>(n) / static_cast<double>(b)));
        }
        tape.backward(loss);
        out.grads = p.gradients();
        out.loss = static_cast<double>(loss.value()[0]);
        out.recon = sum_of(fe.recon_nll.value());
        for (const auto& kl : fe.layer_kls) {
          out.layer_kls.push_back(sum_of(kl.value()));
          out.kl += out.layer_kls.back();
        }
      }
      if (lambda > 0) {
        Tape<float> tape;
        const BoundParams<float> p(tape, net.params(), GroupSet::inference());
        const Var<float> reg = net.inference_regularizer(p, n, rng, cfg.regularizer_hard_samples,
                                                         net.conditional() ? &part : nullptr);
        const Var<float> term = scale(reg, static_cast<float>(lambda * static_cast<double>(n) / static_cast<double>(b)));
        tape.backward(term);
        const std::vector<TensorF> g = p.gradients();
        const auto& entries = net.params().entries();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (generator.contains(entries[i].group)) {
            out.leak = std::max(out.leak, static_cast<double>(g[i].array().abs().maxCoeff()));
          }
          out.grads[i].array() += g[i].array();
        }
        out.lq = static_cast<double>(term.value()[0]);
        out.loss += out.lq;
      }
    } catch (...) {
      out.error = std::current_exception();
    }
  };

  const Index workers = std::min<Index>(cfg.threads, shards);
  if (workers <= 1) {
    for (Index s = 0; s < shards; ++s) run_shard(s);
  } else {
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    for (Index w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (Index s = next++; s < shards; s = next++) run_shard(s);
      });
    }
    for (auto& t : pool) t.join();
  }

  BatchResult result;
  auto& m = result.metrics;
  m.update = update;
  for (auto& out : outs) {
    if (out.error) std::rethrow_exception(out.error);
    if (result.grads.empty()) {
      result.grads = std::move(out.grads);
      m.layer_kls.assign(out.layer_kls.size(), 0.0);
    } else {
      for (std::size_t i = 0; i < result.grads.size(); ++i) result.grads[i].array() += out.grads[i].array();
    }
    m.loss += out.loss;
    m.recon += out.recon;
    m.kl_total += out.kl;
    m.lq_term += out.lq;
    for (std::size_t i = 0; i < out.layer_kls.size(); ++i) m.layer_kls[i] += out.layer_kls[i];
    result.generator_leak = std::max(result.generator_leak, out.leak);
  }
  const double inv = 1.0 / static_cast<double>(b);
  m.recon *= inv;
  m.kl_total *= inv;
  for (double& v : m.layer_kls) v *= inv;
  if (checked_mode() && result.generator_leak != 0.0) {
    throw std::logic_error("inference regularizer produced a generator gradient");
  }
  return result;
}

Observation<float> validation_observation(const MatNet<float>& net, const Dataset& val, const TrainConfig& cfg,
                                          const MatNet<float>* first_stage) {
  const Dataset part = cfg.eval_max > 0 ? val.head(cfg.eval_max) : val;
  Observation<float> obs;
  Rng rng(cfg.seed, kValStream);
  switch (cfg.binarize) {
    case Binarize::kDynamic: obs.x = binarize_dynamic(part.images, rng); break;
    case Binarize::kFixed: obs.x = binarize_fixed(part.images); break;
    case Binarize::kNone: obs.x = cfg.dequantize ? dequantize(part.images, rng) : part.images; break;
  }
  if (net.conditional()) {
    Rng mask_rng(cfg.seed, kValStream + 1);
    obs.mask = make_mask(mask_spec(cfg), obs.x.shape(), mask_rng);
    if (net.config().guess_input) {
      if (first_stage == nullptr) throw std::invalid_argument("second-stage model needs a first-stage model");
      Rng guess_rng(cfg.seed, kValStream + 2);
      obs.guess = first_stage->generate(0, guess_rng, &obs);
    }
  }
  return obs;
}

std::vector<double> validation_nlls(const MatNet<float>& net, const Observation<float>& obs, Index k,
                                    std::uint64_t seed) {
  Rng rng(seed, kEvalStream);
  return net.eval_nll(obs, k, rng);
}

double validation_nll(const MatNet<float>& net, const Observation<float>& obs, Index k, std::uint64_t seed) {
  const std::vector<double> nll = validation_nlls(net, obs, k, seed);
  return std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(nll.size());
}

double bits_per_dim(double nll, const ModelConfig& model) {
  const Index dims = model.image_channels * model.image_height * model.image_width;
  switch (model.output) {
    case LikelihoodKind::kDiagGaussian: return bits_per_pixel(nll, dims);
    // Bin masses are already discrete probabilities.
    case LikelihoodKind::kIntegratedLogistic: return nll / (static_cast<double>(dims) * std::log(2.0));
    default: return std::numeric_limits<double>::quiet_NaN();
  }
}

namespace {

NamedTensors optim_to_named(const ParamStore<float>& params, const OptimState<float>& st, Index epoch, Index update) {
  NamedTensors out;
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    out.emplace_back("m." + params.entries()[i].name, st.m[i]);
    out.emplace_back("v." + params.entries()[i].name, st.v[i]);
  }
  // Counters go through float; exact below 2^24.
  out.emplace_back(kProgressKey, TensorF::from(Shape{3}, {static_cast<float>(st.step), static_cast<float>(epoch),
                                                           static_cast<float>(update)}));
  return out;
}

void optim_from_named(const NamedTensors& named, const ParamStore<float>& params, OptimState<float>& st,
                      Index& epoch, Index& update) {
  auto find = [&](const std::string& key) -> const TensorF& {
    for (const auto& [name, t] : named) {
      if (name == key) return t;
    }
    throw FormatError("optimizer state is missing " + key);
  };
  st.m.clear();
  st.v.clear();
  for (const auto& e : params.entries()) {
    st.m.push_back(find("m." + e.name));
    st.v.push_back(find("v." + e.name));
    if (st.m.back().shape() != e.value.shape()) throw FormatError("optimizer state shape mismatch for " + e.name);
  }
  const TensorF& progress = find(kProgressKey);
  st.step = static_cast<Index>(progress[0]);
  epoch = static_cast<Index>(progress[1]);
  update = static_cast<Index>(progress[2]);
}

}  // namespace

TrainSummary train(MatNet<float>& net, const Dataset& train_data, const Dataset& val_data, const RunConfig& run,
                   const TrainOptions& options) {
  const TrainConfig& cfg = run.train;
  cfg.validate();
  if (train_data.size() == 0) throw DataError("training set is empty");
  if (train_data.images.shape().with_dim(0, 1) != net.image_shape(1)) {
    throw DataError("training images " + train_data.images.shape().str() + " do not match the model input " +
                    net.image_shape(1).str());
  }
  if (net.config().guess_input && options.first_stage == nullptr) {
    throw std::invalid_argument("second-stage model needs a first-stage model");
  }
  std::ostream& log = options.log ? *options.log : std::cerr;
  const bool to_disk = !options.out_dir.empty();
  const fs::path dir(options.out_dir);
  const fs::path ckpt_dir = dir / "checkpoints";

  TrainSummary summary;
  summary.profile.groups = net.layer_groups();
  OptimState<float> state = OptimState<float>::from(cfg);
  Index start_epoch = 0;
  Index update = 0;

  std::ofstream metrics, profile_csv, val_csv;
  if (to_disk) {
    const bool exists = fs::exists(dir) && !fs::is_empty(dir);
    if (exists && !options.resume) {
      throw std::runtime_error("run directory " + dir.string() + " is not empty (use --resume to continue)");
    }
    if (options.resume) {
      if (!fs::exists(ckpt_dir / "last.mtn")) throw std::runtime_error("nothing to resume in " + dir.string());
      LoadedCheckpoint last = load_checkpoint((ckpt_dir / "last.mtn").string());
      if (last.run.model.scales != net.config().scales) throw ConfigError("resume: checkpoint model differs from config");
      net.params() = last.net.params();
      optim_from_named(load_archive((ckpt_dir / "last.optim").string()), net.params(), state, start_epoch, update);
    }
    fs::create_directories(ckpt_dir);
    {
      std::ofstream echo(dir / "config.txt");
      echo << run.canonical();
    }
    summary.profile.write_groups((dir / "kl_groups.csv").string());
    const auto mode = options.resume ? std::ios::app : std::ios::trunc;
    metrics.open(dir / "metrics.csv", mode);
    profile_csv.open(dir / "kl_profile.csv", mode);
    val_csv.open(dir / "val.csv", mode);
    if (!metrics || !profile_csv || !val_csv) throw std::runtime_error("cannot write into " + dir.string());
    if (!options.resume) {
      metrics << "update,loss,recon,kl_total,lq_term,wall_ms\n";
      KlProfile header;
      header.groups = summary.profile.groups;
      header.write_csv(profile_csv);
      val_csv << "epoch,update,val_nll" << (net.config().output == LikelihoodKind::kBernoulli ? "" : ",bits_per_dim")
              << "\n";
    }
  }

  const Observation<float> val_obs =
      val_data.size() > 0 ? validation_observation(net, val_data, cfg, options.first_stage) : Observation<float>{};
  const auto started = std::chrono::steady_clock::now();
  auto elapsed_s = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  bool stop = false;
  const Index n = train_data.size();
  Index epoch = start_epoch;
  for (; epoch < cfg.epochs && !stop; ++epoch) {
    const TensorF view = epoch_view(train_data.images, cfg.binarize, cfg.dequantize, cfg.seed, epoch);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle = Rng(cfg.seed, kShuffleStream).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (Index start = 0; start < n && !stop; start += cfg.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      const Index count = std::min(cfg.batch_size, n - start);
      Observation<float> batch = rows_of(view, order, start, count);
      if (net.conditional()) {
        Rng mask_rng = Rng(cfg.seed, kMaskStream).split(static_cast<std::uint64_t>(update));
        batch.mask = make_mask(mask_spec(cfg), batch.x.shape(), mask_rng);
        if (net.config().guess_input) {
          Rng guess_rng = Rng(cfg.seed, kGuessStream).split(static_cast<std::uint64_t>(update));
          batch.guess = options.first_stage->generate(0, guess_rng, &batch);
        }
      }
      const double kl_weight =
          cfg.kl_warmup > 0 ? std::min(1.0, static_cast<double>(update + 1) / static_cast<double>(cfg.kl_warmup)) : 1.0;
      BatchResult res = batch_gradients(net, batch, cfg, update, kl_weight);
      const bool finite_loss = std::isfinite(res.metrics.loss);
      const StepResult step = finite_loss ? adam_step(net.params(), res.grads, state) : StepResult{};
      UpdateMetrics& m = res.metrics;
      if (!step.applied) {
        m.skipped = true;
        ++summary.skipped;
        log << "update " << update << ": non-finite loss or gradient, step skipped\n";
      }
      m.wall_ms = cfg.record_wall_time
                      ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                      : 0.0;
      summary.profile.updates.push_back(update);
      summary.profile.rows.push_back(m.layer_kls);
      if (to_disk) {
        metrics << update << "," << fmt(m.loss) << "," << fmt(m.recon) << "," << fmt(m.kl_total) << ","
                << fmt(m.lq_term) << "," << fmt(m.wall_ms) << "\n";
        profile_csv << update;
        for (double v : m.layer_kls) profile_csv << "," << fmt(v);
        profile_csv << "," << fmt(KlProfile::row_total(m.layer_kls)) << "\n";
      }
      summary.history.push_back(std::move(m));
      ++update;
      if (cfg.max_updates > 0 && update >= cfg.max_updates) stop = true;
      if (cfg.time_budget_s > 0 && elapsed_s() >= cfg.time_budget_s) stop = true;
    }

    const bool last_epoch = stop || epoch + 1 == cfg.epochs;
    if (val_obs.x.size() > 0 && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch)) {
      summary.last_val_nll = validation_nll(net, val_obs, cfg.eval_k, cfg.seed);
      log << "epoch " << epoch + 1 << " update " << update << " val_nll " << fmt(summary.last_val_nll) << "\n";
      if (to_disk) {
        val_csv << epoch + 1 << "," << update << "," << fmt(summary.last_val_nll);
        if (net.config().output != LikelihoodKind::kBernoulli) {
          val_csv << "," << fmt(bits_per_dim(summary.last_val_nll, net.config()));
        }
        val_csv << "\n";
        val_csv.flush();
      }
    }
    if (to_disk) {
      metrics.flush();
      profile_csv.flush();
      if (cfg.checkpoint_every > 0 && ((epoch + 1) % cfg.checkpoint_every == 0 || last_epoch)) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04lld.mtn", static_cast<long long>(epoch + 1));
        save_checkpoint((ckpt_dir / name).string(), net, run);
      }
      save_checkpoint((ckpt_dir / "last.mtn").string(), net, run);
      save_archive((ckpt_dir / "last.optim").string(), optim_to_named(net.params(), state, epoch + 1, update));
    }
  }
  summary.updates = update;
  summary.epochs = epoch;
  return summary;
}

TensorF bernoulli_marginals(const TensorF& images) {
  const Index n = images.dim(0), inner = images.shape().inner();
  TensorF p(images.shape().with_dim(0, 1));
  for (Index i = 0; i < n; ++i) p.array() += images.array().segment(i * inner, inner);
  p.array() /= static_cast<float>(n);
  return p;
}

std::vector<double> marginal_nll(const TensorF& probs, const TensorF& images, const TensorF* mask) {
  const Index n = images.dim(0), inner = images.shape().inner();
  if (probs.size() != inner) throw ShapeError("marginal_nll: probability map does not match images");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < inner; ++j) {
      if (mask && (*mask)[i * inner + j] != 0.0f) continue;
      const double p = std::clamp(static_cast<double>(probs[j]), kProbFloor, 1.0 - kProbFloor);
      const double x = images[i * inner + j];
      out[static_cast<std::size_t>(i)] -= x * std::log(p) + (1.0 - x) * std::log1p(-p);
    }
  }
  return out;
}

QuadrantScore quadrant_task(const MatNet<float>& net, const TensorF& images, const TensorF& baseline_probs,
                            Index q_known, Index k, Rng& rng) {
  if (!net.conditional()) throw std::invalid_argument("quadrant task needs a conditional model");
  if (net.config().guess_input) throw std::invalid_argument("quadrant task scores single-stage models");
  if (q_known < 1 || q_known > 3) throw std::invalid_argument("q_known must be 1, 2, or 3");
  MaskSpec spec;
  spec.kind = MaskKind::kQuadrants;
  spec.q_known = q_known;
  Observation<float> obs;
  obs.x = images;
  obs.mask = make_mask(spec, images.shape(), rng);
  const std::vector<double> nll = net.eval_nll(obs, k, rng);
  const std::vector<double> base = marginal_nll(baseline_probs, images, &obs.mask);
  const double n = static_cast<double>(nll.size());
  return {std::accumulate(nll.begin(), nll.end(), 0.0) / n, std::accumulate(base.begin(), base.end(), 0.0) / n};
}

template struct OptimState<float>;
template struct OptimState<double>;
template StepResult adam_step(ParamStore<float>&, const std::vector<TensorF>&, OptimState<float>&);
template StepResult adam_step(ParamStore<double>&, const std::vector<TensorD>&, OptimState<double>&);

}  // namespace matnet
