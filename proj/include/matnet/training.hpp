#pragma once

#include "matnet/data_io.hpp"
#include "matnet/model.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace matnet {

/// Adam moments for every parameter of a store.
template <typename S>
struct OptimState {
  std::vector<Tensor<S>> m, v;
  Index step = 0;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping

  static OptimState from(const TrainConfig& cfg);
};

struct StepResult {
  bool applied = false;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// Bias-corrected Adam update after global-norm clipping. Non-finite
/// gradients leave parameters and moments untouched.
template <typename S>
StepResult adam_step(ParamStore<S>& params, const std::vector<Tensor<S>>& grads, OptimState<S>& state);

/// Per-update mean KL of each latent layer.
struct KlProfile {
  std::vector<std::string> groups;  // meta-module label per layer
  std::vector<Index> updates;
  std::vector<std::vector<double>> rows;

  static double row_total(const std::vector<double>& row);
  /// Writes `update,module_0..module_d,total`.
  void write_csv(std::ostream& os) const;
  void write_csv(const std::string& path) const;
  /// Layer-to-group table, one `module_i,group` line per layer.
  void write_groups(const std::string& path) const;
  static KlProfile read_csv(const std::string& path);
};

struct UpdateMetrics {
  Index update = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl_total = 0.0;
  double lq_term = 0.0;
  double wall_ms = 0.0;
  std::vector<double> layer_kls;
  bool skipped = false;
};

/// Loss and summed gradients for one minibatch, split into fixed shards
/// evaluated by up to `threads` workers and reduced in shard order.
struct BatchResult {
  UpdateMetrics metrics;
  std::vector<TensorF> grads;
  /// Largest |gradient| the regularizer sent to a generator parameter.
  double generator_leak = 0.0;
};
BatchResult batch_gradients(const MatNet<float>& net, const Observation<float>& batch, const TrainConfig& cfg,
                            Index update, double kl_weight);

struct TrainSummary {
  Index updates = 0;
  Index epochs = 0;
  Index skipped = 0;
  double last_val_nll = 0.0;
  KlProfile profile;
  std::vector<UpdateMetrics> history;
};

struct TrainOptions {
  /// Run directory; empty keeps everything in memory.
  std::string out_dir;
  bool resume = false;
  std::ostream* log = nullptr;
  /// Supplies guesses when training a second-stage imputation model.
  const MatNet<float>* first_stage = nullptr;
};

/// SGVB training with optional inference regularizer. Writes
/// metrics.csv, kl_profile.csv, val.csv and checkpoints/ under out_dir.
TrainSummary train(MatNet<float>& net, const Dataset& train_data, const Dataset& val_data, const RunConfig& run,
                   const TrainOptions& options = {});

/// Validation images and masks for a run, reproducible from the seed.
Observation<float> validation_observation(const MatNet<float>& net, const Dataset& val, const TrainConfig& cfg,
                                          const MatNet<float>* first_stage = nullptr);
/// Per-example importance-weighted NLL with a seed-derived stream.
std::vector<double> validation_nlls(const MatNet<float>& net, const Observation<float>& obs, Index k,
                                    std::uint64_t seed);
double validation_nll(const MatNet<float>& net, const Observation<float>& obs, Index k, std::uint64_t seed);
/// NLL in bits per sub-pixel for continuous outputs; NaN for Bernoulli.
double bits_per_dim(double nll, const ModelConfig& model);

/// Per-pixel Bernoulli MLE probabilities over a set of images.
TensorF bernoulli_marginals(const TensorF& images);
/// Per-example NLL of images under independent per-pixel Bernoullis,
/// counting only pixels where `mask` is 0 when a mask is given.
std::vector<double> marginal_nll(const TensorF& probs, const TensorF& images, const TensorF* mask = nullptr);

struct QuadrantScore {
  double model_nll = 0.0;
  double baseline_nll = 0.0;
};
/// Mean NLL over the unknown quadrants when `q_known` random quadrants are
/// visible, for the model and for independent pixels with `baseline_probs`,
/// both on the same masks.
QuadrantScore quadrant_task(const MatNet<float>& net, const TensorF& images, const TensorF& baseline_probs,
                            Index q_known, Index k, Rng& rng);

}  // namespace matnet
