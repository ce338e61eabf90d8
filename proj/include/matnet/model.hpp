#pragma once

#include "matnet/ar_head.hpp"
#include "matnet/config.hpp"
#include "matnet/layers.hpp"

#include <optional>
#include <string>
#include <vector>

namespace matnet {

/// A batch of images plus, for conditional nets, which pixels are known.
template <typename S>
struct Observation {
  Tensor<S> x;
  /// 1 = known pixel. Empty for unconditional nets.
  Tensor<S> mask;
  /// First-stage fill used by second-stage imputation nets. Only its
  /// unknown-pixel values are read.
  Tensor<S> guess;

  Index batch() const { return x.dim(0); }
  Observation slice(Index start, Index count) const;
  /// Each example repeated `times` times consecutively.
  Observation repeated(Index times) const;
};

template <typename S>
struct LatentLayerRecord {
  Var<S> z;
  DiagGaussian<S> posterior;
  /// Standard normal for z_0 under a mixture prior; see `mixture`.
  DiagGaussian<S> prior;
  bool mixture = false;
  Var<S> kl;     // (b) closed form, or the mixture approximation
  Var<S> log_q;  // (b) at the sampled z
  Var<S> log_p;  // (b) at the sampled z
};

template <typename S>
struct InferenceTrace {
  std::vector<LatentLayerRecord<S>> layers;
  Var<S> td_out;
  OutputLikelihood<S> output;
  /// (b, k) mixture responsibilities for z_0; invalid without a mixture prior.
  Var<S> responsibilities;
};

/// Per-example terms of the variational bound, in nats.
template <typename S>
struct FreeEnergyReport {
  Var<S> recon_nll;
  std::vector<Var<S>> layer_kls;
  /// recon_nll + sum(layer_kls)
  Var<S> total_bound;
  /// recon_nll + sum(log q - log p) at the sampled latents; the k = 1
  /// importance-weighted estimate.
  Var<S> sampled_bound;
  /// Batch-mean entropy of the mixture responsibilities (0 without a mixture).
  Var<S> entropy;
};

template <typename S>
struct GenerationTrace {
  std::vector<DiagGaussian<S>> priors;
  std::vector<Var<S>> latents;
  Var<S> td_out;
  /// Factorized output distribution; invalid params when an AR head is attached.
  OutputLikelihood<S> output;
};

/// Hierarchical latent-variable image model built from top-down,
/// bottom-up, and merge modules.
template <typename S>
class MatNet {
 public:
  MatNet(ModelConfig config, Rng& init_rng);

  const ModelConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  bool conditional() const { return config_.kind == NetKind::kConditional; }
  /// Number of latent layers below z_0.
  Index depth() const { return static_cast<Index>(td_layers_.size()); }
  Shape image_shape(Index batch) const;
  Index pixels() const;
  /// Meta-module label for each latent record ("z0", "fc", "7x7", ...).
  std::vector<std::string> layer_groups() const;

  /// Posterior pass. The image is a tape variable so callers can probe
  /// gradients with respect to pixels.
  InferenceTrace<S> infer(const BoundParams<S>& p, Var<S> x, const Observation<S>& obs,
                          Rng& rng) const;
  InferenceTrace<S> infer(const BoundParams<S>& p, const Observation<S>& obs, Rng& rng) const;

  /// Averages `mc_samples` inference passes.
  /// `soft_targets` lets Bernoulli outputs score probabilities in [0,1].
  FreeEnergyReport<S> free_energy(const BoundParams<S>& p, const Observation<S>& obs, Rng& rng,
                                  Index mc_samples = 1, bool soft_targets = false) const;
  FreeEnergyReport<S> report(const InferenceTrace<S>& trace, Var<S> x, const Observation<S>& obs,
                             bool soft_targets = false) const;

  /// Ancestral pass down to the output distribution. Conditional nets read
  /// only x * mask (and the guess on unknown pixels) from `x`.
  GenerationTrace<S> generate_trace(const BoundParams<S>& p, Index n, Rng& rng, Var<S> x,
                                    const Observation<S>* condition) const;
  /// Draws images; with `use_mean` the output distribution's mean replaces
  /// the final draw. Conditional nets keep known pixels untouched.
  Tensor<S> generate(Index n, Rng& rng, const Observation<S>* condition = nullptr,
                     bool use_mean = false) const;

  /// (b, k) importance log-weights from k posterior draws per example.
  Tensor<S> log_weights(const Observation<S>& obs, Index k, Rng& rng) const;
  /// Per-example importance-weighted NLL estimate with k samples.
  std::vector<double> eval_nll(const Observation<S>& obs, Index k, Rng& rng,
                               Index max_rows = 512) const;

  /// Mean bound on model-generated images, differentiable in the inference
  /// parameters only when `p` binds just those groups. Conditional nets use
  /// `condition`'s masks and known pixels.
  Var<S> inference_regularizer(const BoundParams<S>& p, Index n, Rng& rng, bool hard_samples,
                               const Observation<S>* condition = nullptr) const;

  const std::optional<ArHead>& ar_head() const { return ar_head_; }

 private:
  struct TdLayer {
    std::optional<TdModule> conv;
    std::optional<TdFcModule> fc;
    std::optional<MergeModule> merge;
    std::optional<MergeFcModule> merge_fc;
    std::optional<MergeModule> gen_merge;
    std::optional<MergeFcModule> gen_merge_fc;
    /// Connectors applied to the top-down, merge, and generator-merge states
    /// before this layer when it starts a new scale.
    std::optional<Connector> td_in, merge_in, gen_merge_in;
    int group = 0;
  };
  struct BuPath {
    ConvParams read_in;
    std::optional<Connector> read_in_down;
    std::vector<BuModule> conv;
    std::vector<std::optional<Connector>> conv_in;  // before each conv module
    std::optional<Connector> to_fc;
    std::vector<BuFcModule> fc;
    ConvParams z0_conv;
    LinearParams z0_fc;
  };
  struct GroupInfo {
    std::string name;
    bool fc = false;
    Index scale = 0;  // index into config scales
  };
  struct BuStates {
    std::vector<Var<S>> per_layer;  // indexed by top-down layer
    Var<S> top;
  };

  void build_bu(BuPath& path, const std::string& name, ParamGroup group, Index in_channels,
                Rng& rng);
  BuStates run_bu(const BuPath& path, const BoundParams<S>& p, Var<S> input) const;
  DiagGaussian<S> z0_readout(const BuPath& path, const BoundParams<S>& p, Var<S> top) const;
  Var<S> td_entry(const BoundParams<S>& p, Var<S> z0) const;
  Var<S> td_readout(const BoundParams<S>& p, Var<S> h) const;
  OutputLikelihood<S> output_from(const BoundParams<S>& p, Var<S> td_out, Var<S> x) const;
  MixturePrior<S> mixture(const BoundParams<S>& p) const;
  Shape z0_shape(Index batch) const;
  Var<S> inference_input(Tape<S>& tape, Var<S> x, const Observation<S>& obs) const;
  Var<S> generator_input(Tape<S>& tape, Var<S> x, const Observation<S>& obs) const;
  Var<S> zero_state(Tape<S>& tape, Index batch, int group) const;
  Shape group_state_shape(Index batch, int group) const;
  void check_observation(const Observation<S>& obs) const;

  ModelConfig config_;
  ParamStore<S> params_;
  std::vector<GroupInfo> groups_;
  std::vector<TdLayer> td_layers_;
  BuPath bu_;
  std::optional<BuPath> gen_bu_;
  LinearParams entry_fc_;
  std::optional<Connector> entry_connector_;
  ConvParams entry_conv_;
  std::optional<Connector> readout_up_;
  ConvParams likelihood_readout_;
  std::optional<ArHead> ar_head_;
  std::vector<int> mixture_mu_, mixture_log_var_;
};

/// Two-stage fill: the first net proposes the unknown pixels, the second
/// refines them given that proposal.
template <typename S>
Tensor<S> impute_two_stage(const MatNet<S>& stage1, const MatNet<S>& stage2,
                           const Observation<S>& obs, Rng& rng, bool use_mean = false);

/// Checkpoint I/O. The archive holds every parameter plus a "__manifest__"
/// entry with the run configuration as key=value text.
inline constexpr const char* kManifestKey = "__manifest__";
void save_checkpoint(const std::string& path, const MatNet<float>& net, const RunConfig& run);
struct LoadedCheckpoint {
  RunConfig run;
  MatNet<float> net;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace matnet
