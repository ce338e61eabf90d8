#pragma once

#include "matnet/distributions.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace matnet {

/// Invalid, unknown, or missing configuration key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NetKind { kUnconditional, kConditional };
enum class PriorKind { kNormal, kMixture };
enum class Z0Placement { kFc, kSpatial };

struct ModelConfig {
  NetKind kind = NetKind::kUnconditional;
  Index image_channels = 1;
  Index image_height = 28;
  Index image_width = 28;
  /// Spatial side of each meta-module, finest first (e.g. 14,7).
  std::vector<Index> scales;
  std::vector<Index> modules;   // per scale
  std::vector<Index> channels;  // per scale
  Index latent_channels = 2;
  Index fc_latent = 32;
  Index fc_modules = 0;
  Index fc_width = 64;
  Z0Placement z0_placement = Z0Placement::kFc;
  LikelihoodKind output = LikelihoodKind::kBernoulli;
  PriorKind prior = PriorKind::kNormal;
  Index mixture_k = 2;
  bool ar_head = false;
  Index ar_layers = 5;
  Index ar_channels = 16;
  double lrelu_slope = 0.1;
  /// Adds a first-stage guess plane to the bottom-up inputs (two-stage
  /// imputation, second stage).
  bool guess_input = false;

  /// Latent layers below z_0, i.e. the number of merge modules.
  Index depth() const;
  void validate() const;
};

enum class Binarize { kNone, kDynamic, kFixed };
enum class MaskKind { kNone, kQuadrants, kOccluders };

struct TrainConfig {
  Index epochs = 10;
  Index batch_size = 32;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;
  Index mc_samples = 1;
  bool regularizer = false;
  double lambda_q = 0.2;
  bool regularizer_hard_samples = false;
  double entropy_weight = 0.05;
  Index kl_warmup = 0;
  Index eval_every = 1;  // epochs
  Index eval_k = 100;
  Index eval_max = 0;    // 0: whole validation split
  Index checkpoint_every = 1;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  Binarize binarize = Binarize::kNone;
  bool dequantize = false;
  MaskKind mask = MaskKind::kNone;
  Index q_known = 0;  // 0: uniform over 1-3 per example
  Index max_updates = 0;
  double time_budget_s = 0.0;
  Index shards = 1;
  Index threads = 1;
  bool record_wall_time = false;

  double effective_lambda() const { return regularizer ? lambda_q : 0.0; }
  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  /// Applies `key=value`; unknown keys and bad values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Canonical `key=value` lines covering every key, in a fixed order.
  std::string canonical() const;
  void validate() const { model.validate(); train.validate(); }

  static std::vector<std::string> keys();
  /// Parses a config file body. `required` keys must be present.
  static RunConfig parse(const std::string& text, const std::vector<std::string>& required = {"scales"});
  static RunConfig load(const std::string& path, const std::vector<std::string>& required = {"scales"});
};

/// Model-only manifest text stored in checkpoints.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace matnet
