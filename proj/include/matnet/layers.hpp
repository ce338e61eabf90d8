#pragma once

#include "matnet/distributions.hpp"
#include "matnet/params.hpp"

#include <string>

namespace matnet {

inline constexpr Index kKernelSize = 3;
inline constexpr Index kResampleKernel = 4;
inline constexpr double kResidualGain = 0.5;

struct ConvParams {
  int kernel = -1;
  int bias = -1;
};

struct LinearParams {
  int weight = -1;
  int bias = -1;
};

/// Registers a (c_out, c_in, k, k) kernel and its bias.
template <typename S>
ConvParams add_conv(ParamStore<S>& store, const std::string& name, ParamGroup group, Index c_out,
                    Index c_in, Index k, double gain, Rng& rng);
/// Registers a (c_in, c_out, k, k) transposed-convolution kernel and bias.
template <typename S>
ConvParams add_conv_transpose(ParamStore<S>& store, const std::string& name, ParamGroup group,
                              Index c_in, Index c_out, Index k, double gain, Rng& rng);
template <typename S>
LinearParams add_linear(ParamStore<S>& store, const std::string& name, ParamGroup group,
                        Index out, Index in, double gain, Rng& rng);

template <typename S>
Var<S> apply_same(const ConvParams& c, const BoundParams<S>& p, Var<S> x) {
  return conv2d_same(x, p[c.kernel], p[c.bias]);
}
template <typename S>
Var<S> apply_linear(const LinearParams& l, const BoundParams<S>& p, Var<S> x) {
  return linear(x, p[l.weight], p[l.bias]);
}

/// Convolutional top-down module: residual state update driven by a latent
/// input, plus an optional two-conv prior readout.
struct TdModule {
  ConvParams v, w;
  ConvParams prior_hidden, prior_out;
  bool has_prior = false;
  Index channels = 0;
  Index latent_channels = 0;
  double slope = 0.1;
};

/// Fully-connected top-down module with GRU-style gated state update.
struct TdFcModule {
  LinearParams gates;      // -> [reset; update]
  LinearParams candidate;  // -> candidate state
  LinearParams prior_hidden, prior_out;
  bool has_prior = false;
  Index width = 0;
  Index latent = 0;
  double slope = 0.1;
};

struct BuModule {
  ConvParams v, w;
  Index channels = 0;
  double slope = 0.1;
};

struct BuFcModule {
  LinearParams v, w;
  Index width = 0;
  double slope = 0.1;
};

struct MergeModule {
  ConvParams u, v, readout;
  Index channels = 0;
  Index latent_channels = 0;
  double slope = 0.1;
};

struct MergeFcModule {
  LinearParams u, v, readout;
  Index width = 0;
  Index latent = 0;
  double slope = 0.1;
};

enum class ConnectorKind { kDown, kUp, kFcToSpatial, kSpatialToFc };

/// Joins two meta-modules: strided resampling or an FC <-> spatial reshape,
/// followed by lrelu.
struct Connector {
  ConnectorKind kind = ConnectorKind::kDown;
  ConvParams conv;
  LinearParams fc;
  Index out_channels = 0;
  Index out_size = 0;  // spatial side for kFcToSpatial
  double slope = 0.1;
};

template <typename S>
TdModule make_td_module(ParamStore<S>& store, const std::string& name, Index channels,
                        Index latent_channels, bool with_prior, double slope, Rng& rng);
template <typename S>
TdFcModule make_td_fc_module(ParamStore<S>& store, const std::string& name, Index width,
                             Index latent, bool with_prior, double slope, Rng& rng);
template <typename S>
BuModule make_bu_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                        Index channels, double slope, Rng& rng);
template <typename S>
BuFcModule make_bu_fc_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                             Index width, double slope, Rng& rng);
template <typename S>
MergeModule make_merge_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                              Index channels, Index latent_channels, double slope, Rng& rng);
template <typename S>
MergeFcModule make_merge_fc_module(ParamStore<S>& store, const std::string& name,
                                   ParamGroup group, Index width, Index latent, double slope,
                                   Rng& rng);
/// in_channels/in_size describe the source state; for kSpatialToFc the
/// output width is `out_channels`.
template <typename S>
Connector make_connector(ParamStore<S>& store, const std::string& name, ParamGroup group,
                         ConnectorKind kind, Index in_channels, Index out_channels,
                         Index in_size, Index out_size, double slope, Rng& rng);

/// h' = lrelu(h + conv(lrelu(conv([h; z], v)), w))
template <typename S>
Var<S> td_forward(const TdModule& m, const BoundParams<S>& p, Var<S> h, Var<S> z);
/// [mu; log_var] = conv(lrelu(conv(h, prior_hidden)), prior_out)
template <typename S>
DiagGaussian<S> td_prior(const TdModule& m, const BoundParams<S>& p, Var<S> h);

/// GRU-style update: r, u = sigmoid(W [h; z]); c = tanh(W_c [r*h; z]);
/// h' = u*h + (1-u)*c.
template <typename S>
Var<S> gru_td_forward(const TdFcModule& m, const BoundParams<S>& p, Var<S> h, Var<S> z);
template <typename S>
DiagGaussian<S> td_prior(const TdFcModule& m, const BoundParams<S>& p, Var<S> h);

/// h' = lrelu(h + conv(lrelu(conv(h, v)), w))
template <typename S>
Var<S> bu_forward(const BuModule& m, const BoundParams<S>& p, Var<S> h);
template <typename S>
Var<S> bu_forward(const BuFcModule& m, const BoundParams<S>& p, Var<S> h);

template <typename S>
struct MergeOutput {
  DiagGaussian<S> posterior;
  Var<S> state;
};

/// h_m' = lrelu(h_m + conv(lrelu(conv([h_m; h_b; h_t], u)), v));
/// [mu; log_var] = conv(h_m', readout)
template <typename S>
MergeOutput<S> merge_forward(const MergeModule& m, const BoundParams<S>& p, Var<S> h_m,
                             Var<S> h_b, Var<S> h_t);
template <typename S>
MergeOutput<S> merge_forward(const MergeFcModule& m, const BoundParams<S>& p, Var<S> h_m,
                             Var<S> h_b, Var<S> h_t);

template <typename S>
Var<S> connect_scales(const Connector& c, const BoundParams<S>& p, Var<S> h);

}  // namespace matnet
