#pragma once

#include "matnet/layers.hpp"

#include <vector>

namespace matnet {

/// Raster-order kernel masks. Type A hides the centre tap, type B keeps it.
enum class MaskType { kA, kB };

/// 0/1 mask for a (c_out, c_in, k, k) kernel. Every input channel is
/// masked alike, so channels of one pixel never see each other.
template <typename S>
Tensor<S> raster_mask(const Shape& kernel_shape, MaskType type);

struct ArLayer {
  ConvParams masked;  // over the previous activations (or the image)
  int conditioning = -1;  // unmasked kernel over the top-down output
  MaskType type = MaskType::kB;
};

/// Small PixelCNN-style stack conditioned on the top-down output at every
/// layer.
struct ArHead {
  std::vector<ArLayer> layers;
  LikelihoodKind kind = LikelihoodKind::kBernoulli;
  Index image_channels = 1;
  Index cond_channels = 0;
  Index hidden = 16;
  double slope = 0.1;

  Index out_channels() const { return image_channels * params_per_channel(kind); }
};

template <typename S>
ArHead make_ar_head(ParamStore<S>& store, const std::string& name, Index image_channels,
                    Index cond_channels, Index hidden, Index num_layers, LikelihoodKind kind,
                    double slope, Rng& rng);

/// Per-pixel likelihood parameters given the image (teacher forcing) and
/// the top-down output.
template <typename S>
OutputLikelihood<S> ar_forward(const ArHead& head, const BoundParams<S>& p, Var<S> x,
                               Var<S> td_out);

template <typename S>
Var<S> ar_nll(const ArHead& head, const BoundParams<S>& p, Var<S> x, Var<S> td_out);

template <typename S>
struct ArSample {
  Tensor<S> x;
  /// Sum over pixels of the log-probability of each draw at the moment it
  /// was made.
  Tensor<S> log_prob;
};

/// Pixel-by-pixel raster sampling, one full head evaluation per pixel.
/// Where `mask` is 1 the pixel is copied from `known` instead of drawn;
/// known pixels do not contribute to log_prob.
template <typename S>
ArSample<S> ar_sample(const ArHead& head, const ParamStore<S>& store, const Tensor<S>& td_out,
                      Rng& rng, const Tensor<S>* known = nullptr, const Tensor<S>* mask = nullptr);

}  // namespace matnet
