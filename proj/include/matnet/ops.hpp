#pragma once

#include "matnet/tape.hpp"

#include <vector>

namespace matnet {

// Elementwise arithmetic. Binary ops require identical shapes.
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> add_scalar(Var<S> a, S value);
template <typename S> Var<S> scale(Var<S> a, S factor);

template <typename S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S> Var<S> operator*(Var<S> a, S factor) { return scale(a, factor); }
template <typename S> Var<S> operator-(Var<S> a) { return scale(a, S(-1)); }

template <typename S> Var<S> square(Var<S> a);
template <typename S> Var<S> exp(Var<S> a);
/// Natural log with the argument floored at `floor`.
template <typename S> Var<S> log(Var<S> a, S floor = S(1e-12));
template <typename S> Var<S> tanh(Var<S> a);
template <typename S> Var<S> sigmoid(Var<S> a);
template <typename S> Var<S> lrelu(Var<S> a, S slope);
/// Hard clamp; the gradient is zero outside [lo, hi].
template <typename S> Var<S> clamp(Var<S> a, S lo, S hi);

/// Picks `a` where mask is nonzero and `b` elsewhere. Mask is data, not a
/// differentiable input.
template <typename S> Var<S> blend(Var<S> a, Var<S> b, const Tensor<S>& mask);

/// Value copy cut off from the graph.
template <typename S> Var<S> detach(Var<S> a);

// Reductions.
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);
/// Sum over every axis but the first: (b, ...) -> (b).
template <typename S> Var<S> sum_per_example(Var<S> a);

// Structural ops.
template <typename S> Var<S> reshape(Var<S> a, const Shape& shape);
template <typename S> Var<S> concat_features(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_features(Var<S> a, Index start, Index count);
/// (1, ...) -> (batch, ...).
template <typename S> Var<S> broadcast_batch(Var<S> a, Index batch);
/// Repeats each example `times` times consecutively: (b, ...) -> (b*times, ...).
template <typename S> Var<S> repeat_examples(Var<S> a, Index times);
/// Stacks k tensors of shape (b) into (b, k).
template <typename S> Var<S> stack_columns(const std::vector<Var<S>>& columns);
template <typename S> Var<S> column(Var<S> a, Index col);

// Row-wise ops on (b, k).
template <typename S> Var<S> logsumexp_rows(Var<S> a);
template <typename S> Var<S> softmax_rows(Var<S> a);

// Linear maps.
/// input (b, n), weight (m, n), bias (m) -> (b, m).
template <typename S> Var<S> linear(Var<S> input, Var<S> weight, Var<S> bias);

/// General 2-D convolution. input (b, c_in, h, w), kernel (c_out, c_in, k, k),
/// bias (c_out).
template <typename S>
Var<S> conv2d(Var<S> input, Var<S> kernel, Var<S> bias, Index stride, Index pad);

/// Shape-preserving convolution with odd kernel and zero padding (k-1)/2.
template <typename S> Var<S> conv2d_same(Var<S> input, Var<S> kernel, Var<S> bias);

/// Transposed convolution (adjoint of conv2d). kernel is (c_in, c_out, k, k).
template <typename S>
Var<S> conv_transpose2d(Var<S> input, Var<S> kernel, Var<S> bias, Index stride, Index pad);

enum class Resample { kDown, kUp };

/// Factor-2 resampling by a 4x4 strided convolution (down) or transposed
/// convolution (up), both with padding 1. Down kernels are (c_out, c_in, 4, 4);
/// up kernels are (c_in, c_out, 4, 4).
template <typename S>
Var<S> strided_resample(Var<S> input, Resample direction, Var<S> kernel, Var<S> bias);

// Fused likelihood kernels, elementwise.
/// -log Bernoulli(x | sigmoid(logit)) with probabilities floored at 1e-12.
template <typename S> Var<S> bernoulli_nll(Var<S> logits, Var<S> x);
/// -log of the logistic mass over x's 1/256-wide bin on [0,1], with the
/// two boundary bins open-ended.
template <typename S> Var<S> logistic_bin_nll(Var<S> mean, Var<S> log_scale, Var<S> x);

}  // namespace matnet
