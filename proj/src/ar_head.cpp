#include "matnet/ar_head.hpp"

namespace matnet {

template <typename S>
Tensor<S> raster_mask(const Shape& kernel_shape, MaskType type) {
  if (kernel_shape.rank() != 4 || kernel_shape[2] != kernel_shape[3] || kernel_shape[2] % 2 == 0) {
    throw ShapeError("raster_mask: expected an odd square kernel, got " + kernel_shape.str());
  }
  const Index k = kernel_shape[2];
  const Index centre = (k / 2) * k + k / 2;
  Tensor<S> m(kernel_shape);
  for (Index o = 0; o < kernel_shape[0]; ++o) {
    for (Index i = 0; i < kernel_shape[1]; ++i) {
      for (Index t = 0; t < k * k; ++t) {
        const bool open = type == MaskType::kA ? t < centre : t <= centre;
        m.at(o, i, t / k, t % k) = open ? S(1) : S(0);
      }
    }
  }
  return m;
}

template <typename S>
ArHead make_ar_head(ParamStore<S>& store, const std::string& name, Index image_channels,
                    Index cond_channels, Index hidden, Index num_layers, LikelihoodKind kind,
                    double slope, Rng& rng) {
  if (num_layers < 2) throw std::invalid_argument("ar head needs at least two layers");
  ArHead head;
  head.kind = kind;
  head.image_channels = image_channels;
  head.cond_channels = cond_channels;
  head.hidden = hidden;
  head.slope = slope;
  for (Index l = 0; l < num_layers; ++l) {
    const bool last = l + 1 == num_layers;
    const Index c_in = l == 0 ? image_channels : hidden;
    const Index c_out = last ? head.out_channels() : hidden;
    const std::string lname = name + ".layer" + std::to_string(l);
    ArLayer layer;
    layer.type = l == 0 ? MaskType::kA : MaskType::kB;
    layer.masked = add_conv(store, lname + ".masked", ParamGroup::kAr, c_out, c_in, kKernelSize,
                            l == 0 ? 1.0 : 0.5, rng);
    layer.conditioning = store.add(
        lname + ".cond.kernel", ParamGroup::kAr,
        init_normal<S>(Shape{c_out, cond_channels, kKernelSize, kKernelSize},
                       cond_channels * kKernelSize * kKernelSize, 0.5, rng));
    head.layers.push_back(layer);
  }
  return head;
}

template <typename S>
OutputLikelihood<S> ar_forward(const ArHead& head, const BoundParams<S>& p, Var<S> x,
                               Var<S> td_out) {
  const Shape& xs = x.shape();
  const Shape& ts = td_out.shape();
  if (xs.rank() != 4 || ts.rank() != 4 || xs[0] != ts[0] || xs[2] != ts[2] || xs[3] != ts[3] ||
      xs[1] != head.image_channels || ts[1] != head.cond_channels) {
    throw ShapeError("ar_forward: image " + xs.str() + " and conditioning " + ts.str() +
                     " do not fit the head");
  }
  Tape<S>& tape = p.tape();
  const S slope = static_cast<S>(head.slope);
  Var<S> a = x;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    const ArLayer& layer = head.layers[l];
    const Var<S> kernel = p[layer.masked.kernel];
    const Var<S> masked_kernel =
        kernel * tape.constant(raster_mask<S>(kernel.shape(), layer.type));
    const Var<S> cond_kernel = p[layer.conditioning];
    const Var<S> no_bias = tape.constant(Tensor<S>(Shape{cond_kernel.shape()[0]}));
    const Var<S> pre = conv2d_same(a, masked_kernel, p[layer.masked.bias]) +
                       conv2d_same(td_out, cond_kernel, no_bias);
    a = l + 1 == head.layers.size() ? pre : lrelu(pre, slope);
  }
  return {head.kind, a, head.image_channels};
}

template <typename S>
Var<S> ar_nll(const ArHead& head, const BoundParams<S>& p, Var<S> x, Var<S> td_out) {
  return nll(ar_forward(head, p, x, td_out), x);
}

template <typename S>
ArSample<S> ar_sample(const ArHead& head, const ParamStore<S>& store, const Tensor<S>& td_out,
                      Rng& rng, const Tensor<S>* known, const Tensor<S>* mask) {
  const Shape& ts = td_out.shape();
  if (ts.rank() != 4) throw ShapeError("ar_sample: conditioning must be (b, c, h, w)");
  const Index b = ts[0], c = head.image_channels, h = ts[2], w = ts[3];
  const Shape image_shape{b, c, h, w};
  if ((known == nullptr) != (mask == nullptr) ||
      (known && (known->shape() != image_shape || mask->shape() != image_shape))) {
    throw ShapeError("ar_sample: known pixels and mask must both be given with shape " +
                     image_shape.str());
  }
  const bool spread = params_per_channel(head.kind) == 2;
  Tensor<S> x = known ? Tensor<S>(image_shape, known->array() * mask->array())
                      : Tensor<S>(image_shape);
  Tensor<S> log_prob(Shape{b});
  for (Index y = 0; y < h; ++y) {
    for (Index xx = 0; xx < w; ++xx) {
      Tape<S> tape;
      const BoundParams<S> p(tape, store, GroupSet::none());
      const OutputLikelihood<S> like =
          ar_forward(head, p, tape.constant(x), tape.constant(td_out));
      const Tensor<S>& loc = like.location().value();
      const Tensor<S> ls = spread ? like.log_spread().value() : Tensor<S>();
      for (Index n = 0; n < b; ++n) {
        for (Index ch = 0; ch < c; ++ch) {
          if (mask && mask->at(n, ch, y, xx) != S(0)) continue;
          x.at(n, ch, y, xx) = static_cast<S>(
              sample_value(head.kind, static_cast<double>(loc.at(n, ch, y, xx)),
                           spread ? static_cast<double>(ls.at(n, ch, y, xx)) : 0.0, rng));
        }
      }
      const Tensor<S>& step_nll = nll_elementwise(like, tape.constant(x)).value();
      for (Index n = 0; n < b; ++n) {
        for (Index ch = 0; ch < c; ++ch) {
          if (mask && mask->at(n, ch, y, xx) != S(0)) continue;
          log_prob[n] -= step_nll.at(n, ch, y, xx);
        }
      }
    }
  }
  return {std::move(x), std::move(log_prob)};
}

#define MATNET_INSTANTIATE_AR(S)                                                                 \
  template Tensor<S> raster_mask<S>(const Shape&, MaskType);                                     \
  template ArHead make_ar_head(ParamStore<S>&, const std::string&, Index, Index, Index, Index,   \
                               LikelihoodKind, double, Rng&);                                     \
  template OutputLikelihood<S> ar_forward(const ArHead&, const BoundParams<S>&, Var<S>, Var<S>); \
  template Var<S> ar_nll(const ArHead&, const BoundParams<S>&, Var<S>, Var<S>);                  \
  template ArSample<S> ar_sample(const ArHead&, const ParamStore<S>&, const Tensor<S>&, Rng&,    \
                                 const Tensor<S>*, const Tensor<S>*);

MATNET_INSTANTIATE_AR(float)
MATNET_INSTANTIATE_AR(double)

}  // namespace matnet
