#include "matnet/layers.hpp"

namespace matnet {

template <typename S>
ConvParams add_conv(ParamStore<S>& store, const std::string& name, ParamGroup group, Index c_out,
                    Index c_in, Index k, double gain, Rng& rng) {
  ConvParams c;
  c.kernel = store.add(name + ".kernel", group,
                       init_normal<S>(Shape{c_out, c_in, k, k}, c_in * k * k, gain, rng));
  c.bias = store.add(name + ".bias", group, Tensor<S>(Shape{c_out}));
  return c;
}

template <typename S>
ConvParams add_conv_transpose(ParamStore<S>& store, const std::string& name, ParamGroup group,
                              Index c_in, Index c_out, Index k, double gain, Rng& rng) {
  ConvParams c;
  // Each output of a stride-2 transposed conv sees about a quarter of the taps.
  const Index fan_in = std::max<Index>(1, c_in * k * k / 4);
  c.kernel = store.add(name + ".kernel", group,
                       init_normal<S>(Shape{c_in, c_out, k, k}, fan_in, gain, rng));
  c.bias = store.add(name + ".bias", group, Tensor<S>(Shape{c_out}));
  return c;
}

template <typename S>
LinearParams add_linear(ParamStore<S>& store, const std::string& name, ParamGroup group,
                        Index out, Index in, double gain, Rng& rng) {
  LinearParams l;
  l.weight = store.add(name + ".weight", group, init_normal<S>(Shape{out, in}, in, gain, rng));
  l.bias = store.add(name + ".bias", group, Tensor<S>(Shape{out}));
  return l;
}

template <typename S>
TdModule make_td_module(ParamStore<S>& store, const std::string& name, Index channels,
                        Index latent_channels, bool with_prior, double slope, Rng& rng) {
  TdModule m;
  m.channels = channels;
  m.latent_channels = latent_channels;
  m.slope = slope;
  m.v = add_conv(store, name + ".v", ParamGroup::kTd, channels, channels + latent_channels,
                 kKernelSize, 1.0, rng);
  m.w = add_conv(store, name + ".w", ParamGroup::kTd, channels, channels, kKernelSize,
                 kResidualGain, rng);
  m.has_prior = with_prior;
  if (with_prior) {
    m.prior_hidden = add_conv(store, name + ".prior_hidden", ParamGroup::kTd, channels, channels,
                              kKernelSize, 1.0, rng);
    m.prior_out = add_conv(store, name + ".prior_out", ParamGroup::kTd, 2 * latent_channels,
                           channels, kKernelSize, 0.0, rng);
  }
  return m;
}

template <typename S>
TdFcModule make_td_fc_module(ParamStore<S>& store, const std::string& name, Index width,
                             Index latent, bool with_prior, double slope, Rng& rng) {
  TdFcModule m;
  m.width = width;
  m.latent = latent;
  m.slope = slope;
  m.gates = add_linear(store, name + ".gates", ParamGroup::kTd, 2 * width, width + latent, 1.0, rng);
  // Update gate starts near 1 so the module begins close to identity.
  auto& gate_bias = store[m.gates.bias].value;
  for (Index i = width; i < 2 * width; ++i) gate_bias[i] = S(1);
  m.candidate =
      add_linear(store, name + ".candidate", ParamGroup::kTd, width, width + latent, 1.0, rng);
  m.has_prior = with_prior;
  if (with_prior) {
    m.prior_hidden = add_linear(store, name + ".prior_hidden", ParamGroup::kTd, width, width, 1.0, rng);
    m.prior_out = add_linear(store, name + ".prior_out", ParamGroup::kTd, 2 * latent, width, 0.0, rng);
  }
  return m;
}

template <typename S>
BuModule make_bu_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                        Index channels, double slope, Rng& rng) {
  BuModule m;
  m.channels = channels;
  m.slope = slope;
  m.v = add_conv(store, name + ".v", group, channels, channels, kKernelSize, 1.0, rng);
  m.w = add_conv(store, name + ".w", group, channels, channels, kKernelSize, kResidualGain, rng);
  return m;
}

template <typename S>
BuFcModule make_bu_fc_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                             Index width, double slope, Rng& rng) {
  BuFcModule m;
  m.width = width;
  m.slope = slope;
  m.v = add_linear(store, name + ".v", group, width, width, 1.0, rng);
  m.w = add_linear(store, name + ".w", group, width, width, kResidualGain, rng);
  return m;
}

template <typename S>
MergeModule make_merge_module(ParamStore<S>& store, const std::string& name, ParamGroup group,
                              Index channels, Index latent_channels, double slope, Rng& rng) {
  MergeModule m;
  m.channels = channels;
  m.latent_channels = latent_channels;
  m.slope = slope;
  m.u = add_conv(store, name + ".u", group, channels, 3 * channels, kKernelSize, 1.0, rng);
  m.v = add_conv(store, name + ".v", group, channels, channels, kKernelSize, kResidualGain, rng);
  m.readout = add_conv(store, name + ".readout", group, 2 * latent_channels, channels, kKernelSize,
                       0.0, rng);
  return m;
}

template <typename S>
MergeFcModule make_merge_fc_module(ParamStore<S>& store, const std::string& name,
                                   ParamGroup group, Index width, Index latent, double slope,
                                   Rng& rng) {
  MergeFcModule m;
  m.width = width;
  m.latent = latent;
  m.slope = slope;
  m.u = add_linear(store, name + ".u", group, width, 3 * width, 1.0, rng);
  m.v = add_linear(store, name + ".v", group, width, width, kResidualGain, rng);
  m.readout = add_linear(store, name + ".readout", group, 2 * latent, width, 0.0, rng);
  return m;
}

template <typename S>
Connector make_connector(ParamStore<S>& store, const std::string& name, ParamGroup group,
                         ConnectorKind kind, Index in_channels, Index out_channels,
                         Index in_size, Index out_size, double slope, Rng& rng) {
  Connector c;
  c.kind = kind;
  c.out_channels = out_channels;
  c.out_size = out_size;
  c.slope = slope;
  switch (kind) {
    case ConnectorKind::kDown:
      c.conv = add_conv(store, name, group, out_channels, in_channels, kResampleKernel, 1.0, rng);
      break;
    case ConnectorKind::kUp:
      c.conv = add_conv_transpose(store, name, group, in_channels, out_channels, kResampleKernel,
                                  1.0, rng);
      break;
    case ConnectorKind::kFcToSpatial:
      c.fc = add_linear(store, name, group, out_channels * out_size * out_size, in_channels, 1.0, rng);
      break;
    case ConnectorKind::kSpatialToFc:
      c.fc = add_linear(store, name, group, out_channels, in_channels * in_size * in_size, 1.0, rng);
      break;
  }
  return c;
}

template <typename S>
Var<S> td_forward(const TdModule& m, const BoundParams<S>& p, Var<S> h, Var<S> z) {
  const Shape& hs = h.shape();
  const Shape& zs = z.shape();
  if (hs.rank() != 4 || zs.rank() != 4 || hs[0] != zs[0] || hs[2] != zs[2] || hs[3] != zs[3] ||
      hs[1] != m.channels || zs[1] != m.latent_channels) {
    throw ShapeError("td_forward: state " + hs.str() + " and latent " + zs.str() +
                     " do not fit the module");
  }
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_same(m.v, p, concat_features<S>({h, z})), slope);
  return lrelu(h + apply_same(m.w, p, hidden), slope);
}

template <typename S>
DiagGaussian<S> td_prior(const TdModule& m, const BoundParams<S>& p, Var<S> h) {
  if (!m.has_prior) throw std::logic_error("td_prior: module has no prior readout");
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_same(m.prior_hidden, p, h), slope);
  return DiagGaussian<S>::from_stacked(apply_same(m.prior_out, p, hidden));
}

template <typename S>
Var<S> gru_td_forward(const TdFcModule& m, const BoundParams<S>& p, Var<S> h, Var<S> z) {
  if (h.shape().rank() != 2 || z.shape().rank() != 2) {
    throw ShapeError("gru_td_forward: GRU updates apply only at the fully-connected scale, got " +
                     h.shape().str());
  }
  if (h.shape()[1] != m.width || z.shape()[1] != m.latent || h.shape()[0] != z.shape()[0]) {
    throw ShapeError("gru_td_forward: state " + h.shape().str() + " latent " + z.shape().str());
  }
  const Var<S> gates = sigmoid(apply_linear(m.gates, p, concat_features<S>({h, z})));
  const Var<S> reset = slice_features(gates, 0, m.width);
  const Var<S> update = slice_features(gates, m.width, m.width);
  const Var<S> cand = tanh(apply_linear(m.candidate, p, concat_features<S>({reset * h, z})));
  // u*h + (1-u)*c == c + u*(h - c)
  return cand + update * (h - cand);
}

template <typename S>
DiagGaussian<S> td_prior(const TdFcModule& m, const BoundParams<S>& p, Var<S> h) {
  if (!m.has_prior) throw std::logic_error("td_prior: module has no prior readout");
  const Var<S> hidden = lrelu(apply_linear(m.prior_hidden, p, h), static_cast<S>(m.slope));
  return DiagGaussian<S>::from_stacked(apply_linear(m.prior_out, p, hidden));
}

template <typename S>
Var<S> bu_forward(const BuModule& m, const BoundParams<S>& p, Var<S> h) {
  if (h.shape().rank() != 4 || h.shape()[1] != m.channels) {
    throw ShapeError("bu_forward: state " + h.shape().str() + " does not fit the module");
  }
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_same(m.v, p, h), slope);
  return lrelu(h + apply_same(m.w, p, hidden), slope);
}

template <typename S>
Var<S> bu_forward(const BuFcModule& m, const BoundParams<S>& p, Var<S> h) {
  if (h.shape().rank() != 2 || h.shape()[1] != m.width) {
    throw ShapeError("bu_forward: state " + h.shape().str() + " does not fit the module");
  }
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_linear(m.v, p, h), slope);
  return lrelu(h + apply_linear(m.w, p, hidden), slope);
}

template <typename S>
MergeOutput<S> merge_forward(const MergeModule& m, const BoundParams<S>& p, Var<S> h_m,
                             Var<S> h_b, Var<S> h_t) {
  if (h_m.shape() != h_b.shape() || h_m.shape() != h_t.shape() || h_m.shape()[1] != m.channels) {
    throw ShapeError("merge_forward: merge " + h_m.shape().str() + ", bottom-up " +
                     h_b.shape().str() + ", top-down " + h_t.shape().str());
  }
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_same(m.u, p, concat_features<S>({h_m, h_b, h_t})), slope);
  const Var<S> state = lrelu(h_m + apply_same(m.v, p, hidden), slope);
  return {DiagGaussian<S>::from_stacked(apply_same(m.readout, p, state)), state};
}

template <typename S>
MergeOutput<S> merge_forward(const MergeFcModule& m, const BoundParams<S>& p, Var<S> h_m,
                             Var<S> h_b, Var<S> h_t) {
  if (h_m.shape() != h_b.shape() || h_m.shape() != h_t.shape() || h_m.shape()[1] != m.width) {
    throw ShapeError("merge_forward: merge " + h_m.shape().str() + ", bottom-up " +
                     h_b.shape().str() + ", top-down " + h_t.shape().str());
  }
  const S slope = static_cast<S>(m.slope);
  const Var<S> hidden = lrelu(apply_linear(m.u, p, concat_features<S>({h_m, h_b, h_t})), slope);
  const Var<S> state = lrelu(h_m + apply_linear(m.v, p, hidden), slope);
  return {DiagGaussian<S>::from_stacked(apply_linear(m.readout, p, state)), state};
}

template <typename S>
Var<S> connect_scales(const Connector& c, const BoundParams<S>& p, Var<S> h) {
  const S slope = static_cast<S>(c.slope);
  switch (c.kind) {
    case ConnectorKind::kDown:
      return lrelu(strided_resample(h, Resample::kDown, p[c.conv.kernel], p[c.conv.bias]), slope);
    case ConnectorKind::kUp:
      return lrelu(strided_resample(h, Resample::kUp, p[c.conv.kernel], p[c.conv.bias]), slope);
    case ConnectorKind::kFcToSpatial: {
      const Var<S> flat = apply_linear(c.fc, p, h);
      return lrelu(reshape(flat, Shape{h.shape()[0], c.out_channels, c.out_size, c.out_size}), slope);
    }
    case ConnectorKind::kSpatialToFc: {
      const Shape& s = h.shape();
      return lrelu(apply_linear(c.fc, p, reshape(h, Shape{s[0], s.inner()})), slope);
    }
  }
  throw std::logic_error("unreachable");
}

#define MATNET_INSTANTIATE_LAYERS(S)                                                              \
  template ConvParams add_conv(ParamStore<S>&, const std::string&, ParamGroup, Index, Index,     \
                               Index, double, Rng&);                                              \
  template ConvParams add_conv_transpose(ParamStore<S>&, const std::string&, ParamGroup, Index,  \
                                         Index, Index, double, Rng&);                             \
  template LinearParams add_linear(ParamStore<S>&, const std::string&, ParamGroup, Index, Index, \
                                   double, Rng&);                                                 \
  template TdModule make_td_module(ParamStore<S>&, const std::string&, Index, Index, bool,       \
                                   double, Rng&);                                                 \
  template TdFcModule make_td_fc_module(ParamStore<S>&, const std::string&, Index, Index, bool,  \
                                        double, Rng&);                                            \
  template BuModule make_bu_module(ParamStore<S>&, const std::string&, ParamGroup, Index, double, \
                                   Rng&);                                                         \
  template BuFcModule make_bu_fc_module(ParamStore<S>&, const std::string&, ParamGroup, Index,   \
                                        double, Rng&);                                            \
  template MergeModule make_merge_module(ParamStore<S>&, const std::string&, ParamGroup, Index,  \
                                         Index, double, Rng&);                                    \
  template MergeFcModule make_merge_fc_module(ParamStore<S>&, const std::string&, ParamGroup,    \
                                              Index, Index, double, Rng&);                        \
  template Connector make_connector(ParamStore<S>&, const std::string&, ParamGroup,              \
                                    ConnectorKind, Index, Index, Index, Index, double, Rng&);     \
  template Var<S> td_forward(const TdModule&, const BoundParams<S>&, Var<S>, Var<S>);            \
  template DiagGaussian<S> td_prior(const TdModule&, const BoundParams<S>&, Var<S>);             \
  template Var<S> gru_td_forward(const TdFcModule&, const BoundParams<S>&, Var<S>, Var<S>);      \
  template DiagGaussian<S> td_prior(const TdFcModule&, const BoundParams<S>&, Var<S>);           \
  template Var<S> bu_forward(const BuModule&, const BoundParams<S>&, Var<S>);                    \
  template Var<S> bu_forward(const BuFcModule&, const BoundParams<S>&, Var<S>);                  \
  template MergeOutput<S> merge_forward(const MergeModule&, const BoundParams<S>&, Var<S>,       \
                                        Var<S>, Var<S>);                                          \
  template MergeOutput<S> merge_forward(const MergeFcModule&, const BoundParams<S>&, Var<S>,     \
                                        Var<S>, Var<S>);                                          \
  template Var<S> connect_scales(const Connector&, const BoundParams<S>&, Var<S>);

MATNET_INSTANTIATE_LAYERS(float)
MATNET_INSTANTIATE_LAYERS(double)

}  // namespace matnet
