#include "matnet/model.hpp"

#include <algorithm>
#include <cmath>

namespace matnet {

namespace {

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& t, Index start, Index count) {
  if (t.empty()) return t;
  const Index inner = t.shape().inner();
  return Tensor<S>(t.shape().with_dim(0, count), t.array().segment(start * inner, count * inner));
}

template <typename S>
Tensor<S> repeat_rows(const Tensor<S>& t, Index times) {
  if (t.empty() || times == 1) return t;
  const Index b = t.dim(0), inner = t.shape().inner();
  Tensor<S> out(t.shape().with_dim(0, b * times));
  for (Index n = 0; n < b; ++n) {
    for (Index r = 0; r < times; ++r) {
      out.array().segment((n * times + r) * inner, inner) = t.array().segment(n * inner, inner);
    }
  }
  return out;
}

/// Mean over groups of `times` consecutive rows: (b*times) -> (b).
template <typename S>
Var<S> average_repeats(Var<S> v, Index times) {
  if (times == 1) return v;
  const Index b = v.shape()[0] / times;
  return scale(sum_per_example(reshape(v, Shape{b, times})), S(1) / static_cast<S>(times));
}

template <typename S>
Tensor<S> complement(const Tensor<S>& mask) {
  return Tensor<S>(mask.shape(), S(1) - mask.array());
}

}  // namespace

template <typename S>
Observation<S> Observation<S>::slice(Index start, Index count) const {
  return {slice_rows(x, start, count), slice_rows(mask, start, count), slice_rows(guess, start, count)};
}

template <typename S>
Observation<S> Observation<S>::repeated(Index times) const {
  return {repeat_rows(x, times), repeat_rows(mask, times), repeat_rows(guess, times)};
}

template <typename S>
MatNet<S>::MatNet(ModelConfig config, Rng& init_rng) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  const Index num_scales = static_cast<Index>(c.scales.size());
  const double slope = c.lrelu_slope;
  const Index ic = c.image_channels;
  const bool cond = conditional();

  if (c.fc_modules > 0) groups_.push_back({"fc", true, 0});
  for (Index s = num_scales - 1; s >= 0; --s) {
    const std::string side = std::to_string(c.scales[static_cast<std::size_t>(s)]);
    groups_.push_back({side + "x" + side, false, s});
  }

  // Top-down entry from z_0.
  const Index top = num_scales - 1;
  const Index top_channels = c.channels[static_cast<std::size_t>(top)];
  const Index top_side = c.scales[static_cast<std::size_t>(top)];
  if (c.z0_placement == Z0Placement::kSpatial) {
    entry_conv_ = add_conv(params_, "td.entry", ParamGroup::kTd, top_channels, c.latent_channels,
                           kKernelSize, 1.0, init_rng);
  } else if (c.fc_modules > 0) {
    entry_fc_ = add_linear(params_, "td.entry", ParamGroup::kTd, c.fc_width, c.fc_latent, 1.0, init_rng);
  } else {
    entry_connector_ = make_connector(params_, "td.entry", ParamGroup::kTd, ConnectorKind::kFcToSpatial,
                                      c.fc_latent, top_channels, 1, top_side, slope, init_rng);
  }

  // Latent layers in generation order.
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    const GroupInfo& info = groups_[g];
    const Index count = info.fc ? c.fc_modules : c.modules[static_cast<std::size_t>(info.scale)];
    const Index ch = info.fc ? c.fc_width : c.channels[static_cast<std::size_t>(info.scale)];
    for (Index m = 0; m < count; ++m) {
      const std::string id = std::to_string(td_layers_.size());
      TdLayer layer;
      layer.group = static_cast<int>(g);
      if (m == 0 && g > 0) {
        const GroupInfo& prev = groups_[g - 1];
        auto link = [&](const std::string& name, ParamGroup group) {
          if (prev.fc) {
            return make_connector(params_, name, group, ConnectorKind::kFcToSpatial, c.fc_width, ch,
                                  1, c.scales[static_cast<std::size_t>(info.scale)], slope, init_rng);
          }
          const Index prev_ch = c.channels[static_cast<std::size_t>(prev.scale)];
          return make_connector(params_, name, group, ConnectorKind::kUp, prev_ch, ch,
                                c.scales[static_cast<std::size_t>(prev.scale)],
                                c.scales[static_cast<std::size_t>(info.scale)], slope, init_rng);
        };
        layer.td_in = link("td.up" + id, ParamGroup::kTd);
        layer.merge_in = link("merge.up" + id, ParamGroup::kMerge);
        if (cond) layer.gen_merge_in = link("gen_merge.up" + id, ParamGroup::kGenMerge);
      }
      if (info.fc) {
        layer.fc = make_td_fc_module(params_, "td" + id, c.fc_width, c.fc_latent, !cond, slope, init_rng);
        layer.merge_fc = make_merge_fc_module(params_, "merge" + id, ParamGroup::kMerge, c.fc_width,
                                              c.fc_latent, slope, init_rng);
        if (cond) {
          layer.gen_merge_fc = make_merge_fc_module(params_, "gen_merge" + id, ParamGroup::kGenMerge,
                                                    c.fc_width, c.fc_latent, slope, init_rng);
        }
      } else {
        layer.conv = make_td_module(params_, "td" + id, ch, c.latent_channels, !cond, slope, init_rng);
        layer.merge = make_merge_module(params_, "merge" + id, ParamGroup::kMerge, ch,
                                        c.latent_channels, slope, init_rng);
        if (cond) {
          layer.gen_merge = make_merge_module(params_, "gen_merge" + id, ParamGroup::kGenMerge, ch,
                                              c.latent_channels, slope, init_rng);
        }
      }
      td_layers_.push_back(std::move(layer));
    }
  }

  // Top-down read-out to image resolution.
  const Index c0 = c.channels[0];
  if (c.scales[0] != c.image_height) {
    readout_up_ = make_connector(params_, "td.readout_up", ParamGroup::kTd, ConnectorKind::kUp, c0, c0,
                                 c.scales[0], c.image_height, slope, init_rng);
  }
  if (c.ar_head) {
    ar_head_ = make_ar_head(params_, "ar", ic, c0, c.ar_channels, c.ar_layers, c.output, slope, init_rng);
  } else {
    likelihood_readout_ = add_conv(params_, "td.likelihood", ParamGroup::kTd,
                                   ic * params_per_channel(c.output), c0, kKernelSize, 1.0, init_rng);
  }

  const Index guess_channels = c.guess_input ? ic : 0;
  build_bu(bu_, "bu", ParamGroup::kBu, (cond ? 3 * ic : ic) + guess_channels, init_rng);
  if (cond) {
    gen_bu_.emplace();
    build_bu(*gen_bu_, "gen_bu", ParamGroup::kGenBu, 2 * ic + guess_channels, init_rng);
  }

  if (c.prior == PriorKind::kMixture) {
    for (Index k = 0; k < c.mixture_k; ++k) {
      const std::string id = "prior.mixture" + std::to_string(k);
      Tensor<S> mu = init_rng.normal_tensor<S>(z0_shape(1));
      mixture_mu_.push_back(params_.add(id + ".mu", ParamGroup::kTd, std::move(mu)));
      mixture_log_var_.push_back(params_.add(id + ".log_var", ParamGroup::kTd, Tensor<S>(z0_shape(1))));
    }
  }
}

template <typename S>
void MatNet<S>::build_bu(BuPath& path, const std::string& name, ParamGroup group, Index in_channels,
                         Rng& rng) {
  const ModelConfig& c = config_;
  const double slope = c.lrelu_slope;
  const Index num_scales = static_cast<Index>(c.scales.size());
  path.read_in = add_conv(params_, name + ".read_in", group, c.channels[0], in_channels, kKernelSize,
                          1.0, rng);
  if (c.scales[0] != c.image_height) {
    path.read_in_down = make_connector(params_, name + ".read_in_down", group, ConnectorKind::kDown,
                                       c.channels[0], c.channels[0], c.image_height, c.scales[0],
                                       slope, rng);
  }
  for (Index s = 0; s < num_scales; ++s) {
    const auto su = static_cast<std::size_t>(s);
    for (Index m = 0; m < c.modules[su]; ++m) {
      const std::string id = std::to_string(path.conv.size());
      if (m == 0 && s > 0) {
        path.conv_in.push_back(make_connector(params_, name + ".down" + id, group, ConnectorKind::kDown,
                                              c.channels[su - 1], c.channels[su], c.scales[su - 1],
                                              c.scales[su], slope, rng));
      } else {
        path.conv_in.emplace_back();
      }
      path.conv.push_back(make_bu_module(params_, name + id, group, c.channels[su], slope, rng));
    }
  }
  const Index top_channels = c.channels.back();
  const Index top_side = c.scales.back();
  if (c.fc_modules > 0) {
    path.to_fc = make_connector(params_, name + ".to_fc", group, ConnectorKind::kSpatialToFc,
                                top_channels, c.fc_width, top_side, 1, slope, rng);
    for (Index m = 0; m < c.fc_modules; ++m) {
      path.fc.push_back(make_bu_fc_module(params_, name + ".fc" + std::to_string(m), group,
                                          c.fc_width, slope, rng));
    }
  }
  if (c.z0_placement == Z0Placement::kSpatial) {
    path.z0_conv = add_conv(params_, name + ".z0", group, 2 * c.latent_channels, top_channels,
                            kKernelSize, 0.0, rng);
  } else {
    const Index in = c.fc_modules > 0 ? c.fc_width : top_channels * top_side * top_side;
    path.z0_fc = add_linear(params_, name + ".z0", group, 2 * c.fc_latent, in, 0.0, rng);
  }
}

template <typename S>
typename MatNet<S>::BuStates MatNet<S>::run_bu(const BuPath& path, const BoundParams<S>& p,
                                               Var<S> input) const {
  const S slope = static_cast<S>(config_.lrelu_slope);
  const Index d = depth();
  BuStates out;
  out.per_layer.resize(static_cast<std::size_t>(d));
  Var<S> h = lrelu(apply_same(path.read_in, p, input), slope);
  if (path.read_in_down) h = connect_scales(*path.read_in_down, p, h);
  Index e = 0;
  for (std::size_t m = 0; m < path.conv.size(); ++m, ++e) {
    if (path.conv_in[m]) h = connect_scales(*path.conv_in[m], p, h);
    out.per_layer[static_cast<std::size_t>(d - 1 - e)] = h;
    h = bu_forward(path.conv[m], p, h);
  }
  if (path.to_fc) h = connect_scales(*path.to_fc, p, h);
  for (std::size_t m = 0; m < path.fc.size(); ++m, ++e) {
    out.per_layer[static_cast<std::size_t>(d - 1 - e)] = h;
    h = bu_forward(path.fc[m], p, h);
  }
  out.top = h;
  return out;
}

template <typename S>
DiagGaussian<S> MatNet<S>::z0_readout(const BuPath& path, const BoundParams<S>& p, Var<S> top) const {
  if (config_.z0_placement == Z0Placement::kSpatial) {
    return DiagGaussian<S>::from_stacked(apply_same(path.z0_conv, p, top));
  }
  const Var<S> flat = top.shape().rank() == 2 ? top : reshape(top, Shape{top.shape()[0], top.shape().inner()});
  return DiagGaussian<S>::from_stacked(apply_linear(path.z0_fc, p, flat));
}

template <typename S>
Var<S> MatNet<S>::td_entry(const BoundParams<S>& p, Var<S> z0) const {
  const S slope = static_cast<S>(config_.lrelu_slope);
  if (config_.z0_placement == Z0Placement::kSpatial) return lrelu(apply_same(entry_conv_, p, z0), slope);
  if (entry_connector_) return connect_scales(*entry_connector_, p, z0);
  return lrelu(apply_linear(entry_fc_, p, z0), slope);
}

template <typename S>
Var<S> MatNet<S>::td_readout(const BoundParams<S>& p, Var<S> h) const {
  return readout_up_ ? connect_scales(*readout_up_, p, h) : h;
}

template <typename S>
OutputLikelihood<S> MatNet<S>::output_from(const BoundParams<S>& p, Var<S> td_out, Var<S> x) const {
  if (ar_head_) return ar_forward(*ar_head_, p, x, td_out);
  return {config_.output, apply_same(likelihood_readout_, p, td_out), config_.image_channels};
}

template <typename S>
MixturePrior<S> MatNet<S>::mixture(const BoundParams<S>& p) const {
  MixturePrior<S> prior;
  for (std::size_t k = 0; k < mixture_mu_.size(); ++k) {
    prior.components.emplace_back(p[mixture_mu_[k]], p[mixture_log_var_[k]]);
  }
  return prior;
}

template <typename S>
Shape MatNet<S>::z0_shape(Index batch) const {
  if (config_.z0_placement == Z0Placement::kSpatial) {
    const Index side = config_.scales.back();
    return Shape{batch, config_.latent_channels, side, side};
  }
  return Shape{batch, config_.fc_latent};
}

template <typename S>
Shape MatNet<S>::image_shape(Index batch) const {
  return Shape{batch, config_.image_channels, config_.image_height, config_.image_width};
}

template <typename S>
Index MatNet<S>::pixels() const {
  return config_.image_channels * config_.image_height * config_.image_width;
}

template <typename S>
std::vector<std::string> MatNet<S>::layer_groups() const {
  std::vector<std::string> out{"z0"};
  for (const auto& layer : td_layers_) out.push_back(groups_[static_cast<std::size_t>(layer.group)].name);
  return out;
}

template <typename S>
Shape MatNet<S>::group_state_shape(Index batch, int group) const {
  const GroupInfo& info = groups_[static_cast<std::size_t>(group)];
  if (info.fc) return Shape{batch, config_.fc_width};
  const auto s = static_cast<std::size_t>(info.scale);
  return Shape{batch, config_.channels[s], config_.scales[s], config_.scales[s]};
}

template <typename S>
Var<S> MatNet<S>::zero_state(Tape<S>& tape, Index batch, int group) const {
  return tape.constant(Tensor<S>(group_state_shape(batch, group)));
}

template <typename S>
void MatNet<S>::check_observation(const Observation<S>& obs) const {
  const Shape expected = image_shape(obs.batch());
  if (obs.x.shape() != expected) {
    throw ShapeError("observation " + obs.x.shape().str() + " does not match model input " + expected.str());
  }
  if (conditional()) {
    if (obs.mask.shape() != expected) throw ShapeError("conditional model needs a mask of shape " + expected.str());
    if (config_.guess_input && obs.guess.shape() != expected) {
      throw ShapeError("second-stage model needs a guess of shape " + expected.str());
    }
    if (checked_mode() && !((obs.mask.array() == S(0)) || (obs.mask.array() == S(1))).all()) {
      throw std::invalid_argument("mask values must be 0 or 1");
    }
  }
}

template <typename S>
Var<S> MatNet<S>::inference_input(Tape<S>& tape, Var<S> x, const Observation<S>& obs) const {
  if (!conditional()) return x;
  const Var<S> m = tape.constant(obs.mask);
  const Var<S> not_m = tape.constant(complement(obs.mask));
  std::vector<Var<S>> parts{x * m, x * not_m, m};
  if (config_.guess_input) parts.push_back(tape.constant(obs.guess) * not_m);
  return concat_features(parts);
}

template <typename S>
Var<S> MatNet<S>::generator_input(Tape<S>& tape, Var<S> x, const Observation<S>& obs) const {
  const Var<S> m = tape.constant(obs.mask);
  std::vector<Var<S>> parts{x * m, m};
  if (config_.guess_input) parts.push_back(tape.constant(obs.guess) * tape.constant(complement(obs.mask)));
  return concat_features(parts);
}

template <typename S>
InferenceTrace<S> MatNet<S>::infer(const BoundParams<S>& p, const Observation<S>& obs, Rng& rng) const {
  return infer(p, p.tape().constant(obs.x), obs, rng);
}

template <typename S>
InferenceTrace<S> MatNet<S>::infer(const BoundParams<S>& p, Var<S> x, const Observation<S>& obs,
                                   Rng& rng) const {
  check_observation(obs);
  if (x.shape() != obs.x.shape()) throw ShapeError("infer: image variable does not match observation");
  Tape<S>& tape = p.tape();
  const Index b = obs.batch();
  const bool cond = conditional();

  const BuStates bu = run_bu(bu_, p, inference_input(tape, x, obs));
  std::optional<BuStates> gen;
  if (cond) gen = run_bu(*gen_bu_, p, generator_input(tape, x, obs));

  InferenceTrace<S> trace;
  {
    LatentLayerRecord<S> rec;
    rec.posterior = z0_readout(bu_, p, bu.top);
    rec.z = reparam_sample(rec.posterior, rng.normal_tensor<S>(rec.posterior.shape()));
    rec.log_q = log_density(rec.posterior, rec.z);
    if (config_.prior == PriorKind::kMixture) {
      const MixturePrior<S> mix = mixture(p);
      rec.mixture = true;
      rec.prior = DiagGaussian<S>::standard(tape, rec.posterior.shape());
      rec.kl = kl_mixture_approx(rec.posterior, mix);
      rec.log_p = mixture_log_density(mix, rec.z);
      trace.responsibilities = mixture_responsibilities(rec.posterior, mix);
    } else {
      rec.prior = cond ? z0_readout(*gen_bu_, p, gen->top)
                       : DiagGaussian<S>::standard(tape, rec.posterior.shape());
      rec.kl = kl_diag_gauss(rec.posterior, rec.prior);
      rec.log_p = log_density(rec.prior, rec.z);
    }
    trace.layers.push_back(rec);
  }

  Var<S> h_t = td_entry(p, trace.layers[0].z);
  Var<S> h_m = zero_state(tape, b, 0);
  Var<S> h_g = cond ? zero_state(tape, b, 0) : Var<S>{};
  for (std::size_t j = 0; j < td_layers_.size(); ++j) {
    const TdLayer& layer = td_layers_[j];
    if (layer.td_in) {
      h_t = connect_scales(*layer.td_in, p, h_t);
      h_m = connect_scales(*layer.merge_in, p, h_m);
      if (cond) h_g = connect_scales(*layer.gen_merge_in, p, h_g);
    }
    LatentLayerRecord<S> rec;
    const Var<S> h_b = bu.per_layer[j];
    const MergeOutput<S> q = layer.fc ? merge_forward(*layer.merge_fc, p, h_m, h_b, h_t)
                                      : merge_forward(*layer.merge, p, h_m, h_b, h_t);
    h_m = q.state;
    rec.posterior = q.posterior;
    if (cond) {
      const Var<S> g_b = gen->per_layer[j];
      const MergeOutput<S> g = layer.fc ? merge_forward(*layer.gen_merge_fc, p, h_g, g_b, h_t)
                                        : merge_forward(*layer.gen_merge, p, h_g, g_b, h_t);
      h_g = g.state;
      rec.prior = g.posterior;
    } else {
      rec.prior = layer.fc ? td_prior(*layer.fc, p, h_t) : td_prior(*layer.conv, p, h_t);
    }
    rec.z = reparam_sample(rec.posterior, rng.normal_tensor<S>(rec.posterior.shape()));
    rec.kl = kl_diag_gauss(rec.posterior, rec.prior);
    rec.log_q = log_density(rec.posterior, rec.z);
    rec.log_p = log_density(rec.prior, rec.z);
    h_t = layer.fc ? gru_td_forward(*layer.fc, p, h_t, rec.z) : td_forward(*layer.conv, p, h_t, rec.z);
    trace.layers.push_back(rec);
  }
  trace.td_out = td_readout(p, h_t);
  trace.output = output_from(p, trace.td_out, x);
  return trace;
}

template <typename S>
FreeEnergyReport<S> MatNet<S>::report(const InferenceTrace<S>& trace, Var<S> x,
                                      const Observation<S>& obs, bool soft_targets) const {
  Tape<S>& tape = *x.tape;
  FreeEnergyReport<S> r;
  const Var<S> elementwise = nll_elementwise(trace.output, x, soft_targets);
  r.recon_nll = conditional() ? sum_per_example(elementwise * tape.constant(complement(obs.mask)))
                              : sum_per_example(elementwise);
  r.total_bound = r.recon_nll;
  r.sampled_bound = r.recon_nll;
  for (const auto& rec : trace.layers) {
    r.layer_kls.push_back(rec.kl);
    r.total_bound = r.total_bound + rec.kl;
    r.sampled_bound = r.sampled_bound + (rec.log_q - rec.log_p);
  }
  r.entropy = trace.responsibilities.valid() ? entropy_penalty(trace.responsibilities)
                                             : tape.constant(Tensor<S>(Shape{1}));
  return r;
}

template <typename S>
FreeEnergyReport<S> MatNet<S>::free_energy(const BoundParams<S>& p, const Observation<S>& obs, Rng& rng,
                                           Index mc_samples, bool soft_targets) const {
  if (mc_samples < 1) throw std::invalid_argument("free_energy: mc_samples must be >= 1");
  const Observation<S> rep = obs.repeated(mc_samples);
  const Var<S> x = p.tape().constant(rep.x);
  const InferenceTrace<S> trace = infer(p, x, rep, rng);
  FreeEnergyReport<S> r = report(trace, x, rep, soft_targets);
  if (mc_samples == 1) return r;
  r.recon_nll = average_repeats(r.recon_nll, mc_samples);
  for (auto& kl : r.layer_kls) kl = average_repeats(kl, mc_samples);
  r.total_bound = average_repeats(r.total_bound, mc_samples);
  r.sampled_bound = average_repeats(r.sampled_bound, mc_samples);
  return r;
}

template <typename S>
GenerationTrace<S> MatNet<S>::generate_trace(const BoundParams<S>& p, Index n, Rng& rng, Var<S> x,
                                             const Observation<S>* condition) const {
  const bool cond = conditional();
  if (cond && condition == nullptr) throw std::invalid_argument("conditional generation needs known pixels and a mask");
  if (cond) {
    check_observation(*condition);
    n = condition->batch();
  }
  Tape<S>& tape = p.tape();
  GenerationTrace<S> trace;
  std::optional<BuStates> gen;
  if (cond) gen = run_bu(*gen_bu_, p, generator_input(tape, x, *condition));

  const Shape zs = z0_shape(n);
  if (config_.prior == PriorKind::kMixture) {
    // Pick a component uniformly, then draw from it.
    const Index per = zs.inner();
    Tensor<S> z(zs);
    for (Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(rng.below(mixture_mu_.size()));
      const Tensor<S>& mu = params_[mixture_mu_[k]].value;
      const Tensor<S>& lv = params_[mixture_log_var_[k]].value;
      for (Index j = 0; j < per; ++j) {
        const double v = std::clamp(static_cast<double>(lv[j]), kMinLogVar, kMaxLogVar);
        z[i * per + j] = static_cast<S>(mu[j] + std::exp(0.5 * v) * rng.normal());
      }
    }
    trace.priors.push_back(DiagGaussian<S>::standard(tape, zs));
    trace.latents.push_back(tape.constant(std::move(z)));
  } else {
    const DiagGaussian<S> prior = cond ? z0_readout(*gen_bu_, p, gen->top) : DiagGaussian<S>::standard(tape, zs);
    trace.priors.push_back(prior);
    trace.latents.push_back(reparam_sample(prior, rng.normal_tensor<S>(zs)));
  }

  Var<S> h_t = td_entry(p, trace.latents[0]);
  Var<S> h_g = cond ? zero_state(tape, n, 0) : Var<S>{};
  for (std::size_t j = 0; j < td_layers_.size(); ++j) {
    const TdLayer& layer = td_layers_[j];
    if (layer.td_in) {
      h_t = connect_scales(*layer.td_in, p, h_t);
      if (cond) h_g = connect_scales(*layer.gen_merge_in, p, h_g);
    }
    DiagGaussian<S> prior;
    if (cond) {
      const Var<S> g_b = gen->per_layer[j];
      const MergeOutput<S> g = layer.fc ? merge_forward(*layer.gen_merge_fc, p, h_g, g_b, h_t)
                                        : merge_forward(*layer.gen_merge, p, h_g, g_b, h_t);
      h_g = g.state;
      prior = g.posterior;
    } else {
      prior = layer.fc ? td_prior(*layer.fc, p, h_t) : td_prior(*layer.conv, p, h_t);
    }
    const Var<S> z = reparam_sample(prior, rng.normal_tensor<S>(prior.shape()));
    h_t = layer.fc ? gru_td_forward(*layer.fc, p, h_t, z) : td_forward(*layer.conv, p, h_t, z);
    trace.priors.push_back(prior);
    trace.latents.push_back(z);
  }
  trace.td_out = td_readout(p, h_t);
  if (!ar_head_) trace.output = output_from(p, trace.td_out, x);
  return trace;
}

template <typename S>
Tensor<S> MatNet<S>::generate(Index n, Rng& rng, const Observation<S>* condition, bool use_mean) const {
  if (conditional() && condition == nullptr) {
    throw std::invalid_argument("conditional generation needs known pixels and a mask");
  }
  Tape<S> tape;
  const BoundParams<S> p(tape, params_, GroupSet::none());
  const Index batch = condition ? condition->batch() : n;
  const Var<S> x = tape.constant(condition ? condition->x : Tensor<S>(image_shape(batch)));
  const GenerationTrace<S> trace = generate_trace(p, batch, rng, x, conditional() ? condition : nullptr);
  Tensor<S> out;
  if (ar_head_) {
    out = conditional() ? ar_sample(*ar_head_, params_, trace.td_out.value(), rng, &condition->x, &condition->mask).x
                        : ar_sample(*ar_head_, params_, trace.td_out.value(), rng).x;
  } else {
    out = use_mean ? likelihood_mean(trace.output) : likelihood_sample(trace.output, rng);
  }
  if (conditional()) {
    for (Index i = 0; i < out.size(); ++i) {
      if (condition->mask[i] != S(0)) out[i] = condition->x[i];
    }
  }
  return out;
}

template <typename S>
Tensor<S> MatNet<S>::log_weights(const Observation<S>& obs, Index k, Rng& rng) const {
  if (k < 1) throw std::invalid_argument("log_weights: k must be >= 1");
  Tape<S> tape;
  const BoundParams<S> p(tape, params_, GroupSet::none());
  const Observation<S> rep = obs.repeated(k);
  const Var<S> x = tape.constant(rep.x);
  const FreeEnergyReport<S> r = report(infer(p, x, rep, rng), x, rep);
  Tensor<S> lw = r.sampled_bound.value().reshaped(Shape{obs.batch(), k});
  lw.array() = -lw.array();
  return lw;
}

template <typename S>
std::vector<double> MatNet<S>::eval_nll(const Observation<S>& obs, Index k, Rng& rng, Index max_rows) const {
  if (k < 1) throw std::invalid_argument("eval_nll: k must be >= 1");
  const Index b = obs.batch();
  const Index piece = std::min(k, std::max<Index>(1, max_rows));
  const Index chunk = std::max<Index>(1, max_rows / piece);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(b));
  for (Index start = 0; start < b; start += chunk) {
    const Index count = std::min(chunk, b - start);
    const Observation<S> part = obs.slice(start, count);
    Eigen::MatrixXd weights(count, k);
    for (Index done = 0; done < k; done += piece) {
      const Index kk = std::min(piece, k - done);
      const Tensor<S> lw = log_weights(part, kk, rng);
      for (Index i = 0; i < count; ++i) {
        for (Index j = 0; j < kk; ++j) weights(i, done + j) = static_cast<double>(lw[i * kk + j]);
      }
    }
    for (Index i = 0; i < count; ++i) {
      const double top = weights.row(i).maxCoeff();
      const double lse = top + std::log((weights.row(i).array() - top).exp().sum());
      out.push_back(-(lse - std::log(static_cast<double>(k))));
    }
  }
  return out;
}

template <typename S>
Var<S> MatNet<S>::inference_regularizer(const BoundParams<S>& p, Index n, Rng& rng, bool hard_samples,
                                        const Observation<S>* condition) const {
  Observation<S> fake;
  if (conditional()) {
    if (condition == nullptr) throw std::invalid_argument("inference_regularizer: conditional net needs masks");
    fake = *condition;
    fake.x = generate(0, rng, condition, !hard_samples);
  } else {
    fake.x = generate(n, rng, nullptr, !hard_samples);
  }
  const bool soft = !hard_samples && config_.output == LikelihoodKind::kBernoulli;
  return mean(free_energy(p, fake, rng, 1, soft).total_bound);
}

template <typename S>
Tensor<S> impute_two_stage(const MatNet<S>& stage1, const MatNet<S>& stage2, const Observation<S>& obs,
                           Rng& rng, bool use_mean) {
  if (!stage1.conditional() || !stage2.conditional()) {
    throw std::invalid_argument("two-stage imputation needs two conditional models");
  }
  if (stage1.config().guess_input || !stage2.config().guess_input) {
    throw std::invalid_argument("two-stage imputation needs a plain first stage and a guess-fed second stage");
  }
  Observation<S> first = obs;
  first.guess = Tensor<S>();
  Observation<S> second = obs;
  second.guess = stage1.generate(0, rng, &first, use_mean);
  return stage2.generate(0, rng, &second, use_mean);
}

void save_checkpoint(const std::string& path, const MatNet<float>& net, const RunConfig& run) {
  RunConfig echo = run;
  echo.model = net.config();
  NamedTensors named = net.params().to_named();
  named.emplace_back(kManifestKey, text_to_tensor(echo.canonical()));
  save_archive(path, named);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const NamedTensors named = load_archive(path);
  const auto manifest = std::find_if(named.begin(), named.end(),
                                     [](const auto& e) { return e.first == kManifestKey; });
  if (manifest == named.end()) throw FormatError(path + ": checkpoint has no manifest");
  RunConfig run = RunConfig::parse(tensor_to_text(manifest->second));
  run.validate();
  Rng rng(0);
  MatNet<float> net(run.model, rng);
  for (const auto& [name, t] : named) {
    if (name != kManifestKey && net.params().find(name) < 0) {
      throw FormatError(path + ": unexpected tensor " + name);
    }
  }
  net.params().assign(named);
  return {std::move(run), std::move(net)};
}

template struct Observation<float>;
template struct Observation<double>;
template class MatNet<float>;
template class MatNet<double>;
template Tensor<float> impute_two_stage(const MatNet<float>&, const MatNet<float>&,
                                        const Observation<float>&, Rng&, bool);
template Tensor<double> impute_two_stage(const MatNet<double>&, const MatNet<double>&,
                                         const Observation<double>&, Rng&, bool);

}  // namespace matnet
