#include "matnet/params.hpp"

#include <cmath>

namespace matnet {

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kTd: return "td";
    case ParamGroup::kBu: return "bu";
    case ParamGroup::kMerge: return "merge";
    case ParamGroup::kGenBu: return "gen_bu";
    case ParamGroup::kGenMerge: return "gen_merge";
    case ParamGroup::kAr: return "ar";
  }
  return "?";
}

template <typename S>
int ParamStore<S>::add(std::string name, ParamGroup group, Tensor<S> value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  const int id = static_cast<int>(entries_.size());
  index_.emplace(name, id);
  entries_.push_back({std::move(name), group, std::move(value)});
  return id;
}

template <typename S>
int ParamStore<S>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

template <typename S>
Index ParamStore<S>::total_size() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename S>
void ParamStore<S>::set_zero() {
  for (auto& e : entries_) e.value.array().setZero();
}

template <typename S>
NamedTensors ParamStore<S>::to_named() const {
  NamedTensors out;
  for (const auto& e : entries_) out.emplace_back(e.name, e.value.template cast<float>());
  return out;
}

template <typename S>
void ParamStore<S>::assign(const NamedTensors& named) {
  std::size_t matched = 0;
  for (const auto& [name, t] : named) {
    const int id = find(name);
    if (id < 0) continue;
    auto& e = entries_[static_cast<std::size_t>(id)];
    if (e.value.shape() != t.shape()) {
      throw FormatError("parameter " + name + " has shape " + t.shape().str() + ", model expects " +
                        e.value.shape().str());
    }
    e.value = t.template cast<S>();
    ++matched;
  }
  if (matched != entries_.size()) {
    for (const auto& e : entries_) {
      bool found = false;
      for (const auto& [name, t] : named) found = found || name == e.name;
      if (!found) throw FormatError("checkpoint is missing parameter " + e.name);
    }
  }
}

template <typename S>
BoundParams<S>::BoundParams(Tape<S>& tape, const ParamStore<S>& store, GroupSet trainable)
    : tape_(&tape) {
  vars_.reserve(store.size());
  for (const auto& e : store.entries()) vars_.push_back(tape.leaf(e.value, trainable.contains(e.group)));
}

template <typename S>
std::vector<Tensor<S>> BoundParams<S>::gradients() const {
  std::vector<Tensor<S>> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) out.push_back(tape_->grad(v));
  return out;
}

template <typename S>
Tensor<S> init_normal(const Shape& shape, Index fan_in, double gain, Rng& rng) {
  Tensor<S> t(shape);
  if (gain == 0.0) return t;
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(sd * rng.normal());
  return t;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class BoundParams<float>;
template class BoundParams<double>;
template Tensor<float> init_normal(const Shape&, Index, double, Rng&);
template Tensor<double> init_normal(const Shape&, Index, double, Rng&);

}  // namespace matnet
