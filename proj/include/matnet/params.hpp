#pragma once

#include "matnet/rng.hpp"
#include "matnet/serialize.hpp"
#include "matnet/tape.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace matnet {

/// Which sub-network a parameter belongs to. Td/GenBu/GenMerge/Ar make up
/// the generator; Bu/Merge make up the inference network.
enum class ParamGroup : unsigned { kTd = 0, kBu, kMerge, kGenBu, kGenMerge, kAr };

std::string to_string(ParamGroup g);

/// Set of parameter groups.
class GroupSet {
 public:
  constexpr GroupSet() = default;
  constexpr GroupSet(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) bits_ |= 1u << static_cast<unsigned>(g);
  }
  static constexpr GroupSet all() { return GroupSet(0x3Fu); }
  static constexpr GroupSet none() { return GroupSet(0u); }
  static constexpr GroupSet generator() {
    return {ParamGroup::kTd, ParamGroup::kGenBu, ParamGroup::kGenMerge, ParamGroup::kAr};
  }
  static constexpr GroupSet inference() { return {ParamGroup::kBu, ParamGroup::kMerge}; }
  constexpr bool contains(ParamGroup g) const { return bits_ & (1u << static_cast<unsigned>(g)); }

 private:
  explicit constexpr GroupSet(unsigned bits) : bits_(bits) {}
  unsigned bits_ = 0;
};

template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor<S> value;
  };

  int add(std::string name, ParamGroup group, Tensor<S> value);
  int find(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  Entry& operator[](int id) { return entries_.at(static_cast<std::size_t>(id)); }
  const Entry& operator[](int id) const { return entries_.at(static_cast<std::size_t>(id)); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  Index total_size() const;
  void set_zero();

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.group, e.value.template cast<U>());
    return out;
  }

  NamedTensors to_named() const;
  /// Overwrites every parameter from `named`; names and shapes must agree.
  void assign(const NamedTensors& named);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

/// Parameters placed on a tape for one forward pass.
template <typename S>
class BoundParams {
 public:
  BoundParams(Tape<S>& tape, const ParamStore<S>& store, GroupSet trainable);

  Var<S> operator[](int id) const { return vars_.at(static_cast<std::size_t>(id)); }
  Tape<S>& tape() const { return *tape_; }
  std::size_t size() const { return vars_.size(); }

  /// Gradients after tape.backward(); zeros for frozen or unreached params.
  std::vector<Tensor<S>> gradients() const;

 private:
  Tape<S>* tape_;
  std::vector<Var<S>> vars_;
};

/// Kaiming-style normal initialiser, scaled by `gain`. gain 0 gives zeros.
template <typename S>
Tensor<S> init_normal(const Shape& shape, Index fan_in, double gain, Rng& rng);

}  // namespace matnet
