#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfb/tensor.hpp"

namespace dfb {

/// Handle to a value recorded on a Tape. Cheap to copy; only meaningful for
/// the tape that produced it.
struct Var {
  std::uint64_t tape = 0;
  std::size_t index = static_cast<std::size_t>(-1);

  bool valid() const noexcept { return tape != 0; }
};

/// Named, ordered collection of learnable tensors. Slot order is the order of
/// insertion and fixes every reduction order over parameters.
template <typename T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool decay = true);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t slot) const { return names_.at(slot); }
  const Tensor<T>& value(std::size_t slot) const { return values_.at(slot); }
  Tensor<T>& value(std::size_t slot) { return values_.at(slot); }
  bool decay(std::size_t slot) const { return decay_.at(slot); }

  std::optional<std::size_t> find(const std::string& name) const;
  /// Throws when the name is unknown.
  std::size_t slot(const std::string& name) const;
  const Tensor<T>& operator[](const std::string& name) const { return values_[slot(name)]; }
  Tensor<T>& operator[](const std::string& name) { return values_[slot(name)]; }

  const std::vector<std::string>& names() const noexcept { return names_; }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>(), decay_[i]);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<bool> decay_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameter gradients aligned with a ParamSet's slots.
template <typename T>
struct Gradients {
  std::vector<Tensor<T>> grads;
  /// Whether any recorded path reached the slot.
  std::vector<bool> reached;

  /// Elementwise += of another gradient set with identical layout.
  void accumulate(const Gradients& other);
  void scale(T s);
};

template <typename T>
Gradients<T> zero_gradients(const ParamSet<T>& params);

/// Define-by-run record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the list is topological by
/// construction. A backward rule receives the tape (to read saved forward
/// values), the gradient of its output, and one accumulation buffer per input
/// (nullptr when that input needs no gradient). Rules must accumulate with +=.
template <typename T>
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tape& tape, const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    std::optional<std::size_t> param_slot;
    BackwardFn backward;
  };

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Leaf that never receives a gradient.
  Var constant(Tensor<T> value);
  /// Leaf bound to a parameter slot; its gradient lands in that slot.
  Var param(const ParamSet<T>& params, std::size_t slot);
  Var param(const ParamSet<T>& params, const std::string& name) { return param(params, params.slot(name)); }

  Var record(std::string op, std::vector<Var> inputs, Tensor<T> output, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  const Tensor<T>& value_at(std::size_t index) const { return values_.at(index); }
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t index) const { return nodes_.at(index); }
  std::uint64_t id() const noexcept { return id_; }

  /// Gradients of a scalar loss with respect to every parameter slot.
  Gradients<T> backward(Var loss, const ParamSet<T>& params) const;
  /// Same, seeding the output with an arbitrary upstream gradient.
  Gradients<T> backward_from(Var output, const Tensor<T>& upstream, const ParamSet<T>& params) const;

 private:
  std::size_t check(Var v) const;

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> values_;
};

}  // namespace dfb
