#include "dfb/autodiff.hpp"

#include <atomic>

namespace dfb {

template <typename T>
std::size_t ParamSet<T>::add(std::string name, Tensor<T> value, bool decay) {
  if (index_.contains(name)) throw Error("duplicate parameter name: " + name);
  const std::size_t slot = values_.size();
  index_.emplace(name, slot);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  decay_.push_back(decay);
  return slot;
}

template <typename T>
std::optional<std::size_t> ParamSet<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

template <typename T>
std::size_t ParamSet<T>::slot(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

template <typename T>
void Gradients<T>::accumulate(const Gradients& other) {
  if (other.grads.size() != grads.size()) throw Error("gradient sets have different slot counts");
  for (std::size_t s = 0; s < grads.size(); ++s) {
    if (!other.reached[s]) continue;
    auto dst = grads[s].values();
    auto src = other.grads[s].values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    reached[s] = true;
  }
}

template <typename T>
void Gradients<T>::scale(T s) {
  for (auto& g : grads)
    for (auto& v : g.values()) v *= s;
}

template <typename T>
Gradients<T> zero_gradients(const ParamSet<T>& params) {
  Gradients<T> g;
  g.grads.reserve(params.size());
  for (std::size_t s = 0; s < params.size(); ++s) g.grads.push_back(Tensor<T>::zeros(params.value(s).shape()));
  g.reached.assign(params.size(), false);
  return g;
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <typename T>
std::size_t Tape<T>::check(Var v) const {
  if (v.tape != id_ || v.index >= nodes_.size()) throw Error("variable does not belong to this tape");
  return v.index;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{"constant", {}, false, std::nullopt, nullptr});
  values_.push_back(std::move(value));
  return Var{id_, nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::param(const ParamSet<T>& params, std::size_t slot) {
  nodes_.push_back(Node{"param:" + params.name(slot), {}, true, slot, nullptr});
  values_.push_back(params.value(slot));
  return Var{id_, nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(std::string op, std::vector<Var> inputs, Tensor<T> output, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.inputs.reserve(inputs.size());
  for (Var v : inputs) {
    const std::size_t i = check(v);
    n.inputs.push_back(i);
    n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  }
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  values_.push_back(std::move(output));
  return Var{id_, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return values_[check(v)];
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return nodes_[check(v)].requires_grad;
}

template <typename T>
Gradients<T> Tape<T>::backward(Var loss, const ParamSet<T>& params) const {
  const std::size_t root = check(loss);
  if (values_[root].size() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_str(values_[root].shape()));
  }
  return backward_from(loss, Tensor<T>(values_[root].shape(), T(1)), params);
}

template <typename T>
Gradients<T> Tape<T>::backward_from(Var output, const Tensor<T>& upstream, const ParamSet<T>& params) const {
  const std::size_t root = check(output);
  if (upstream.shape() != values_[root].shape()) {
    throw Error("backward: upstream gradient shape " + shape_str(upstream.shape()) + " does not match output " +
                shape_str(values_[root].shape()));
  }
  Gradients<T> out = zero_gradients(params);
  std::vector<Tensor<T>> grads(root + 1);
  grads[root] = upstream;
  std::vector<Tensor<T>*> gin;
  for (std::size_t k = root + 1; k-- > 0;) {
    const Node& n = nodes_[k];
    if (!n.requires_grad || grads[k].empty()) continue;
    if (n.param_slot) {
      const std::size_t s = *n.param_slot;
      if (s >= out.grads.size() || out.grads[s].shape() != grads[k].shape()) {
        throw Error("backward: parameter slot " + std::to_string(s) + " does not match the given parameter set");
      }
      auto dst = out.grads[s].values();
      auto src = grads[k].values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      out.reached[s] = true;
    } else if (n.backward) {
      gin.assign(n.inputs.size(), nullptr);
      for (std::size_t j = 0; j < n.inputs.size(); ++j) {
        const std::size_t in = n.inputs[j];
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = Tensor<T>::zeros(values_[in].shape());
        gin[j] = &grads[in];
      }
      n.backward(*this, grads[k], gin);
    }
    grads[k] = Tensor<T>();
  }
  return out;
}

template class ParamSet<float>;
template class ParamSet<double>;
template struct Gradients<float>;
template struct Gradients<double>;
template Gradients<float> zero_gradients<float>(const ParamSet<float>&);
template Gradients<double> zero_gradients<double>(const ParamSet<double>&);
template class Tape<float>;
template class Tape<double>;

}  // namespace dfb
