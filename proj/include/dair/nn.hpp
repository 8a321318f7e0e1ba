#pragma once

// Named parameter storage and the few layer shapes the scene model uses.

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dair/rng.hpp"
#include "dair/tensor.hpp"

namespace dair {

/// Parameters in a fixed insertion order. Values are replaced, never
/// mutated, so tensors handed out earlier stay valid.
template <class T>
class ParamStore {
 public:
  const Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, values_.size());
    names_.push_back(name);
    values_.push_back(Tensor<T>::parameter(std::move(shape), std::move(values)));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return values_[it->second];
  }

  const Tensor<T>& at(std::size_t i) const { return values_.at(i); }

  void set(const std::string& name, Tensor<T> value) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    set(it->second, std::move(value));
  }

  void set(std::size_t i, Tensor<T> value) {
    if (value.shape() != values_.at(i).shape()) {
      throw ShapeError("parameter " + names_[i] + " expects " + shape_str(values_[i].shape()) + ", got " +
                       shape_str(value.shape()));
    }
    values_[i] = value.requires_grad() ? value : value.as_parameter();
  }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return values_; }
  std::size_t size() const { return values_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor<T>> values_;
};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
std::vector<T> uniform_fan_in(std::size_t fan_in, std::size_t count, NoiseStream& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

/// Registers `<name>.w` [in, out] and `<name>.b` [out].
template <class T>
void add_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, NoiseStream& rng,
                bool zero_init = false) {
  store.add(name + ".w", Shape{in, out}, zero_init ? std::vector<T>(in * out, T(0)) : uniform_fan_in<T>(in, in * out, rng));
  store.add(name + ".b", Shape{out}, std::vector<T>(out, T(0)));
}

template <class T>
Tensor<T> linear(const ParamStore<T>& store, const std::string& name, const Tensor<T>& x) {
  return matmul(x, store.get(name + ".w")) + store.get(name + ".b");
}

/// Two-layer perceptron with a ReLU hidden layer: `<name>.l1`, `<name>.l2`.
template <class T>
void add_mlp(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
             NoiseStream& rng, bool zero_last = false) {
  add_linear(store, name + ".l1", in, hidden, rng);
  add_linear(store, name + ".l2", hidden, out, rng, zero_last);
}

template <class T>
Tensor<T> mlp(const ParamStore<T>& store, const std::string& name, const Tensor<T>& x) {
  return linear(store, name + ".l2", relu(linear(store, name + ".l1", x)));
}

}  // namespace dair
