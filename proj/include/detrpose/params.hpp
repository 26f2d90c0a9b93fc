#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "detrpose/tensor.hpp"

namespace detrpose {

// Named trainable tensors in insertion order.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
  }

  const Tensor<T>& operator[](const std::string& name) const { return tensors_[find(name)]; }
  Tensor<T>& at(const std::string& name) { return tensors_[find(name)]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  // Deep copy, optionally converting the scalar type. Copies are leaves that
  // require grad.
  template <typename U = T>
  ParamStore<U> clone() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], cast<U>(tensors_[i], true));
    return out;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace detrpose
