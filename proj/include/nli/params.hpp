#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nli/common.hpp"
#include "nli/tensor.hpp"

namespace nli {

/// Flat registry of named trainable tensors; the single source of truth for
/// the optimizer and checkpoints. Names are slash-scoped, e.g. "enc/fwd/W".
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> named;

  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : named)
      if (n == name) throw ContractError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    named.emplace_back(name, t);
    return t;
  }

  /// Uniform Glorot init scaled by fan-in + fan-out.
  Tensor glorot(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-limit, limit);
    return add(name, t);
  }

  Tensor zero_vec(const std::string& name, std::size_t n) {
    return add(name, Tensor::zeros({n}));
  }

  /// "Like an unknown word": same N(0, 0.1^2) draw as an out-of-vocabulary row.
  Tensor unk_like_vec(const std::string& name, std::size_t n, Rng& rng) {
    Tensor t = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i] = rng.gaussian(0.0, 0.1);
    return add(name, t);
  }

  Tensor find(const std::string& name) const {
    for (const auto& [n, t] : named)
      if (n == name) return t;
    throw ContractError("no parameter named " + name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : named) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : named) t.zero_grad();
  }
};

}  // namespace nli
