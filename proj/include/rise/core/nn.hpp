#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rise/core/tensor.hpp"

namespace rise {

// Flat registry of named learnable tensors. Modules create their parameters
// through the store so the optimizer and checkpoint code can walk them all.
template <class F>
class ParamStore {
 public:
  TensorT<F> create(const std::string& name, std::vector<int> shape) {
    auto t = TensorT<F>::zeros(std::move(shape), true);
    insert(name, t);
    return t;
  }

  TensorT<F> create_randn(const std::string& name, std::vector<int> shape, Rng& rng,
                          double stddev) {
    auto t = TensorT<F>::randn(std::move(shape), rng, stddev, true);
    insert(name, t);
    return t;
  }

  TensorT<F> create_uniform(const std::string& name, std::vector<int> shape, Rng& rng,
                            double bound) {
    auto t = TensorT<F>::rand_uniform(std::move(shape), rng, -bound, bound, true);
    insert(name, t);
    return t;
  }

  TensorT<F>* find(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<std::pair<std::string, TensorT<F>>>& entries() { return params_; }
  const std::vector<std::pair<std::string, TensorT<F>>>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::int64_t total_parameters() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad_all() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  void insert(const std::string& name, const TensorT<F>& t) {
    if (find(name)) throw UsageError("parameter name registered twice: " + name);
    params_.emplace_back(name, t);
  }

  std::vector<std::pair<std::string, TensorT<F>>> params_;
};

// y = x W + b with W [in x out]. Xavier-uniform weights, zero bias.
template <class F>
struct LinearT {
  TensorT<F> w, b;

  LinearT() = default;
  LinearT(ParamStore<F>& store, const std::string& prefix, int in, int out, Rng& rng) {
    double bound = std::sqrt(6.0 / (in + out));
    w = store.create_uniform(prefix + ".w", {in, out}, rng, bound);
    b = store.create(prefix + ".b", {out});
  }

  TensorT<F> operator()(const TensorT<F>& x) const { return add_rowwise(matmul(x, w), b); }
};

// Learned affine layer norm over the last dimension.
template <class F>
struct LayerNormT {
  TensorT<F> gain, bias;

  LayerNormT() = default;
  LayerNormT(ParamStore<F>& store, const std::string& prefix, int d) {
    gain = store.create(prefix + ".gain", {d});
    for (auto& g : gain.raw()) g = F(1);
    bias = store.create(prefix + ".bias", {d});
  }

  TensorT<F> operator()(const TensorT<F>& x) const { return layer_norm(x, gain, bias); }
};

}  // namespace rise
