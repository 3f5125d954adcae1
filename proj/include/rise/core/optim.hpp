#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "rise/core/nn.hpp"

namespace rise {

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t warmup_steps = 2000;
  std::int64_t total_steps = 20000;
};

// Linear warmup from 0 to the base rate, then cosine decay to 0. Steps past
// the end clamp to the final value.
inline double lr_at(const OptimizerConfig& cfg, std::int64_t step) {
  if (step < 0) throw UsageError("lr_at: negative step");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps) return 0.0;
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// AdamW with decoupled weight decay and bias-corrected moments. Holds one
// first/second moment buffer per parameter, in store order.
template <class F>
class AdamW {
 public:
  AdamW(ParamStore<F>& store, OptimizerConfig cfg) : store_(store), cfg_(cfg) {
    m_.resize(store.size());
    v_.resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto n = store.entries()[i].second.raw().size();
      m_[i].assign(n, 0.0);
      v_[i].assign(n, 0.0);
    }
  }

  std::int64_t step_count() const { return step_; }
  double current_lr() const { return lr_at(cfg_, step_); }
  const OptimizerConfig& config() const { return cfg_; }

  void zero_grad() { store_.zero_grad_all(); }

  // One update; uses lr_at(step) with the step counter after increment, so
  // the first call trains at lr_at(1).
  void step() {
    ++step_;
    const double lr = lr_at(cfg_, step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < store_.size(); ++i) {
      auto& t = store_.entries()[i].second;
      if (!t.requires_grad()) continue;
      if (!t.has_grad())
        throw UsageError("adamw step: parameter '" + store_.entries()[i].first +
                         "' has no gradient");
      auto& data = t.raw();
      auto& grad = t.raw_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        double p = static_cast<double>(data[j]);
        p -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p);
        data[j] = static_cast<F>(p);
      }
    }
  }

 private:
  ParamStore<F>& store_;
  OptimizerConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace rise
