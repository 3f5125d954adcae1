#pragma once

// Shared test utilities: the central finite-difference gradient oracle (run
// on the double-precision shadow build of each module) and small reference
// implementations that tests freeze expected values against. Everything here
// is independent of the library's fast paths it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "rise/core/random.hpp"
#include "rise/core/tensor.hpp"

namespace rise::testing {

struct GradCheck {
  double max_rel_err = 0.0;
  int probes = 0;
};

// Compares analytic gradients of `loss_fn` (a closure over `params` that
// rebuilds its graph on every call) against central finite differences.
// Probes a random subset of each parameter's elements.
inline GradCheck check_gradients(std::vector<TensorT<double>> params,
                                 const std::function<double()>& loss_value,
                                 const std::function<TensorT<double>()>& loss_graph, Rng& rng,
                                 int probes_per_param = 12, double step = 1e-3) {
  for (auto& p : params) p.zero_grad();
  auto loss = loss_graph();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.raw_grad() : std::vector<double>(p.raw().size(), 0.0));

  GradCheck result;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].raw();
    const int n = static_cast<int>(data.size());
    const int probes = std::min(probes_per_param, n);
    for (int t = 0; t < probes; ++t) {
      const int j = static_cast<int>(rng.uniform_int(0, n - 1));
      const double saved = data[j];
      data[j] = saved + step;
      const double fp = loss_value();
      data[j] = saved - step;
      const double fm = loss_value();
      data[j] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double a = analytic[pi][j];
      const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-4});
      const double rel = std::fabs(a - fd) / denom;
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.probes;
    }
  }
  return result;
}

// Convenience wrapper when one closure serves both roles.
inline GradCheck check_gradients(std::vector<TensorT<double>> params,
                                 const std::function<TensorT<double>()>& loss_graph, Rng& rng,
                                 int probes_per_param = 12, double step = 1e-3) {
  auto value = [&loss_graph]() { return loss_graph().item(); };
  return check_gradients(std::move(params), value, loss_graph, rng, probes_per_param, step);
}

// Pushes values away from ReLU kinks so finite differences stay clean.
inline void nudge_from_zero(TensorT<double>& t, double margin = 0.05) {
  for (auto& x : t.raw())
    if (std::fabs(x) < margin) x = x < 0 ? x - margin : x + margin;
}

// Reference triple-loop matrix product.
inline std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                      int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
  return c;
}

// Reference per-row normalization.
inline std::vector<double> ref_layer_norm(const std::vector<double>& x, int rows, int d,
                                          const std::vector<double>& gain,
                                          const std::vector<double>& bias, double eps) {
  std::vector<double> y(x.size());
  for (int r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    var /= d;
    for (int j = 0; j < d; ++j)
      y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
  }
  return y;
}

// Reference single-head attention, [m x dh] query against [n x dh] keys.
inline std::vector<double> ref_attention(const std::vector<double>& q,
                                         const std::vector<double>& k,
                                         const std::vector<double>& v, int m, int n, int dh) {
  std::vector<double> out(static_cast<std::size_t>(m) * dh, 0.0);
  for (int i = 0; i < m; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int t = 0; t < dh; ++t) dot += q[i * dh + t] * k[j * dh + t];
      s[j] = dot / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, s[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      s[j] = std::exp(s[j] - mx);
      sum += s[j];
    }
    for (int j = 0; j < n; ++j)
      for (int t = 0; t < dh; ++t) out[i * dh + t] += s[j] / sum * v[j * dh + t];
  }
  return out;
}

}  // namespace rise::testing
