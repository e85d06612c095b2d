#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "urnng/autodiff.hpp"

namespace urnng {

/// Global L2 norm of the gradients; rescales them to `max_norm` if larger.
/// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<ad::Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) sq += p->grad.squared_norm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto* p : params)
      for (double& g : p->grad.values()) g *= s;
  }
  return norm;
}

inline double grad_norm(const std::vector<ad::Parameter*>& params) {
  double sq = 0.0;
  for (auto* p : params) sq += p->grad.squared_norm();
  return std::sqrt(sq);
}

/// Plain SGD; each parameter's step is scaled by its lr_scale.
struct Sgd {
  double lr = 1.0;

  void step(const std::vector<ad::Parameter*>& params) const {
    for (auto* p : params) {
      const double r = lr * p->lr_scale;
      double* w = p->value.data();
      const double* g = p->grad.data();
      for (std::size_t i = 0, n = p->value.size(); i < n; ++i) w[i] -= r * g[i];
    }
  }
};

struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  std::map<std::string, Tensor> m, v;

  void step(const std::vector<ad::Parameter*>& params) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto* p : params) {
      auto [mi, fresh_m] = m.try_emplace(p->name, p->value.shape());
      auto [vi, fresh_v] = v.try_emplace(p->name, p->value.shape());
      double* mm = mi->second.data();
      double* vv = vi->second.data();
      double* w = p->value.data();
      const double* g = p->grad.data();
      const double r = lr * p->lr_scale;
      for (std::size_t i = 0, n = p->value.size(); i < n; ++i) {
        mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= r * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    }
  }
};

}  // namespace urnng
