#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mvgrpo/error.hpp"

namespace mvgrpo {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double max_grad_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("optimizer.lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ValidationError("optimizer betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("optimizer.eps must be positive");
    if (!(weight_decay >= 0.0)) throw ValidationError("optimizer.weight_decay must be nonnegative");
  }
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;

  friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

// Rescales g in place so its L2 norm is at most max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(std::span<double> g, double max_norm) {
  const double norm = l2_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& x : g) x *= s;
  }
  return norm;
}

// One AdamW update with decoupled weight decay. Clips the gradient norm first.
inline void adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grad,
                       const AdamWHyper& hp) {
  if (grad.size() != params.size()) throw InvalidInput("optimizer: gradient/parameter size mismatch");
  for (double g : grad)
    if (!std::isfinite(g)) throw NumericFailure("optimizer: non-finite gradient");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw InvalidInput("optimizer: state size mismatch");

  std::vector<double> g(grad.begin(), grad.end());
  clip_grad_norm(g, hp.max_grad_norm);

  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * params[i]);
  }
}

}  // namespace mvgrpo
