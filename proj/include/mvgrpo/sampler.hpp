#pragma once

// ODE and SDE samplers over a discrete time grid.
//
// Time runs from t = 1 (pure noise) down to t = 0 (data). Step k moves from
// grid point t_k to t_{k+1} = t_k - h_k. The stochastic step is the
// Euler-Maruyama discretization of the marginal-preserving SDE taken toward
// decreasing t:
//
//   mu  = x - h * (v + sigma^2 / (2 t_c) * (x + (1 - t) v))
//   x'  = mu + sqrt(sigma^2 h) * eps
//
// with sigma = eta * sqrt(t_c / (1 - t_c)) and t_c the step-clamped time.
// Equivalently mu = (1 - t + h) x0_hat + (t - h - sigma^2 h / (2 t_c)) x1_hat,
// where x0_hat = x - t v and x1_hat = x + (1 - t) v.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mvgrpo/autodiff.hpp"
#include "mvgrpo/condspace.hpp"
#include "mvgrpo/digest.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/flowmodel.hpp"
#include "mvgrpo/rng.hpp"

namespace mvgrpo {

class TimeGrid {
 public:
  // Uniform grid on [0, 1] with T steps, warped by t -> s t / (1 + (s - 1) t).
  // `sde_steps` index steps counted from the noise end.
  TimeGrid(std::size_t steps, double shift, std::set<std::size_t> sde_steps)
      : shift_(shift), sde_(std::move(sde_steps)) {
    if (steps == 0) throw ValidationError("sampling_steps must be positive");
    if (!(shift >= 1.0) || !std::isfinite(shift)) throw ValidationError("shift must be >= 1");
    for (std::size_t k : sde_)
      if (k >= steps) throw ValidationError("sde step index " + std::to_string(k) + " is not < sampling_steps");
    points_.resize(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k) {
      const double u = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
      points_[k] = shift * u / (1.0 + (shift - 1.0) * u);
    }
    points_.front() = 1.0;
    points_.back() = 0.0;
    for (std::size_t k = 0; k < steps; ++k)
      if (!(points_[k] > points_[k + 1])) throw ValidationError("time grid is not strictly decreasing");
  }

  static TimeGrid all_sde(std::size_t steps, double shift = 1.0) {
    std::set<std::size_t> m;
    for (std::size_t k = 0; k < steps; ++k) m.insert(k);
    return TimeGrid(steps, shift, std::move(m));
  }

  std::size_t steps() const { return points_.size() - 1; }
  double t(std::size_t k) const { return points_.at(k); }
  double h(std::size_t k) const { return points_.at(k) - points_.at(k + 1); }
  bool is_sde(std::size_t k) const { return sde_.count(k) != 0; }
  const std::set<std::size_t>& sde_steps() const { return sde_; }
  const std::vector<double>& points() const { return points_; }
  double shift() const { return shift_; }

 private:
  std::vector<double> points_;
  double shift_;
  std::set<std::size_t> sde_;
};

struct NoiseSchedule {
  double eta = 0.7;
  double t_min = 1e-3;
  double t_max = 1.0 - 1e-3;

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ValidationError("eta must be a nonnegative number");
    if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0))
      throw ValidationError("noise clamp bounds must satisfy 0 < t_min < t_max < 1");
  }
};

inline double sigma(double t, const NoiseSchedule& s) {
  const double tc = std::clamp(t, s.t_min, s.t_max);
  return s.eta * std::sqrt(tc / (1.0 - tc));
}

// Time at which sigma is evaluated for a step of size h from t: clamped into
// [h/2, 1 - h/2] (and the schedule bounds) so the first step from t = 1 stays finite.
inline double step_time(double t, double h, const NoiseSchedule& s) {
  const double lo = std::max(s.t_min, 0.5 * h);
  const double hi = std::min(s.t_max, 1.0 - 0.5 * h);
  return std::clamp(t, lo, std::max(lo, hi));
}

struct TransitionGaussian {
  Vec mean;
  double variance = 0.0;
};

struct TransitionRecord {
  std::size_t step = 0;
  double t = 0.0;
  double h = 0.0;
  Vec x_t;
  Vec x_next;
  Vec noise;
  double variance = 0.0;
};

struct Trajectory {
  std::vector<TransitionRecord> records;
  Vec x_final;
  Vec x_init;
  Condition condition;
};

namespace detail {

struct StepCoefficients {
  double drift_scale = 0.0;  // sigma^2 / (2 t_c)
  double variance = 0.0;     // sigma^2 h
};

inline StepCoefficients step_coefficients(double t, double h, const NoiseSchedule& s) {
  const double tc = step_time(t, h, s);
  const double sig = s.eta * std::sqrt(tc / (1.0 - tc));
  return {sig * sig / (2.0 * tc), sig * sig * h};
}

inline void check_step(double t, double h) {
  if (!(h > 0.0)) throw InvalidInput("step size must be positive");
  if (!(t - h >= -1e-12) || t > 1.0) throw InvalidInput("step leaves [0, 1]");
}

inline double mean_component(double x, double v, double t, double h, double drift_scale) {
  return x - h * (v + drift_scale * (x + (1.0 - t) * v));
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericFailure(std::string(what) + " produced a non-finite value");
}

}  // namespace detail

// Deterministic Euler step toward data: x' = x - h v.
inline Vec ode_step(const VelocityField& field, std::span<const double> theta, std::span<const double> x,
                    double t, double h, const ConditionEmbedding& e) {
  detail::check_step(t, h);
  const Vec v = field(theta, x, t, e.vec);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - h * v[i];
  detail::require_finite(out, "ode_step");
  return out;
}

struct NoiseFreeEstimates {
  Vec x0;
  Vec x1;
};

inline NoiseFreeEstimates x0_x1_estimates(std::span<const double> x, double t, std::span<const double> v) {
  if (x.size() != v.size()) throw InvalidInput("x0_x1_estimates: size mismatch");
  NoiseFreeEstimates est{Vec(x.size()), Vec(x.size())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    est.x0[i] = x[i] - t * v[i];
    est.x1[i] = x[i] + (1.0 - t) * v[i];
  }
  return est;
}

// Transition mean from a precomputed velocity.
inline TransitionGaussian transition_from_velocity(std::span<const double> x, std::span<const double> v, double t,
                                                   double h, const NoiseSchedule& s) {
  detail::check_step(t, h);
  const auto co = detail::step_coefficients(t, h, s);
  TransitionGaussian g{Vec(x.size()), co.variance};
  for (std::size_t i = 0; i < x.size(); ++i) g.mean[i] = detail::mean_component(x[i], v[i], t, h, co.drift_scale);
  detail::require_finite(g.mean, "transition_mean");
  return g;
}

inline TransitionGaussian transition_mean(const VelocityField& field, std::span<const double> theta,
                                          std::span<const double> x, double t, double h,
                                          const ConditionEmbedding& e, const NoiseSchedule& s) {
  const Vec v = field(theta, x, t, e.vec);
  return transition_from_velocity(x, v, t, h, s);
}

// Transition mean as a tape node, differentiable in theta. Returns the mean; the
// variance does not depend on theta and is available from step_variance().
inline ad::Var transition_mean_node(ad::Tape& tape, const VelocityField& field, const ad::Var& theta,
                                    std::span<const double> x, double t, double h, const ConditionEmbedding& e,
                                    const NoiseSchedule& s) {
  detail::check_step(t, h);
  const ad::Var v = velocity_node(tape, field, theta, x, t, e.vec);
  const auto co = detail::step_coefficients(t, h, s);
  Vec mean(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    mean[i] = detail::mean_component(x[i], v.value()[i], t, h, co.drift_scale);
  // d mu / d v = -h (1 + drift_scale (1 - t)) per component.
  const double dmu_dv = -h * (1.0 + co.drift_scale * (1.0 - t));
  return tape.push(std::move(mean), [v, dmu_dv](ad::Tape& tp, std::span<const double> g) {
    Vec d(g.begin(), g.end());
    for (double& x : d) x *= dmu_dv;
    tp.accumulate(v, d);
  }, "transition_mean");
}

inline double step_variance(double t, double h, const NoiseSchedule& s) {
  return detail::step_coefficients(t, h, s).variance;
}

inline double log_prob(std::span<const double> x_next, const TransitionGaussian& g) {
  if (!(g.variance > 0.0)) throw InvalidInput("log_prob: variance must be positive");
  if (x_next.size() != g.mean.size()) throw InvalidInput("log_prob: size mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < x_next.size(); ++i) {
    const double r = x_next[i] - g.mean[i];
    sq += r * r;
  }
  const double d = static_cast<double>(x_next.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * g.variance) - sq / (2.0 * g.variance);
}

// log N(x_next; mean, variance I) with the mean as a tape node. Same arithmetic as log_prob().
inline ad::Var log_prob_node(ad::Tape& tape, const ad::Var& mean, std::span<const double> x_next, double variance) {
  if (!(variance > 0.0)) throw InvalidInput("log_prob: variance must be positive");
  if (x_next.size() != mean.size()) throw InvalidInput("log_prob: size mismatch");
  double sq = 0.0;
  Vec r(x_next.size());
  for (std::size_t i = 0; i < x_next.size(); ++i) {
    r[i] = x_next[i] - mean.value()[i];
    sq += r[i] * r[i];
  }
  const double d = static_cast<double>(x_next.size());
  const double lp = -0.5 * d * std::log(2.0 * std::numbers::pi * variance) - sq / (2.0 * variance);
  return tape.push(Vec{lp}, [mean, r, variance](ad::Tape& tp, std::span<const double> g) {
    Vec dmean(r);
    for (double& x : dmean) x *= g[0] / variance;
    tp.accumulate(mean, dmean);
  }, "log_prob");
}

// Noise that would carry the transition mean to x_next: (x_next - mean) / sqrt(variance).
inline Vec equivalent_noise(std::span<const double> x_next, const TransitionGaussian& g) {
  if (!(g.variance > 0.0)) throw InvalidInput("equivalent_noise: variance must be positive");
  if (x_next.size() != g.mean.size()) throw InvalidInput("equivalent_noise: size mismatch");
  const double sd = std::sqrt(g.variance);
  Vec eps(x_next.size());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_next[i] - g.mean[i]) / sd;
  return eps;
}

struct SdeStepResult {
  Vec x_next;
  TransitionRecord record;
};

// One stochastic step with an explicit standard-normal draw.
inline SdeStepResult sde_step_with_noise(const VelocityField& field, std::span<const double> theta,
                                         std::span<const double> x, double t, double h,
                                         const ConditionEmbedding& e, const NoiseSchedule& s,
                                         std::span<const double> eps, std::size_t step_index = 0) {
  if (eps.size() != x.size()) throw InvalidInput("sde_step: noise width mismatch");
  const TransitionGaussian g = transition_mean(field, theta, x, t, h, e, s);
  const double sd = std::sqrt(g.variance);
  SdeStepResult out;
  out.x_next.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.x_next[i] = g.mean[i] + sd * eps[i];
  detail::require_finite(out.x_next, "sde_step");
  out.record = TransitionRecord{step_index, t, h, Vec(x.begin(), x.end()), out.x_next, Vec(eps.begin(), eps.end()),
                                g.variance};
  return out;
}

inline SdeStepResult sde_step(const VelocityField& field, std::span<const double> theta, std::span<const double> x,
                              double t, double h, const ConditionEmbedding& e, const NoiseSchedule& s, Rng& rng,
                              std::size_t step_index = 0) {
  Vec eps(x.size());
  for (double& v : eps) v = rng.normal();
  return sde_step_with_noise(field, theta, x, t, h, e, s, eps, step_index);
}

struct RolloutGroup {
  std::vector<Vec> samples;
  std::vector<Trajectory> trajectories;
  std::size_t nfe = 0;
};

// Rolls out G samples of condition c. Steps in the grid's SDE set are stochastic
// and recorded; the rest are deterministic Euler steps. Each sample draws from
// its own stream derived from `seed`, so results do not depend on evaluation order.
inline RolloutGroup rollout_group(const VelocityField& field, std::span<const double> theta, const Condition& c,
                                  const TimeGrid& grid, const NoiseSchedule& schedule, std::size_t group_size,
                                  std::uint64_t seed, bool shared_init) {
  if (group_size < 2) throw InvalidInput("rollout_group: group size must be >= 2");
  schedule.validate();
  const ConditionEmbedding e = embed_condition(c);
  const std::size_t d = field.config().data_dim;
  RolloutGroup out;
  out.samples.reserve(group_size);
  out.trajectories.reserve(group_size);

  Vec shared(d);
  if (shared_init) {
    Rng init(derive_seed(seed, {0x1a17}));
    for (double& v : shared) v = init.normal();
  }
  for (std::size_t i = 0; i < group_size; ++i) {
    Rng rng(derive_seed(seed, {0x5a3e, i}));
    Trajectory traj;
    traj.condition = c;
    Vec x = shared;
    if (!shared_init)
      for (double& v : x) v = rng.normal();
    traj.x_init = x;
    for (std::size_t k = 0; k < grid.steps(); ++k) {
      const double t = grid.t(k);
      const double h = grid.h(k);
      try {
        if (grid.is_sde(k)) {
          auto step = sde_step(field, theta, x, t, h, e, schedule, rng, k);
          x = std::move(step.x_next);
          traj.records.push_back(std::move(step.record));
        } else {
          x = ode_step(field, theta, x, t, h, e);
        }
      } catch (const Error& err) {
        rethrow_with_context(err, "rollout sample " + std::to_string(i) + " step " + std::to_string(k));
      }
      ++out.nfe;
    }
    traj.x_final = x;
    out.samples.push_back(x);
    out.trajectories.push_back(std::move(traj));
  }
  return out;
}

// Deterministic ODE sample from a given initial noise.
inline Vec ode_sample(const VelocityField& field, std::span<const double> theta, const ConditionEmbedding& e,
                      const TimeGrid& grid, Vec x) {
  for (std::size_t k = 0; k < grid.steps(); ++k) x = ode_step(field, theta, x, grid.t(k), grid.h(k), e);
  return x;
}

// SDE sample (every step in the grid's SDE set is stochastic) from a given initial noise.
inline Vec sde_sample(const VelocityField& field, std::span<const double> theta, const ConditionEmbedding& e,
                      const TimeGrid& grid, const NoiseSchedule& s, Vec x, Rng& rng) {
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    if (grid.is_sde(k))
      x = sde_step(field, theta, x, grid.t(k), grid.h(k), e, s, rng, k).x_next;
    else
      x = ode_step(field, theta, x, grid.t(k), grid.h(k), e);
  }
  return x;
}

// Debug dump: one line per record, "k t h v digest(x_t) digest(x_next)".
inline void write_trajectory_dump(std::ostream& out, const Trajectory& traj) {
  char buf[128];
  for (const auto& r : traj.records) {
    std::snprintf(buf, sizeof buf, "%zu %.17g %.17g %.17g ", r.step, r.t, r.h, r.variance);
    out << buf << digest_hex(r.x_t) << ' ' << digest_hex(r.x_next) << '\n';
  }
}

}  // namespace mvgrpo
