#pragma once

// Single-view GRPO: group-normalized advantages, per-transition importance
// ratios against a frozen snapshot, the clipped surrogate, a closed-form
// Gaussian KL to a reference policy, and a baseline training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mvgrpo/autodiff.hpp"
#include "mvgrpo/condspace.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/flowmodel.hpp"
#include "mvgrpo/optim.hpp"
#include "mvgrpo/rng.hpp"
#include "mvgrpo/sampler.hpp"

namespace mvgrpo {

struct ClipConfig {
  double ratio_clip = 1e-4;
  double adv_clip_max = 5.0;
  double std_guard = 1e-8;

  void validate() const {
    if (!(ratio_clip > 0.0)) throw ValidationError("clip_range must be positive");
    if (!(adv_clip_max > 0.0)) throw ValidationError("adv_clip_max must be positive");
    if (!(std_guard >= 0.0)) throw ValidationError("std_guard must be nonnegative");
  }
};

struct KLConfig {
  double beta = 0.0;

  void validate() const {
    if (!std::isfinite(beta) || beta < 0.0) throw ValidationError("kl beta must be a finite nonnegative number");
  }
};

// Frozen copy of the policy taken at the start of an iteration.
class OldPolicySnapshot {
 public:
  explicit OldPolicySnapshot(Vec params) : params_(std::move(params)) {}
  std::span<const double> params() const { return params_; }

 private:
  Vec params_;
};

// (r - mean) / std with population std; all zeros when std < guard. No clamping.
inline Vec normalized_advantages(std::span<const double> rewards, double std_guard) {
  if (rewards.size() < 2) throw InvalidInput("advantages: group size must be >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  Vec adv(rewards.size(), 0.0);
  if (!(sd >= std_guard) || sd == 0.0) return adv;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

inline Vec advantages(std::span<const double> rewards, const ClipConfig& cfg) {
  Vec adv = normalized_advantages(rewards, cfg.std_guard);
  for (double& a : adv) a = std::clamp(a, -cfg.adv_clip_max, cfg.adv_clip_max);
  return adv;
}

inline double clip_ratio(double r, double eps) { return std::clamp(r, 1.0 - eps, 1.0 + eps); }

inline double clipped_surrogate(double r, double adv, double eps) {
  return std::min(r * adv, clip_ratio(r, eps) * adv);
}

// Tape version; at ties the unclipped branch carries the gradient.
inline ad::Var clipped_surrogate_node(const ad::Var& r, double adv, double eps) {
  return ad::minimum(adv * r, adv * ad::clamp(r, 1.0 - eps, 1.0 + eps));
}

// Log-density of a stored transition under params and embedding e.
inline double transition_log_prob(const VelocityField& field, std::span<const double> params,
                                  const TransitionRecord& rec, const ConditionEmbedding& e,
                                  const NoiseSchedule& s) {
  const TransitionGaussian g = transition_mean(field, params, rec.x_t, rec.t, rec.h, e, s);
  return log_prob(rec.x_next, g);
}

// Importance ratio p_theta / p_old for a stored transition, computed in log space.
inline double ratio(const VelocityField& field, std::span<const double> theta, const OldPolicySnapshot& snapshot,
                    const TransitionRecord& rec, const ConditionEmbedding& e, const NoiseSchedule& s) {
  const double lp = transition_log_prob(field, theta, rec, e, s);
  const double lp_old = transition_log_prob(field, snapshot.params(), rec, e, s);
  return std::exp(lp - lp_old);
}

// Mean over stored transitions of KL(N(mu_theta, v) || N(mu_ref, v)) = |mu_theta - mu_ref|^2 / (2v).
inline double kl_penalty(const VelocityField& field, std::span<const double> theta, std::span<const double> ref,
                         std::span<const Trajectory> trajectories, const ConditionEmbedding& e,
                         const NoiseSchedule& s) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& traj : trajectories) {
    for (const auto& rec : traj.records) {
      const auto a = transition_mean(field, theta, rec.x_t, rec.t, rec.h, e, s);
      const auto b = transition_mean(field, ref, rec.x_t, rec.t, rec.h, e, s);
      double sq = 0.0;
      for (std::size_t i = 0; i < a.mean.size(); ++i) sq += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
      total += sq / (2.0 * a.variance);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

struct RatioStats {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t count = 0;
  std::size_t clipped = 0;  // transitions whose selected branch is the clipped one

  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
  double clip_fraction() const { return count ? static_cast<double>(clipped) / static_cast<double>(count) : 0.0; }

  void add(double r, bool clip_selected) {
    min = std::min(min, r);
    max = std::max(max, r);
    sum += r;
    ++count;
    if (clip_selected) ++clipped;
  }

  void merge(const RatioStats& o) {
    min = std::min(min, o.min);
    max = std::max(max, o.max);
    sum += o.sum;
    count += o.count;
    clipped += o.clipped;
  }
};

// One view of a group: the embedding its ratios are evaluated under and the per-sample advantages.
struct ViewSpec {
  const ConditionEmbedding* embedding = nullptr;
  std::span<const double> advantages;
};

struct ObjectiveResult {
  double loss = 0.0;
  GradientBuffer grad;
  RatioStats ratios;
  std::size_t velocity_evals = 0;
};

namespace detail {

// (1/G) sum_i (1/|M|) sum_k clipped surrogate, evaluated under one view.
inline ad::Var view_surrogate(ad::Tape& tape, const VelocityField& field, const ad::Var& theta,
                              const OldPolicySnapshot& snapshot, std::span<const Trajectory> trajectories,
                              const ViewSpec& view, const NoiseSchedule& s, const ClipConfig& clip,
                              RatioStats& stats, std::size_t& evals, std::size_t view_index) {
  if (view.advantages.size() != trajectories.size())
    throw InvalidInput("advantage count does not match trajectory count");
  std::vector<ad::Var> per_sample;
  per_sample.reserve(trajectories.size());
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& recs = trajectories[i].records;
    if (recs.empty()) throw InvalidInput("trajectory has no stored transitions");
    std::vector<ad::Var> terms;
    terms.reserve(recs.size());
    for (const auto& rec : recs) {
      try {
        const double lp_old = transition_log_prob(field, snapshot.params(), rec, *view.embedding, s);
        const ad::Var mean = transition_mean_node(tape, field, theta, rec.x_t, rec.t, rec.h, *view.embedding, s);
        const ad::Var lp = log_prob_node(tape, mean, rec.x_next, rec.variance);
        const ad::Var r = ad::exp(lp - lp_old);
        const double a = view.advantages[i];
        const double rv = r.scalar();
        stats.add(rv, clip_ratio(rv, clip.ratio_clip) * a < rv * a);
        terms.push_back(clipped_surrogate_node(r, a, clip.ratio_clip));
        evals += 2;
      } catch (const Error& e) {
        rethrow_with_context(e, "view " + std::to_string(view_index) + " sample " + std::to_string(i) + " step " +
                                    std::to_string(rec.step));
      }
    }
    per_sample.push_back((1.0 / static_cast<double>(recs.size())) * ad::add_n(terms));
  }
  return (1.0 / static_cast<double>(trajectories.size())) * ad::add_n(per_sample);
}

inline ad::Var kl_node(ad::Tape& tape, const VelocityField& field, const ad::Var& theta, std::span<const double> ref,
                       std::span<const Trajectory> trajectories, const ConditionEmbedding& e,
                       const NoiseSchedule& s, std::size_t& evals) {
  std::vector<ad::Var> terms;
  for (const auto& traj : trajectories) {
    for (const auto& rec : traj.records) {
      const auto ref_mean = transition_mean(field, ref, rec.x_t, rec.t, rec.h, e, s);
      const ad::Var mean = transition_mean_node(tape, field, theta, rec.x_t, rec.t, rec.h, e, s);
      terms.push_back((1.0 / (2.0 * ref_mean.variance)) * ad::squared_distance(mean, ref_mean.mean));
      evals += 2;
    }
  }
  if (terms.empty()) return tape.constant(0.0);
  return (1.0 / static_cast<double>(terms.size())) * ad::add_n(terms);
}

}  // namespace detail

struct ObjectiveOptions {
  ClipConfig clip;
  KLConfig kl;
  // Scale applied to the sum of augmented-view terms (1 sums the views, 1/K averages them).
  double augmented_scale = 1.0;
};

// loss = -[ sum over views of view_surrogate (augmented views scaled) - beta * KL(anchor) ].
// views[0] is the anchor.
inline ObjectiveResult grpo_objective(const VelocityField& field, std::span<const double> theta,
                                      const OldPolicySnapshot& snapshot, std::span<const double> ref,
                                      std::span<const Trajectory> trajectories, std::span<const ViewSpec> views,
                                      const NoiseSchedule& s, const ObjectiveOptions& opt) {
  if (trajectories.empty()) throw InvalidInput("objective: no trajectories");
  if (views.empty()) throw InvalidInput("objective: no views");
  ObjectiveResult result;
  auto vg = ad::value_and_grad(theta, [&](ad::Tape& tape, const ad::Var& p) {
    std::vector<ad::Var> aug;
    const ad::Var anchor = detail::view_surrogate(tape, field, p, snapshot, trajectories, views[0], s, opt.clip,
                                                  result.ratios, result.velocity_evals, 0);
    for (std::size_t k = 1; k < views.size(); ++k)
      aug.push_back(detail::view_surrogate(tape, field, p, snapshot, trajectories, views[k], s, opt.clip,
                                           result.ratios, result.velocity_evals, k));
    ad::Var objective = anchor;
    if (!aug.empty()) objective = anchor + opt.augmented_scale * ad::add_n(aug);
    if (opt.kl.beta > 0.0) {
      const ad::Var kl =
          detail::kl_node(tape, field, p, ref, trajectories, *views[0].embedding, s, result.velocity_evals);
      objective = objective - opt.kl.beta * kl;
    }
    return -1.0 * objective;
  });
  result.loss = vg.value;
  result.grad = std::move(vg.grad);
  return result;
}

inline ObjectiveResult single_view_objective(const VelocityField& field, std::span<const double> theta,
                                             const OldPolicySnapshot& snapshot, std::span<const double> ref,
                                             std::span<const Trajectory> trajectories,
                                             std::span<const double> advantages, const Condition& c,
                                             const NoiseSchedule& s, const ClipConfig& clip, const KLConfig& kl) {
  const ConditionEmbedding e = embed_condition(c);
  const ViewSpec view{&e, advantages};
  return grpo_objective(field, theta, snapshot, ref, trajectories, std::span<const ViewSpec>(&view, 1), s,
                        ObjectiveOptions{clip, kl, 1.0});
}

inline void optimizer_step(AdamWState& state, Vec& theta, std::span<const double> grad, const AdamWHyper& hp) {
  adamw_step(state, theta, grad, hp);
}

// ---------------------------------------------------------------------------
// Training loop shared by the single-view baseline and the multi-view trainer.

struct GrpoTrainConfig {
  std::uint64_t seed = 42;
  ToyDataSpec toy;
  RewardConfig reward = RewardConfig::defaults(ToyDataSpec{});
  std::size_t sampling_steps = 16;
  double shift = 3.0;
  std::set<std::size_t> sde_steps = {0, 2, 4, 6};
  NoiseSchedule schedule;
  std::size_t group_size = 8;
  std::size_t prompts_per_iteration = 4;
  bool shared_init = true;
  ClipConfig clip;
  KLConfig kl;
  AdamWHyper optimizer{.lr = 1e-3, .weight_decay = 1e-4, .max_grad_norm = 1.0};
  std::size_t iterations = 200;
  std::size_t updates_per_iteration = 1;

  TimeGrid grid() const { return TimeGrid(sampling_steps, shift, sde_steps); }
};

// Stream tags for iteration-derived seeding.
enum class Stream : std::uint64_t { Prompt = 1, Rollout = 2, Enhancer = 3 };

inline std::uint64_t stream_seed(std::uint64_t seed, std::size_t iteration, std::size_t prompt, Stream s) {
  return derive_seed(seed, {iteration, prompt, static_cast<std::uint64_t>(s)});
}

inline Condition iteration_prompt(const GrpoTrainConfig& cfg, std::size_t iteration, std::size_t prompt) {
  Rng rng(stream_seed(cfg.seed, iteration, prompt, Stream::Prompt));
  return sample_condition_prior(cfg.toy, rng);
}

struct IterationReport {
  std::size_t iteration = 0;
  double anchor_mean_reward = 0.0;
  double view_mean_reward = 0.0;  // mean over augmented views; equals the anchor when K = 0
  double loss = 0.0;
  double ratio_min = 0.0;
  double ratio_mean = 0.0;
  double ratio_max = 0.0;
  double clip_fraction = 0.0;
  std::size_t nfe = 0;        // rollout velocity evaluations
  std::size_t train_evals = 0;  // velocity evaluations spent in objective passes
  double wall_seconds = 0.0;
};

struct TrainResult {
  Vec params;
  AdamWState optimizer;
  std::vector<IterationReport> reports;
  std::vector<Vec> param_trajectory;  // params after each iteration
};

// Single-view GRPO trainer: rollout, anchor advantages, clipped surrogate, update.
inline TrainResult train_single_view(const VelocityField& field, Vec params, const GrpoTrainConfig& cfg,
                                     bool record_params = false) {
  cfg.schedule.validate();
  cfg.clip.validate();
  cfg.kl.validate();
  cfg.optimizer.validate();
  const TimeGrid grid = cfg.grid();
  const Vec ref = params;
  TrainResult out;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const OldPolicySnapshot snapshot(params);
    IterationReport rep;
    rep.iteration = it;

    struct Prompt {
      Condition c;
      RolloutGroup group;
      Vec adv;
    };
    std::vector<Prompt> prompts;
    for (std::size_t p = 0; p < cfg.prompts_per_iteration; ++p) {
      Prompt pr;
      pr.c = iteration_prompt(cfg, it, p);
      pr.group = rollout_group(field, snapshot.params(), pr.c, grid, cfg.schedule, cfg.group_size,
                               stream_seed(cfg.seed, it, p, Stream::Rollout), cfg.shared_init);
      rep.nfe += pr.group.nfe;
      Vec rewards;
      for (const auto& x : pr.group.samples) rewards.push_back(reward(x, pr.c, cfg.reward));
      rep.anchor_mean_reward += std::accumulate(rewards.begin(), rewards.end(), 0.0) / rewards.size();
      pr.adv = advantages(rewards, cfg.clip);
      prompts.push_back(std::move(pr));
    }
    rep.anchor_mean_reward /= static_cast<double>(prompts.size());
    rep.view_mean_reward = rep.anchor_mean_reward;

    RatioStats stats;
    for (std::size_t u = 0; u < cfg.updates_per_iteration; ++u) {
      Vec grad(params.size(), 0.0);
      double loss = 0.0;
      for (const auto& pr : prompts) {
        auto obj = single_view_objective(field, params, snapshot, ref, pr.group.trajectories, pr.adv, pr.c,
                                         cfg.schedule, cfg.clip, cfg.kl);
        loss += obj.loss / prompts.size();
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += obj.grad[j] / prompts.size();
        stats.merge(obj.ratios);
        rep.train_evals += obj.velocity_evals;
      }
      if (u == 0) rep.loss = loss;
      optimizer_step(out.optimizer, params, grad, cfg.optimizer);
    }
    rep.ratio_min = stats.min;
    rep.ratio_mean = stats.mean();
    rep.ratio_max = stats.max;
    rep.clip_fraction = stats.clip_fraction();
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.reports.push_back(rep);
    if (record_params) out.param_trajectory.push_back(params);
  }
  out.params = std::move(params);
  return out;
}

}  // namespace mvgrpo
