#pragma once

// Multi-view GRPO: each group of samples is scored under the anchor condition
// and under K augmented conditions. Every view gets its own group-normalized
// advantages, and its importance ratios are re-evaluated on the stored
// transitions of the anchor rollout (no new samples are drawn). The loss sums
// the clipped surrogates of all views.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvgrpo/condspace.hpp"
#include "mvgrpo/enhancer.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/flowmodel.hpp"
#include "mvgrpo/grpo.hpp"
#include "mvgrpo/sampler.hpp"

namespace mvgrpo {

// rewards[v][i], advantages[v][i] for view v (0 = anchor) and sample i.
struct GroupEvaluation {
  std::vector<Vec> rewards;
  std::vector<Vec> advantages;
  Vec view_mean;
  Vec view_std;

  std::size_t views() const { return rewards.size(); }
};

inline GroupEvaluation multiview_advantages(std::span<const Vec> samples, const Condition& c,
                                            std::span<const Condition> augmented, const RewardConfig& reward_cfg,
                                            const ClipConfig& clip) {
  GroupEvaluation ge;
  auto add_view = [&](const Condition& view, std::size_t index) {
    Vec r;
    r.reserve(samples.size());
    try {
      for (const auto& x : samples) r.push_back(reward(x, view, reward_cfg));
    } catch (const Error& e) {
      rethrow_with_context(e, "view " + std::to_string(index));
    }
    const double n = static_cast<double>(r.size());
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    ge.view_mean.push_back(mean);
    ge.view_std.push_back(std::sqrt(var / n));
    ge.advantages.push_back(advantages(r, clip));
    ge.rewards.push_back(std::move(r));
  };
  add_view(c, 0);
  for (std::size_t k = 0; k < augmented.size(); ++k) add_view(augmented[k], k + 1);
  return ge;
}

struct MvObjectiveOptions {
  ClipConfig clip;
  KLConfig kl;
  bool normalize_views = false;  // divide the augmented sum by K
};

inline ObjectiveResult mv_objective(const VelocityField& field, std::span<const double> theta,
                                    const OldPolicySnapshot& snapshot, std::span<const double> ref,
                                    std::span<const Trajectory> trajectories, const GroupEvaluation& geval,
                                    const Condition& c, std::span<const Condition> augmented,
                                    const NoiseSchedule& s, const MvObjectiveOptions& opt) {
  if (geval.views() != augmented.size() + 1)
    throw InvalidInput("mv_objective: group evaluation has " + std::to_string(geval.views()) + " views, expected " +
                       std::to_string(augmented.size() + 1));
  std::vector<ConditionEmbedding> embeddings;
  embeddings.reserve(augmented.size() + 1);
  embeddings.push_back(embed_condition(c));
  for (const auto& ck : augmented) embeddings.push_back(embed_condition(ck));
  std::vector<ViewSpec> views;
  for (std::size_t v = 0; v < embeddings.size(); ++v) views.push_back({&embeddings[v], geval.advantages[v]});
  const double scale =
      opt.normalize_views && !augmented.empty() ? 1.0 / static_cast<double>(augmented.size()) : 1.0;
  return grpo_objective(field, theta, snapshot, ref, trajectories, views, s, ObjectiveOptions{opt.clip, opt.kl, scale});
}

// |log p(x'|x, c) - log p(x'|x, c_k)|. With a shared variance the normalizers cancel:
// |(|x' - mu_c|^2 - |x' - mu_k|^2)| / (2v).
inline double probability_drift(const VelocityField& field, std::span<const double> theta, const TransitionRecord& rec,
                                const ConditionEmbedding& e_c, const ConditionEmbedding& e_k,
                                const NoiseSchedule& s) {
  const auto gc = transition_mean(field, theta, rec.x_t, rec.t, rec.h, e_c, s);
  const auto gk = transition_mean(field, theta, rec.x_t, rec.t, rec.h, e_k, s);
  if (!(gc.variance > 0.0)) throw InvalidInput("probability_drift: record has zero variance");
  double sc = 0.0, sk = 0.0;
  for (std::size_t i = 0; i < rec.x_next.size(); ++i) {
    sc += (rec.x_next[i] - gc.mean[i]) * (rec.x_next[i] - gc.mean[i]);
    sk += (rec.x_next[i] - gk.mean[i]) * (rec.x_next[i] - gk.mean[i]);
  }
  return std::abs(sc - sk) / (2.0 * gc.variance);
}

// ---------------------------------------------------------------------------
// Drift analysis

enum class EnhancerKind { Posterior, Prior, Identity, Random, Remote };

inline const char* to_string(EnhancerKind k) {
  switch (k) {
    case EnhancerKind::Posterior: return "posterior";
    case EnhancerKind::Prior: return "prior";
    case EnhancerKind::Identity: return "identity";
    case EnhancerKind::Random: return "random";
    case EnhancerKind::Remote: return "remote";
  }
  return "?";
}

inline EnhancerKind parse_enhancer_kind(const std::string& name) {
  if (name == "posterior") return EnhancerKind::Posterior;
  if (name == "prior") return EnhancerKind::Prior;
  if (name == "identity") return EnhancerKind::Identity;
  if (name == "random") return EnhancerKind::Random;
  if (name == "remote") return EnhancerKind::Remote;
  throw ValidationError("unknown enhancer '" + name + "' (expected posterior, prior, identity, random, remote)");
}

// Produces K augmented conditions for an anchor and its samples.
using EnhanceFn = std::function<AugmentedConditionSet(const Condition&, std::span<const Vec>, std::size_t, Rng&)>;

// Synthetic enhancer for a kind (remote is wired by the caller).
inline EnhanceFn make_enhancer(EnhancerKind kind, const EnhancerConfig& cfg, const ToyDataSpec& spec,
                               std::shared_ptr<EnhancerMemory> memory) {
  switch (kind) {
    case EnhancerKind::Posterior:
      return [cfg](const Condition& c, std::span<const Vec> xs, std::size_t k, Rng& rng) {
        return enhance_posterior(c, xs, k, cfg, rng);
      };
    case EnhancerKind::Prior:
      if (!memory) memory = std::make_shared<EnhancerMemory>();
      return [cfg, spec, memory](const Condition& c, std::span<const Vec>, std::size_t k, Rng& rng) {
        return enhance_prior(c, k, cfg, spec, *memory, rng);
      };
    case EnhancerKind::Identity:
      return [](const Condition& c, std::span<const Vec>, std::size_t k, Rng&) { return enhance_identity(c, k); };
    case EnhancerKind::Random:
      return [spec](const Condition& c, std::span<const Vec>, std::size_t k, Rng& rng) {
        return enhance_random(c, k, spec, rng);
      };
    case EnhancerKind::Remote:
      break;
  }
  throw InvalidInput("make_enhancer: remote enhancer must be constructed by the caller");
}

struct DriftSample {
  std::size_t pair_id = 0;
  std::size_t step = 0;
  double delta = 0.0;
};

struct DriftStepTable {
  std::size_t step = 0;
  Vec deltas;
  Vec bin_centers;
  std::vector<std::size_t> counts;
  double median = 0.0;
  double p90 = 0.0;
};

struct DriftReport {
  std::vector<DriftStepTable> steps;
  double bin_width = 0.0;
};

inline double quantile(Vec v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

struct DriftConfig {
  std::size_t n_pairs = 500;
  std::size_t group_size = 8;
  std::size_t bins = 20;
  double bin_max = 0.0;  // <= 0: use the largest observed drift
  std::uint64_t seed = 42;
};

// Samples n_pairs (anchor, augmented) pairs, each tied to the sample it was derived from,
// and measures drift on that sample's stored transitions at every SDE step.
inline DriftReport drift_report(const VelocityField& field, std::span<const double> theta, const ToyDataSpec& spec,
                                const TimeGrid& grid, const NoiseSchedule& schedule, const EnhanceFn& enhance,
                                const DriftConfig& cfg) {
  if (cfg.n_pairs == 0) throw ValidationError("drift pairs must be positive");
  if (cfg.bins == 0) throw ValidationError("drift bins must be positive");
  if (grid.sde_steps().empty()) throw ValidationError("drift analysis needs at least one SDE step");
  DriftReport report;
  for (std::size_t k : grid.sde_steps()) report.steps.push_back({k, {}, {}, {}, 0.0, 0.0});

  std::size_t pairs = 0;
  for (std::size_t round = 0; pairs < cfg.n_pairs; ++round) {
    Rng prompt_rng(derive_seed(cfg.seed, {round, 0xd1}));
    const Condition c = sample_condition_prior(spec, prompt_rng);
    const auto group = rollout_group(field, theta, c, grid, schedule, cfg.group_size,
                                     derive_seed(cfg.seed, {round, 0xd2}), true);
    Rng enh_rng(derive_seed(cfg.seed, {round, 0xd3}));
    const auto views = enhance(c, group.samples, cfg.group_size, enh_rng);
    const ConditionEmbedding ec = embed_condition(c);
    for (std::size_t k = 0; k < views.size() && pairs < cfg.n_pairs; ++k, ++pairs) {
      const auto& item = views.items[k];
      const std::size_t sample =
          item.provenance.kind == ProvenanceKind::Posterior ? item.provenance.sample_index : k % group.samples.size();
      const ConditionEmbedding ek = embed_condition(item.condition);
      const auto& recs = group.trajectories[sample].records;
      for (std::size_t j = 0; j < recs.size(); ++j)
        report.steps[j].deltas.push_back(probability_drift(field, theta, recs[j], ec, ek, schedule));
    }
  }

  double hi = cfg.bin_max;
  if (!(hi > 0.0)) {
    for (const auto& st : report.steps)
      for (double d : st.deltas) hi = std::max(hi, d);
    if (!(hi > 0.0)) hi = 1.0;
  }
  report.bin_width = hi / static_cast<double>(cfg.bins);
  for (auto& st : report.steps) {
    st.counts.assign(cfg.bins, 0);
    st.bin_centers.resize(cfg.bins);
    for (std::size_t b = 0; b < cfg.bins; ++b) st.bin_centers[b] = (static_cast<double>(b) + 0.5) * report.bin_width;
    for (double d : st.deltas) {
      const auto b = static_cast<std::size_t>(std::floor(d / report.bin_width));
      ++st.counts[std::min(b, cfg.bins - 1)];
    }
    st.median = quantile(st.deltas, 0.5);
    st.p90 = quantile(st.deltas, 0.9);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training loop

struct MvTrainConfig {
  GrpoTrainConfig base;
  std::size_t condition_number_k = 8;
  EnhancerKind enhancer = EnhancerKind::Posterior;
  EnhancerConfig enhancer_cfg;
  std::size_t memory_capacity = 256;
  bool normalize_views = false;
};

struct TrainState {
  std::size_t next_iteration = 0;
  Vec params;
  Vec reference;  // KL reference (the pretrained policy)
  AdamWState optimizer;
  std::vector<std::string> memory;  // prior-enhancer memory keys, oldest first
};

struct MvTrainHooks {
  // Called after each completed iteration with the state ready for the next one.
  std::function<void(const IterationReport&, const TrainState&)> on_iteration;
  // Replaces the synthetic enhancer (e.g. the remote client).
  EnhanceFn custom_enhancer;
  // Polled between iterations; returning true stops the run.
  std::function<bool()> should_stop;
  bool record_params = false;
};

inline TrainResult train(const VelocityField& field, TrainState state, const MvTrainConfig& cfg,
                         const MvTrainHooks& hooks = {}) {
  const GrpoTrainConfig& base = cfg.base;
  base.schedule.validate();
  base.clip.validate();
  base.kl.validate();
  base.optimizer.validate();
  cfg.enhancer_cfg.validate();
  if (cfg.enhancer == EnhancerKind::Posterior && cfg.condition_number_k > base.group_size)
    throw ValidationError("condition_number_k must not exceed group_size for the posterior enhancer");
  const TimeGrid grid = base.grid();
  if (state.reference.empty()) state.reference = state.params;

  auto memory = std::make_shared<EnhancerMemory>(cfg.memory_capacity);
  for (const auto& key : state.memory) memory->insert_key(key);
  EnhanceFn enhance = hooks.custom_enhancer;
  if (!enhance && cfg.condition_number_k > 0)
    enhance = make_enhancer(cfg.enhancer, cfg.enhancer_cfg, base.toy, memory);
  const MvObjectiveOptions opt{base.clip, base.kl, cfg.normalize_views};

  TrainResult out;
  for (std::size_t it = state.next_iteration; it < base.iterations; ++it) {
    if (hooks.should_stop && hooks.should_stop()) break;
    const auto start = std::chrono::steady_clock::now();
    IterationReport rep;
    rep.iteration = it;
    try {
      const OldPolicySnapshot snapshot(state.params);

      struct Prompt {
        Condition c;
        RolloutGroup group;
        std::vector<Condition> views;
        GroupEvaluation geval;
      };
      std::vector<Prompt> prompts;
      double view_reward = 0.0;
      for (std::size_t p = 0; p < base.prompts_per_iteration; ++p) {
        Prompt pr;
        pr.c = iteration_prompt(base, it, p);
        pr.group = rollout_group(field, snapshot.params(), pr.c, grid, base.schedule, base.group_size,
                                 stream_seed(base.seed, it, p, Stream::Rollout), base.shared_init);
        rep.nfe += pr.group.nfe;
        if (cfg.condition_number_k > 0) {
          Rng enh_rng(stream_seed(base.seed, it, p, Stream::Enhancer));
          pr.views = enhance(pr.c, pr.group.samples, cfg.condition_number_k, enh_rng).conditions();
        }
        pr.geval = multiview_advantages(pr.group.samples, pr.c, pr.views, base.reward, base.clip);
        rep.anchor_mean_reward += pr.geval.view_mean[0];
        if (pr.geval.views() > 1)
          view_reward += std::accumulate(pr.geval.view_mean.begin() + 1, pr.geval.view_mean.end(), 0.0) /
                         static_cast<double>(pr.geval.views() - 1);
        else
          view_reward += pr.geval.view_mean[0];
        prompts.push_back(std::move(pr));
      }
      rep.anchor_mean_reward /= static_cast<double>(prompts.size());
      rep.view_mean_reward = view_reward / static_cast<double>(prompts.size());

      RatioStats stats;
      for (std::size_t u = 0; u < base.updates_per_iteration; ++u) {
        Vec grad(state.params.size(), 0.0);
        double loss = 0.0;
        for (const auto& pr : prompts) {
          auto obj = mv_objective(field, state.params, snapshot, state.reference, pr.group.trajectories, pr.geval,
                                  pr.c, pr.views, base.schedule, opt);
          loss += obj.loss / prompts.size();
          for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += obj.grad[j] / prompts.size();
          stats.merge(obj.ratios);
          rep.train_evals += obj.velocity_evals;
        }
        if (u == 0) rep.loss = loss;
        optimizer_step(state.optimizer, state.params, grad, base.optimizer);
      }
      rep.ratio_min = stats.min;
      rep.ratio_mean = stats.mean();
      rep.ratio_max = stats.max;
      rep.clip_fraction = stats.clip_fraction();
    } catch (const Error& e) {
      rethrow_with_context(e, "iteration " + std::to_string(it));
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.next_iteration = it + 1;
    state.memory.assign(memory->entries().begin(), memory->entries().end());
    out.reports.push_back(rep);
    if (hooks.record_params) out.param_trajectory.push_back(state.params);
    if (hooks.on_iteration) hooks.on_iteration(rep, state);
  }
  out.params = state.params;
  out.optimizer = state.optimizer;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::vector<double> per_condition;
  double mean_reward = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
};

// Mean anchor reward of fresh ODE samples on held-out conditions.
inline EvalReport evaluate(const VelocityField& field, std::span<const double> theta, const ToyDataSpec& spec,
                           const RewardConfig& reward_cfg, const TimeGrid& grid, std::size_t n_conditions,
                           std::size_t n_samples, std::uint64_t seed) {
  if (n_conditions == 0) throw ValidationError("eval conditions must be positive");
  if (n_samples == 0) throw ValidationError("eval samples must be positive");
  EvalReport rep;
  rep.seed = seed;
  for (std::size_t i = 0; i < n_conditions; ++i) {
    Rng rng(derive_seed(seed, {0xe7a1, i}));
    const Condition c = sample_condition_prior(spec, rng);
    const ConditionEmbedding e = embed_condition(c);
    double sum = 0.0;
    for (std::size_t j = 0; j < n_samples; ++j) {
      Vec x(spec.dim);
      for (double& v : x) v = rng.normal();
      sum += reward(ode_sample(field, theta, e, grid, std::move(x)), c, reward_cfg);
    }
    rep.per_condition.push_back(sum / static_cast<double>(n_samples));
    rep.samples += n_samples;
  }
  rep.mean_reward =
      std::accumulate(rep.per_condition.begin(), rep.per_condition.end(), 0.0) / static_cast<double>(n_conditions);
  return rep;
}

}  // namespace mvgrpo
