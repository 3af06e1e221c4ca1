#pragma once

// Synthetic condition space: masked attribute vectors stand in for prompts,
// points in R^d stand in for images, and a Gaussian-kernel reward stands in
// for a learned reward model. Slot a of a condition describes data dimension a.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvgrpo/error.hpp"
#include "mvgrpo/rng.hpp"

namespace mvgrpo {

using Vec = std::vector<double>;

inline constexpr double kValueLimit = 3.0;

struct Slot {
  bool present = false;
  double value = 0.0;

  friend bool operator==(const Slot&, const Slot&) = default;
};

// A prompt in the toy condition space. The first `subject_slots` slots are
// "subject" attributes; the rest are "style" attributes.
struct Condition {
  std::vector<Slot> slots;
  std::size_t subject_slots = 2;

  std::size_t size() const { return slots.size(); }
  bool is_subject(std::size_t a) const { return a < subject_slots; }

  std::size_t present_count() const {
    return static_cast<std::size_t>(
        std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.present; }));
  }

  friend bool operator==(const Condition&, const Condition&) = default;
};

inline bool is_valid(const Condition& c) {
  if (c.slots.empty() || c.subject_slots == 0 || c.subject_slots > c.slots.size()) return false;
  bool any_subject = false;
  for (std::size_t a = 0; a < c.slots.size(); ++a) {
    const Slot& s = c.slots[a];
    if (!s.present) continue;
    if (!std::isfinite(s.value) || s.value < -kValueLimit || s.value > kValueLimit) return false;
    if (a < c.subject_slots) any_subject = true;
  }
  return any_subject;
}

inline void validate(const Condition& c) {
  if (c.slots.empty()) throw InvalidInput("condition has no slots");
  if (c.subject_slots == 0 || c.subject_slots > c.slots.size())
    throw InvalidInput("condition subject slot count out of range");
  if (!is_valid(c))
    throw InvalidInput("condition needs a present subject slot and present values in [-3, 3]");
}

// Per slot: (mask, mask * value). Length 2A.
struct ConditionEmbedding {
  Vec vec;
};

inline ConditionEmbedding embed_condition(const Condition& c) {
  validate(c);
  ConditionEmbedding e;
  e.vec.assign(2 * c.size(), 0.0);
  for (std::size_t a = 0; a < c.size(); ++a) {
    if (!c.slots[a].present) continue;
    e.vec[2 * a] = 1.0;
    e.vec[2 * a + 1] = c.slots[a].value;
  }
  return e;
}

inline double embedding_distance(const ConditionEmbedding& a, const ConditionEmbedding& b) {
  if (a.vec.size() != b.vec.size()) throw InvalidInput("embedding width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.vec.size(); ++i) s += (a.vec[i] - b.vec[i]) * (a.vec[i] - b.vec[i]);
  return std::sqrt(s);
}

struct ToyDataSpec {
  std::size_t dim = 6;
  std::size_t subject_slots = 2;
  double subject_noise = 0.5;
  double present_style_noise = 0.1;
  double subject_range = 2.0;
  double style_presence = 0.25;
  // Each style dimension's prior: equal mixture of N(-m, s^2) and N(+m, s^2).
  double style_mode = 0.8;
  double style_spread = 0.3;

  std::size_t attributes() const { return dim; }

  void validate() const {
    if (dim == 0) throw ValidationError("toy.dim must be positive");
    if (subject_slots == 0 || subject_slots > dim)
      throw ValidationError("toy.subject_slots must be in [1, dim]");
    if (subject_noise < 0.0) throw ValidationError("toy.subject_noise must be nonnegative");
    if (present_style_noise < 0.0) throw ValidationError("toy.present_style_noise must be nonnegative");
    if (style_spread < 0.0) throw ValidationError("toy.style_spread must be nonnegative");
    if (style_presence < 0.0 || style_presence > 1.0)
      throw ValidationError("toy.style_presence must be in [0, 1]");
    if (subject_range <= 0.0 || subject_range > kValueLimit)
      throw ValidationError("toy.subject_range must be in (0, 3]");
  }
};

struct RewardConfig {
  Vec widths;   // tau_a > 0
  Vec weights;  // w_a >= 0, renormalized over present slots

  static RewardConfig defaults(const ToyDataSpec& spec) {
    RewardConfig cfg;
    cfg.widths.assign(spec.dim, 0.25);
    cfg.weights.assign(spec.dim, 1.0);
    return cfg;
  }

  void validate(std::size_t attributes) const {
    if (widths.size() != attributes || weights.size() != attributes)
      throw ValidationError("reward widths/weights must have one entry per attribute");
    for (double t : widths)
      if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("reward widths must be positive");
    for (double w : weights)
      if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("reward weights must be nonnegative");
  }
};

inline double clamp_value(double v) { return std::clamp(v, -kValueLimit, kValueLimit); }

inline double sample_style_prior(const ToyDataSpec& spec, Rng& rng) {
  const double mode = rng.bernoulli(0.5) ? spec.style_mode : -spec.style_mode;
  return rng.normal(mode, spec.style_spread);
}

inline Condition sample_condition_prior(const ToyDataSpec& spec, Rng& rng) {
  Condition c;
  c.subject_slots = spec.subject_slots;
  c.slots.resize(spec.dim);
  for (std::size_t a = 0; a < spec.dim; ++a) {
    if (a < spec.subject_slots) {
      c.slots[a] = {true, rng.uniform(-spec.subject_range, spec.subject_range)};
    } else {
      const bool present = rng.bernoulli(spec.style_presence);
      const double value = clamp_value(sample_style_prior(spec, rng));
      c.slots[a] = {present, present ? value : 0.0};
    }
  }
  return c;
}

inline Vec sample_data(const Condition& c, const ToyDataSpec& spec, Rng& rng) {
  validate(c);
  if (c.size() != spec.dim) throw InvalidInput("condition width does not match data dimension");
  Vec x(spec.dim);
  for (std::size_t a = 0; a < spec.dim; ++a) {
    const Slot& s = c.slots[a];
    if (!s.present)
      x[a] = sample_style_prior(spec, rng);
    else if (c.is_subject(a))
      x[a] = rng.normal(s.value, spec.subject_noise);
    else
      x[a] = rng.normal(s.value, spec.present_style_noise);
  }
  return x;
}

// Identity perception: data dimension a is read back as slot a, clamped.
inline Vec extract_features(std::span<const double> x, std::size_t dim) {
  if (x.size() != dim)
    throw InvalidInput("extract_features: expected " + std::to_string(dim) + " dims, got " +
                       std::to_string(x.size()));
  Vec f(x.begin(), x.end());
  for (double& v : f) v = clamp_value(v);
  return f;
}

inline double reward(std::span<const double> x, const Condition& c, const RewardConfig& cfg) {
  validate(c);
  if (x.size() != c.size()) throw InvalidInput("reward: sample width does not match condition");
  if (cfg.widths.size() != c.size() || cfg.weights.size() != c.size())
    throw InvalidInput("reward: config width does not match condition");
  double total_weight = 0.0;
  for (std::size_t a = 0; a < c.size(); ++a)
    if (c.slots[a].present) total_weight += cfg.weights[a];
  if (!(total_weight > 0.0)) throw InvalidInput("reward: present slots carry zero total weight");
  double r = 0.0;
  for (std::size_t a = 0; a < c.size(); ++a) {
    if (!c.slots[a].present) continue;
    const double diff = x[a] - c.slots[a].value;
    r += cfg.weights[a] / total_weight * std::exp(-diff * diff / cfg.widths[a]);
  }
  return r;
}

struct RankingReversal {
  std::size_t view = 0;  // index into the view list
  std::size_t first = 0;
  std::size_t second = 0;
  double anchor_gap = 0.0;  // R(x1, c) - R(x2, c) > 0
  double view_gap = 0.0;    // R(x1, ck) - R(x2, ck) < 0
};

// Brute-force search for a sample pair ranked one way under the anchor and
// the other way under some view.
inline std::optional<RankingReversal> find_ranking_reversal(std::span<const Vec> samples, const Condition& c,
                                                            std::span<const Condition> views,
                                                            const RewardConfig& cfg) {
  Vec anchor;
  for (const auto& x : samples) anchor.push_back(reward(x, c, cfg));
  for (std::size_t k = 0; k < views.size(); ++k) {
    Vec rk;
    for (const auto& x : samples) rk.push_back(reward(x, views[k], cfg));
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (std::size_t j = 0; j < samples.size(); ++j)
        if (anchor[i] > anchor[j] && rk[i] < rk[j]) return RankingReversal{k, i, j, anchor[i] - anchor[j], rk[i] - rk[j]};
  }
  return std::nullopt;
}

}  // namespace mvgrpo
