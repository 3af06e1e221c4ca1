#pragma once

// Condition enhancers: produce K conditions adjacent to an anchor.
//
//  - posterior: reads attributes back from generated samples (one distinct
//    sample per output) through a randomly drawn perspective;
//  - prior: applies one add/delete/paraphrase edit to the anchor, with a
//    FIFO memory that suppresses repeats across calls;
//  - identity / random: controls for drift analysis.
//
// Every emitted condition keeps all subject slots and lies within embedding
// distance `adjacency_bound` of the anchor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mvgrpo/condspace.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/rng.hpp"

namespace mvgrpo {

enum class ProvenanceKind { Posterior, Prior, Remote, Identity, Random };

enum class EditOp { Add = 0, Delete = 1, Paraphrase = 2 };

inline const char* to_string(EditOp op) {
  switch (op) {
    case EditOp::Add: return "add";
    case EditOp::Delete: return "delete";
    case EditOp::Paraphrase: return "paraphrase";
  }
  return "?";
}

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::Identity;
  std::size_t sample_index = 0;    // posterior
  std::size_t perspective_id = 0;  // posterior
  EditOp op = EditOp::Add;         // prior
  std::size_t slot = 0;            // prior
  std::string response_digest;     // remote
  bool degenerate = false;         // output equals the anchor
};

struct AugmentedCondition {
  Condition condition;
  Provenance provenance;
};

struct AugmentedConditionSet {
  std::vector<AugmentedCondition> items;
  bool saturated = false;  // prior enhancer found fewer than K novel conditions
  std::size_t retries = 0;  // remote enhancer retry count

  std::size_t size() const { return items.size(); }
  std::vector<Condition> conditions() const {
    std::vector<Condition> out;
    for (const auto& it : items) out.push_back(it.condition);
    return out;
  }
};

struct Perspective {
  std::size_t id = 0;
  std::string instruction;
  std::vector<std::size_t> style_slots;  // indices among style slots (0 = first style slot)
};

struct PerspectiveSet {
  std::vector<Perspective> items;

  void validate() const {
    if (items.empty()) throw ValidationError("perspective set is empty");
    for (const auto& p : items)
      if (p.style_slots.empty()) throw ValidationError("perspective " + std::to_string(p.id) + " names no slot");
  }

  // Nine descriptive perspectives, each mapped to a subset of style slots.
  // Slot indices past the available style slots are dropped.
  static PerspectiveSet defaults(std::size_t style_slots) {
    struct Row {
      const char* text;
      std::vector<std::size_t> slots;
    };
    const std::vector<Row> rows = {
        {"Focus on the main subjects and key attributes.", {0, 1}},
        {"Focus on actions, motion, or interactions.", {1}},
        {"Focus on scene layout and spatial relationships.", {0, 2}},
        {"Focus on lighting conditions and shadows.", {0}},
        {"Focus on color palette and contrast.", {2}},
        {"Focus on camera angle, lens feel, and depth of field.", {3}},
        {"Focus on background/setting and environmental context.", {2, 3}},
        {"Focus on textures and material details.", {1, 3}},
        {"Focus on mood, atmosphere, and tone.", {0, 3}},
    };
    PerspectiveSet set;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Perspective p{i + 1, rows[i].text, {}};
      for (std::size_t s : rows[i].slots)
        if (s < style_slots) p.style_slots.push_back(s);
      if (p.style_slots.empty() && style_slots > 0) p.style_slots.push_back(i % style_slots);
      set.items.push_back(std::move(p));
    }
    return set;
  }
};

struct EditOpSet {
  double paraphrase_jitter = 0.15;

  void validate() const {
    if (!(paraphrase_jitter > 0.0)) throw ValidationError("paraphrase jitter must be positive");
  }

  static const char* instruction(EditOp op) {
    switch (op) {
      case EditOp::Add:
        return "ADD: Expand the prompt by enriching existing elements with descriptive details (<= 20 tokens), "
               "strictly avoiding the introduction of new subjects.";
      case EditOp::Delete:
        return "DELETE: Remove some non-essential details (<= 20 tokens) to produce a concise caption, but the "
               "output must remain a valid description of image.";
      case EditOp::Paraphrase:
        return "PARAPHRASE: Swap words/phrases for close synonyms (adjectives -> near-synonyms; nouns -> another "
               "common term for the same thing).";
    }
    return "";
  }
};

// Canonical key: mask bits and values rounded to 1e-3.
inline std::string canonical_key(const Condition& c) {
  std::string key;
  for (const auto& s : c.slots) {
    if (!s.present) {
      key += "0;";
      continue;
    }
    key += "1:" + std::to_string(std::llround(s.value * 1000.0)) + ";";
  }
  return key;
}

class EnhancerMemory {
 public:
  explicit EnhancerMemory(std::size_t capacity = 256) : capacity_(capacity) {
    if (capacity == 0) throw ValidationError("enhancer memory capacity must be positive");
  }

  bool contains(const Condition& c) const { return keys_.count(canonical_key(c)) != 0; }

  void insert(const Condition& c) { insert_key(canonical_key(c)); }

  void insert_key(const std::string& key) {
    if (keys_.count(key)) return;
    order_.push_back(key);
    keys_.insert(key);
    while (order_.size() > capacity_) {
      keys_.erase(order_.front());
      order_.pop_front();
    }
  }

  std::size_t size() const { return order_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::string>& entries() const { return order_; }

 private:
  std::size_t capacity_;
  std::deque<std::string> order_;
  std::unordered_set<std::string> keys_;
};

struct EnhancerConfig {
  double adjacency_bound = 1.5;
  PerspectiveSet perspectives = PerspectiveSet::defaults(4);
  EditOpSet edit_ops;

  void validate() const {
    if (!(adjacency_bound > 0.0)) throw ValidationError("adjacency bound must be positive");
    perspectives.validate();
    edit_ops.validate();
  }
};

namespace detail {

// Tracks the remaining squared embedding-distance budget while editing a copy of the anchor.
class AdjacencyBudget {
 public:
  explicit AdjacencyBudget(double bound) : remaining_(bound * bound * (1.0 - 1e-12)) {}

  // Moves a present slot toward target, limited by the budget.
  void shift_value(Slot& slot, double target) {
    const double limit = std::sqrt(std::max(0.0, remaining_));
    const double delta = std::clamp(target - slot.value, -limit, limit);
    const double moved = clamp_value(slot.value + delta);
    remaining_ -= (moved - slot.value) * (moved - slot.value);
    slot.value = moved;
  }

  // Turns an absent slot on with a value as close to target as the budget allows.
  bool add(Slot& slot, double target) {
    if (remaining_ < 1.0) return false;
    const double limit = std::sqrt(remaining_ - 1.0);
    slot.present = true;
    slot.value = clamp_value(std::clamp(target, -limit, limit));
    remaining_ -= 1.0 + slot.value * slot.value;
    return true;
  }

  bool can_remove(const Slot& slot) const { return 1.0 + slot.value * slot.value <= remaining_; }

 private:
  double remaining_;
};

inline std::vector<std::size_t> style_indices(const Condition& c, bool present) {
  std::vector<std::size_t> out;
  for (std::size_t a = c.subject_slots; a < c.size(); ++a)
    if (c.slots[a].present == present) out.push_back(a);
  return out;
}

}  // namespace detail

// Posterior enhancement: output k reads perspective-selected style slots from a distinct sample.
inline AugmentedConditionSet enhance_posterior(const Condition& c, std::span<const Vec> samples, std::size_t k_views,
                                               const EnhancerConfig& cfg, Rng& rng) {
  validate(c);
  if (k_views > samples.size())
    throw InvalidInput("enhance_posterior: K (" + std::to_string(k_views) + ") exceeds group size (" +
                       std::to_string(samples.size()) + ")");
  cfg.validate();
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  AugmentedConditionSet out;
  for (std::size_t k = 0; k < k_views; ++k) {
    const std::size_t sample = order[k];
    const Vec features = extract_features(samples[sample], c.size());
    const Perspective& persp = cfg.perspectives.items[rng.index(cfg.perspectives.items.size())];
    std::vector<std::size_t> slots;
    for (std::size_t s : persp.style_slots)
      if (c.subject_slots + s < c.size()) slots.push_back(c.subject_slots + s);
    std::shuffle(slots.begin(), slots.end(), rng.engine());

    Condition ck = c;
    detail::AdjacencyBudget budget(cfg.adjacency_bound);
    for (std::size_t a : slots) {
      Slot& slot = ck.slots[a];
      if (slot.present)
        budget.shift_value(slot, features[a]);
      else
        budget.add(slot, features[a]);
    }
    Provenance prov;
    prov.kind = ProvenanceKind::Posterior;
    prov.sample_index = sample;
    prov.perspective_id = persp.id;
    prov.degenerate = ck == c;
    out.items.push_back({std::move(ck), prov});
  }
  return out;
}

struct PriorDrawStats {
  std::size_t draws[3] = {0, 0, 0};  // op selections, indexed by EditOp
  std::size_t attempts = 0;
};

// Prior enhancement: each output is one edit of the anchor that is absent from memory.
inline AugmentedConditionSet enhance_prior(const Condition& c, std::size_t k_views, const EnhancerConfig& cfg,
                                           const ToyDataSpec& spec, EnhancerMemory& memory, Rng& rng,
                                           PriorDrawStats* stats = nullptr) {
  validate(c);
  if (k_views < 1) throw InvalidInput("enhance_prior: K must be >= 1");
  cfg.validate();
  AugmentedConditionSet out;
  const std::size_t max_attempts = 100 * k_views;
  for (std::size_t attempt = 0; attempt < max_attempts && out.size() < k_views; ++attempt) {
    const auto absent_style = detail::style_indices(c, false);
    const auto present_style = detail::style_indices(c, true);
    std::vector<std::size_t> present_any;
    for (std::size_t a = 0; a < c.size(); ++a)
      if (c.slots[a].present) present_any.push_back(a);

    std::vector<EditOp> ops;
    if (!absent_style.empty()) ops.push_back(EditOp::Add);
    if (!present_style.empty()) ops.push_back(EditOp::Delete);
    if (!present_any.empty()) ops.push_back(EditOp::Paraphrase);
    const EditOp op = ops[rng.index(ops.size())];
    if (stats) {
      ++stats->draws[static_cast<int>(op)];
      ++stats->attempts;
    }

    Condition ck = c;
    detail::AdjacencyBudget budget(cfg.adjacency_bound);
    std::size_t slot = 0;
    bool ok = true;
    switch (op) {
      case EditOp::Add: {
        slot = absent_style[rng.index(absent_style.size())];
        ok = budget.add(ck.slots[slot], clamp_value(sample_style_prior(spec, rng)));
        break;
      }
      case EditOp::Delete: {
        slot = present_style[rng.index(present_style.size())];
        ok = budget.can_remove(ck.slots[slot]);
        ck.slots[slot] = Slot{};
        break;
      }
      case EditOp::Paraphrase: {
        slot = present_any[rng.index(present_any.size())];
        const double target = ck.slots[slot].value + rng.normal(0.0, cfg.edit_ops.paraphrase_jitter);
        budget.shift_value(ck.slots[slot], target);
        break;
      }
    }
    if (!ok || !is_valid(ck) || memory.contains(ck)) continue;
    memory.insert(ck);
    Provenance prov;
    prov.kind = ProvenanceKind::Prior;
    prov.op = op;
    prov.slot = slot;
    prov.degenerate = ck == c;
    out.items.push_back({std::move(ck), prov});
  }
  out.saturated = out.size() < k_views;
  return out;
}

inline AugmentedConditionSet enhance_identity(const Condition& c, std::size_t k_views) {
  validate(c);
  AugmentedConditionSet out;
  for (std::size_t k = 0; k < k_views; ++k) {
    Provenance prov;
    prov.kind = ProvenanceKind::Identity;
    prov.degenerate = true;
    out.items.push_back({c, prov});
  }
  return out;
}

// Control: a fresh condition with the same subject layout and the same number of present
// style slots, with values drawn independently of the anchor. Not adjacency-bounded.
inline Condition random_condition_like(const Condition& c, const ToyDataSpec& spec, Rng& rng) {
  validate(c);
  Condition r = c;
  for (std::size_t a = 0; a < c.subject_slots; ++a)
    r.slots[a] = c.slots[a].present ? Slot{true, rng.uniform(-spec.subject_range, spec.subject_range)} : Slot{};
  std::vector<std::size_t> style(c.size() - c.subject_slots);
  std::iota(style.begin(), style.end(), c.subject_slots);
  std::shuffle(style.begin(), style.end(), rng.engine());
  const std::size_t n_present = detail::style_indices(c, true).size();
  for (std::size_t i = 0; i < style.size(); ++i)
    r.slots[style[i]] = i < n_present ? Slot{true, clamp_value(sample_style_prior(spec, rng))} : Slot{};
  return r;
}

inline AugmentedConditionSet enhance_random(const Condition& c, std::size_t k_views, const ToyDataSpec& spec,
                                            Rng& rng) {
  AugmentedConditionSet out;
  for (std::size_t k = 0; k < k_views; ++k) {
    Provenance prov;
    prov.kind = ProvenanceKind::Random;
    Condition r = random_condition_like(c, spec, rng);
    prov.degenerate = r == c;
    out.items.push_back({std::move(r), prov});
  }
  return out;
}

}  // namespace mvgrpo
