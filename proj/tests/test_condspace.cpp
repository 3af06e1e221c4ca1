#include <gtest/gtest.h>

#include <cmath>

#include "mvgrpo/condspace.hpp"

using namespace mvgrpo;

namespace {

Condition make(std::vector<Slot> slots, std::size_t subjects = 1) {
  Condition c;
  c.slots = std::move(slots);
  c.subject_slots = subjects;
  return c;
}

RewardConfig uniform_reward(std::size_t a, double tau = 0.25) {
  RewardConfig r;
  r.widths.assign(a, tau);
  r.weights.assign(a, 1.0);
  return r;
}

}  // namespace

TEST(Embed, TwoSlots) {
  const auto e = embed_condition(make({{true, 1.5}, {false, 0.0}}));
  EXPECT_EQ(e.vec, (Vec{1, 1.5, 0, 0}));
}

TEST(Embed, ThreeSlotsWithZeroValue) {
  const auto e = embed_condition(make({{true, 0.0}, {true, -2.0}, {false, 9.0}}, 2));
  EXPECT_EQ(e.vec, (Vec{1, 0, 1, -2, 0, 0}));
}

TEST(Embed, AllAbsentIsInvalid) {
  EXPECT_THROW(embed_condition(make({{false, 0.0}, {false, 0.0}})), InvalidInput);
}

TEST(Embed, StyleOnlyIsInvalid) {
  EXPECT_THROW(embed_condition(make({{false, 0.0}, {true, 1.0}})), InvalidInput);
}

TEST(Embed, OutOfRangeValueIsInvalid) {
  EXPECT_THROW(embed_condition(make({{true, 3.5}})), InvalidInput);
  EXPECT_NO_THROW(embed_condition(make({{true, -3.0}})));
}

TEST(Embed, ZeroWhereMaskIsZero) {
  ToyDataSpec spec;
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const auto c = sample_condition_prior(spec, rng);
    const auto e = embed_condition(c);
    ASSERT_EQ(e.vec.size(), 2 * c.size());
    for (std::size_t a = 0; a < c.size(); ++a)
      if (!c.slots[a].present) {
        EXPECT_EQ(e.vec[2 * a], 0.0);
        EXPECT_EQ(e.vec[2 * a + 1], 0.0);
      }
  }
}

TEST(Prior, Deterministic) {
  ToyDataSpec spec;
  Rng a(123), b(123);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_condition_prior(spec, a), sample_condition_prior(spec, b));
}

TEST(Prior, PresenceRates) {
  ToyDataSpec spec;
  Rng rng(2024);
  const int n = 10000;
  std::vector<int> present(spec.dim, 0);
  for (int i = 0; i < n; ++i) {
    const auto c = sample_condition_prior(spec, rng);
    ASSERT_TRUE(is_valid(c));
    for (std::size_t a = 0; a < spec.dim; ++a) present[a] += c.slots[a].present;
    for (std::size_t a = 0; a < spec.subject_slots; ++a) {
      EXPECT_GE(c.slots[a].value, -2.0);
      EXPECT_LE(c.slots[a].value, 2.0);
    }
  }
  for (std::size_t a = 0; a < spec.subject_slots; ++a) EXPECT_EQ(present[a], n);
  for (std::size_t a = spec.subject_slots; a < spec.dim; ++a) EXPECT_NEAR(present[a] / double(n), 0.25, 0.02);
}

TEST(Data, ZeroSubjectNoiseIsExact) {
  ToyDataSpec spec;
  spec.subject_noise = 0.0;
  Rng rng(5);
  const auto c = sample_condition_prior(spec, rng);
  for (int i = 0; i < 10; ++i) {
    const auto x = sample_data(c, spec, rng);
    for (std::size_t a = 0; a < spec.subject_slots; ++a) EXPECT_EQ(x[a], c.slots[a].value);
  }
}

TEST(Data, Reproducible) {
  ToyDataSpec spec;
  Rng r0(9);
  const auto c = sample_condition_prior(spec, r0);
  Rng a(11), b(11);
  EXPECT_EQ(sample_data(c, spec, a), sample_data(c, spec, b));
}

TEST(Data, PresentMeansWithinThreeSigma) {
  ToyDataSpec spec;
  auto c = make({{true, 1.2}, {true, -0.7}, {true, 0.4}, {false, 0}, {true, -1.1}, {false, 0}}, 2);
  Rng rng(77);
  const int n = 10000;
  Vec sum(spec.dim, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto x = sample_data(c, spec, rng);
    for (std::size_t a = 0; a < spec.dim; ++a) sum[a] += x[a];
  }
  for (std::size_t a = 0; a < spec.dim; ++a) {
    if (!c.slots[a].present) continue;
    const double sd = a < 2 ? spec.subject_noise : spec.present_style_noise;
    EXPECT_NEAR(sum[a] / n, c.slots[a].value, 3.0 * sd / std::sqrt(double(n))) << "dim " << a;
  }
}

TEST(Data, WidthMismatch) {
  ToyDataSpec spec;
  Rng rng(1);
  EXPECT_THROW(sample_data(make({{true, 0.0}}), spec, rng), InvalidInput);
}

TEST(Features, IdentityAndClamp) {
  const Vec x = {0.5, -1.0, 7.0, -9.0};
  EXPECT_EQ(extract_features(x, 4), (Vec{0.5, -1.0, 3.0, -3.0}));
  EXPECT_THROW(extract_features(x, 6), InvalidInput);
}

TEST(Reward, MaximumIsOne) {
  const auto c = make({{true, 0.3}, {false, 0.0}, {true, -1.0}});
  EXPECT_DOUBLE_EQ(reward(Vec{0.3, 2.0, -1.0}, c, uniform_reward(3)), 1.0);
}

TEST(Reward, OneWidthAwayIsInverseE) {
  const double tau = 0.25;
  const auto c = make({{true, 1.0}, {false, 0.0}});
  // |x - v|^2 = tau
  EXPECT_NEAR(reward(Vec{1.0 + std::sqrt(tau), 0.0}, c, uniform_reward(2, tau)), 0.36787944117144233, 1e-15);
}

TEST(Reward, WeightsRenormalizeOverPresentSlots) {
  RewardConfig cfg = uniform_reward(3);
  cfg.weights = {2.0, 5.0, 1.0};
  const auto c = make({{true, 0.0}, {false, 0.0}, {true, 0.0}});
  const Vec x = {0.5, 0.0, -0.25};
  const double expect = (2.0 * std::exp(-0.25 / 0.25) + 1.0 * std::exp(-0.0625 / 0.25)) / 3.0;
  EXPECT_NEAR(reward(x, c, cfg), expect, 1e-15);
}

TEST(Reward, InvariantToAbsentDims) {
  ToyDataSpec spec;
  Rng rng(3);
  const auto cfg = RewardConfig::defaults(spec);
  for (int i = 0; i < 100; ++i) {
    const auto c = sample_condition_prior(spec, rng);
    auto x = sample_data(c, spec, rng);
    const double r0 = reward(x, c, cfg);
    for (std::size_t a = 0; a < c.size(); ++a)
      if (!c.slots[a].present) x[a] += rng.normal(0.0, 5.0);
    EXPECT_EQ(reward(x, c, cfg), r0);
  }
}

TEST(Reward, MaximizedAtSlotValue) {
  ToyDataSpec spec;
  Rng rng(4);
  const auto cfg = RewardConfig::defaults(spec);
  for (int i = 0; i < 20; ++i) {
    const auto c = sample_condition_prior(spec, rng);
    Vec x = sample_data(c, spec, rng);
    for (std::size_t a = 0; a < c.size(); ++a) {
      if (!c.slots[a].present) continue;
      double best_x = 0.0, best_r = -1.0;
      for (int g = -3000; g <= 3000; ++g) {
        x[a] = g * 1e-3;
        const double r = reward(x, c, cfg);
        if (r > best_r) best_r = r, best_x = x[a];
      }
      EXPECT_NEAR(best_x, c.slots[a].value, 1e-3);
      x[a] = c.slots[a].value;
    }
  }
}

TEST(Reward, InRange) {
  ToyDataSpec spec;
  Rng rng(6);
  const auto cfg = RewardConfig::defaults(spec);
  for (int i = 0; i < 500; ++i) {
    const auto c = sample_condition_prior(spec, rng);
    Vec x(spec.dim);
    for (double& v : x) v = rng.normal(0.0, 3.0);
    const double r = reward(x, c, cfg);
    EXPECT_GT(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
}

TEST(Reward, Errors) {
  const auto cfg = uniform_reward(2);
  EXPECT_THROW(reward(Vec{0, 0}, make({{false, 0}, {false, 0}}), cfg), InvalidInput);
  EXPECT_THROW(reward(Vec{0, 0, 0}, make({{true, 0}, {false, 0}}), cfg), InvalidInput);
  RewardConfig bad = cfg;
  bad.widths = {0.25, 0.0};
  EXPECT_THROW(bad.validate(2), ValidationError);
}

TEST(Reward, RankingReversalConstructed) {
  // Same subject, the view adds a style slot that prefers the sample the anchor ranks lower.
  const auto c = make({{true, 0.0}, {false, 0.0}});
  const auto ck = make({{true, 0.0}, {true, 1.0}});
  const std::vector<Vec> xs = {{0.0, -1.0}, {0.2, 1.0}};
  const auto rev = find_ranking_reversal(xs, c, std::vector<Condition>{ck}, uniform_reward(2));
  ASSERT_TRUE(rev.has_value());
  EXPECT_EQ(rev->first, 0u);
  EXPECT_EQ(rev->second, 1u);
  EXPECT_GT(rev->anchor_gap, 0.0);
  EXPECT_LT(rev->view_gap, 0.0);
}

TEST(Reward, NoReversalUnderIdenticalView) {
  ToyDataSpec spec;
  Rng rng(8);
  const auto c = sample_condition_prior(spec, rng);
  std::vector<Vec> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(sample_data(c, spec, rng));
  EXPECT_FALSE(find_ranking_reversal(xs, c, std::vector<Condition>{c}, RewardConfig::defaults(spec)).has_value());
}

TEST(Spec, Validation) {
  ToyDataSpec spec;
  EXPECT_NO_THROW(spec.validate());
  spec.dim = 0;
  EXPECT_THROW(spec.validate(), ValidationError);
}
