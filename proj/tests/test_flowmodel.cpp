#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <cstring>
#include <unistd.h>

#include "fd.hpp"
#include "mvgrpo/flowmodel.hpp"
#include "mvgrpo/sampler.hpp"

using namespace mvgrpo;
namespace ad = mvgrpo::ad;

namespace {

// 178 parameters.
VelocityFieldConfig tiny_config() {
  VelocityFieldConfig cfg;
  cfg.data_dim = 2;
  cfg.cond_dim = 4;
  cfg.time_features = 4;
  cfg.hidden = {8, 8};
  return cfg;
}

ToyDataSpec tiny_spec() {
  ToyDataSpec spec;
  spec.dim = 2;
  spec.subject_slots = 1;
  return spec;
}

Vec random_params(const VelocityField& f, Rng& rng, double scale = 0.5) {
  Vec p(f.parameter_count());
  for (double& v : p) v = rng.uniform(-scale, scale);
  return p;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mvgrpo_flow_" + name + "_" + std::to_string(::getpid()));
}

}  // namespace

TEST(Velocity, ParameterCounts) {
  EXPECT_EQ(parameter_count(tiny_config()), 178u);
  EXPECT_EQ(parameter_count(VelocityFieldConfig{}), 6278u);
  const auto shapes = layer_shapes(tiny_config());
  ASSERT_EQ(shapes.size(), 3u);
  EXPECT_EQ(shapes[0].in, 10u);
  EXPECT_EQ(shapes[2].out, 2u);
}

TEST(Velocity, ZeroParamsGiveZeroOutput) {
  const VelocityField f(VelocityFieldConfig{});
  const auto p = f.zeros();
  const Vec v = f(p.values, Vec{0.3, -1, 2, 0, 1, 1}, 0.4, Vec(12, 0.5));
  EXPECT_EQ(v, Vec(6, 0.0));
}

TEST(Velocity, Deterministic) {
  const VelocityField f(VelocityFieldConfig{});
  const auto p = f.init(3);
  const Vec x = {0.1, 0.2, 0.3, -0.4, 0.5, 0.6};
  const Vec e(12, 1.0);
  EXPECT_EQ(f(p.values, x, 0.7, e), f(p.values, x, 0.7, e));
}

TEST(Velocity, InputErrors) {
  const VelocityField f(tiny_config());
  const Vec p(f.parameter_count(), 0.0);
  const Vec e(4, 0.0);
  EXPECT_THROW(f(p, Vec{std::nan(""), 0.0}, 0.5, e), InvalidInput);
  EXPECT_THROW(f(p, Vec{0.0, 0.0}, 1.5, e), InvalidInput);
  EXPECT_THROW(f(p, Vec{0.0}, 0.5, e), InvalidInput);
  EXPECT_THROW(f(p, Vec{0.0, 0.0}, 0.5, Vec(3, 0.0)), InvalidInput);
  EXPECT_THROW(f(Vec(5, 0.0), Vec{0.0, 0.0}, 0.5, e), InvalidInput);
}

TEST(Velocity, WidthValidation) {
  auto cfg = tiny_config();
  cfg.hidden = {8, 0};
  EXPECT_THROW(VelocityField{cfg}, ValidationError);
}

TEST(Velocity, VjpMatchesFiniteDifferences) {
  for (auto act : {Activation::Silu, Activation::Tanh}) {
    auto cfg = tiny_config();
    cfg.activation = act;
    const VelocityField f(cfg);
    Rng rng(11);
    double worst = 0.0;
    for (int probe = 0; probe < 50; ++probe) {
      const Vec theta = random_params(f, rng);
      const Vec x = {rng.normal(), rng.normal()};
      const Vec e = {1.0, rng.uniform(-3, 3), 0.0, 0.0};
      const double t = rng.uniform();
      const Vec g = {rng.normal(), rng.normal()};
      auto scalar = [&](std::span<const double> th) {
        const Vec v = f(th, x, t, e);
        return g[0] * v[0] + g[1] * v[1];
      };
      VelocityField::Cache cache;
      f.forward(theta, x, t, e, cache);
      Vec grad(theta.size(), 0.0);
      const Vec gx = f.backward(theta, cache, g, grad);
      const std::size_t j = rng.index(theta.size());
      worst = std::max(worst, relative_error(grad[j], central_difference(scalar, theta, j)));
      // Input gradient.
      auto in_scalar = [&](std::span<const double> xx) {
        const Vec v = f(theta, xx, t, e);
        return g[0] * v[0] + g[1] * v[1];
      };
      const std::size_t a = rng.index(2);
      worst = std::max(worst, relative_error(gx[a], central_difference(in_scalar, x, a)));
    }
    EXPECT_LT(worst, 1e-5);
  }
}

TEST(Velocity, LocalLipschitzInParams) {
  const VelocityField f(tiny_config());
  Rng rng(12);
  const Vec theta = random_params(f, rng);
  const Vec x = {0.3, -0.2};
  const Vec e = {1.0, 0.5, 1.0, -1.0};
  // Local constant from the Jacobian norm at theta, with a 2x margin for curvature.
  VelocityField::Cache cache;
  f.forward(theta, x, 0.5, e, cache);
  double lip = 0.0;
  for (std::size_t a = 0; a < 2; ++a) {
    Vec g(2, 0.0);
    g[a] = 1.0;
    Vec grad(theta.size(), 0.0);
    f.backward(theta, cache, g, grad);
    lip += l2_norm(grad) * l2_norm(grad);
  }
  lip = std::sqrt(lip);
  const Vec v0 = f(theta, x, 0.5, e);
  for (int trial = 0; trial < 20; ++trial) {
    Vec d(theta.size());
    for (double& v : d) v = rng.normal(0.0, 1e-4);
    Vec th = theta;
    for (std::size_t i = 0; i < th.size(); ++i) th[i] += d[i];
    const Vec v1 = f(th, x, 0.5, e);
    const double change = std::hypot(v1[0] - v0[0], v1[1] - v0[1]);
    EXPECT_LE(change, 2.0 * lip * l2_norm(d));
  }
}

TEST(Velocity, FiniteOverTimeGrid) {
  const VelocityField f(VelocityFieldConfig{});
  const auto p = f.init(4);
  const Vec x = {0.1, 0.2, 0.3, -0.4, 0.5, 0.6};
  const Vec e(12, 1.0);
  for (int i = 0; i <= 1000; ++i)
    for (double v : f(p.values, x, i / 1000.0, e)) ASSERT_TRUE(std::isfinite(v));
}

TEST(Velocity, NodeMatchesPlainEvaluation) {
  const VelocityField f(tiny_config());
  Rng rng(13);
  const Vec theta = random_params(f, rng);
  const Vec x = {0.4, -0.1};
  const Vec e = {1.0, 0.2, 0.0, 0.0};
  ad::Tape tape;
  const auto th = tape.leaf(theta);
  const auto v = velocity_node(tape, f, th, x, 0.3, e);
  const Vec plain = f(theta, x, 0.3, e);
  EXPECT_TRUE(std::equal(plain.begin(), plain.end(), v.value().begin()));
}

TEST(ValueAndGrad, Quadratic) {
  const Vec theta = {0.5, -1.5, 2.0};
  const auto vg = ad::value_and_grad(theta, [](ad::Tape&, const ad::Var& p) { return 0.5 * ad::dot(p, p); });
  EXPECT_EQ(vg.grad, theta);
  EXPECT_DOUBLE_EQ(vg.value, 0.5 * (0.25 + 2.25 + 4.0));
}

TEST(ValueAndGrad, ConstantHasZeroGradient) {
  const auto vg = ad::value_and_grad(Vec{1.0, 2.0}, [](ad::Tape& t, const ad::Var&) { return t.constant(3.0); });
  EXPECT_EQ(vg.grad, (Vec{0.0, 0.0}));
  EXPECT_EQ(vg.value, 3.0);
}

TEST(FlowMatching, GradientMatchesFiniteDifferences) {
  const VelocityField f(tiny_config());
  const auto spec = tiny_spec();
  Rng rng(21);
  std::vector<FmItem> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(draw_fm_item(sample_condition_prior(spec, rng), spec, rng));
  double worst = 0.0;
  for (int probe = 0; probe < 50; ++probe) {
    const Vec theta = random_params(f, rng);
    const auto lg = fm_loss_and_grad(f, theta, batch);
    const std::size_t j = rng.index(theta.size());
    auto loss = [&](std::span<const double> th) { return fm_loss_and_grad(f, th, batch).loss; };
    worst = std::max(worst, relative_error(lg.grad[j], central_difference(loss, theta, j)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(FlowMatching, LossNonNegativeAndEmptyBatch) {
  const VelocityField f(tiny_config());
  const auto spec = tiny_spec();
  Rng rng(22);
  for (int i = 0; i < 20; ++i) {
    std::vector<FmItem> batch = {draw_fm_item(sample_condition_prior(spec, rng), spec, rng)};
    EXPECT_GE(fm_loss_and_grad(f, random_params(f, rng), batch).loss, 0.0);
  }
  EXPECT_THROW(fm_loss_and_grad(f, f.zeros().values, std::span<const FmItem>{}), InvalidInput);
}

TEST(FlowMatching, InterpolantConvention) {
  ToyDataSpec spec;
  spec.subject_noise = 0.0;
  Rng a(5), b(5);
  Rng r0(1);
  const auto c = sample_condition_prior(spec, r0);
  const auto item = draw_fm_item(c, spec, a);
  // Replay the draw order: data, noise, time.
  const Vec x0 = sample_data(c, spec, b);
  Vec x1(spec.dim);
  for (double& v : x1) v = b.normal();
  const double t = b.uniform();
  EXPECT_EQ(item.t, t);
  for (std::size_t i = 0; i < spec.dim; ++i) {
    EXPECT_DOUBLE_EQ(item.x_t[i], (1 - t) * x0[i] + t * x1[i]);
    EXPECT_DOUBLE_EQ(item.target[i], x1[i] - x0[i]);
  }
}

TEST(Pretrain, LossHalvesWithin2000Steps) {
  const VelocityField f(VelocityFieldConfig{});
  PretrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch_size = 64;
  const auto res = pretrain(f, ToyDataSpec{}, cfg);
  EXPECT_LE(res.final_loss, 0.5 * res.initial_loss) << res.initial_loss << " -> " << res.final_loss;
}

TEST(Pretrain, DeterministicDigest) {
  const VelocityField f(tiny_config());
  PretrainConfig cfg;
  cfg.steps = 30;
  cfg.batch_size = 16;
  const auto spec = tiny_spec();
  const auto a = pretrain(f, spec, cfg);
  const auto b = pretrain(f, spec, cfg);
  const auto pa = temp_path("a.ckpt"), pb = temp_path("b.ckpt");
  EXPECT_EQ(write_checkpoint(pa, f.config(), a.params), write_checkpoint(pb, f.config(), b.params));
  cfg.seed = 43;
  const auto c = pretrain(f, spec, cfg);
  EXPECT_NE(digest_hex(a.params.values), digest_hex(c.params.values));
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST(Checkpoint, RoundTrip) {
  const VelocityField f(tiny_config());
  const auto p = f.init(9);
  const auto path = temp_path("rt.ckpt");
  const std::string digest = write_checkpoint(path, f.config(), p);
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.config, f.config());
  EXPECT_EQ(ck.params.values, p.values);
  EXPECT_EQ(ck.digest, digest);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsReported) {
  const VelocityField f(tiny_config());
  const std::string good = encode_checkpoint(f.config(), f.init(1));
  EXPECT_NO_THROW(decode_checkpoint(good));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), ParseError);
  std::string bad_version = good;
  bad_version[8] = 9;
  try {
    decode_checkpoint(bad_version);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), ParseError);
  EXPECT_THROW(decode_checkpoint(good + "x"), ParseError);
  std::string nan_payload = good;
  const double nan = std::nan("");
  std::memcpy(nan_payload.data() + nan_payload.size() - 8, &nan, 8);
  EXPECT_THROW(decode_checkpoint(nan_payload), ParseError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    read_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/model.ckpt"), std::string::npos);
  }
}

TEST(Checkpoint, UnwritablePathIsIoError) {
  const VelocityField f(tiny_config());
  EXPECT_THROW(write_checkpoint("/nonexistent/dir/model.ckpt", f.config(), f.init(1)), IoError);
}

// Slow: full default pretraining, shared by the model-quality checks below.
class Pretrained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    field_ = new VelocityField(VelocityFieldConfig{});
    params_ = new Vec(pretrain(*field_, ToyDataSpec{}, PretrainConfig{}).params.values);
  }
  static void TearDownTestSuite() {
    delete field_;
    delete params_;
  }
  static VelocityField* field_;
  static Vec* params_;
};
VelocityField* Pretrained::field_ = nullptr;
Vec* Pretrained::params_ = nullptr;

TEST_F(Pretrained, OdeSubjectMeansMatchCondition) {
  const ToyDataSpec spec;
  const TimeGrid grid(16, 3.0, {});
  Rng rng(31);
  for (const Vec& subjects : {Vec{0.5, -1.0}, Vec{-1.5, 1.2}, Vec{1.0, 0.0}}) {
    Condition c;
    c.slots.assign(spec.dim, Slot{});
    c.slots[0] = {true, subjects[0]};
    c.slots[1] = {true, subjects[1]};
    const auto e = embed_condition(c);
    const int n = 5000;
    Vec mean(2, 0.0);
    for (int i = 0; i < n; ++i) {
      Vec x(spec.dim);
      for (double& v : x) v = rng.normal();
      const Vec s = ode_sample(*field_, *params_, e, grid, std::move(x));
      mean[0] += s[0] / n;
      mean[1] += s[1] / n;
    }
    EXPECT_NEAR(mean[0], subjects[0], 0.1);
    EXPECT_NEAR(mean[1], subjects[1], 0.1);
  }
}

TEST_F(Pretrained, RewardBeatsUntrained) {
  const ToyDataSpec spec;
  const auto cfg = RewardConfig::defaults(spec);
  const TimeGrid grid(16, 3.0, {});
  const Vec untrained = field_->init(derive_seed(42, {0x1417})).values;
  auto mean_reward = [&](const Vec& theta) {
    Rng rng(32);
    double sum = 0.0;
    const int n = 400;
    for (int i = 0; i < n; ++i) {
      const auto c = sample_condition_prior(spec, rng);
      Vec x(spec.dim);
      for (double& v : x) v = rng.normal();
      sum += reward(ode_sample(*field_, theta, embed_condition(c), grid, std::move(x)), c, cfg);
    }
    return sum / n;
  };
  EXPECT_GT(mean_reward(*params_), mean_reward(untrained) + 0.1);
}
