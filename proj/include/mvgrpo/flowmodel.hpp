#pragma once

// Conditional velocity field v(x, t, c): a small dense network over
// [x, sinusoidal time features, condition embedding], its flow-matching
// loss, pretraining, and the on-disk checkpoint format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mvgrpo/autodiff.hpp"
#include "mvgrpo/condspace.hpp"
#include "mvgrpo/digest.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/optim.hpp"
#include "mvgrpo/rng.hpp"

namespace mvgrpo {

enum class Activation : std::uint32_t { Silu = 0, Tanh = 1 };

struct VelocityFieldConfig {
  std::size_t data_dim = 6;
  std::size_t cond_dim = 12;  // 2A
  std::size_t time_features = 8;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::Silu;

  void validate() const {
    if (data_dim == 0) throw ValidationError("model.data_dim must be positive");
    if (time_features % 2 != 0) throw ValidationError("model.time_features must be even");
    if (hidden.empty()) throw ValidationError("model.hidden must name at least one layer");
    for (std::size_t w : hidden)
      if (w < 1) throw ValidationError("model.hidden widths must be >= 1");
  }

  std::size_t input_dim() const { return data_dim + time_features + cond_dim; }

  friend bool operator==(const VelocityFieldConfig&, const VelocityFieldConfig&) = default;
};

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t offset = 0;  // start of the row-major weight block; bias follows it

  std::size_t count() const { return in * out + out; }
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

inline std::vector<LayerShape> layer_shapes(const VelocityFieldConfig& cfg) {
  std::vector<LayerShape> shapes;
  std::size_t in = cfg.input_dim();
  std::size_t offset = 0;
  auto add = [&](std::size_t out) {
    shapes.push_back({in, out, offset});
    offset += in * out + out;
    in = out;
  };
  for (std::size_t w : cfg.hidden) add(w);
  add(cfg.data_dim);
  return shapes;
}

inline std::size_t parameter_count(const VelocityFieldConfig& cfg) {
  std::size_t p = 0;
  for (const auto& s : layer_shapes(cfg)) p += s.count();
  return p;
}

struct PolicyParams {
  Vec values;
  std::vector<LayerShape> layers;

  std::size_t size() const { return values.size(); }

  void validate() const {
    std::size_t p = 0;
    for (const auto& s : layers) p += s.count();
    if (p != values.size()) throw InvalidInput("parameter count does not match layer metadata");
    for (double v : values)
      if (!std::isfinite(v)) throw NumericFailure("non-finite parameter");
  }
};

using GradientBuffer = Vec;

// Sinusoidal features sin(pi 2^j t), cos(pi 2^j t).
inline void time_features(double t, std::size_t n, double* out) {
  for (std::size_t j = 0; j < n / 2; ++j) {
    const double w = std::numbers::pi * static_cast<double>(1u << j);
    out[2 * j] = std::sin(w * t);
    out[2 * j + 1] = std::cos(w * t);
  }
}

class VelocityField {
 public:
  explicit VelocityField(VelocityFieldConfig cfg) : cfg_(std::move(cfg)), shapes_(layer_shapes(cfg_)) {
    cfg_.validate();
  }

  const VelocityFieldConfig& config() const { return cfg_; }
  const std::vector<LayerShape>& shapes() const { return shapes_; }
  std::size_t parameter_count() const { return mvgrpo::parameter_count(cfg_); }

  PolicyParams zeros() const { return {Vec(parameter_count(), 0.0), shapes_}; }

  // Uniform fan-in init; the output layer is scaled down so an untrained field starts near zero.
  PolicyParams init(std::uint64_t seed) const {
    Rng rng(seed);
    PolicyParams p = zeros();
    for (std::size_t l = 0; l < shapes_.size(); ++l) {
      const auto& s = shapes_[l];
      const bool last = l + 1 == shapes_.size();
      const double bound = (last ? 0.1 : 1.0) / std::sqrt(static_cast<double>(s.in));
      for (std::size_t i = 0; i < s.in * s.out; ++i) p.values[s.offset + i] = rng.uniform(-bound, bound);
    }
    return p;
  }

  struct Cache {
    Vec input;
    std::vector<Vec> pre;   // pre-activation of each hidden layer
    std::vector<Vec> post;  // activation of each hidden layer
  };

  Vec operator()(std::span<const double> theta, std::span<const double> x, double t,
                 std::span<const double> e) const {
    Cache cache;
    return forward(theta, x, t, e, cache);
  }

  Vec forward(std::span<const double> theta, std::span<const double> x, double t,
              std::span<const double> e, Cache& cache) const {
    check_inputs(theta, x, t, e);
    cache.input.resize(cfg_.input_dim());
    std::copy(x.begin(), x.end(), cache.input.begin());
    time_features(t, cfg_.time_features, cache.input.data() + cfg_.data_dim);
    std::copy(e.begin(), e.end(), cache.input.begin() + cfg_.data_dim + cfg_.time_features);

    cache.pre.resize(shapes_.size() - 1);
    cache.post.resize(shapes_.size() - 1);
    const Vec* h = &cache.input;
    Vec out;
    for (std::size_t l = 0; l < shapes_.size(); ++l) {
      const auto& s = shapes_[l];
      Vec z(s.out);
      affine(theta, s, *h, z);
      if (l + 1 == shapes_.size()) {
        out = std::move(z);
        break;
      }
      cache.post[l].resize(s.out);
      for (std::size_t i = 0; i < s.out; ++i) cache.post[l][i] = activate(z[i]);
      cache.pre[l] = std::move(z);
      h = &cache.post[l];
    }
    for (double v : out)
      if (!std::isfinite(v)) throw NumericFailure("velocity produced a non-finite output");
    return out;
  }

  // Vector-Jacobian product: adds d<g, v>/dtheta into grad_theta and returns d<g, v>/dx.
  Vec backward(std::span<const double> theta, const Cache& cache, std::span<const double> g_out,
               std::span<double> grad_theta) const {
    Vec delta(g_out.begin(), g_out.end());
    for (std::size_t l = shapes_.size(); l-- > 0;) {
      const auto& s = shapes_[l];
      const Vec& in = l == 0 ? cache.input : cache.post[l - 1];
      double* gw = grad_theta.data() + s.offset;
      double* gb = gw + s.in * s.out;
      const double* w = theta.data() + s.offset;
      Vec prev(s.in, 0.0);
      for (std::size_t o = 0; o < s.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* gwr = gw + o * s.in;
        const double* wr = w + o * s.in;
        for (std::size_t i = 0; i < s.in; ++i) {
          gwr[i] += d * in[i];
          prev[i] += d * wr[i];
        }
      }
      if (l == 0) return Vec(prev.begin(), prev.begin() + static_cast<std::ptrdiff_t>(cfg_.data_dim));
      const Vec& pre = cache.pre[l - 1];
      for (std::size_t i = 0; i < s.in; ++i) prev[i] *= activate_grad(pre[i]);
      delta = std::move(prev);
    }
    return {};
  }

 private:
  void check_inputs(std::span<const double> theta, std::span<const double> x, double t,
                    std::span<const double> e) const {
    if (theta.size() != parameter_count()) throw InvalidInput("velocity: parameter count mismatch");
    if (x.size() != cfg_.data_dim) throw InvalidInput("velocity: data dimension mismatch");
    if (e.size() != cfg_.cond_dim) throw InvalidInput("velocity: embedding width mismatch");
    if (!std::isfinite(t) || t < 0.0 || t > 1.0) throw InvalidInput("velocity: t must lie in [0, 1]");
    for (double v : x)
      if (!std::isfinite(v)) throw InvalidInput("velocity: non-finite state");
    for (double v : e)
      if (!std::isfinite(v)) throw InvalidInput("velocity: non-finite embedding");
  }

  static void affine(std::span<const double> theta, const LayerShape& s, const Vec& in, Vec& out) {
    const double* w = theta.data() + s.offset;
    const double* b = w + s.in * s.out;
    for (std::size_t o = 0; o < s.out; ++o) {
      double acc = b[o];
      const double* wr = w + o * s.in;
      for (std::size_t i = 0; i < s.in; ++i) acc += wr[i] * in[i];
      out[o] = acc;
    }
  }

  double activate(double z) const {
    if (cfg_.activation == Activation::Tanh) return std::tanh(z);
    return z / (1.0 + std::exp(-z));
  }

  double activate_grad(double z) const {
    if (cfg_.activation == Activation::Tanh) {
      const double th = std::tanh(z);
      return 1.0 - th * th;
    }
    const double sig = 1.0 / (1.0 + std::exp(-z));
    return sig * (1.0 + z * (1.0 - sig));
  }

  VelocityFieldConfig cfg_;
  std::vector<LayerShape> shapes_;
};

// velocity(theta, x, t, e) recorded on a tape, differentiable in theta. x and e are constants.
inline ad::Var velocity_node(ad::Tape& tape, const VelocityField& field, const ad::Var& theta,
                             std::span<const double> x, double t, std::span<const double> e) {
  auto cache = std::make_shared<VelocityField::Cache>();
  Vec v = field.forward(theta.value(), x, t, e, *cache);
  const std::size_t p = theta.size();
  return tape.push(std::move(v), [&field, theta, cache, p](ad::Tape& tp, std::span<const double> g) {
    Vec grad(p, 0.0);
    field.backward(theta.value(), *cache, g, grad);
    tp.accumulate(theta, grad);
  }, "velocity");
}

// ---------------------------------------------------------------------------
// Flow matching

// One conditional flow-matching draw, materialized so loss evaluation is deterministic.
struct FmItem {
  Vec x_t;
  double t = 0.0;
  ConditionEmbedding embedding;
  Vec target;  // x1 - x0
};

// x_t = (1 - t) x0 + t x1 with x0 ~ data(c), x1 ~ N(0, I), t ~ U(0, 1).
inline FmItem draw_fm_item(const Condition& c, const ToyDataSpec& spec, Rng& rng) {
  FmItem item;
  const Vec x0 = sample_data(c, spec, rng);
  Vec x1(spec.dim);
  for (double& v : x1) v = rng.normal();
  item.t = rng.uniform();
  item.x_t.resize(spec.dim);
  item.target.resize(spec.dim);
  for (std::size_t a = 0; a < spec.dim; ++a) {
    item.x_t[a] = (1.0 - item.t) * x0[a] + item.t * x1[a];
    item.target[a] = x1[a] - x0[a];
  }
  item.embedding = embed_condition(c);
  return item;
}

struct LossAndGrad {
  double loss = 0.0;
  GradientBuffer grad;
};

// Mean over items and dimensions of (v - target)^2.
inline LossAndGrad fm_loss_and_grad(const VelocityField& field, std::span<const double> theta,
                                    std::span<const FmItem> batch) {
  if (batch.empty()) throw InvalidInput("fm_loss_and_grad: empty batch");
  LossAndGrad out;
  out.grad.assign(theta.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size() * field.config().data_dim);
  VelocityField::Cache cache;
  Vec g(field.config().data_dim);
  for (const FmItem& item : batch) {
    const Vec v = field.forward(theta, item.x_t, item.t, item.embedding.vec, cache);
    for (std::size_t a = 0; a < v.size(); ++a) {
      const double r = v[a] - item.target[a];
      out.loss += scale * r * r;
      g[a] = 2.0 * scale * r;
    }
    field.backward(theta, cache, g, out.grad);
  }
  return out;
}

struct PretrainConfig {
  std::uint64_t seed = 42;
  std::size_t steps = 3000;
  std::size_t batch_size = 128;
  AdamWHyper optimizer{.lr = 2e-3, .weight_decay = 0.0, .max_grad_norm = 1.0};
};

struct PretrainResult {
  PolicyParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;
};

// Flow-matching pretraining on the toy conditional data. Conditions come from the prior.
inline PretrainResult pretrain(const VelocityField& field, const ToyDataSpec& spec, const PretrainConfig& cfg) {
  spec.validate();
  cfg.optimizer.validate();
  if (cfg.batch_size == 0) throw ValidationError("pretrain.batch_size must be positive");
  PretrainResult result;
  result.params = field.init(derive_seed(cfg.seed, {0x1417}));
  AdamWState state;
  std::vector<FmItem> batch(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, {0x9a7a, step}));
    for (auto& item : batch) item = draw_fm_item(sample_condition_prior(spec, rng), spec, rng);
    auto lg = fm_loss_and_grad(field, result.params.values, batch);
    if (step == 0) result.initial_loss = lg.loss;
    result.loss_curve.push_back(lg.loss);
    adamw_step(state, result.params.values, lg.grad, cfg.optimizer);
  }
  // Trailing-window mean smooths minibatch noise.
  const std::size_t window = std::min<std::size_t>(100, result.loss_curve.size());
  double tail = 0.0;
  for (std::size_t i = result.loss_curve.size() - window; i < result.loss_curve.size(); ++i)
    tail += result.loss_curve[i];
  result.final_loss = window ? tail / static_cast<double>(window) : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers and floats little-endian):
//   8 bytes  magic "MVGRPOCK"
//   u32      format version
//   u32 x5   data_dim, cond_dim, time_features, activation, hidden layer count
//   u32 x n  hidden widths
//   u64      parameter count P
//   f64 x P  parameters

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'G', 'R', 'P', 'O', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t read(int width) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size())
      throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read(4)); }
  std::uint64_t u64() { return read(8); }
  double f64() { return std::bit_cast<double>(read(8)); }
  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw ParseError("checkpoint truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string encode_checkpoint(const VelocityFieldConfig& cfg, const PolicyParams& params) {
  if (params.size() != parameter_count(cfg)) throw InvalidInput("checkpoint: parameter count mismatch");
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.data_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.cond_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.time_features));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.activation));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.hidden.size()));
  for (std::size_t w : cfg.hidden) detail::put_u32(out, static_cast<std::uint32_t>(w));
  detail::put_u64(out, params.size());
  for (double v : params.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

struct Checkpoint {
  VelocityFieldConfig config;
  PolicyParams params;
  std::string digest;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic))
    throw ParseError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config.data_dim = r.u32();
  ck.config.cond_dim = r.u32();
  ck.config.time_features = r.u32();
  const std::uint32_t act = r.u32();
  if (act > 1) throw ParseError("checkpoint names an unknown activation");
  ck.config.activation = static_cast<Activation>(act);
  const std::uint32_t layers = r.u32();
  if (layers == 0 || layers > 64) throw ParseError("checkpoint hidden layer count out of range");
  ck.config.hidden.clear();
  for (std::uint32_t i = 0; i < layers; ++i) ck.config.hidden.push_back(r.u32());
  try {
    ck.config.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint header invalid: ") + e.what());
  }
  const std::uint64_t p = r.u64();
  if (p != parameter_count(ck.config)) throw ParseError("checkpoint parameter count disagrees with header");
  ck.params.layers = layer_shapes(ck.config);
  ck.params.values.resize(p);
  for (auto& v : ck.params.values) v = r.f64();
  if (!r.done()) throw ParseError("trailing bytes after checkpoint payload");
  for (double v : ck.params.values)
    if (!std::isfinite(v)) throw ParseError("checkpoint contains non-finite parameters");
  ck.digest = digest_hex(bytes);
  return ck;
}

// Writes atomically and returns the file digest.
inline std::string write_checkpoint(const std::filesystem::path& path, const VelocityFieldConfig& cfg,
                                    const PolicyParams& params) {
  const std::string bytes = encode_checkpoint(cfg, params);
  detail::write_file_atomic(path, bytes);
  return digest_hex(bytes);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace mvgrpo
