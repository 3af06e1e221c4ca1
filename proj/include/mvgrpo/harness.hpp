#pragma once

// Experiment plumbing: JSON configuration, run directories, metrics files,
// resumable train-state checkpoints and table emission.

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <concepts>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvgrpo/flowmodel.hpp"
#include "mvgrpo/grpo.hpp"
#include "mvgrpo/mvgrpo.hpp"
#include "mvgrpo/remote_enhancer.hpp"

namespace mvgrpo {

using nlohmann::json;

struct EvalSettings {
  std::size_t n_conditions = 64;
  std::size_t n_samples = 16;
  std::uint64_t seed = 99;
};

struct DriftSettings {
  std::size_t n_pairs = 500;
  std::size_t bins = 20;
  double bin_max = 0.0;
  EnhancerKind enhancer = EnhancerKind::Posterior;
};

struct RemoteSettings {
  RemoteEnhancerConfig client;
  std::string template_path = "assets/prompts/vlm_template.txt";
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "runs/default";
  std::string pretrained_checkpoint;  // empty: <output_dir>/pretrained.ckpt
  ToyDataSpec toy;
  RewardConfig reward = RewardConfig::defaults(ToyDataSpec{});
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t time_features = 8;
  Activation activation = Activation::Silu;
  PretrainConfig pretrain;
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
  std::size_t checkpoint_every = 50;
  std::size_t condition_number_k = 8;
  EnhancerKind enhancer = EnhancerKind::Posterior;
  EnhancerConfig enhancer_cfg;
  std::size_t memory_capacity = 256;
  bool normalize_views = false;
  RemoteSettings remote;
  EvalSettings eval;
  DriftSettings drift;

  VelocityFieldConfig model() const {
    VelocityFieldConfig m;
    m.data_dim = toy.dim;
    m.cond_dim = 2 * toy.dim;
    m.time_features = time_features;
    m.hidden = hidden;
    m.activation = activation;
    return m;
  }

  TimeGrid grid() const { return TimeGrid(sampling_steps, shift, sde_steps); }

  std::filesystem::path out() const { return output_dir; }
  std::filesystem::path pretrained_path() const {
    return pretrained_checkpoint.empty() ? out() / "pretrained.ckpt" : std::filesystem::path(pretrained_checkpoint);
  }

  void validate() const {
    toy.validate();
    try {
      reward.validate(toy.dim);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("reward: ") + e.what());
    }
    model().validate();
    if (output_dir.empty()) throw ValidationError("output_dir must not be empty");
    if (pretrain.steps == 0) throw ValidationError("pretrain.steps must be positive");
    if (pretrain.batch_size == 0) throw ValidationError("pretrain.batch_size must be positive");
    pretrain.optimizer.validate();
    if (sampling_steps == 0) throw ValidationError("sampling.sampling_steps must be positive");
    if (!(shift >= 1.0) || !std::isfinite(shift)) throw ValidationError("sampling.shift must be >= 1");
    for (std::size_t k : sde_steps)
      if (k >= sampling_steps) throw ValidationError("sampling.sde_steps entries must be < sampling_steps");
    if (sde_steps.empty()) throw ValidationError("sampling.sde_steps must name at least one step");
    schedule.validate();
    if (group_size < 2) throw ValidationError("grpo.group_size must be at least 2");
    if (prompts_per_iteration == 0) throw ValidationError("grpo.prompts_per_iteration must be positive");
    clip.validate();
    kl.validate();
    optimizer.validate();
    if (updates_per_iteration == 0) throw ValidationError("grpo.updates_per_iteration must be positive");
    if (checkpoint_every == 0) throw ValidationError("grpo.checkpoint_every must be positive");
    enhancer_cfg.validate();
    if (enhancer == EnhancerKind::Posterior && condition_number_k > group_size)
      throw ValidationError("mv.condition_number_k must not exceed grpo.group_size for the posterior enhancer");
    if (memory_capacity == 0) throw ValidationError("mv.memory_capacity must be positive");
    if (!(remote.client.timeout_seconds > 0.0)) throw ValidationError("remote.timeout_seconds must be positive");
    if (remote.client.max_in_flight == 0) throw ValidationError("remote.max_in_flight must be positive");
    if (eval.n_conditions == 0) throw ValidationError("eval.n_conditions must be positive");
    if (eval.n_samples == 0) throw ValidationError("eval.n_samples must be positive");
    if (drift.n_pairs == 0) throw ValidationError("drift.n_pairs must be positive");
    if (drift.bins == 0) throw ValidationError("drift.bins must be positive");
  }

  MvTrainConfig train_config(bool baseline) const {
    MvTrainConfig t;
    GrpoTrainConfig& b = t.base;
    b.seed = seed;
    b.toy = toy;
    b.reward = reward;
    b.sampling_steps = sampling_steps;
    b.shift = shift;
    b.sde_steps = sde_steps;
    b.schedule = schedule;
    b.group_size = group_size;
    b.prompts_per_iteration = prompts_per_iteration;
    b.shared_init = shared_init;
    b.clip = clip;
    b.kl = kl;
    b.optimizer = optimizer;
    b.iterations = iterations;
    b.updates_per_iteration = updates_per_iteration;
    t.condition_number_k = baseline ? 0 : condition_number_k;
    t.enhancer = enhancer;
    t.enhancer_cfg = enhancer_cfg;
    t.memory_capacity = memory_capacity;
    t.normalize_views = normalize_views;
    return t;
  }
};

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

// Reads typed fields from one JSON object, rejecting unknown keys and wrong types.
class FieldReader {
 public:
  FieldReader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ValidationError(name("") + " must be an object");
  }

  template <std::unsigned_integral T>
  void get(const char* key, T& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ValidationError(name(key) + " must be a nonnegative integer");
      out = v->get<T>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ValidationError(name(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ValidationError(name(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ValidationError(name(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, Vec& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ValidationError(name(key) + " must be an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ValidationError(name(key) + " must be an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ValidationError(name(key) + " must be an array of nonnegative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) throw ValidationError(name(key) + " must be an array of nonnegative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void get(const char* key, std::set<std::size_t>& out) {
    std::vector<std::size_t> v(out.begin(), out.end());
    if (!find(key)) return;
    get(key, v);
    out = std::set<std::size_t>(v.begin(), v.end());
    if (out.size() != v.size()) throw ValidationError(name(key) + " contains duplicates");
  }
  void get(const char* key, EnhancerKind& out) {
    std::string s;
    if (!find(key)) return;
    get(key, s);
    try {
      out = parse_enhancer_kind(s);
    } catch (const Error&) {
      throw ValidationError(name(key) + " must be one of posterior, prior, identity, random, remote");
    }
  }
  void get(const char* key, Activation& out) {
    std::string s;
    if (!find(key)) return;
    get(key, s);
    if (s == "silu") out = Activation::Silu;
    else if (s == "tanh") out = Activation::Tanh;
    else throw ValidationError(name(key) + " must be silu or tanh");
  }

  std::optional<FieldReader> section(const char* key) {
    if (const json* v = find(key)) return FieldReader(*v, name(key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ValidationError("unknown config field " + name(k.c_str()));
  }

 private:
  const json* find(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string name(const char* key) const {
    if (prefix_.empty()) return key;
    return *key ? prefix_ + "." + key : prefix_;
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> used_;
};

inline std::size_t line_of_offset(std::string_view text, std::size_t byte) {
  const std::size_t end = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::FieldReader r(j, "");
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  r.get("pretrained_checkpoint", c.pretrained_checkpoint);
  if (auto s = r.section("toy")) {
    s->get("dim", c.toy.dim);
    s->get("subject_slots", c.toy.subject_slots);
    s->get("subject_noise", c.toy.subject_noise);
    s->get("present_style_noise", c.toy.present_style_noise);
    s->get("subject_range", c.toy.subject_range);
    s->get("style_presence", c.toy.style_presence);
    s->get("style_mode", c.toy.style_mode);
    s->get("style_spread", c.toy.style_spread);
    s->finish();
  }
  c.reward = RewardConfig::defaults(c.toy);
  if (auto s = r.section("reward")) {
    double width = -1.0;
    s->get("width", width);
    if (width != -1.0) c.reward.widths.assign(c.toy.dim, width);
    s->get("widths", c.reward.widths);
    s->get("weights", c.reward.weights);
    s->finish();
  }
  if (auto s = r.section("model")) {
    s->get("hidden", c.hidden);
    s->get("time_features", c.time_features);
    s->get("activation", c.activation);
    s->finish();
  }
  if (auto s = r.section("pretrain")) {
    s->get("seed", c.pretrain.seed);
    s->get("steps", c.pretrain.steps);
    s->get("batch_size", c.pretrain.batch_size);
    s->get("lr", c.pretrain.optimizer.lr);
    s->get("weight_decay", c.pretrain.optimizer.weight_decay);
    s->get("max_grad_norm", c.pretrain.optimizer.max_grad_norm);
    s->finish();
  }
  if (auto s = r.section("sampling")) {
    s->get("sampling_steps", c.sampling_steps);
    s->get("shift", c.shift);
    s->get("sde_steps", c.sde_steps);
    s->get("eta", c.schedule.eta);
    s->get("t_min", c.schedule.t_min);
    s->get("t_max", c.schedule.t_max);
    s->finish();
  }
  if (auto s = r.section("grpo")) {
    s->get("group_size", c.group_size);
    s->get("prompts_per_iteration", c.prompts_per_iteration);
    s->get("shared_init", c.shared_init);
    s->get("clip_range", c.clip.ratio_clip);
    s->get("adv_clip_max", c.clip.adv_clip_max);
    s->get("std_guard", c.clip.std_guard);
    s->get("kl_beta", c.kl.beta);
    s->get("lr", c.optimizer.lr);
    s->get("beta1", c.optimizer.beta1);
    s->get("beta2", c.optimizer.beta2);
    s->get("eps", c.optimizer.eps);
    s->get("weight_decay", c.optimizer.weight_decay);
    s->get("max_grad_norm", c.optimizer.max_grad_norm);
    s->get("iterations", c.iterations);
    s->get("updates_per_iteration", c.updates_per_iteration);
    s->get("checkpoint_every", c.checkpoint_every);
    s->finish();
  }
  if (auto s = r.section("mv")) {
    s->get("condition_number_k", c.condition_number_k);
    s->get("enhancer", c.enhancer);
    s->get("adjacency_bound", c.enhancer_cfg.adjacency_bound);
    s->get("paraphrase_jitter", c.enhancer_cfg.edit_ops.paraphrase_jitter);
    s->get("memory_capacity", c.memory_capacity);
    s->get("normalize_views", c.normalize_views);
    s->finish();
  }
  c.enhancer_cfg.perspectives = PerspectiveSet::defaults(c.toy.dim - std::min(c.toy.dim, c.toy.subject_slots));
  if (auto s = r.section("remote")) {
    s->get("endpoint", c.remote.client.endpoint);
    s->get("model", c.remote.client.model);
    s->get("auth_env", c.remote.client.auth_env);
    s->get("template_path", c.remote.template_path);
    s->get("timeout_seconds", c.remote.client.timeout_seconds);
    s->get("max_retries", c.remote.client.max_retries);
    s->get("backoff_seconds", c.remote.client.backoff_seconds);
    s->get("max_in_flight", c.remote.client.max_in_flight);
    s->finish();
  }
  if (auto s = r.section("eval")) {
    s->get("n_conditions", c.eval.n_conditions);
    s->get("n_samples", c.eval.n_samples);
    s->get("seed", c.eval.seed);
    s->finish();
  }
  if (auto s = r.section("drift")) {
    s->get("n_pairs", c.drift.n_pairs);
    s->get("bins", c.drift.bins);
    s->get("bin_max", c.drift.bin_max);
    s->get("enhancer", c.drift.enhancer);
    s->finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline const char* to_string(Activation a) { return a == Activation::Silu ? "silu" : "tanh"; }

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["pretrained_checkpoint"] = c.pretrained_checkpoint;
  j["toy"] = {{"dim", c.toy.dim},
              {"subject_slots", c.toy.subject_slots},
              {"subject_noise", c.toy.subject_noise},
              {"present_style_noise", c.toy.present_style_noise},
              {"subject_range", c.toy.subject_range},
              {"style_presence", c.toy.style_presence},
              {"style_mode", c.toy.style_mode},
              {"style_spread", c.toy.style_spread}};
  j["reward"] = {{"widths", c.reward.widths}, {"weights", c.reward.weights}};
  j["model"] = {{"hidden", c.hidden}, {"time_features", c.time_features}, {"activation", to_string(c.activation)}};
  j["pretrain"] = {{"seed", c.pretrain.seed},
                   {"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.optimizer.lr},
                   {"weight_decay", c.pretrain.optimizer.weight_decay},
                   {"max_grad_norm", c.pretrain.optimizer.max_grad_norm}};
  j["sampling"] = {{"sampling_steps", c.sampling_steps},
                   {"shift", c.shift},
                   {"sde_steps", std::vector<std::size_t>(c.sde_steps.begin(), c.sde_steps.end())},
                   {"eta", c.schedule.eta},
                   {"t_min", c.schedule.t_min},
                   {"t_max", c.schedule.t_max}};
  j["grpo"] = {{"group_size", c.group_size},
               {"prompts_per_iteration", c.prompts_per_iteration},
               {"shared_init", c.shared_init},
               {"clip_range", c.clip.ratio_clip},
               {"adv_clip_max", c.clip.adv_clip_max},
               {"std_guard", c.clip.std_guard},
               {"kl_beta", c.kl.beta},
               {"lr", c.optimizer.lr},
               {"beta1", c.optimizer.beta1},
               {"beta2", c.optimizer.beta2},
               {"eps", c.optimizer.eps},
               {"weight_decay", c.optimizer.weight_decay},
               {"max_grad_norm", c.optimizer.max_grad_norm},
               {"iterations", c.iterations},
               {"updates_per_iteration", c.updates_per_iteration},
               {"checkpoint_every", c.checkpoint_every}};
  j["mv"] = {{"condition_number_k", c.condition_number_k},
             {"enhancer", to_string(c.enhancer)},
             {"adjacency_bound", c.enhancer_cfg.adjacency_bound},
             {"paraphrase_jitter", c.enhancer_cfg.edit_ops.paraphrase_jitter},
             {"memory_capacity", c.memory_capacity},
             {"normalize_views", c.normalize_views}};
  j["remote"] = {{"endpoint", c.remote.client.endpoint},
                 {"model", c.remote.client.model},
                 {"auth_env", c.remote.client.auth_env},
                 {"template_path", c.remote.template_path},
                 {"timeout_seconds", c.remote.client.timeout_seconds},
                 {"max_retries", c.remote.client.max_retries},
                 {"backoff_seconds", c.remote.client.backoff_seconds},
                 {"max_in_flight", c.remote.client.max_in_flight}};
  j["eval"] = {{"n_conditions", c.eval.n_conditions}, {"n_samples", c.eval.n_samples}, {"seed", c.eval.seed}};
  j["drift"] = {{"n_pairs", c.drift.n_pairs},
                {"bins", c.drift.bins},
                {"bin_max", c.drift.bin_max},
                {"enhancer", to_string(c.drift.enhancer)}};
  return j;
}

// `source` names the text in error messages (usually the file path).
inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ":" + std::to_string(detail::line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0)) +
                     ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(detail::read_file(path), path.string());
}

inline std::string dump_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Output directory lock

class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    path_ = dir / ".lock";
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw IoError("output directory " + dir.string() + " is in use (lock file " + path_.string() +
                      " exists; remove it if no other run is active)");
      throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Metrics

inline json report_to_json(const IterationReport& r) {
  return {{"iteration", r.iteration},
          {"anchor_mean_reward", r.anchor_mean_reward},
          {"view_mean_reward", r.view_mean_reward},
          {"loss", r.loss},
          {"ratio_min", r.ratio_min},
          {"ratio_mean", r.ratio_mean},
          {"ratio_max", r.ratio_max},
          {"clip_fraction", r.clip_fraction},
          {"nfe", r.nfe},
          {"train_evals", r.train_evals}};
}

// Appends one JSON object per line and flushes after each record.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open metrics file " + path.string());
  }
  void append(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::vector<json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::vector<json> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    if (!records.back().is_object())
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": record is not an object");
  }
  return records;
}

// Keeps the first `n` records; used on resume to drop records newer than the saved state.
inline void truncate_metrics(const std::filesystem::path& path, std::size_t n) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string kept, line;
  for (std::size_t i = 0; i < n && std::getline(in, line); ++i) kept += line + "\n";
  in.close();
  detail::write_file_atomic(path, kept);
}

// iteration,anchor_mean_reward,loss with full double precision.
inline std::string plot_table(const std::vector<json>& records, const std::string& source = "metrics") {
  std::string out = "iteration,anchor_mean_reward,loss\n";
  char buf[128];
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& r = records[i];
    try {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.at("iteration").get<std::size_t>(),
                    r.at("anchor_mean_reward").get<double>(), r.at("loss").get<double>());
    } catch (const json::exception& e) {
      throw ParseError(source + ":" + std::to_string(i + 1) + ": " + e.what());
    }
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train state checkpoint
//
//   8 bytes  magic "MVGRPOTS"
//   u32      format version
//   u64      next iteration, u64 P
//   f64 x P  params, reference, adam m, adam v
//   u64      adam step
//   u64      memory key count, then per key u32 length + bytes

inline constexpr char kStateMagic[8] = {'M', 'V', 'G', 'R', 'P', 'O', 'T', 'S'};
inline constexpr std::uint32_t kStateVersion = 1;

inline std::string encode_train_state(const TrainState& s) {
  const std::size_t p = s.params.size();
  if (s.reference.size() != p || s.optimizer.m.size() != p || s.optimizer.v.size() != p)
    throw InvalidInput("train state vectors disagree in length");
  std::string out(kStateMagic, sizeof kStateMagic);
  detail::put_u32(out, kStateVersion);
  detail::put_u64(out, s.next_iteration);
  detail::put_u64(out, p);
  for (const Vec* v : {&s.params, &s.reference, &s.optimizer.m, &s.optimizer.v})
    for (double x : *v) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
  detail::put_u64(out, s.optimizer.step);
  detail::put_u64(out, s.memory.size());
  for (const auto& k : s.memory) {
    detail::put_u32(out, static_cast<std::uint32_t>(k.size()));
    out += k;
  }
  return out;
}

inline TrainState decode_train_state(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(sizeof kStateMagic) != std::string_view(kStateMagic, sizeof kStateMagic))
    throw ParseError("not a train-state file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kStateVersion) throw ParseError("unsupported train-state version " + std::to_string(version));
  TrainState s;
  s.next_iteration = r.u64();
  const std::uint64_t p = r.u64();
  if (p > bytes.size() / 8) throw ParseError("train-state parameter count exceeds file size");
  for (Vec* v : {&s.params, &s.reference, &s.optimizer.m, &s.optimizer.v}) {
    v->resize(p);
    for (double& x : *v) x = r.f64();
  }
  s.optimizer.step = r.u64();
  const std::uint64_t keys = r.u64();
  if (keys > bytes.size()) throw ParseError("train-state memory count exceeds file size");
  for (std::uint64_t i = 0; i < keys; ++i) {
    const std::uint32_t len = r.u32();
    s.memory.emplace_back(r.take(len));
  }
  if (!r.done()) throw ParseError("trailing bytes after train-state payload");
  for (double x : s.params)
    if (!std::isfinite(x)) throw ParseError("train state contains non-finite parameters");
  return s;
}

inline std::string write_train_state(const std::filesystem::path& path, const TrainState& s) {
  const std::string bytes = encode_train_state(s);
  detail::write_file_atomic(path, bytes);
  return digest_hex(bytes);
}

inline TrainState read_train_state(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  try {
    return decode_train_state(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Drift tables

// One tab-separated table per SDE step: a summary comment, a header, then one row per bin.
inline std::string drift_table(const DriftStepTable& st, double t) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "# step %zu t %.6f pairs %zu median %.9g p90 %.9g\n", st.step, t, st.deltas.size(),
                st.median, st.p90);
  out += buf;
  out += "bin_center\tcount\n";
  for (std::size_t b = 0; b < st.counts.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.9g\t%zu\n", st.bin_centers[b], st.counts[b]);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline entry points used by the command-line tool

inline Checkpoint load_policy(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  Checkpoint ck = read_checkpoint(path);
  if (!(ck.config == cfg.model()))
    throw ValidationError(path.string() + ": checkpoint model shape does not match the config");
  return ck;
}

struct PretrainOutcome {
  std::filesystem::path path;
  std::string digest;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline PretrainOutcome run_pretrain(const ExperimentConfig& cfg) {
  RunLock lock(cfg.out());
  const VelocityField field(cfg.model());
  PretrainConfig pc = cfg.pretrain;
  const auto res = pretrain(field, cfg.toy, pc);
  PretrainOutcome out;
  out.path = cfg.pretrained_path();
  if (out.path.has_parent_path()) std::filesystem::create_directories(out.path.parent_path());
  out.digest = write_checkpoint(out.path, cfg.model(), res.params);
  out.initial_loss = res.initial_loss;
  out.final_loss = res.final_loss;
  return out;
}

struct TrainOptions {
  bool baseline = false;
  bool resume = false;
  std::function<bool()> should_stop;
  std::function<void(const IterationReport&)> on_iteration;
  EnhanceFn custom_enhancer;  // overrides the config's enhancer (tests)
};

struct TrainOutcome {
  std::size_t completed = 0;  // iterations run by this invocation
  std::size_t next_iteration = 0;
  bool interrupted = false;
  std::string policy_digest;
  std::string state_digest;
};

inline EnhanceFn remote_enhancer_from(const ExperimentConfig& cfg) {
  RemoteEnhancerConfig client = cfg.remote.client;
  client.template_text = load_template(cfg.remote.template_path);
  return make_remote_enhancer(client, cfg.enhancer_cfg.perspectives);
}

// Writes metrics.jsonl (one record per iteration), timing.jsonl, state.ckpt and policy.ckpt
// under the output directory.
inline TrainOutcome run_train(const ExperimentConfig& cfg, const TrainOptions& opt = {}) {
  const auto dir = cfg.out();
  RunLock lock(dir);
  const auto metrics_path = dir / "metrics.jsonl";
  const auto timing_path = dir / "timing.jsonl";
  const auto state_path = dir / "state.ckpt";
  const auto policy_path = dir / "policy.ckpt";

  const VelocityField field(cfg.model());
  TrainState state;
  if (opt.resume) {
    state = read_train_state(state_path);
    if (state.params.size() != parameter_count(cfg.model()))
      throw ValidationError(state_path.string() + ": state parameter count does not match the config");
    truncate_metrics(metrics_path, state.next_iteration);
    truncate_metrics(timing_path, state.next_iteration);
  } else {
    const Checkpoint ck = load_policy(cfg.pretrained_path(), cfg);
    state.params = ck.params.values;
    state.reference = ck.params.values;
    std::filesystem::remove(metrics_path);
    std::filesystem::remove(timing_path);
  }
  detail::write_file_atomic(dir / "config.json", dump_config(cfg));

  const MvTrainConfig tc = cfg.train_config(opt.baseline);
  MetricsWriter metrics(metrics_path);
  MetricsWriter timing(timing_path);
  TrainOutcome out;
  out.next_iteration = state.next_iteration;
  TrainState latest = state;
  bool saved_latest = true;

  MvTrainHooks hooks;
  hooks.custom_enhancer = opt.custom_enhancer;
  if (!hooks.custom_enhancer && tc.condition_number_k > 0 && cfg.enhancer == EnhancerKind::Remote)
    hooks.custom_enhancer = remote_enhancer_from(cfg);
  hooks.should_stop = opt.should_stop;
  hooks.on_iteration = [&](const IterationReport& rep, const TrainState& s) {
    metrics.append(report_to_json(rep));
    timing.append({{"iteration", rep.iteration}, {"wall_seconds", rep.wall_seconds}});
    latest = s;
    saved_latest = false;
    ++out.completed;
    if (s.next_iteration % cfg.checkpoint_every == 0) {
      write_train_state(state_path, latest);
      saved_latest = true;
    }
    if (opt.on_iteration) opt.on_iteration(rep);
  };

  try {
    train(field, state, tc, hooks);
  } catch (...) {
    if (!saved_latest) write_train_state(state_path, latest);
    throw;
  }
  out.next_iteration = latest.next_iteration;
  out.interrupted = latest.next_iteration < cfg.iterations;
  out.state_digest = write_train_state(state_path, latest);
  PolicyParams pp{latest.params, layer_shapes(cfg.model())};
  out.policy_digest = write_checkpoint(policy_path, cfg.model(), pp);
  return out;
}

inline EvalReport run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint) {
  const Checkpoint ck = load_policy(checkpoint, cfg);
  const VelocityField field(cfg.model());
  return evaluate(field, ck.params.values, cfg.toy, cfg.reward, cfg.grid(), cfg.eval.n_conditions, cfg.eval.n_samples,
                  cfg.eval.seed);
}

inline std::string eval_report_json(const EvalReport& rep) {
  json j = {{"mean_reward", rep.mean_reward},
            {"samples", rep.samples},
            {"seed", rep.seed},
            {"per_condition", rep.per_condition}};
  return j.dump(2) + "\n";
}

inline DriftReport run_drift(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint, EnhancerKind kind) {
  const Checkpoint ck = load_policy(checkpoint, cfg);
  const VelocityField field(cfg.model());
  EnhanceFn enhance = kind == EnhancerKind::Remote ? remote_enhancer_from(cfg)
                                                   : make_enhancer(kind, cfg.enhancer_cfg, cfg.toy, nullptr);
  DriftConfig dc;
  dc.n_pairs = cfg.drift.n_pairs;
  dc.group_size = cfg.group_size;
  dc.bins = cfg.drift.bins;
  dc.bin_max = cfg.drift.bin_max;
  dc.seed = cfg.seed;
  return drift_report(field, ck.params.values, cfg.toy, cfg.grid(), cfg.schedule, enhance, dc);
}

// Writes drift_step<k>.tsv per SDE step and returns the written paths.
inline std::vector<std::filesystem::path> write_drift_tables(const DriftReport& rep, const TimeGrid& grid,
                                                             const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> paths;
  for (const auto& st : rep.steps) {
    const auto path = dir / ("drift_step" + std::to_string(st.step) + ".tsv");
    detail::write_file_atomic(path, drift_table(st, grid.t(st.step)));
    paths.push_back(path);
  }
  return paths;
}

}  // namespace mvgrpo
