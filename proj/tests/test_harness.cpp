#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mvgrpo/harness.hpp"
#include "small_config.hpp"

using namespace mvgrpo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

ExperimentConfig small(const fs::path& dir) { return parse_config(small_config_json(dir), "small.json"); }

IterationReport report(std::size_t i, double r, double loss) {
  IterationReport rep;
  rep.iteration = i;
  rep.anchor_mean_reward = r;
  rep.loss = loss;
  rep.nfe = 64;
  return rep;
}

}  // namespace

TEST(Config, DefaultsMatchTable) {
  const ExperimentConfig c;
  EXPECT_EQ(c.sampling_steps, 16u);
  EXPECT_EQ(c.sde_steps, (std::set<std::size_t>{0, 2, 4, 6}));
  EXPECT_EQ(c.group_size, 8u);
  EXPECT_EQ(c.condition_number_k, 8u);
  EXPECT_DOUBLE_EQ(c.schedule.eta, 0.7);
  EXPECT_DOUBLE_EQ(c.clip.ratio_clip, 1e-4);
  EXPECT_DOUBLE_EQ(c.clip.adv_clip_max, 5.0);
  EXPECT_DOUBLE_EQ(c.kl.beta, 0.0);
  EXPECT_EQ(c.drift.n_pairs, 500u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RoundTrip) {
  const auto c = small("/tmp/x");
  const std::string once = dump_config(c);
  const std::string twice = dump_config(parse_config(once));
  EXPECT_EQ(once, twice);
  const auto empty = parse_config("{}");
  EXPECT_EQ(dump_config(empty), dump_config(ExperimentConfig{}));
}

TEST(Config, ValidationNamesField) {
  const std::string msg =
      error_of([] { parse_config(R"({"sampling": {"sampling_steps": 0}})", "bad.json"); });
  EXPECT_NE(msg.find("bad.json"), std::string::npos);
  EXPECT_NE(msg.find("sampling.sampling_steps"), std::string::npos);
  EXPECT_THROW(parse_config(R"({"sampling": {"sampling_steps": 0}})"), ValidationError);
  EXPECT_NE(error_of([] { parse_config(R"({"eval": {"n_samples": 0}})"); }).find("eval.n_samples"),
            std::string::npos);
  EXPECT_NE(error_of([] { parse_config(R"({"mv": {"condition_number_k": 9}})"); }).find("mv.condition_number_k"),
            std::string::npos);
  EXPECT_THROW(parse_config(R"({"sampling": {"sde_steps": [0, 0]}})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"grpo": {"group_size": -1}})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"mv": {"enhancer": "vlm"}})"), ValidationError);
}

TEST(Config, UnknownFieldIsRejected) {
  const std::string msg = error_of([] { parse_config(R"({"toy": {"dimm": 4}})"); });
  EXPECT_NE(msg.find("toy.dimm"), std::string::npos);
  EXPECT_THROW(parse_config(R"({"colour": 1})"), ValidationError);
}

TEST(Config, WrongTypeIsRejected) {
  EXPECT_NE(error_of([] { parse_config(R"({"grpo": {"group_size": "eight"}})"); }).find("grpo.group_size"),
            std::string::npos);
}

TEST(Config, SyntaxErrorCarriesLine) {
  const std::string text = "{\n  \"seed\": 1,\n  \"toy\": {\"dim\": 6,,}\n}\n";
  try {
    parse_config(text, "cfg.json");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.json:3:"), std::string::npos) << e.what();
  }
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/dir/config.json");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/config.json"), std::string::npos);
  }
}

TEST(Config, BaselineForcesKZero) {
  const ExperimentConfig c;
  EXPECT_EQ(c.train_config(true).condition_number_k, 0u);
  EXPECT_EQ(c.train_config(false).condition_number_k, 8u);
}

TEST(Lock, SingleInstance) {
  const auto dir = scratch_dir("lock");
  {
    RunLock a(dir);
    EXPECT_TRUE(fs::exists(dir / ".lock"));
    const std::string msg = error_of([&] { RunLock b(dir); });
    EXPECT_NE(msg.find("in use"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_NO_THROW(RunLock c(dir));
  fs::remove_all(dir);
}

TEST(Metrics, AppendReadTruncate) {
  const auto dir = scratch_dir("metrics");
  const auto path = dir / "metrics.jsonl";
  {
    MetricsWriter w(path);
    for (std::size_t i = 0; i < 5; ++i) w.append(report_to_json(report(i, 0.1 * i, -0.01 * i)));
  }
  auto recs = read_metrics(path);
  ASSERT_EQ(recs.size(), 5u);
  EXPECT_EQ(recs[3]["iteration"], 3);
  EXPECT_FALSE(recs[3].contains("wall_seconds"));
  truncate_metrics(path, 2);
  EXPECT_EQ(read_metrics(path).size(), 2u);
  fs::remove_all(dir);
}

TEST(Metrics, MalformedLineIsNumbered) {
  const auto dir = scratch_dir("badmetrics");
  const auto path = dir / "metrics.jsonl";
  std::ofstream(path) << "{\"iteration\":0}\n{\"iteration\":1\n";
  const std::string msg = error_of([&] { read_metrics(path); });
  EXPECT_NE(msg.find("metrics.jsonl:2:"), std::string::npos) << msg;
  EXPECT_THROW(read_metrics(path), ParseError);
  EXPECT_THROW(read_metrics(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST(PlotData, HeaderOnlyForEmpty) {
  EXPECT_EQ(plot_table({}), "iteration,anchor_mean_reward,loss\n");
}

TEST(PlotData, RowsAndFullPrecision) {
  std::vector<nlohmann::json> recs;
  Rng rng(1);
  for (std::size_t i = 0; i < 7; ++i) recs.push_back(report_to_json(report(i, rng.uniform(), rng.normal())));
  // Through text, as the CLI does.
  std::string text;
  for (const auto& r : recs) text += r.dump() + "\n";
  std::vector<nlohmann::json> parsed;
  std::istringstream lines(text);
  for (std::string l; std::getline(lines, l);) parsed.push_back(nlohmann::json::parse(l));
  const std::string table = plot_table(parsed);
  std::istringstream in(table);
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::size_t it;
    double r, loss;
    ASSERT_EQ(std::sscanf(line.c_str(), "%zu,%lf,%lf", &it, &r, &loss), 3);
    EXPECT_EQ(it, rows);
    EXPECT_EQ(r, recs[rows]["anchor_mean_reward"].get<double>());
    EXPECT_EQ(loss, recs[rows]["loss"].get<double>());
    ++rows;
  }
  EXPECT_EQ(rows, 7u);
  std::vector<nlohmann::json> bad = {recs[0], nlohmann::json{{"iteration", 1}}};
  EXPECT_NE(error_of([&] { plot_table(bad, "m.jsonl"); }).find("m.jsonl:2:"), std::string::npos);
}

TEST(TrainStateFile, RoundTripAndCorruption) {
  TrainState s;
  s.next_iteration = 17;
  s.params = {0.1, -0.2, 0.3};
  s.reference = {1.0, 2.0, 3.0};
  s.optimizer.m = {0.01, 0.02, 0.03};
  s.optimizer.v = {1e-4, 2e-4, 3e-4};
  s.optimizer.step = 17;
  s.memory = {"1:500;0;", "1:-250;1:3;"};
  const std::string bytes = encode_train_state(s);
  const TrainState t = decode_train_state(bytes);
  EXPECT_EQ(t.next_iteration, 17u);
  EXPECT_EQ(t.params, s.params);
  EXPECT_EQ(t.reference, s.reference);
  EXPECT_EQ(t.optimizer.m, s.optimizer.m);
  EXPECT_EQ(t.optimizer.v, s.optimizer.v);
  EXPECT_EQ(t.optimizer.step, 17u);
  EXPECT_EQ(t.memory, s.memory);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_train_state(bad), ParseError);
  EXPECT_THROW(decode_train_state(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(decode_train_state(bytes + "x"), ParseError);
  EXPECT_THROW(read_train_state("/nonexistent/state.ckpt"), IoError);
}

TEST(DriftTable, Format) {
  DriftStepTable st;
  st.step = 2;
  st.deltas = {0.0, 0.0, 0.0};
  st.bin_centers = {0.1, 0.3, 0.5};
  st.counts = {3, 0, 0};
  const std::string text = drift_table(st, 0.75);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("# step 2 t 0.750000 pairs 3 median 0 p90 0", 0), 0u) << line;
  std::getline(in, line);
  EXPECT_EQ(line, "bin_center\tcount");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3u);
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch_dir("pipeline");
    auto cfg = small(root_ / "base");
    pretrained_ = run_pretrain(cfg).path;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  ExperimentConfig config(const std::string& name) const {
    auto cfg = small(root_ / name);
    cfg.pretrained_checkpoint = pretrained_.string();
    return cfg;
  }

  static fs::path root_;
  static fs::path pretrained_;
};

fs::path Pipeline::root_;
fs::path Pipeline::pretrained_;

TEST_F(Pipeline, PretrainIsDeterministic) {
  auto cfg = small(root_ / "again");
  const auto res = run_pretrain(cfg);
  EXPECT_EQ(slurp(res.path), slurp(pretrained_));
}

TEST_F(Pipeline, TrainWritesOneRecordPerIteration) {
  const auto cfg = config("full");
  const auto out = run_train(cfg);
  EXPECT_EQ(out.completed, 6u);
  EXPECT_FALSE(out.interrupted);
  EXPECT_EQ(read_metrics(cfg.out() / "metrics.jsonl").size(), 6u);
  EXPECT_EQ(read_metrics(cfg.out() / "timing.jsonl").size(), 6u);
  EXPECT_TRUE(fs::exists(cfg.out() / "policy.ckpt"));
  EXPECT_TRUE(fs::exists(cfg.out() / "config.json"));
  EXPECT_FALSE(fs::exists(cfg.out() / ".lock"));
  EXPECT_EQ(dump_config(load_config(cfg.out() / "config.json")), dump_config(cfg));
}

TEST_F(Pipeline, RepeatedRunsAreByteIdentical) {
  const auto a = config("rep_a"), b = config("rep_b");
  const auto ra = run_train(a), rb = run_train(b);
  EXPECT_EQ(slurp(a.out() / "metrics.jsonl"), slurp(b.out() / "metrics.jsonl"));
  EXPECT_EQ(ra.policy_digest, rb.policy_digest);
}

TEST_F(Pipeline, StopAfterNGivesNRecords) {
  const auto cfg = config("stop");
  std::size_t seen = 0;
  TrainOptions opt;
  opt.should_stop = [&] { return seen == 3; };
  opt.on_iteration = [&](const IterationReport&) { ++seen; };
  const auto out = run_train(cfg, opt);
  EXPECT_TRUE(out.interrupted);
  EXPECT_EQ(out.next_iteration, 3u);
  EXPECT_EQ(read_metrics(cfg.out() / "metrics.jsonl").size(), 3u);
}

TEST_F(Pipeline, ResumeMatchesUninterrupted) {
  const auto full = config("resume_full");
  const auto full_out = run_train(full);

  const auto part = config("resume_part");
  std::size_t seen = 0;
  TrainOptions stop;
  stop.should_stop = [&] { return seen == 3; };
  stop.on_iteration = [&](const IterationReport&) { ++seen; };
  run_train(part, stop);
  // A stray record past the saved state is dropped on resume.
  std::ofstream(part.out() / "metrics.jsonl", std::ios::app) << "{\"iteration\":99}\n";
  TrainOptions resume;
  resume.resume = true;
  const auto part_out = run_train(part, resume);
  EXPECT_EQ(part_out.completed, 3u);
  EXPECT_EQ(slurp(part.out() / "metrics.jsonl"), slurp(full.out() / "metrics.jsonl"));
  EXPECT_EQ(part_out.policy_digest, full_out.policy_digest);
}

TEST_F(Pipeline, BaselineFlagEqualsKZeroConfig) {
  const auto flagged = config("flag");
  TrainOptions opt;
  opt.baseline = true;
  run_train(flagged, opt);
  auto k0 = config("k0");
  k0.condition_number_k = 0;
  run_train(k0);
  EXPECT_EQ(slurp(flagged.out() / "metrics.jsonl"), slurp(k0.out() / "metrics.jsonl"));
}

TEST_F(Pipeline, ErrorMidRunSavesState) {
  const auto cfg = config("failing");
  TrainOptions opt;
  std::size_t calls = 0;
  opt.custom_enhancer = [&](const Condition&, std::span<const Vec>, std::size_t, Rng&) -> AugmentedConditionSet {
    if (++calls > 3 * cfg.prompts_per_iteration) throw NumericFailure("enhancer exploded");
    AugmentedConditionSet s;
    return s;
  };
  const std::string msg = error_of([&] { run_train(cfg, opt); });
  EXPECT_NE(msg.find("iteration 3"), std::string::npos) << msg;
  EXPECT_EQ(read_metrics(cfg.out() / "metrics.jsonl").size(), 3u);
  EXPECT_EQ(read_train_state(cfg.out() / "state.ckpt").next_iteration, 3u);
  EXPECT_FALSE(fs::exists(cfg.out() / ".lock"));
}

TEST_F(Pipeline, MissingPretrainedCheckpoint) {
  auto cfg = config("nockpt");
  cfg.pretrained_checkpoint = (root_ / "nope.ckpt").string();
  EXPECT_THROW(run_train(cfg), IoError);
}

TEST_F(Pipeline, EvalDeterministicAndCheckpointChecks) {
  const auto cfg = config("eval");
  const auto a = run_eval(cfg, pretrained_);
  const auto b = run_eval(cfg, pretrained_);
  EXPECT_EQ(eval_report_json(a), eval_report_json(b));
  EXPECT_EQ(a.samples, 16u);

  auto wide = cfg;
  wide.hidden = {16, 16};
  EXPECT_THROW(run_eval(wide, pretrained_), ValidationError);

  const auto corrupt = root_ / "corrupt.ckpt";
  std::string bytes = slurp(pretrained_);
  bytes[9] ^= 0x7f;
  std::ofstream(corrupt, std::ios::binary) << bytes;
  EXPECT_THROW(run_eval(cfg, corrupt), ParseError);
}

TEST_F(Pipeline, DriftTablesIdentityIsZero) {
  const auto cfg = config("drift");
  const auto rep = run_drift(cfg, pretrained_, EnhancerKind::Identity);
  const auto paths = write_drift_tables(rep, cfg.grid(), cfg.out() / "drift");
  ASSERT_EQ(paths.size(), 2u);
  for (const auto& p : paths) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    std::size_t rows = 0, total = 0;
    double center;
    std::size_t count;
    while (in >> center >> count) {
      ++rows;
      total += count;
      if (rows > 1) {
        EXPECT_EQ(count, 0u);
      }
    }
    EXPECT_EQ(rows, 5u);
    EXPECT_EQ(total, 20u);
  }
  for (const auto& st : rep.steps) EXPECT_EQ(st.p90, 0.0);
}

TEST_F(Pipeline, RemoteEnhancerNeedsTemplate) {
  auto cfg = config("remote");
  cfg.enhancer = EnhancerKind::Remote;
  cfg.remote.template_path = (root_ / "missing_template.txt").string();
  EXPECT_THROW(run_train(cfg), IoError);
}
