#include "prenet/checkpoint.hpp"
#include "prenet/cli.hpp"
#include "prenet/config.hpp"
#include "prenet/fit.hpp"
#include "prenet/inference.hpp"
#include "prenet/toy.hpp"

#include <gtest/gtest.h>
#include "json.hpp"

#include "fixtures.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

using namespace prenet;
using prenet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(int classes = 4) {
  ModelConfig c;
  c.num_classes = classes;
  c.neck_dim = 8;
  c.classifier_hidden = 16;
  c.attention.token_grid = 2;
  c.attention.attn_dim = 8;
  return c;
}

Tensor<float> noise_images(Index n, Index side, Rng& rng) {
  Tensor<float> t({n, 3, side, side});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(rng.normal());
  return t;
}

template <typename T>
bool same_bits(const T& a, const T& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(*a.data()) * std::size_t(a.size())) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "prenet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Two solid-colour classes of side-16 images.
RunConfig tiny_run(const fs::path& out) {
  RunConfig cfg = toy_run_config();
  cfg.model.neck_dim = 8;
  cfg.model.classifier_hidden = 16;
  cfg.model.attention.token_grid = 2;
  cfg.model.attention.attn_dim = 8;
  cfg.augment.resize_side = 16;
  cfg.augment.crop_side = 16;
  cfg.train.batch_size = 4;
  cfg.output_dir = out.string();
  return cfg;
}

std::pair<ImageDataset, SplitManifest> two_class_data(const fs::path& root) {
  prenet::testing::write_class(root, "a", 5, 16);
  prenet::testing::write_class(root, "b", 5, 16);
  DatasetManifest m = build_manifest(root);
  SplitManifest split;
  split.train = {0, 1, 2, 3, 5, 6, 7, 8};
  split.val = {4, 9};
  return {ImageDataset(std::move(m)), split};
}

}  // namespace

TEST(Checkpoint, RoundTripGivesBitIdenticalOutputs) {
  TempDir dir;
  Prenet<float> model(small_model(), 1);
  Sgd<float> opt(1e-2);
  Rng rng(2);
  const std::vector<int> labels{0, 1, 2, 3};
  for (int b = 0; b < 3; ++b) train_batch<float>(model, noise_images(4, 16, rng), labels, make_schedule(3, 3), opt, LossWeights{});

  Checkpoint ck;
  ck.epoch = 4;
  ck.class_names = {"a", "b", "c", "d"};
  ck.config_json = "{}";
  capture_model(ck, model);
  capture_optimizer(ck, opt);
  save_checkpoint(dir / "m.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.class_names, ck.class_names);

  Prenet<float> restored(small_model(), 99);
  restore_model(back, restored);
  Sgd<float> opt2;
  restore_optimizer(back, opt2);
  ASSERT_EQ(opt2.buffers().size(), opt.buffers().size());
  for (const auto& [name, buf] : opt.buffers()) EXPECT_TRUE(same_bits(buf, opt2.buffers().at(name))) << name;

  const Tensor<float> x = noise_images(5, 16, rng);
  const auto a = predict(model, x), b = predict(restored, x);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(same_bits(a[i].combined_scores, b[i].combined_scores));
    EXPECT_TRUE(same_bits(a[i].concat_probs, b[i].concat_probs));
    for (std::size_t u = 0; u < 3; ++u) EXPECT_TRUE(same_bits(a[i].per_stage_probs[u], b[i].per_stage_probs[u]));
  }
}

TEST(Checkpoint, ClassCountMismatch) {
  TempDir dir;
  Prenet<float> model(small_model(4), 3);
  Checkpoint ck;
  capture_model(ck, model);
  save_checkpoint(dir / "m.ckpt", ck);
  Prenet<float> other(small_model(5), 3);
  try {
    restore_model(load_checkpoint(dir / "m.ckpt"), other);
    FAIL() << "expected a class-count error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("4 classes"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingFileNamesThePath) {
  TempDir dir;
  const fs::path missing = dir / "nothing.ckpt";
  try {
    load_checkpoint(missing);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find(missing.string()), std::string::npos);
  }
}

TEST(Checkpoint, DetectsCorruptionTruncationAndSchema) {
  TempDir dir;
  Prenet<float> model(small_model(), 4);
  Checkpoint ck;
  capture_model(ck, model);
  save_checkpoint(dir / "m.ckpt", ck);
  const std::string blob = slurp(dir / "m.ckpt");

  auto write = [&](const std::string& name, const std::string& bytes) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
    return dir / name;
  };
  auto message = [](const fs::path& p) {
    try {
      load_checkpoint(p);
    } catch (const std::runtime_error& e) {
      return std::string(e.what());
    }
    return std::string("loaded");
  };
  std::string flipped = blob;
  flipped[flipped.size() - 10] ^= 0x5a;
  EXPECT_NE(message(write("flip.ckpt", flipped)).find("checksum"), std::string::npos);
  EXPECT_NE(message(write("short.ckpt", blob.substr(0, blob.size() - 100))).find("truncated"), std::string::npos);
  EXPECT_NE(message(write("head.ckpt", blob.substr(0, 10))).find("truncated"), std::string::npos);
  EXPECT_NE(message(write("junk.ckpt", "not a checkpoint at all")).find("not a checkpoint"), std::string::npos);
  EXPECT_NE(message(write("tail.ckpt", blob + "x")).find("trailing"), std::string::npos);

  ck.schema_version = kCheckpointSchemaVersion + 1;
  save_checkpoint(dir / "future.ckpt", ck);
  EXPECT_NE(message(dir / "future.ckpt").find("schema_version"), std::string::npos);
}

TEST(Checkpoint, AtomicWriteLeavesNoTempFile) {
  TempDir dir;
  Checkpoint ck;
  save_checkpoint(dir / "a.ckpt", ck);
  save_checkpoint(dir / "a.ckpt", ck);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir.path())) files += e.is_regular_file();
  EXPECT_EQ(files, 1u);
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_run_config(R"({"epochs": 3, "epochz": 4})");
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'epochz'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_run_config(R"({"epochs": "three"})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"kl_sign": "sideways"})"), ConfigError);
  EXPECT_THROW(parse_run_config("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_run_config("{oops"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"stages": 2, "steps": 3})"), ConfigError);
}

TEST(Config, OverridesAndRoundTrip) {
  const RunConfig cfg = parse_run_config(R"({"alpha": 0.5, "beta": 0, "stages": 2, "steps": 1, "kl_sign": "literal",
                                             "schedule_mode": "per_epoch", "mean": [0.5, 0.5, 0.5]})");
  EXPECT_EQ(cfg.train.alpha, 0.5);
  EXPECT_EQ(cfg.train.beta, 0.0);
  EXPECT_EQ(cfg.model.stages, 2);
  EXPECT_EQ(cfg.train.stages, 2);
  EXPECT_EQ(cfg.train.kl_sign, KlSign::Literal);
  EXPECT_EQ(cfg.train.schedule_mode, ScheduleMode::PerEpoch);
  EXPECT_EQ(cfg.augment.mean[1], 0.5f);
  EXPECT_EQ(cfg.train.epochs, 30);

  const std::string dumped = dump_run_config(cfg);
  const RunConfig again = parse_run_config(dumped);
  EXPECT_EQ(dump_run_config(again), dumped);
  const auto keys = run_config_keys();
  const auto j = nlohmann::json::parse(dumped);
  EXPECT_EQ(j.size(), keys.size());
  for (const auto& k : keys) EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Fit, BatchAndValidationCounts) {
  TempDir dir;
  auto [data, split] = two_class_data(dir / "data");
  RunConfig cfg = tiny_run(dir / "run");
  cfg.train.epochs = 1;
  const auto result = fit(cfg, data, split);
  EXPECT_EQ(result.log.batches.size(), 2u);
  EXPECT_EQ(result.log.val.size(), 1u);
  EXPECT_EQ(result.log.val[0].n_samples, 2u);
  EXPECT_EQ(result.model->config().num_classes, 2);
  for (const char* f : {"metrics.csv", "last.ckpt", "best.ckpt"}) EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  EXPECT_EQ(line_count(dir / "run" / "metrics.csv"), 2u);
  EXPECT_EQ(load_checkpoint(dir / "run" / "last.ckpt").epoch, 0);
}

TEST(Fit, WithoutValidationBestFollowsTheLatestEpoch) {
  TempDir dir;
  auto [data, split] = two_class_data(dir / "data");
  split.val.clear();
  RunConfig cfg = tiny_run(dir / "run");
  cfg.train.epochs = 2;
  const auto result = fit(cfg, data, split);
  EXPECT_TRUE(result.log.val.empty());
  EXPECT_TRUE(std::isnan(result.log.epochs[1].val_top1));
  EXPECT_EQ(load_checkpoint(dir / "run" / "best.ckpt").epoch, 1);
}

TEST(Fit, EmptyTrainSplitIsAnError) {
  TempDir dir;
  auto [data, split] = two_class_data(dir / "data");
  split.train.clear();
  EXPECT_THROW(fit(tiny_run(dir / "run"), data, split), std::runtime_error);
}

TEST(Fit, SameSeedGivesIdenticalMetrics) {
  TempDir dir;
  auto [data, split] = two_class_data(dir / "data");
  RunConfig cfg = tiny_run(dir / "a");
  cfg.train.epochs = 3;
  fit(cfg, data, split);
  cfg.output_dir = (dir / "b").string();
  fit(cfg, data, split);
  const std::string a = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(line_count(dir / "a" / "metrics.csv"), 4u);
  cfg.output_dir = (dir / "c").string();
  cfg.train.seed = 1;
  fit(cfg, data, split);
  EXPECT_NE(a, slurp(dir / "c" / "metrics.csv"));
}

TEST(Fit, ResumeContinuesAtTheNextEpoch) {
  TempDir dir;
  auto [data, split] = two_class_data(dir / "data");
  RunConfig cfg = tiny_run(dir / "full");
  cfg.train.epochs = 3;
  fit(cfg, data, split);

  cfg.output_dir = (dir / "part").string();
  cfg.train.epochs = 2;
  fit(cfg, data, split);
  cfg.train.epochs = 3;
  FitOptions opts;
  opts.resume = dir / "part" / "last.ckpt";
  const auto resumed = fit(cfg, data, split, opts);
  ASSERT_EQ(resumed.log.epochs.size(), 1u);
  EXPECT_EQ(resumed.log.epochs[0].epoch, 2);
  EXPECT_EQ(load_checkpoint(dir / "part" / "last.ckpt").epoch, 2);
  EXPECT_EQ(slurp(dir / "part" / "metrics.csv"), slurp(dir / "full" / "metrics.csv"));
}

TEST(Cli, UsageAndRuntimeExitCodes) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--no-such-flag"}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  TempDir dir;
  const auto missing = cli({"eval", "--checkpoint", (dir / "none.ckpt").string()});
  EXPECT_EQ(missing.code, kExitRuntime);
  EXPECT_NE(missing.err.find("none.ckpt"), std::string::npos);
  EXPECT_EQ(cli({"train", "--preset", "huge"}).code, kExitUsage);
}

TEST(Cli, InvalidConfigKeyExitsWithUsageError) {
  TempDir dir;
  std::ofstream(dir / "bad.json") << R"({"epochs": 1, "learning_rate": 0.1})";
  const auto r = cli({"train", "--config", (dir / "bad.json").string(), "--data", dir.path().string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;
}

TEST(Cli, EndToEndOnTheToySet) {
  TempDir dir;
  const std::string data = (dir / "toy").string(), run = (dir / "run").string();
  auto made = cli({"make-toy", "--out", data, "--per-class", "10", "--side", "32"});
  ASSERT_EQ(made.code, kExitOk) << made.err;
  EXPECT_NE(made.out.find("40 images"), std::string::npos);

  auto trained = cli({"train", "--preset", "toy", "--data", data, "--out", run, "--epochs", "2", "--beta", "0"});
  ASSERT_EQ(trained.code, kExitOk) << trained.err;
  for (const char* f : {"manifest.json", "metrics.csv", "last.ckpt", "best.ckpt", "summary.json"})
    EXPECT_TRUE(fs::exists(fs::path(run) / f)) << f;
  std::ifstream csv(fs::path(run) / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, metrics_header(4));
  EXPECT_NE(header.find(",kl,"), std::string::npos);
  EXPECT_NE(trained.out.find("final test"), std::string::npos);
  const fs::path ckpt = fs::path(run) / "best.ckpt";

  for (const char* split : {"val", "test"}) {
    auto ev = cli({"eval", "--checkpoint", ckpt.string(), "--split", split});
    ASSERT_EQ(ev.code, kExitOk) << ev.err;
    EXPECT_TRUE(fs::exists(fs::path(run) / (std::string("eval_") + split + ".csv")));
  }
  // 10 per class split 6/1/3
  EXPECT_NE(cli({"eval", "--checkpoint", ckpt.string(), "--split", "val"}).out.find("n=4 "), std::string::npos);
  EXPECT_NE(cli({"eval", "--checkpoint", ckpt.string(), "--split", "test"}).out.find("n=12 "), std::string::npos);
  EXPECT_EQ(cli({"eval", "--checkpoint", ckpt.string(), "--split", "dev"}).code, kExitUsage);

  const std::string img1 = (fs::path(data) / "red_circle" / "red_circle_000.png").string();
  const std::string img2 = (fs::path(data) / "blue_triangle" / "blue_triangle_001.png").string();
  auto pr = cli({"predict", "--checkpoint", ckpt.string(), "--topk", "2", img1, img2});
  ASSERT_EQ(pr.code, kExitOk) << pr.err;
  const auto first = pr.out.find(img1), second = pr.out.find(img2);
  ASSERT_NE(first, std::string::npos);
  ASSERT_NE(second, std::string::npos);
  EXPECT_LT(first, second);
  std::istringstream lines(pr.out);
  std::size_t score_lines = 0;
  for (std::string line; std::getline(lines, line);) score_lines += line.starts_with("  ");
  EXPECT_EQ(score_lines, 4u);
  EXPECT_EQ(cli({"predict", "--checkpoint", ckpt.string(), "--topk", "9", img1}).code, kExitUsage);

  const fs::path heat = dir / "heat";
  auto in = cli({"inspect", "--checkpoint", ckpt.string(), "--image", img1, "--out", heat.string()});
  ASSERT_EQ(in.code, kExitOk) << in.err;
  for (const char* name : {"stage1", "stage2", "stage3", "global"})
    EXPECT_TRUE(fs::exists(heat / (std::string("red_circle_000_") + name + ".png"))) << name;
  const auto sidecar = nlohmann::json::parse(slurp(heat / "red_circle_000_heads.json"));
  EXPECT_EQ(sidecar["heads"].size(), 4u);
  for (const auto& [name, probs] : sidecar["heads"].items()) {
    double s = 0;
    for (double p : probs) s += p;
    EXPECT_NEAR(s, 1.0, 1e-5) << name;
  }
  double combined = 0;
  for (double v : sidecar["combined_scores"]) combined += v;
  EXPECT_NEAR(combined, 4.0, 1e-5);
  EXPECT_EQ(sidecar["target_class"], sidecar["predicted_class"]);
}
