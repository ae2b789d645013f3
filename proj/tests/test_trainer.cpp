#include "prenet/fit.hpp"
#include "prenet/toy.hpp"
#include "prenet/trainer.hpp"

#include <gtest/gtest.h>

#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

using namespace prenet;

namespace {

ModelConfig small_model(int stages = 3, int classes = 4) {
  ModelConfig c;
  c.num_classes = classes;
  c.stages = stages;
  c.neck_dim = 8;
  c.classifier_hidden = 16;
  c.attention.token_grid = 2;
  c.attention.attn_dim = 8;
  return c;
}

Tensor<float> noise_batch(Index n, Index side, Rng& rng) {
  Tensor<float> t({n, 3, side, side});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(rng.normal());
  return t;
}

std::map<std::string, Tensor<float>> snapshot(Prenet<float>& model) {
  std::map<std::string, Tensor<float>> out;
  for (auto& e : model.state_dict()) out.emplace(e.name, *e.tensor);
  return out;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * std::size_t(a.size())) == 0;
}

// Names a StageCE pass targeting `stage` may modify.
bool in_stage_scope(const std::string& name, int stage) {
  for (int u = 1; u <= stage; ++u)
    if (name.starts_with("backbone.block" + std::to_string(u) + ".")) return true;
  const std::string s = std::to_string(stage);
  return name.starts_with("neck" + s + ".") || name.starts_with("stage_head" + s + ".");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

TEST(Schedule, ThreeStagesThreeSteps) {
  const auto s = make_schedule(3, 3);
  ASSERT_EQ(s.passes.size(), 4u);
  EXPECT_EQ(s.passes[0].scope, (std::vector<int>{1}));
  EXPECT_EQ(s.passes[1].scope, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.passes[2].scope, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(s.passes[3].scope, (std::vector<int>{1, 2, 3}));
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(s.passes[std::size_t(p)].loss, PassLoss::StageCE);
    EXPECT_EQ(s.passes[std::size_t(p)].target_stage, p + 1);
  }
  EXPECT_EQ(s.passes[3].loss, PassLoss::Total);
}

TEST(Schedule, OneStepAndSingleStage) {
  const auto s = make_schedule(3, 1);
  ASSERT_EQ(s.passes.size(), 2u);
  EXPECT_EQ(s.passes[0].scope, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(s.passes[0].target_stage, 3);
  const auto one = make_schedule(1, 1);
  ASSERT_EQ(one.passes.size(), 2u);
  EXPECT_EQ(one.passes[0].scope, (std::vector<int>{1}));
  const auto none = make_schedule(3, 0);
  ASSERT_EQ(none.passes.size(), 1u);
  EXPECT_EQ(none.passes[0].loss, PassLoss::Total);
}

TEST(Schedule, RejectsStepsBeyondStages) {
  EXPECT_THROW(make_schedule(2, 3), std::invalid_argument);
  EXPECT_THROW(make_schedule(3, -1), std::invalid_argument);
  EXPECT_THROW(make_schedule(0, 0), std::invalid_argument);
}

TEST(Schedule, ExhaustiveScopeProperties) {
  for (int u = 1; u <= 6; ++u)
    for (int steps = 0; steps <= u; ++steps) {
      const auto s = make_schedule(u, steps);
      ASSERT_EQ(s.passes.size(), std::size_t(steps + 1));
      std::size_t prev = 0;
      for (int p = 0; p < steps; ++p) {
        const auto& scope = s.passes[std::size_t(p)].scope;
        std::vector<int> expect(std::size_t(u - steps + p + 1));
        std::iota(expect.begin(), expect.end(), 1);
        ASSERT_EQ(scope, expect) << u << "," << steps << "," << p;
        ASSERT_GT(scope.size(), prev);
        prev = scope.size();
      }
      if (steps > 0) EXPECT_EQ(s.passes[std::size_t(steps - 1)].scope.size(), std::size_t(u));
      EXPECT_EQ(s.passes.back().scope.size(), std::size_t(u));
      EXPECT_EQ(s.passes.back().loss, PassLoss::Total);
    }
}

TEST(TrainBatch, RunsEveryPassInOrder) {
  Prenet<float> model(small_model(), 1);
  Rng rng(2);
  const Tensor<float> x = noise_batch(4, 16, rng);
  const std::vector<int> labels{0, 1, 2, 3};
  const auto schedule = make_schedule(3, 3);
  Sgd<float> opt(1e-2);
  std::vector<std::size_t> seen;
  const auto report = train_batch<float>(model, x, labels, schedule, opt, LossWeights{},
                                         [&](std::size_t i, const PassSpec&) { seen.push_back(i); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3}));
  ASSERT_EQ(report.pass_losses.size(), 4u);
  EXPECT_EQ(report.loss.per_stage_ce.size(), 3u);
  EXPECT_NEAR(report.pass_losses.back(), report.loss.total, 1e-6);
  EXPECT_NEAR(report.loss.total, 0.8 * report.loss.concat_ce - 0.2 * report.loss.kl_term, 1e-5);

  seen.clear();
  train_batch<float>(model, x, labels, schedule, opt, LossWeights{}, [&](std::size_t i, const PassSpec&) { seen.push_back(i); },
                     std::size_t(2));
  EXPECT_EQ(seen, (std::vector<std::size_t>{2}));
}

TEST(TrainBatch, PassesOnlyTouchTheirScope) {
  Prenet<float> model(small_model(), 3);
  Sgd<float> opt(5e-2, 0.9, 1e-3);
  Rng rng(4);
  const auto schedule = make_schedule(3, 3);
  std::map<std::string, Tensor<float>> before, buffers_before;
  std::size_t checked = 0;
  auto observer = [&](std::size_t i, const PassSpec& pass) {
    const auto after = snapshot(model);
    for (const auto& [name, tensor] : after) {
      const bool may_change = pass.loss == PassLoss::Total || in_stage_scope(name, pass.target_stage);
      if (!may_change) {
        ASSERT_TRUE(bitwise_equal(before.at(name), tensor)) << "pass " << i + 1 << " modified " << name;
        auto b = buffers_before.find(name);
        auto a = opt.buffers().find(name);
        ASSERT_EQ(b == buffers_before.end(), a == opt.buffers().end()) << name;
        if (a != opt.buffers().end()) ASSERT_TRUE(bitwise_equal(b->second, a->second)) << "momentum of " << name;
        ++checked;
      } else if (pass.loss == PassLoss::StageCE && name.ends_with("weight") && !name.ends_with("bn.weight")) {
        EXPECT_FALSE(bitwise_equal(before.at(name), tensor)) << "pass " << i + 1 << " left " << name << " unchanged";
      }
    }
    before = after;
    buffers_before = opt.buffers();
  };
  for (int b = 0; b < 2; ++b) {
    before = snapshot(model);
    buffers_before = opt.buffers();
    const std::vector<int> labels{0, 1, 2, 3, 0, 1};
    train_batch<float>(model, noise_batch(6, 16, rng), labels, schedule, opt, LossWeights{}, observer);
  }
  EXPECT_GT(checked, 100u);
}

TEST(TrainBatch, NoProgressiveStepsChangesTheFirstUpdate) {
  Rng rng(5);
  const Tensor<float> x = noise_batch(4, 16, rng);
  const std::vector<int> labels{0, 1, 2, 3};
  Prenet<float> full(small_model(), 6), flat(small_model(), 6);
  Sgd<float> o1(1e-2), o2(1e-2);
  const LossWeights ce_only{1.0, 0.0};
  const auto r1 = train_batch<float>(full, x, labels, make_schedule(3, 3), o1, LossWeights{});
  const auto r2 = train_batch<float>(flat, x, labels, make_schedule(3, 0), o2, ce_only);
  EXPECT_EQ(r1.pass_losses.size(), 4u);
  EXPECT_EQ(r2.pass_losses.size(), 1u);
  EXPECT_NEAR(r2.pass_losses[0], r2.loss.concat_ce, 1e-6);
  const auto a = snapshot(full), b = snapshot(flat);
  EXPECT_FALSE(bitwise_equal(a.at("backbone.block1.conv1.weight"), b.at("backbone.block1.conv1.weight")));
  EXPECT_FALSE(bitwise_equal(a.at("stage_head1.fc2.weight"), b.at("stage_head1.fc2.weight")));
}

TEST(TrainBatch, NonFiniteLossNamesThePass) {
  Prenet<float> model(small_model(2, 3), 7);
  Rng rng(8);
  Tensor<float> x = noise_batch(2, 16, rng);
  x[0] = std::numeric_limits<float>::quiet_NaN();
  Sgd<float> opt(1e-2);
  const std::vector<int> labels{0, 1};
  try {
    train_batch<float>(model, x, labels, make_schedule(2, 2), opt, LossWeights{});
    FAIL() << "expected a non-finite loss error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("pass 1"), std::string::npos) << e.what();
  }
}

TEST(TrainBatch, ScheduleMustMatchModel) {
  Prenet<float> model(small_model(2, 3), 9);
  Sgd<float> opt;
  Rng rng(10);
  const std::vector<int> labels{0};
  EXPECT_THROW(train_batch<float>(model, noise_batch(1, 16, rng), labels, make_schedule(3, 3), opt, LossWeights{}),
               std::invalid_argument);
}

TEST(Sgd, MomentumAndWeightDecayOnAQuadratic) {
  // f(p) = 0.5 * p^2 so grad = p; hand-unrolled recurrence.
  Var<double> p(Tensor<double>({1}, 2.0), true);
  StateDict<double> params;
  params.push_back({"p", &p.mutable_value(), p});
  Sgd<double> opt(0.1, 0.9, 0.01);
  double value = 2.0, buf = 0.0;
  for (int step = 0; step < 20; ++step) {
    p.zero_grad();
    weighted_sum(p, Tensor<double>(p.value())).backward();
    ASSERT_EQ(opt.step(params), 1u);
    const double g = value + 0.01 * value;
    buf = step == 0 ? g : 0.9 * buf + g;
    value -= 0.1 * buf;
    ASSERT_NEAR(p.value()[0], value, 1e-12) << "step " << step;
  }
  p.zero_grad();
  EXPECT_EQ(opt.step(params), 0u);
  EXPECT_NEAR(p.value()[0], value, 1e-15);
}

TEST(LearningRate, StepDecayExactValues) {
  TrainConfig cfg;
  EXPECT_EQ(lr_at(0, cfg), 1e-3);
  EXPECT_EQ(lr_at(1, cfg), 1e-3);
  EXPECT_EQ(lr_at(2, cfg), 9e-4);
  EXPECT_EQ(lr_at(3, cfg), 9e-4);
  EXPECT_EQ(lr_at(4, cfg), 8.1e-4);
  EXPECT_NEAR(lr_at(29, cfg), 1e-3 * std::pow(0.9, 14), 1e-15);
  for (int e = 1; e < 60; ++e) EXPECT_LE(lr_at(e, cfg), lr_at(e - 1, cfg));
  EXPECT_THROW(lr_at(-1, cfg), std::invalid_argument);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.steps = 4;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.steps = 0;
  EXPECT_NO_THROW(cfg.validate());
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Fit, ToyLossDecreases) {
  prenet::testing::TempDir dir;
  write_toy_dataset(dir.path() / "data", ToyDatasetSpec{16, 64, 3});
  RunConfig cfg = toy_run_config();
  cfg.train.epochs = 5;
  cfg.output_dir = (dir.path() / "run").string();
  ImageDataset data(build_manifest(dir.path() / "data"));
  SplitManifest split;
  for (std::size_t i = 0; i < data.manifest().entries.size(); ++i) split.train.push_back(i);
  FitOptions opts;
  opts.write_artifacts = false;
  const auto result = fit(cfg, data, split, opts);
  const auto& batches = result.log.batches;
  ASSERT_EQ(batches.size(), 5u * 8u);
  std::vector<double> first, last;
  for (std::size_t i = 0; i < 10; ++i) {
    first.push_back(batches[i].loss.concat_ce + batches[i].pass_losses[0]);
    last.push_back(batches[batches.size() - 1 - i].loss.concat_ce + batches[batches.size() - 1 - i].pass_losses[0]);
  }
  EXPECT_LT(median(last), median(first));
  ASSERT_EQ(result.log.epochs.size(), 5u);
  EXPECT_TRUE(std::isnan(result.log.epochs[0].val_top1));
  EXPECT_EQ(result.log.epochs[2].lr, 9e-4);
}
