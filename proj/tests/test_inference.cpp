#include "prenet/inference.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace prenet;

namespace {

Tensor<double> log_rows(std::initializer_list<std::initializer_list<double>> probs) {
  const Index rows = Index(probs.size()), cols = Index(probs.begin()->size());
  Tensor<double> t({rows, cols});
  Index i = 0;
  for (const auto& row : probs)
    for (double p : row) t[i++] = std::log(p);
  return t;
}

Tensor<double> random_logits(Index n, Index c, Rng& rng, double scale = 2.0) {
  Tensor<double> t({n, c});
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

template <typename Scalar>
Tensor<Scalar> noise_images(Index n, Index side, Rng& rng) {
  Tensor<Scalar> t({n, 3, side, side});
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(rng.normal());
  return t;
}

ModelConfig small_model(int classes = 4, int stages = 3) {
  ModelConfig c;
  c.num_classes = classes;
  c.stages = stages;
  c.neck_dim = 8;
  c.classifier_hidden = 16;
  c.attention.token_grid = 2;
  c.attention.attn_dim = 8;
  return c;
}

// One stage whose map is the input image itself.
class Passthrough final : public Backbone<double> {
 public:
  const BackboneSpec& spec() const override { return spec_; }
  void collect(StateDict<double>&, const std::string&) override {}

 protected:
  std::vector<Var<double>> run(const Var<double>& x, bool, int) override { return {x}; }

 private:
  BackboneSpec spec_{"passthrough", 1, {3}, {1}, ""};
};

void fill(Var<double>& v, double value) { v.mutable_value().array() = value; }

}  // namespace

TEST(Combine, HandExample) {
  const auto concat = log_rows({{0.2, 0.8}});
  const auto preds = combine_heads(concat, {log_rows({{0.6, 0.4}}), log_rows({{0.1, 0.9}})});
  ASSERT_EQ(preds.size(), 1u);
  EXPECT_NEAR(preds[0].combined_scores(0), 0.9, 1e-12);
  EXPECT_NEAR(preds[0].combined_scores(1), 2.1, 1e-12);
  EXPECT_EQ(preds[0].predicted_class, 1);
  EXPECT_NEAR(preds[0].concat_probs(1), 0.8, 1e-12);
}

TEST(Combine, IdenticalHeadsKeepTheSingleHeadArgmax) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> l = random_logits(3, 5, rng);
    const auto preds = combine_heads(l, {l, l, l});
    for (Index r = 0; r < 3; ++r) EXPECT_EQ(preds[std::size_t(r)].predicted_class, argmax(l.matrix().row(r)));
  }
}

TEST(Combine, CombinationCanOverruleTheConcatHead) {
  // Enumerate rows on a 0.1 grid until the concat argmax loses to the sum.
  std::vector<std::array<double, 3>> grid;
  for (int a = 1; a <= 8; ++a)
    for (int b = 1; a + b <= 9; ++b) grid.push_back({a / 10.0, b / 10.0, (10 - a - b) / 10.0});
  bool found = false;
  for (std::size_t i = 0; i < grid.size() && !found; ++i)
    for (std::size_t j = 0; j < grid.size() && !found; ++j) {
      const auto& c = grid[i];
      const auto& s = grid[j];
      const auto preds = combine_heads(log_rows({{c[0], c[1], c[2]}}), {log_rows({{s[0], s[1], s[2]}})});
      int concat_best = 0;
      for (int k = 1; k < 3; ++k)
        if (c[std::size_t(k)] > c[std::size_t(concat_best)]) concat_best = k;
      if (preds[0].predicted_class != concat_best && c[std::size_t(concat_best)] > c[std::size_t(preds[0].predicted_class)]) {
        found = true;
        EXPECT_NE(argmax(preds[0].concat_probs), preds[0].predicted_class);
      }
    }
  EXPECT_TRUE(found);
}

TEST(Combine, ScoresSumToHeadCountAndRowsAreDistributions) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Index stages = 1 + Index(rng.below(4)), c = 2 + Index(rng.below(6));
    std::vector<Tensor<double>> heads;
    for (Index u = 0; u < stages; ++u) heads.push_back(random_logits(2, c, rng, 5.0));
    for (const auto& p : combine_heads(random_logits(2, c, rng, 5.0), heads)) {
      ASSERT_NEAR(p.combined_scores.sum(), double(stages + 1), 1e-5);
      ASSERT_NEAR(p.concat_probs.sum(), 1.0, 1e-6);
      for (const auto& s : p.per_stage_probs) ASSERT_NEAR(s.sum(), 1.0, 1e-6);
      ASSERT_EQ(p.predicted_class, argmax(p.combined_scores));
    }
  }
}

TEST(Combine, ShiftInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> concat = random_logits(4, 5, rng);
    const std::vector<Tensor<double>> heads{random_logits(4, 5, rng), random_logits(4, 5, rng)};
    const double shift = rng.uniform(-50, 50);
    Tensor<double> shifted = concat;
    shifted.array() += shift;
    std::vector<Tensor<double>> shifted_heads = heads;
    for (auto& h : shifted_heads) h.array() += shift;
    const auto a = combine_heads(concat, heads), b = combine_heads(shifted, shifted_heads);
    for (std::size_t r = 0; r < a.size(); ++r) ASSERT_EQ(a[r].predicted_class, b[r].predicted_class);
  }
}

TEST(Combine, LogitModeSumsRawScores) {
  const auto concat = log_rows({{0.2, 0.8}});
  const auto stage = log_rows({{0.6, 0.4}});
  const auto p = combine_heads(concat, {stage}, CombineMode::Logit).front();
  EXPECT_NEAR(p.combined_scores(0), std::log(0.2) + std::log(0.6), 1e-12);
  EXPECT_THROW(combine_heads(concat, {log_rows({{0.3, 0.3, 0.4}})}), std::invalid_argument);
}

TEST(TopK, HandRanking) {
  Eigen::MatrixXd scores(2, 3);
  scores << 0.2, 0.5, 0.3, 0.9, 0.05, 0.05;
  const std::vector<int> labels{2, 0};
  EXPECT_DOUBLE_EQ(topk_accuracy(scores, labels, 1), 0.5);
  EXPECT_DOUBLE_EQ(topk_accuracy(scores, labels, 2), 1.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(scores, labels, 3), 1.0);
  EXPECT_THROW(topk_accuracy(scores, labels, 4), std::invalid_argument);
  EXPECT_THROW(topk_accuracy(scores, labels, 0), std::invalid_argument);
}

TEST(TopK, OneHotRowsAndTieBreak) {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  const std::vector<int> labels{0, 1, 2, 3};
  EXPECT_DOUBLE_EQ(topk_accuracy(eye, labels, 1), 1.0);
  const Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(1, 3, 0.5);
  const std::vector<int> low{0}, high{2};
  EXPECT_DOUBLE_EQ(topk_accuracy(flat, low, 1), 1.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(flat, high, 2), 0.0);
}

TEST(TopK, MonotoneInK) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + Index(rng.below(10)), c = 2 + Index(rng.below(8));
    const Tensor<double> s = random_logits(n, c, rng);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = int(rng.below(std::uint64_t(c)));
    double prev = 0;
    for (int k = 1; k <= int(c); ++k) {
      const double acc = topk_accuracy(s.matrix(), labels, k);
      ASSERT_GE(acc, prev);
      prev = acc;
    }
    ASSERT_DOUBLE_EQ(prev, 1.0);
  }
}

TEST(Predict, MatchesPerSampleLoop) {
  Rng rng(5);
  Prenet<double> model(small_model(), 6);
  int cases = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + Index(rng.below(4)), side = 16 + 4 * Index(rng.below(3));
    const Tensor<double> batch = noise_images<double>(n, side, rng);
    const auto together = predict(model, batch);
    ASSERT_EQ(together.size(), std::size_t(n));
    for (Index i = 0; i < n; ++i) {
      Tensor<double> one({1, 3, side, side});
      one.array() = batch.array().segment(i * 3 * side * side, 3 * side * side);
      const auto alone = predict(model, one).front();
      const auto& joint = together[std::size_t(i)];
      ASSERT_LT((alone.combined_scores - joint.combined_scores).cwiseAbs().maxCoeff(), 1e-9);
      ASSERT_LT((alone.concat_probs - joint.concat_probs).cwiseAbs().maxCoeff(), 1e-9);
      ASSERT_EQ(alone.predicted_class, joint.predicted_class);
      ++cases;
    }
  }
  EXPECT_GE(cases, 50);
}

TEST(Evaluate, UntrainedModelIsAtChance) {
  const int classes = 4;
  const std::size_t samples = 640;
  Prenet<float> model(small_model(classes), 7);
  Rng rng(8);
  std::size_t produced = 0;
  auto next = [&]() -> std::optional<LabeledBatch> {
    if (produced == samples) return std::nullopt;
    LabeledBatch b{noise_images<float>(32, 16, rng), {}};
    for (int i = 0; i < 32; ++i) b.labels.push_back(int(rng.below(classes)));
    produced += 32;
    return b;
  };
  const auto report = evaluate<float>(model, next);
  EXPECT_EQ(report.n_samples, samples);
  const double p = 1.0 / classes;
  const double half_width = 3.29 * std::sqrt(p * (1 - p) / double(samples));  // 99.9% normal interval
  EXPECT_NEAR(report.top1, p, half_width);
  EXPECT_GE(report.top5, report.top1);
  EXPECT_DOUBLE_EQ(report.top5, 1.0);  // top-min(5, 4)
  ASSERT_EQ(report.per_stage_top1.size(), 3u);
}

TEST(Evaluate, DeterministicAndRejectsEmpty) {
  Prenet<float> model(small_model(), 9);
  auto source = [](std::uint64_t seed) {
    return [seed, count = 0]() mutable -> std::optional<LabeledBatch> {
      if (count++ == 3) return std::nullopt;
      Rng rng{seed, std::uint64_t(count)};
      return LabeledBatch{noise_images<float>(5, 16, rng), {0, 1, 2, 3, 0}};
    };
  };
  const auto a = evaluate<float>(model, source(1));
  const auto b = evaluate<float>(model, source(1));
  EXPECT_EQ(a.top1, b.top1);
  EXPECT_EQ(a.top5, b.top5);
  EXPECT_EQ(a.per_stage_top1, b.per_stage_top1);
  EXPECT_EQ(a.concat_top1, b.concat_top1);
  EXPECT_EQ(a.n_samples, 15u);
  EXPECT_THROW(evaluate<float>(model, [] { return std::optional<LabeledBatch>{}; }), std::invalid_argument);
}

TEST(GradCam, LinearMapOracle) {
  Tensor<double> act({1, 2, 3, 3});
  Tensor<double> grad({1, 2, 3, 3});
  for (Index i = 0; i < 9; ++i) {
    act[i] = double(i);          // channel 0
    act[9 + i] = double(8 - i);  // channel 1
    grad[i] = 2.0 / 9.0;
    grad[9 + i] = 1.0 / 9.0;
  }
  // channel weights are the gradient means 2/9 and 1/9
  const auto cam = grad_cam_map(act, grad);
  const double peak = 2.0 / 9.0 * 8;
  for (Index i = 0; i < 9; ++i) EXPECT_NEAR(cam[i], (2.0 / 9.0 * i + 1.0 / 9.0 * (8 - i)) / peak, 1e-12);
  Tensor<double> negative = grad;
  negative.array() = -negative.array();
  const auto zero = grad_cam_map(act, negative);
  for (Index i = 0; i < zero.size(); ++i) EXPECT_EQ(zero[i], 0.0);
}

TEST(GradCam, BrightPatchPeaksInsideThePatch) {
  BackboneRegistry<double> registry;
  registry.register_backbone({"passthrough", 1, {3}, {1}, ""},
                             [](int, Rng&) { return std::make_unique<Passthrough>(); });
  ModelConfig cfg;
  cfg.backbone = "passthrough";
  cfg.num_classes = 2;
  cfg.stages = 1;
  cfg.neck_dim = 1;
  cfg.classifier_hidden = 1;
  cfg.attention.token_grid = 1;
  cfg.attention.attn_dim = 1;
  Prenet<double> model(cfg, 10, registry);
  // necked = relu(mean over channels); stage logit 0 grows with the pooled max.
  fill(model.neck(1).conv.weight, 1.0 / 3.0);
  auto& head = model.stage_head(1);
  fill(head.fc1.weight, 1.0);
  fill(head.fc1.bias, 0.0);
  head.fc2.weight.mutable_value().at(0, 0) = 1.0;
  head.fc2.weight.mutable_value().at(1, 0) = -1.0;
  fill(head.fc2.bias, 0.0);

  const Index side = 12;
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> image({3, side, side});
    for (Index i = 0; i < image.size(); ++i) image[i] = rng.uniform(0.0, 0.3);
    const Index r0 = Index(rng.below(side - 3)), c0 = Index(rng.below(side - 3));
    for (Index ch = 0; ch < 3; ++ch)
      for (Index r = r0; r < r0 + 3; ++r)
        for (Index c = c0; c < c0 + 3; ++c) image.at(ch, r, c) = 1.0;
    const auto set = stage_heatmaps(model, image, 0);
    ASSERT_EQ(set.names, (std::vector<std::string>{"stage1", "global"}));
    const auto& map = set.maps[0];
    ASSERT_EQ(map.shape(), (Shape{side, side}));
    Index best = 0;
    for (Index i = 1; i < map.size(); ++i)
      if (map[i] > map[best]) best = i;
    const Index br = best / side, bc = best % side;
    EXPECT_TRUE(br >= r0 && br < r0 + 3 && bc >= c0 && bc < c0 + 3) << "peak at " << br << "," << bc;
    EXPECT_FLOAT_EQ(map.array().maxCoeff(), 1.0f);
  }
}

TEST(GradCam, DeadHeadGivesAllZeroMaps) {
  Prenet<double> model(small_model(3, 2), 12);
  fill(model.stage_head(1).fc2.weight, 0.0);
  fill(model.stage_head(2).fc2.weight, 0.0);
  fill(model.concat_head().fc2.weight, 0.0);
  Rng rng(13);
  const auto set = stage_heatmaps(model, noise_images<double>(1, 16, rng).reshaped({3, 16, 16}), 1);
  ASSERT_EQ(set.maps.size(), 3u);
  for (const auto& m : set.maps) EXPECT_EQ(m.array().abs().maxCoeff(), 0.0f);
}

TEST(GradCam, MapsAreNormalisedAtInputResolution) {
  Prenet<double> model(small_model(), 14);
  Rng rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    const Index side = 16 + 8 * Index(rng.below(3));
    const auto set = stage_heatmaps(model, noise_images<double>(1, side, rng).reshaped({3, side, side}));
    ASSERT_EQ(set.maps.size(), 4u);
    EXPECT_EQ(set.names.back(), "global");
    EXPECT_EQ(set.target_class, set.prediction.predicted_class);
    for (const auto& m : set.maps) {
      ASSERT_EQ(m.shape(), (Shape{side, side}));
      EXPECT_GE(m.array().minCoeff(), 0.0f);
      EXPECT_LE(m.array().maxCoeff(), 1.0f);
    }
  }
  EXPECT_THROW(stage_heatmaps(model, noise_images<double>(1, 16, rng).reshaped({3, 16, 16}), 9), std::invalid_argument);
}
