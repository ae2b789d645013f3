#ifndef PRENET_INFERENCE_HPP
#define PRENET_INFERENCE_HPP

#include "prenet/data.hpp"
#include "prenet/model.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

enum class CombineMode {
  Probability,  // sum of per-head softmax rows
  Logit,        // sum of raw logits
};

template <typename Scalar>
struct CombinedPrediction {
  std::vector<Vector<Scalar>> per_stage_probs;
  Vector<Scalar> concat_probs;
  Vector<Scalar> combined_scores;
  int predicted_class = 0;
};

/// Index of the largest entry; ties go to the lower index.
template <typename Derived>
int argmax(const Eigen::DenseBase<Derived>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = i;
  return int(best);
}

/// Equal-weight combination of the concat head and every stage head.
template <typename Scalar>
std::vector<CombinedPrediction<Scalar>> combine_heads(const Tensor<Scalar>& concat_logits,
                                                      const std::vector<Tensor<Scalar>>& stage_logits,
                                                      CombineMode mode = CombineMode::Probability) {
  const Tensor<Scalar> cp = softmax_rows(concat_logits);
  std::vector<Tensor<Scalar>> sp;
  for (const auto& l : stage_logits) {
    if (l.shape() != concat_logits.shape()) throw std::invalid_argument("combine_heads: head shapes differ");
    sp.push_back(softmax_rows(l));
  }
  const Index n = concat_logits.dim(0);
  std::vector<CombinedPrediction<Scalar>> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    auto& p = out[std::size_t(r)];
    p.concat_probs = cp.matrix().row(r).transpose();
    p.combined_scores = mode == CombineMode::Probability ? p.concat_probs : Vector<Scalar>(concat_logits.matrix().row(r).transpose());
    for (std::size_t u = 0; u < sp.size(); ++u) {
      p.per_stage_probs.push_back(sp[u].matrix().row(r).transpose());
      if (mode == CombineMode::Probability)
        p.combined_scores += p.per_stage_probs.back();
      else
        p.combined_scores += stage_logits[u].matrix().row(r).transpose();
    }
    p.predicted_class = argmax(p.combined_scores);
  }
  return out;
}

/// Eval-mode forward and combined prediction for every image in the batch.
template <typename Scalar>
std::vector<CombinedPrediction<Scalar>> predict(Prenet<Scalar>& model, const Tensor<Scalar>& images,
                                                CombineMode mode = CombineMode::Probability) {
  NoGradGuard no_grad;
  ForwardOutputs<Scalar> out = model.forward_all(Var<Scalar>(images), false);
  std::vector<Tensor<Scalar>> stages;
  for (const auto& b : out.bundles) stages.push_back(b.stage_logits.value());
  return combine_heads(out.concat_logits.value(), stages, mode);
}

/// Fraction of rows whose label ranks among the k highest scores, with
/// ties ranked by lower class index.
template <typename Derived>
double topk_accuracy(const Eigen::MatrixBase<Derived>& scores, std::span<const int> labels, int k) {
  if (k < 1 || k > scores.cols())
    throw std::invalid_argument("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(scores.cols()) + "]");
  if (Index(labels.size()) != scores.rows()) throw std::invalid_argument("topk_accuracy: label count mismatch");
  if (scores.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (Index r = 0; r < scores.rows(); ++r) {
    const int y = labels[std::size_t(r)];
    Index rank = 0;
    for (Index c = 0; c < scores.cols(); ++c)
      if (scores(r, c) > scores(r, y) || (scores(r, c) == scores(r, y) && c < y)) ++rank;
    if (rank < k) ++hits;
  }
  return double(hits) / double(scores.rows());
}

struct MetricsReport {
  double top1 = 0;
  double top5 = 0;  // top-min(5, classes)
  std::vector<double> per_stage_top1;
  double concat_top1 = 0;
  std::size_t n_samples = 0;
};

/// Streams batches from `next` until it returns nullopt. Counts are
/// accumulated as integers so the report is independent of batching.
template <typename Scalar>
MetricsReport evaluate(Prenet<Scalar>& model, const std::function<std::optional<LabeledBatch>()>& next,
                       CombineMode mode = CombineMode::Probability) {
  const int classes = model.config().num_classes;
  const int k5 = std::min(5, classes);
  const int stages = model.num_stages();
  std::size_t n = 0, top1 = 0, top5 = 0, concat = 0;
  std::vector<std::size_t> stage_hits(std::size_t(stages), 0);
  while (auto batch = next()) {
    if (batch->labels.empty()) continue;
    auto preds = predict(model, batch->images.template cast<Scalar>(), mode);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const int y = batch->labels[i];
      const auto& p = preds[i];
      const std::span<const int> one(&batch->labels[i], 1);
      top1 += p.predicted_class == y;
      top5 += topk_accuracy(p.combined_scores.transpose(), one, k5) > 0;
      concat += argmax(p.concat_probs) == y;
      for (int u = 0; u < stages; ++u) stage_hits[std::size_t(u)] += argmax(p.per_stage_probs[std::size_t(u)]) == y;
    }
    n += preds.size();
  }
  if (n == 0) throw std::invalid_argument("evaluate: empty split");
  MetricsReport r;
  r.n_samples = n;
  r.top1 = double(top1) / double(n);
  r.top5 = double(top5) / double(n);
  r.concat_top1 = double(concat) / double(n);
  for (auto h : stage_hits) r.per_stage_top1.push_back(double(h) / double(n));
  return r;
}

/// Evaluation-preprocessed batches of `split` in manifest order.
template <typename Scalar>
MetricsReport evaluate(Prenet<Scalar>& model, ImageDataset& data, std::span<const std::size_t> split,
                       const AugmentConfig& cfg, std::size_t batch_size = 32, CombineMode mode = CombineMode::Probability) {
  const auto batches = make_batches(split, batch_size, std::nullopt);
  std::size_t next_batch = 0;
  return evaluate<Scalar>(
      model,
      [&]() -> std::optional<LabeledBatch> {
        if (next_batch == batches.size()) return std::nullopt;
        return data.eval_batch(batches[next_batch++], cfg);
      },
      mode);
}

// ---------------------------------------------------------------------------
// Class-activation heatmaps

/// Gradient-weighted activation map of one (1, C, h, w) activation:
/// relu(sum_c mean(grad_c) * act_c), scaled so the maximum is 1. An
/// all-zero map stays all zero.
template <typename Scalar>
Tensor<Scalar> grad_cam_map(const Tensor<Scalar>& activation, const Tensor<Scalar>& gradient) {
  if (activation.rank() != 4 || activation.dim(0) != 1 || !activation.same_shape(gradient))
    throw std::invalid_argument("grad_cam_map expects matching (1, C, h, w) activation and gradient");
  const Index c = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  auto a = activation.matrix(c, h * w);
  auto g = gradient.matrix(c, h * w);
  const Vector<Scalar> weights = g.rowwise().mean();
  Tensor<Scalar> cam({h, w});
  cam.matrix(1, h * w) = (weights.transpose() * a).array().max(Scalar(0)).matrix();
  const Scalar peak = cam.array().maxCoeff();
  if (peak > Scalar(0)) cam.array() /= peak;
  return cam;
}

template <typename Scalar>
struct HeatmapSet {
  std::vector<std::string> names;    // stage1..stageU, global
  std::vector<Tensor<float>> maps;   // (height, width) in [0, 1], input resolution
  int target_class = 0;
  CombinedPrediction<Scalar> prediction;
};

/// One heatmap per necked stage map (scored by that stage's logit) and one
/// for the deepest backbone map (scored by the concat logit), upsampled to
/// the input size. `image` is a preprocessed (3, H, W) tensor.
template <typename Scalar>
HeatmapSet<Scalar> stage_heatmaps(Prenet<Scalar>& model, const Tensor<Scalar>& image, std::optional<int> target_class = std::nullopt) {
  if (image.rank() != 3) throw std::invalid_argument("stage_heatmaps expects a (3, H, W) image");
  const Tensor<Scalar> batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  HeatmapSet<Scalar> set;
  set.prediction = predict(model, batch).front();
  set.target_class = target_class.value_or(set.prediction.predicted_class);
  if (set.target_class < 0 || set.target_class >= model.config().num_classes)
    throw std::invalid_argument("target class " + std::to_string(set.target_class) + " out of range");

  Tensor<Scalar> pick({1, Index(model.config().num_classes)});
  pick.at(0, set.target_class) = Scalar(1);
  const std::size_t heads = std::size_t(model.num_stages()) + 1;
  for (std::size_t k = 0; k < heads; ++k) {
    model.zero_grad();
    // Fresh graph per head so each map only sees its own score.
    ForwardOutputs<Scalar> o = model.forward_all(Var<Scalar>(batch), false);
    Var<Scalar> act = k < o.bundles.size() ? o.bundles[k].necked_map : o.final_map;
    Var<Scalar> score = k < o.bundles.size() ? o.bundles[k].stage_logits : o.concat_logits;
    weighted_sum(score, pick).backward();
    Tensor<Scalar> grad = act.has_grad() ? act.grad() : Tensor<Scalar>(act.shape());
    Tensor<float> cam = grad_cam_map(act.value(), grad).template cast<float>();
    set.maps.push_back(resize_map_bilinear(cam, image.dim(1), image.dim(2)));
    set.names.push_back(k < o.bundles.size() ? "stage" + std::to_string(k + 1) : "global");
  }
  model.zero_grad();
  return set;
}

}  // namespace prenet

#endif  // PRENET_INFERENCE_HPP
