#ifndef PRENET_TRAINER_HPP
#define PRENET_TRAINER_HPP

#include "prenet/losses.hpp"
#include "prenet/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

enum class PassLoss {
  StageCE,  // cross-entropy of the deepest stage in scope
  Total,    // balanced concat CE and stage divergence over the whole network
};

struct PassSpec {
  std::vector<int> scope;  // stage indices whose forward path runs
  PassLoss loss = PassLoss::StageCE;
  int target_stage = 0;  // classifier trained by a StageCE pass
};

/// S progressive passes over nested stage scopes, then one pass over the
/// full network with the concat head.
struct ProgressiveSchedule {
  int stages = 0;
  int steps = 0;
  std::vector<PassSpec> passes;
};

/// Pass s (1..S) covers stages 1..(U-S+s); the last pass covers all stages
/// plus the concat head. S = 0 leaves only the final pass.
inline ProgressiveSchedule make_schedule(int stages, int steps) {
  if (stages < 1) throw std::invalid_argument("stage count must be >= 1");
  if (steps < 0 || steps > stages)
    throw std::invalid_argument("progressive steps " + std::to_string(steps) + " must lie in [0, " +
                                std::to_string(stages) + "]");
  ProgressiveSchedule s{stages, steps, {}};
  for (int p = 1; p <= steps; ++p) {
    PassSpec spec;
    const int deepest = stages - steps + p;
    for (int u = 1; u <= deepest; ++u) spec.scope.push_back(u);
    spec.target_stage = deepest;
    s.passes.push_back(std::move(spec));
  }
  PassSpec last;
  for (int u = 1; u <= stages; ++u) last.scope.push_back(u);
  last.loss = PassLoss::Total;
  s.passes.push_back(std::move(last));
  return s;
}

enum class ScheduleMode {
  PerBatch,  // every batch runs all S+1 passes
  PerEpoch,  // epoch e runs only pass (e mod (S+1))
};

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double lr_decay = 0.9;
  int lr_decay_every = 2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int stages = 3;
  int steps = 3;
  double alpha = 0.8;
  double beta = 0.2;
  KlSign kl_sign = KlSign::Maximize;
  bool symmetric_kl = false;
  ScheduleMode schedule_mode = ScheduleMode::PerBatch;
  std::uint64_t seed = 0;
  std::string checkpoint_dir = "checkpoints";
  std::string backbone = "tiny3";

  LossWeights weights() const { return {alpha, beta, kl_sign, symmetric_kl}; }

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(base_lr > 0) || !(lr_decay > 0) || lr_decay_every < 1) throw std::invalid_argument("learning-rate settings must be positive");
    if (!(momentum >= 0) || !(weight_decay >= 0)) throw std::invalid_argument("momentum and weight_decay must be nonnegative");
    if (steps < 0 || steps > stages) throw std::invalid_argument("steps must lie in [0, stages]");
    weights().validate();
  }
};

/// base_lr * decay^floor(epoch / every), rounded to 15 significant digits
/// (1e-3 at epoch 2 gives exactly 9e-4).
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  const double raw = cfg.base_lr * std::pow(cfg.lr_decay, double(epoch / cfg.lr_decay_every));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.15g", raw);
  return std::strtod(buf, nullptr);
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
///   buf <- momentum * buf + (grad + wd * p);  p <- p - lr * buf.
/// Parameters without a gradient in the current pass are skipped entirely.
template <typename Scalar>
class Sgd {
 public:
  double lr;
  double momentum;
  double weight_decay;

  explicit Sgd(double lr_ = 1e-3, double momentum_ = 0.9, double weight_decay_ = 1e-4)
      : lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {}

  /// Returns the number of parameters updated.
  std::size_t step(StateDict<Scalar>& params) {
    std::size_t updated = 0;
    for (auto& e : params) {
      if (!e.param.defined() || !e.param.has_grad()) continue;
      auto& p = e.tensor->array();
      typename Tensor<Scalar>::Array g = e.param.grad().array() + Scalar(weight_decay) * p;
      auto it = buffers_.find(e.name);
      if (momentum != 0) {
        if (it == buffers_.end()) {
          it = buffers_.emplace(e.name, Tensor<Scalar>(e.tensor->shape(), std::move(g))).first;
        } else {
          it->second.array() = Scalar(momentum) * it->second.array() + g;
        }
        p -= Scalar(lr) * it->second.array();
      } else {
        p -= Scalar(lr) * g;
      }
      ++updated;
    }
    return updated;
  }

  const std::map<std::string, Tensor<Scalar>>& buffers() const { return buffers_; }
  std::map<std::string, Tensor<Scalar>>& buffers() { return buffers_; }

 private:
  std::map<std::string, Tensor<Scalar>> buffers_;
};

struct BatchReport {
  std::vector<double> pass_losses;  // one per executed pass, in order
  LossReport loss;                  // from the final pass (when executed)
};

template <typename Scalar>
using PassObserver = std::function<void(std::size_t pass_index, const PassSpec& pass)>;

/// Runs the schedule's passes sequentially on one batch, each with its own
/// forward, backward and optimizer step. Later passes see the updates of
/// earlier ones. `only_pass` restricts execution to one pass index.
template <typename Scalar>
BatchReport train_batch(Prenet<Scalar>& model, const Tensor<Scalar>& images, std::span<const int> labels,
                        const ProgressiveSchedule& schedule, Sgd<Scalar>& optimizer, const LossWeights& weights,
                        const PassObserver<Scalar>& observer = {}, std::optional<std::size_t> only_pass = std::nullopt) {
  if (schedule.stages != model.num_stages())
    throw std::invalid_argument("schedule covers " + std::to_string(schedule.stages) + " stages, model has " +
                                std::to_string(model.num_stages()));
  BatchReport report;
  StateDict<Scalar> params = model.parameters();
  const Var<Scalar> x(images);
  for (std::size_t i = 0; i < schedule.passes.size(); ++i) {
    if (only_pass && *only_pass != i) continue;
    const PassSpec& pass = schedule.passes[i];
    model.zero_grad();
    Var<Scalar> loss;
    if (pass.loss == PassLoss::StageCE) {
      loss = stage_ce(model.forward_stage(x, pass.target_stage, true).stage_logits, labels);
    } else {
      ForwardOutputs<Scalar> out = model.forward_all(x, true);
      Var<Scalar> ce = concat_ce(out.concat_logits, labels);
      std::vector<Var<Scalar>> dists;
      report.loss.per_stage_ce.clear();
      for (const auto& b : out.bundles) {
        dists.push_back(softmax(b.stage_logits));
        NoGradGuard ng;
        report.loss.per_stage_ce.push_back(double(stage_ce(b.stage_logits.detach(), labels).value().item()));
      }
      Var<Scalar> kl = pairwise_kl(dists, weights.symmetric_kl);
      loss = total_loss(ce, kl, weights);
      report.loss.concat_ce = double(ce.value().item());
      report.loss.kl_term = double(kl.value().item());
      report.loss.total = double(loss.value().item());
    }
    const double value = double(loss.value().item());
    if (!std::isfinite(value))
      throw std::runtime_error("non-finite loss in pass " + std::to_string(i + 1) + " of " +
                               std::to_string(schedule.passes.size()));
    report.pass_losses.push_back(value);
    loss.backward();
    optimizer.step(params);
    model.zero_grad();
    if (observer) observer(i, pass);
  }
  return report;
}

}  // namespace prenet

#endif  // PRENET_TRAINER_HPP
