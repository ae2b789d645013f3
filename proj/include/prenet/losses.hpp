#ifndef PRENET_LOSSES_HPP
#define PRENET_LOSSES_HPP

#include "prenet/ops.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

/// How the divergence term enters the total objective.
enum class KlSign {
  Maximize,  // L = alpha*L_con - beta*L_KL: minimising L pushes stages apart
  Literal,   // L = alpha*L_con + beta*L_KL
};

struct LossWeights {
  double alpha = 0.8;
  double beta = 0.2;
  KlSign sign = KlSign::Maximize;
  bool symmetric_kl = false;

  void validate() const {
    if (!(alpha >= 0) || !(beta >= 0)) throw std::invalid_argument("loss weights must be nonnegative");
    if (alpha == 0 && beta == 0) throw std::invalid_argument("alpha and beta cannot both be zero");
  }
};

struct LossReport {
  std::vector<double> per_stage_ce;
  double concat_ce = 0;
  double kl_term = 0;
  double total = 0;
};

inline constexpr double kProbabilityFloor = 1e-12;

template <typename Scalar>
Var<Scalar> stage_ce(const Var<Scalar>& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels);
}

template <typename Scalar>
Var<Scalar> concat_ce(const Var<Scalar>& concat_logits, std::span<const int> labels) {
  return cross_entropy(concat_logits, labels);
}

/// Sum over adjacent stage pairs of batch-mean KL(y_u || y_{u+1})
/// (plus the reverse direction when `symmetric`). Fewer than two
/// distributions give zero.
template <typename Scalar>
Var<Scalar> pairwise_kl(const std::vector<Var<Scalar>>& stage_dists, bool symmetric = false, double tolerance = 1e-4) {
  for (std::size_t u = 0; u < stage_dists.size(); ++u) {
    const auto& p = stage_dists[u].value();
    if (p.rank() != 2) throw std::invalid_argument("pairwise_kl expects (batch, classes) distributions");
    auto m = p.matrix();
    for (Index r = 0; r < m.rows(); ++r) {
      const double s = double(m.row(r).sum());
      if (std::abs(s - 1.0) > tolerance || (m.row(r).array() < Scalar(0)).any())
        throw std::invalid_argument("stage " + std::to_string(u + 1) + " row " + std::to_string(r) +
                                    " is not a probability distribution (sums to " + std::to_string(s) + ")");
    }
  }
  if (stage_dists.size() < 2) return Var<Scalar>(Tensor<Scalar>::scalar(0));
  const Scalar floor = Scalar(kProbabilityFloor);
  Var<Scalar> total;
  for (std::size_t u = 0; u + 1 < stage_dists.size(); ++u) {
    Var<Scalar> term = kl_divergence(stage_dists[u], stage_dists[u + 1], floor);
    if (symmetric) term = add(term, kl_divergence(stage_dists[u + 1], stage_dists[u], floor));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename Scalar>
Var<Scalar> total_loss(const Var<Scalar>& concat_ce_value, const Var<Scalar>& kl_value, const LossWeights& w) {
  const Scalar kl_coeff = Scalar(w.sign == KlSign::Maximize ? -w.beta : w.beta);
  return axpby(Scalar(w.alpha), concat_ce_value, kl_coeff, kl_value);
}

}  // namespace prenet

#endif  // PRENET_LOSSES_HPP
