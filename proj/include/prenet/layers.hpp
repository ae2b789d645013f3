#ifndef PRENET_LAYERS_HPP
#define PRENET_LAYERS_HPP

#include "prenet/ops.hpp"
#include "prenet/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace prenet {

/// One named tensor of a model's state. `param` is defined for trainable
/// tensors and empty for buffers such as running statistics.
template <typename Scalar>
struct StateEntry {
  std::string name;
  Tensor<Scalar>* tensor;
  Var<Scalar> param;
};

template <typename Scalar>
using StateDict = std::vector<StateEntry<Scalar>>;

template <typename Scalar>
Var<Scalar> parameter(Shape shape) {
  return Var<Scalar>(Tensor<Scalar>(std::move(shape)), true);
}

template <typename Scalar>
void fill_normal(Tensor<Scalar>& t, Rng& rng, double stddev) {
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.normal() * stddev);
}

template <typename Scalar>
void fill_uniform(Tensor<Scalar>& t, Rng& rng, double bound) {
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
}

template <typename Scalar>
struct Conv2d {
  Var<Scalar> weight;
  Var<Scalar> bias;
  Index stride = 1;
  Index pad = 0;

  Conv2d() = default;
  /// He-normal init over fan-out, as for rectified conv stacks.
  Conv2d(Index in, Index out, Index kernel, Index stride_, Index pad_, bool with_bias, Rng& rng)
      : weight(parameter<Scalar>({out, in, kernel, kernel})), stride(stride_), pad(pad_) {
    fill_normal(weight.mutable_value(), rng, std::sqrt(2.0 / double(out * kernel * kernel)));
    if (with_bias) bias = parameter<Scalar>({out});
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, stride, pad); }

  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    dict.push_back({prefix + "weight", &weight.mutable_value(), weight});
    if (bias.defined()) dict.push_back({prefix + "bias", &bias.mutable_value(), bias});
  }
};

template <typename Scalar>
struct BatchNorm {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  NormStats<Scalar> stats;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(Index channels)
      : gamma(Var<Scalar>(Tensor<Scalar>({channels}, Scalar(1)), true)),
        beta(parameter<Scalar>({channels})),
        stats{Tensor<Scalar>({channels}), Tensor<Scalar>({channels}, Scalar(1))} {}

  Var<Scalar> operator()(const Var<Scalar>& x, bool training) {
    return batch_norm(x, gamma, beta, stats, training, momentum, eps);
  }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    dict.push_back({prefix + "weight", &gamma.mutable_value(), gamma});
    dict.push_back({prefix + "bias", &beta.mutable_value(), beta});
    dict.push_back({prefix + "running_mean", &stats.mean, {}});
    dict.push_back({prefix + "running_var", &stats.var, {}});
  }
};

template <typename Scalar>
struct Linear {
  Var<Scalar> weight;
  Var<Scalar> bias;

  Linear() = default;
  /// Uniform(+-1/sqrt(in)) init for weight and bias.
  Linear(Index in, Index out, Rng& rng, bool with_bias = true) : weight(parameter<Scalar>({out, in})) {
    const double bound = 1.0 / std::sqrt(double(in));
    fill_uniform(weight.mutable_value(), rng, bound);
    if (with_bias) {
      bias = parameter<Scalar>({out});
      fill_uniform(bias.mutable_value(), rng, bound);
    }
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }

  Index in_features() const { return weight.dim(1); }
  Index out_features() const { return weight.dim(0); }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    dict.push_back({prefix + "weight", &weight.mutable_value(), weight});
    if (bias.defined()) dict.push_back({prefix + "bias", &bias.mutable_value(), bias});
  }
};

}  // namespace prenet

#endif  // PRENET_LAYERS_HPP
