#ifndef PRENET_BACKBONE_HPP
#define PRENET_BACKBONE_HPP

#include "prenet/layers.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

/// Describes the stages a backbone exposes, shallow to deep.
struct BackboneSpec {
  std::string name;
  int num_stages_exposed = 0;
  std::vector<Index> stage_channels;
  std::vector<Index> stage_strides;
  std::string pretrained_source;

  void validate() const {
    if (num_stages_exposed < 1) throw std::invalid_argument("backbone '" + name + "' exposes no stages");
    if (stage_channels.size() != std::size_t(num_stages_exposed) || stage_strides.size() != std::size_t(num_stages_exposed))
      throw std::invalid_argument("backbone '" + name + "': stage lists do not match num_stages_exposed");
    if (!std::is_sorted(stage_strides.begin(), stage_strides.end()))
      throw std::invalid_argument("backbone '" + name + "': stage strides must be non-decreasing");
  }

  /// The deepest `count` stages of this spec.
  BackboneSpec last(int count) const {
    if (count < 1 || count > num_stages_exposed)
      throw std::invalid_argument("backbone '" + name + "' exposes " + std::to_string(num_stages_exposed) +
                                  " stages, " + std::to_string(count) + " requested");
    BackboneSpec out = *this;
    out.num_stages_exposed = count;
    out.stage_channels.assign(stage_channels.end() - count, stage_channels.end());
    out.stage_strides.assign(stage_strides.end() - count, stage_strides.end());
    return out;
  }
};

template <typename Scalar>
struct StageFeatureMap {
  int stage_index = 0;  // 1-based, shallow to deep
  Var<Scalar> tensor;   // (batch, channels, height, width)
};

template <typename Scalar>
struct BackboneOutputs {
  std::vector<StageFeatureMap<Scalar>> stages;
  StageFeatureMap<Scalar> final_map;  // deepest computed stage
};

template <typename Scalar>
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneSpec& spec() const = 0;
  virtual void collect(StateDict<Scalar>& dict, const std::string& prefix) = 0;

  /// Feature maps of exposed stages 1..upto (default: all).
  BackboneOutputs<Scalar> forward_stages(const Var<Scalar>& batch, bool training, int upto = 0) {
    const BackboneSpec& s = spec();
    if (upto <= 0) upto = s.num_stages_exposed;
    if (upto > s.num_stages_exposed)
      throw std::invalid_argument("stage " + std::to_string(upto) + " requested from a backbone exposing " +
                                  std::to_string(s.num_stages_exposed));
    if (batch.value().rank() != 4 || batch.dim(1) != 3)
      throw std::invalid_argument("backbone expects (batch, 3, height, width) input, got " + shape_string(batch.shape()));
    for (int u = 1; u <= upto; ++u) {
      const Index stride = s.stage_strides[std::size_t(u - 1)];
      if (batch.dim(2) < stride || batch.dim(3) < stride)
        throw std::invalid_argument("input " + std::to_string(batch.dim(2)) + "x" + std::to_string(batch.dim(3)) +
                                    " is smaller than the stride " + std::to_string(stride) + " of stage " +
                                    std::to_string(u));
    }
    std::vector<Var<Scalar>> maps = run(batch, training, upto);
    BackboneOutputs<Scalar> out;
    for (int u = 1; u <= upto; ++u) out.stages.push_back({u, maps[std::size_t(u - 1)]});
    out.final_map = out.stages.back();
    return out;
  }

 protected:
  /// Exposed stage outputs 1..upto.
  virtual std::vector<Var<Scalar>> run(const Var<Scalar>& x, bool training, int upto) = 0;
};

// ---------------------------------------------------------------------------

/// Three conv stages [8, 16, 32] at strides [2, 4, 8]; each stage is a
/// strided 3x3 conv followed by a 3x3 conv, both with norm and rectifier.
template <typename Scalar>
class Tiny3 final : public Backbone<Scalar> {
 public:
  static BackboneSpec full_spec() { return {"tiny3", 3, {8, 16, 32}, {2, 4, 8}, ""}; }

  Tiny3(int exposed, Rng& rng) : spec_(full_spec().last(exposed)) {
    Index in = 3;
    for (Index width : full_spec().stage_channels) {
      blocks_.push_back(Block{Conv2d<Scalar>(in, width, 3, 2, 1, false, rng), BatchNorm<Scalar>(width),
                              Conv2d<Scalar>(width, width, 3, 1, 1, false, rng), BatchNorm<Scalar>(width)});
      in = width;
    }
  }

  const BackboneSpec& spec() const override { return spec_; }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = prefix + "block" + std::to_string(i + 1) + ".";
      blocks_[i].conv1.collect(dict, p + "conv1.");
      blocks_[i].bn1.collect(dict, p + "bn1.");
      blocks_[i].conv2.collect(dict, p + "conv2.");
      blocks_[i].bn2.collect(dict, p + "bn2.");
    }
  }

 protected:
  std::vector<Var<Scalar>> run(const Var<Scalar>& x, bool training, int upto) override {
    const int hidden = int(blocks_.size()) - spec_.num_stages_exposed;
    std::vector<Var<Scalar>> maps;
    Var<Scalar> h = x;
    for (int i = 0; i < hidden + upto; ++i) {
      Block& b = blocks_[std::size_t(i)];
      h = relu(b.bn1(b.conv1(h), training));
      h = relu(b.bn2(b.conv2(h), training));
      if (i >= hidden) maps.push_back(h);
    }
    return maps;
  }

 private:
  struct Block {
    Conv2d<Scalar> conv1;
    BatchNorm<Scalar> bn1;
    Conv2d<Scalar> conv2;
    BatchNorm<Scalar> bn2;
  };
  BackboneSpec spec_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------

/// 50-layer bottleneck residual network. The four residual layers sit at
/// strides 4/8/16/32 with 256/512/1024/2048 channels; the last `exposed`
/// layers become stages. Parameter names follow the common
/// conv1/bn1/layerN.B.convK layout so converted weights load directly.
template <typename Scalar>
class ResNet50 final : public Backbone<Scalar> {
 public:
  static BackboneSpec full_spec() { return {"resnet50", 4, {256, 512, 1024, 2048}, {4, 8, 16, 32}, ""}; }

  ResNet50(int exposed, Rng& rng)
      : spec_(full_spec().last(exposed)), conv1_(3, 64, 7, 2, 3, false, rng), bn1_(64) {
    const int blocks[4] = {3, 4, 6, 3};
    const Index widths[4] = {64, 128, 256, 512};
    Index in = 64;
    for (int l = 0; l < 4; ++l) {
      std::vector<Bottleneck> layer;
      for (int b = 0; b < blocks[l]; ++b) {
        const Index stride = (b == 0 && l > 0) ? 2 : 1;
        layer.emplace_back(in, widths[l], stride, rng);
        in = widths[l] * 4;
      }
      layers_.push_back(std::move(layer));
    }
  }

  const BackboneSpec& spec() const override { return spec_; }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) override {
    conv1_.collect(dict, prefix + "conv1.");
    bn1_.collect(dict, prefix + "bn1.");
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (std::size_t b = 0; b < layers_[l].size(); ++b)
        layers_[l][b].collect(dict, prefix + "layer" + std::to_string(l + 1) + "." + std::to_string(b) + ".");
  }

 protected:
  std::vector<Var<Scalar>> run(const Var<Scalar>& x, bool training, int upto) override {
    const int hidden = 4 - spec_.num_stages_exposed;
    Var<Scalar> h = relu(bn1_(conv1_(x), training));
    h = max_pool2d(h, 3, 2, 1);
    std::vector<Var<Scalar>> maps;
    for (int l = 0; l < hidden + upto; ++l) {
      for (auto& block : layers_[std::size_t(l)]) h = block(h, training);
      if (l >= hidden) maps.push_back(h);
    }
    return maps;
  }

 private:
  struct Bottleneck {
    Conv2d<Scalar> conv1, conv2, conv3;
    BatchNorm<Scalar> bn1, bn2, bn3;
    bool has_downsample = false;
    Conv2d<Scalar> down_conv;
    BatchNorm<Scalar> down_bn;

    Bottleneck(Index in, Index width, Index stride, Rng& rng)
        : conv1(in, width, 1, 1, 0, false, rng),
          conv2(width, width, 3, stride, 1, false, rng),
          conv3(width, width * 4, 1, 1, 0, false, rng),
          bn1(width),
          bn2(width),
          bn3(width * 4) {
      if (stride != 1 || in != width * 4) {
        has_downsample = true;
        down_conv = Conv2d<Scalar>(in, width * 4, 1, stride, 0, false, rng);
        down_bn = BatchNorm<Scalar>(width * 4);
      }
    }

    Var<Scalar> operator()(const Var<Scalar>& x, bool training) {
      Var<Scalar> h = relu(bn1(conv1(x), training));
      h = relu(bn2(conv2(h), training));
      h = bn3(conv3(h), training);
      Var<Scalar> skip = has_downsample ? down_bn(down_conv(x), training) : x;
      return relu(add(h, skip));
    }

    void collect(StateDict<Scalar>& dict, const std::string& p) {
      conv1.collect(dict, p + "conv1.");
      bn1.collect(dict, p + "bn1.");
      conv2.collect(dict, p + "conv2.");
      bn2.collect(dict, p + "bn2.");
      conv3.collect(dict, p + "conv3.");
      bn3.collect(dict, p + "bn3.");
      if (has_downsample) {
        down_conv.collect(dict, p + "downsample.0.");
        down_bn.collect(dict, p + "downsample.1.");
      }
    }
  };

  BackboneSpec spec_;
  Conv2d<Scalar> conv1_;
  BatchNorm<Scalar> bn1_;
  std::vector<std::vector<Bottleneck>> layers_;
};

// ---------------------------------------------------------------------------

/// Name -> constructor table. Each entry's spec lists every stage the
/// backbone can expose; `create` takes the deepest `num_stages` of them.
template <typename Scalar>
class BackboneRegistry {
 public:
  using Constructor = std::function<std::unique_ptr<Backbone<Scalar>>(int num_stages, Rng& rng)>;
  struct Entry {
    BackboneSpec spec;
    Constructor make;
  };

  const Entry& register_backbone(BackboneSpec spec, Constructor make) {
    spec.validate();
    if (entries_.count(spec.name)) throw std::invalid_argument("backbone '" + spec.name + "' is already registered");
    const std::string name = spec.name;
    return entries_.emplace(name, Entry{std::move(spec), std::move(make)}).first->second;
  }

  const Entry& lookup(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      std::string known;
      for (const auto& n : names()) known += (known.empty() ? "" : ", ") + n;
      throw std::invalid_argument("unknown backbone '" + name + "' (registered: " + known + ")");
    }
    return it->second;
  }

  std::unique_ptr<Backbone<Scalar>> create(const std::string& name, int num_stages, Rng& rng) const {
    const Entry& e = lookup(name);
    e.spec.last(num_stages);  // range check
    return e.make(num_stages, rng);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_) out.push_back(n);
    return out;
  }

  /// Process-wide registry preloaded with tiny3 and resnet50.
  static BackboneRegistry& global() {
    static BackboneRegistry registry = with_builtins();
    return registry;
  }

  static BackboneRegistry with_builtins() {
    BackboneRegistry r;
    r.register_backbone(Tiny3<Scalar>::full_spec(),
                        [](int u, Rng& rng) { return std::make_unique<Tiny3<Scalar>>(u, rng); });
    r.register_backbone(ResNet50<Scalar>::full_spec(),
                        [](int u, Rng& rng) { return std::make_unique<ResNet50<Scalar>>(u, rng); });
    return r;
  }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace prenet

#endif  // PRENET_BACKBONE_HPP
