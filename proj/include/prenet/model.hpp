#ifndef PRENET_MODEL_HPP
#define PRENET_MODEL_HPP

#include "prenet/backbone.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace prenet {

struct AttentionConfig {
  Index token_grid = 7;  // each stage map is pooled to token_grid x token_grid positions
  Index attn_dim = 64;   // query/key/value width
  bool residual = true;

  void validate() const {
    if (token_grid < 1) throw std::invalid_argument("token_grid must be >= 1");
    if (attn_dim < 1) throw std::invalid_argument("attn_dim must be >= 1");
  }
};

struct ModelConfig {
  std::string backbone = "tiny3";
  int num_classes = 0;
  int stages = 3;
  Index neck_dim = 16;
  Index classifier_hidden = 512;
  bool region_enhance = true;
  AttentionConfig attention;

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
    if (stages < 1) throw std::invalid_argument("stages must be >= 1");
    if (neck_dim < 1) throw std::invalid_argument("neck_dim must be >= 1");
    if (classifier_hidden < 1) throw std::invalid_argument("classifier_hidden must be >= 1");
    attention.validate();
  }
};

template <typename Scalar>
struct StageBundle {
  int stage_index = 0;
  Var<Scalar> necked_map;    // (batch, D, h, w)
  Var<Scalar> pooled;        // (batch, D), spatial max of necked_map
  Var<Scalar> enhanced;      // (batch, D), after region enhancement
  Var<Scalar> stage_logits;  // (batch, classes)
};

template <typename Scalar>
struct ForwardOutputs {
  Var<Scalar> global;  // (batch, C_g)
  std::vector<StageBundle<Scalar>> bundles;
  Var<Scalar> fused;          // (batch, C_g + U*D)
  Var<Scalar> concat_logits;  // (batch, classes)
  Var<Scalar> final_map;      // deepest backbone map
};

/// Spatial mean of the deepest backbone map.
template <typename Scalar>
Var<Scalar> global_descriptor(const StageFeatureMap<Scalar>& final_map) {
  return global_avg_pool(final_map.tensor);
}

/// Concatenates (global, stage 1, ..., stage U) along the feature axis.
template <typename Scalar>
Var<Scalar> fuse(const Var<Scalar>& global, const std::vector<Var<Scalar>>& enhanced) {
  for (const auto& e : enhanced)
    if (e.dim(0) != global.dim(0))
      throw std::invalid_argument("fuse: batch size " + std::to_string(e.dim(0)) + " does not match global batch " +
                                  std::to_string(global.dim(0)));
  if (enhanced.empty()) return global;
  std::vector<Var<Scalar>> parts{global};
  parts.insert(parts.end(), enhanced.begin(), enhanced.end());
  return concat(parts, 1);
}

/// 1x1 conv to the shared width, batch norm, rectifier; then spatial max.
template <typename Scalar>
struct StageNeck {
  Conv2d<Scalar> conv;
  BatchNorm<Scalar> norm;

  StageNeck() = default;
  StageNeck(Index in_channels, Index width, Rng& rng) : conv(in_channels, width, 1, 1, 0, false, rng), norm(width) {}

  struct Output {
    Var<Scalar> necked_map;
    Var<Scalar> pooled;
  };

  Output operator()(const StageFeatureMap<Scalar>& f, bool training) {
    if (f.tensor.value().rank() != 4 || f.tensor.dim(1) != conv.in_channels())
      throw std::invalid_argument("stage " + std::to_string(f.stage_index) + " neck expects " +
                                  std::to_string(conv.in_channels()) + " channels, got map " +
                                  shape_string(f.tensor.shape()));
    Var<Scalar> necked = relu(norm(conv(f.tensor), training));
    return {necked, global_max_pool(necked)};
  }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    conv.collect(dict, prefix + "conv.");
    norm.collect(dict, prefix + "bn.");
  }
};

/// Per-stage intermediate values of one attention call, for inspection.
template <typename Scalar>
struct AttentionTrace {
  std::vector<Tensor<Scalar>> weights;  // (batch, L_u, L_total), rows sum to 1
  std::vector<Tensor<Scalar>> mixed;    // (batch, L_u, attn_dim), weights x values
  std::vector<Tensor<Scalar>> outputs;  // (batch, L_u, D), projected (+ residual)
};

/// Cross-stage scaled dot-product attention over spatial tokens. Every
/// stage's tokens query the concatenated token sequence of all stages;
/// the key and value projections are shared across stages.
template <typename Scalar>
struct RegionAttention {
  Linear<Scalar> query, key, value, output;
  AttentionConfig cfg;

  RegionAttention() = default;
  RegionAttention(Index width, const AttentionConfig& config, Rng& rng)
      : query(width, config.attn_dim, rng),
        key(width, config.attn_dim, rng),
        value(width, config.attn_dim, rng),
        output(config.attn_dim, width, rng),
        cfg(config) {}

  Index width() const { return query.in_features(); }

  /// (batch, D, h, w) -> (batch, t*t, D) adaptive-pooled position tokens.
  Var<Scalar> tokens(const Var<Scalar>& map) const {
    const Index t = cfg.token_grid;
    Var<Scalar> pooled = adaptive_avg_pool(map, t, t);
    return transpose12(reshape(pooled, {map.dim(0), map.dim(1), t * t}));
  }

  /// Attention over pre-tokenised stages; returns per-stage output tokens.
  std::vector<Var<Scalar>> attend(const std::vector<Var<Scalar>>& stage_tokens, AttentionTrace<Scalar>* trace = nullptr) const {
    for (const auto& tok : stage_tokens)
      if (tok.value().rank() != 3 || tok.dim(2) != width())
        throw std::invalid_argument("region attention expects tokens of width " + std::to_string(width()) + ", got " +
                                    shape_string(tok.shape()));
    const Var<Scalar> sequence = concat(stage_tokens, 1);
    const Var<Scalar> keys = key(sequence);
    const Var<Scalar> values = value(sequence);
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(cfg.attn_dim));
    std::vector<Var<Scalar>> out;
    for (const auto& tok : stage_tokens) {
      Var<Scalar> weights = softmax(scale(bmm(query(tok), keys, true), inv_sqrt));
      Var<Scalar> mixed = bmm(weights, values, false);
      Var<Scalar> projected = output(mixed);
      if (cfg.residual) projected = add(projected, tok);
      if (trace) {
        trace->weights.push_back(weights.value());
        trace->mixed.push_back(mixed.value());
        trace->outputs.push_back(projected.value());
      }
      out.push_back(projected);
    }
    return out;
  }

  /// Necked stage maps -> enhanced descriptors (spatial max over output tokens).
  std::vector<Var<Scalar>> operator()(const std::vector<Var<Scalar>>& necked_maps, AttentionTrace<Scalar>* trace = nullptr) const {
    std::vector<Var<Scalar>> toks;
    for (std::size_t u = 0; u < necked_maps.size(); ++u) {
      if (necked_maps[u].value().rank() != 4 || necked_maps[u].dim(1) != width())
        throw std::invalid_argument("stage " + std::to_string(u + 1) + " map " + shape_string(necked_maps[u].shape()) +
                                    " does not have the shared width " + std::to_string(width()));
      toks.push_back(tokens(necked_maps[u]));
    }
    std::vector<Var<Scalar>> enhanced;
    for (const auto& o : attend(toks, trace)) enhanced.push_back(max_axis(o, 1));
    return enhanced;
  }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    query.collect(dict, prefix + "query.");
    key.collect(dict, prefix + "key.");
    value.collect(dict, prefix + "value.");
    output.collect(dict, prefix + "output.");
  }
};

/// fc -> batch norm -> ELU -> fc.
template <typename Scalar>
struct ClassifierHead {
  Linear<Scalar> fc1;
  BatchNorm<Scalar> norm;
  Linear<Scalar> fc2;

  ClassifierHead() = default;
  ClassifierHead(Index in, Index hidden, Index classes, Rng& rng) : fc1(in, hidden, rng), norm(hidden), fc2(hidden, classes, rng) {}

  Var<Scalar> operator()(const Var<Scalar>& x, bool training) { return fc2(elu(norm(fc1(x), training))); }

  void collect(StateDict<Scalar>& dict, const std::string& prefix) {
    fc1.collect(dict, prefix + "fc1.");
    norm.collect(dict, prefix + "bn.");
    fc2.collect(dict, prefix + "fc2.");
  }
};

/// Backbone plus the global branch, per-stage necks and heads, region
/// enhancement, fusion and the concat head.
template <typename Scalar>
class Prenet {
 public:
  Prenet(ModelConfig cfg, std::uint64_t seed,
         const BackboneRegistry<Scalar>& registry = BackboneRegistry<Scalar>::global())
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    backbone_ = registry.create(cfg_.backbone, cfg_.stages, rng);
    const BackboneSpec& spec = backbone_->spec();
    for (int u = 0; u < cfg_.stages; ++u) {
      necks_.emplace_back(spec.stage_channels[std::size_t(u)], cfg_.neck_dim, rng);
      stage_heads_.emplace_back(cfg_.neck_dim, cfg_.classifier_hidden, cfg_.num_classes, rng);
    }
    attention_ = RegionAttention<Scalar>(cfg_.neck_dim, cfg_.attention, rng);
    concat_head_ = ClassifierHead<Scalar>(fused_width(), cfg_.classifier_hidden, cfg_.num_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const BackboneSpec& backbone_spec() const { return backbone_->spec(); }
  int num_stages() const { return cfg_.stages; }
  Index global_width() const { return backbone_->spec().stage_channels.back(); }
  Index fused_width() const { return global_width() + Index(cfg_.stages) * cfg_.neck_dim; }

  Backbone<Scalar>& backbone() { return *backbone_; }
  StageNeck<Scalar>& neck(int stage) { return necks_.at(std::size_t(stage - 1)); }
  ClassifierHead<Scalar>& stage_head(int stage) { return stage_heads_.at(std::size_t(stage - 1)); }
  ClassifierHead<Scalar>& concat_head() { return concat_head_; }
  RegionAttention<Scalar>& attention() { return attention_; }

  /// Full network: every bundle, the fused feature and all logits.
  ForwardOutputs<Scalar> forward_all(const Var<Scalar>& batch, bool training, AttentionTrace<Scalar>* trace = nullptr) {
    BackboneOutputs<Scalar> maps = backbone_->forward_stages(batch, training);
    ForwardOutputs<Scalar> out;
    out.final_map = maps.final_map.tensor;
    out.global = global_descriptor(maps.final_map);
    std::vector<Var<Scalar>> necked;
    for (int u = 1; u <= cfg_.stages; ++u) {
      StageBundle<Scalar> b = neck_and_head(maps.stages[std::size_t(u - 1)], training);
      necked.push_back(b.necked_map);
      out.bundles.push_back(std::move(b));
    }
    std::vector<Var<Scalar>> enhanced;
    if (cfg_.region_enhance) {
      enhanced = attention_(necked, trace);
    } else {
      for (const auto& b : out.bundles) enhanced.push_back(b.pooled);
    }
    for (std::size_t u = 0; u < enhanced.size(); ++u) out.bundles[u].enhanced = enhanced[u];
    out.fused = fuse(out.global, enhanced);
    out.concat_logits = concat_head_(out.fused, training);
    return out;
  }

  /// Forward path of one progressive pass: backbone through `stage`, that
  /// stage's neck and classifier only.
  StageBundle<Scalar> forward_stage(const Var<Scalar>& batch, int stage, bool training) {
    if (stage < 1 || stage > cfg_.stages) throw std::invalid_argument("stage " + std::to_string(stage) + " out of range");
    BackboneOutputs<Scalar> maps = backbone_->forward_stages(batch, training, stage);
    return neck_and_head(maps.stages.back(), training);
  }

  /// Every tensor of the model under a stable dotted name.
  StateDict<Scalar> state_dict() {
    StateDict<Scalar> dict;
    backbone_->collect(dict, "backbone.");
    for (int u = 1; u <= cfg_.stages; ++u) {
      necks_[std::size_t(u - 1)].collect(dict, "neck" + std::to_string(u) + ".");
      stage_heads_[std::size_t(u - 1)].collect(dict, "stage_head" + std::to_string(u) + ".");
    }
    attention_.collect(dict, "attention.");
    concat_head_.collect(dict, "concat_head.");
    return dict;
  }

  StateDict<Scalar> parameters() {
    StateDict<Scalar> params;
    for (auto& e : state_dict())
      if (e.param.defined()) params.push_back(e);
    return params;
  }

  void zero_grad() {
    for (auto& e : parameters()) e.param.zero_grad();
  }

 private:
  StageBundle<Scalar> neck_and_head(const StageFeatureMap<Scalar>& f, bool training) {
    const int u = f.stage_index;
    auto n = necks_[std::size_t(u - 1)](f, training);
    StageBundle<Scalar> b;
    b.stage_index = u;
    b.necked_map = n.necked_map;
    b.pooled = n.pooled;
    b.stage_logits = stage_heads_[std::size_t(u - 1)](n.pooled, training);
    return b;
  }

  ModelConfig cfg_;
  std::unique_ptr<Backbone<Scalar>> backbone_;
  std::vector<StageNeck<Scalar>> necks_;
  std::vector<ClassifierHead<Scalar>> stage_heads_;
  RegionAttention<Scalar> attention_;
  ClassifierHead<Scalar> concat_head_;
};

}  // namespace prenet

#endif  // PRENET_MODEL_HPP
