#ifndef PRENET_CHECKPOINT_HPP
#define PRENET_CHECKPOINT_HPP

#include "prenet/model.hpp"
#include "prenet/trainer.hpp"

#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

inline constexpr int kCheckpointSchemaVersion = 1;

/// Raw little-endian array bytes plus shape and element type.
struct StoredTensor {
  Shape shape;
  std::string dtype;  // "float32" or "float64"
  std::vector<unsigned char> bytes;

  bool operator==(const StoredTensor&) const = default;
};

template <typename Scalar>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>, "float or double tensors only");
  return std::is_same_v<Scalar, float> ? "float32" : "float64";
}

template <typename Scalar>
StoredTensor store_tensor(const Tensor<Scalar>& t) {
  StoredTensor s{t.shape(), dtype_name<Scalar>(), std::vector<unsigned char>(std::size_t(t.size()) * sizeof(Scalar))};
  if (!s.bytes.empty()) std::memcpy(s.bytes.data(), t.data(), s.bytes.size());
  return s;
}

/// Copies into `out`, converting between float widths when needed.
template <typename Scalar>
void restore_tensor(const StoredTensor& s, Tensor<Scalar>& out, const std::string& name) {
  if (s.shape != out.shape())
    throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_string(s.shape) + ", expected " +
                             shape_string(out.shape()));
  auto copy = [&](auto tag) {
    using Stored = decltype(tag);
    if (s.bytes.size() != std::size_t(out.size()) * sizeof(Stored))
      throw std::runtime_error("checkpoint tensor " + name + " has the wrong byte count");
    Tensor<Stored> tmp(s.shape);
    if (!s.bytes.empty()) std::memcpy(tmp.data(), s.bytes.data(), s.bytes.size());
    out = tmp.template cast<Scalar>();
  };
  if (s.dtype == "float32")
    copy(float{});
  else if (s.dtype == "float64")
    copy(double{});
  else
    throw std::runtime_error("checkpoint tensor " + name + " has unsupported dtype " + s.dtype);
}

struct Checkpoint {
  int schema_version = kCheckpointSchemaVersion;
  int epoch = -1;  // last completed epoch, -1 before training
  int num_classes = 0;
  std::string rng_state;
  double best_val = -1;
  int best_epoch = -1;
  std::string config_json;  // run-config snapshot
  std::vector<std::string> class_names;
  std::map<std::string, StoredTensor> model;
  std::map<std::string, StoredTensor> optim;
};

/// Atomic write: the archive goes to a sibling temp file which is then renamed.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
void capture_model(Checkpoint& ck, Prenet<Scalar>& model) {
  ck.num_classes = model.config().num_classes;
  ck.model.clear();
  for (const auto& e : model.state_dict()) ck.model.emplace(e.name, store_tensor(*e.tensor));
}

/// Every model entry must be present with a matching shape; extra archive
/// entries are an error too.
template <typename Scalar>
void restore_model(const Checkpoint& ck, Prenet<Scalar>& model) {
  if (ck.num_classes != model.config().num_classes)
    throw std::runtime_error("checkpoint has " + std::to_string(ck.num_classes) + " classes, model configured for " +
                             std::to_string(model.config().num_classes));
  auto dict = model.state_dict();
  if (dict.size() != ck.model.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(ck.model.size()) + " model tensors, model has " +
                             std::to_string(dict.size()));
  for (auto& e : dict) {
    auto it = ck.model.find(e.name);
    if (it == ck.model.end()) throw std::runtime_error("checkpoint is missing tensor " + e.name);
    restore_tensor(it->second, *e.tensor, e.name);
  }
}

template <typename Scalar>
void capture_optimizer(Checkpoint& ck, const Sgd<Scalar>& opt) {
  ck.optim.clear();
  for (const auto& [name, buf] : opt.buffers()) ck.optim.emplace(name, store_tensor(buf));
}

template <typename Scalar>
void restore_optimizer(const Checkpoint& ck, Sgd<Scalar>& opt) {
  opt.buffers().clear();
  for (const auto& [name, s] : ck.optim) {
    Tensor<Scalar> t(s.shape);
    restore_tensor(s, t, name);
    opt.buffers().emplace(name, std::move(t));
  }
}

/// `reference` is a path, or a file name looked up under $PRENET_CACHE.
/// Returns nullopt for an empty reference; throws if nothing is found.
std::optional<std::filesystem::path> resolve_pretrained(const std::string& reference);

/// Loads the `backbone.` entries of a checkpoint archive into the model's
/// backbone. Returns the number of tensors loaded.
template <typename Scalar>
std::size_t load_pretrained_backbone(const std::filesystem::path& path, Prenet<Scalar>& model) {
  const Checkpoint ck = load_checkpoint(path);
  std::size_t loaded = 0;
  for (auto& e : model.state_dict()) {
    if (!e.name.starts_with("backbone.")) continue;
    auto it = ck.model.find(e.name);
    if (it == ck.model.end()) throw std::runtime_error("pretrained archive " + path.string() + " lacks " + e.name);
    restore_tensor(it->second, *e.tensor, e.name);
    ++loaded;
  }
  return loaded;
}

}  // namespace prenet

#endif  // PRENET_CHECKPOINT_HPP
