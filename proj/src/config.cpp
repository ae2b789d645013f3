#include "prenet/config.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

namespace prenet {

using nlohmann::json;

namespace {

struct Field {
  std::string key;
  std::function<void(json&, const RunConfig&)> write;
  std::function<void(RunConfig&, const json&)> read;
};

// Binds a key to a member reached through `get`.
template <typename Get>
Field bind(std::string key, Get get) {
  return {key,
          [get, key](json& j, const RunConfig& c) { j[key] = get(const_cast<RunConfig&>(c)); },
          [get](RunConfig& c, const json& v) {
            using T = std::remove_reference_t<decltype(get(c))>;
            get(c) = v.get<T>();
          }};
}

// Enum member reached through `get`, spelled by `names`.
template <typename Get, typename Enum>
Field bind_enum(std::string key, Get get, std::vector<std::pair<Enum, std::string>> names) {
  return {key,
          [get, key, names](json& j, const RunConfig& c) {
            for (const auto& [e, n] : names)
              if (e == get(const_cast<RunConfig&>(c))) j[key] = n;
          },
          [get, key, names](RunConfig& c, const json& v) {
            const auto s = v.get<std::string>();
            for (const auto& [e, n] : names)
              if (n == s) {
                get(c) = e;
                return;
              }
            std::string allowed;
            for (const auto& [e, n] : names) allowed += (allowed.empty() ? "" : ", ") + n;
            throw ConfigError("config key '" + key + "' has value '" + s + "' (allowed: " + allowed + ")");
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"backbone", [](json& j, const RunConfig& c) { j["backbone"] = c.model.backbone; },
                 [](RunConfig& c, const json& v) { c.set_backbone(v.get<std::string>()); }});
    f.push_back({"stages", [](json& j, const RunConfig& c) { j["stages"] = c.model.stages; },
                 [](RunConfig& c, const json& v) { c.set_stages(v.get<int>()); }});
    f.push_back(bind("num_classes", [](RunConfig& c) -> int& { return c.model.num_classes; }));
    f.push_back(bind("neck_dim", [](RunConfig& c) -> Index& { return c.model.neck_dim; }));
    f.push_back(bind("classifier_hidden", [](RunConfig& c) -> Index& { return c.model.classifier_hidden; }));
    f.push_back(bind("region_enhance", [](RunConfig& c) -> bool& { return c.model.region_enhance; }));
    f.push_back(bind("token_grid", [](RunConfig& c) -> Index& { return c.model.attention.token_grid; }));
    f.push_back(bind("attn_dim", [](RunConfig& c) -> Index& { return c.model.attention.attn_dim; }));
    f.push_back(bind("attn_residual", [](RunConfig& c) -> bool& { return c.model.attention.residual; }));

    f.push_back(bind("epochs", [](RunConfig& c) -> int& { return c.train.epochs; }));
    f.push_back(bind("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.push_back(bind("base_lr", [](RunConfig& c) -> double& { return c.train.base_lr; }));
    f.push_back(bind("lr_decay", [](RunConfig& c) -> double& { return c.train.lr_decay; }));
    f.push_back(bind("lr_decay_every", [](RunConfig& c) -> int& { return c.train.lr_decay_every; }));
    f.push_back(bind("momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    f.push_back(bind("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    f.push_back(bind("steps", [](RunConfig& c) -> int& { return c.train.steps; }));
    f.push_back(bind("alpha", [](RunConfig& c) -> double& { return c.train.alpha; }));
    f.push_back(bind("beta", [](RunConfig& c) -> double& { return c.train.beta; }));
    f.push_back(bind_enum("kl_sign", [](RunConfig& c) -> KlSign& { return c.train.kl_sign; },
                          std::vector<std::pair<KlSign, std::string>>{{KlSign::Maximize, "maximize"}, {KlSign::Literal, "literal"}}));
    f.push_back(bind("symmetric_kl", [](RunConfig& c) -> bool& { return c.train.symmetric_kl; }));
    f.push_back(bind_enum("schedule_mode", [](RunConfig& c) -> ScheduleMode& { return c.train.schedule_mode; },
                          std::vector<std::pair<ScheduleMode, std::string>>{{ScheduleMode::PerBatch, "per_batch"},
                                                                            {ScheduleMode::PerEpoch, "per_epoch"}}));
    f.push_back(bind("seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));

    f.push_back(bind("resize_side", [](RunConfig& c) -> Index& { return c.augment.resize_side; }));
    f.push_back(bind("crop_side", [](RunConfig& c) -> Index& { return c.augment.crop_side; }));
    f.push_back(bind("hflip_prob", [](RunConfig& c) -> double& { return c.augment.hflip_prob; }));
    f.push_back(bind("brightness", [](RunConfig& c) -> double& { return c.augment.brightness; }));
    f.push_back(bind("contrast", [](RunConfig& c) -> double& { return c.augment.contrast; }));
    f.push_back(bind("saturation", [](RunConfig& c) -> double& { return c.augment.saturation; }));
    f.push_back(bind("mean", [](RunConfig& c) -> std::array<float, 3>& { return c.augment.mean; }));
    f.push_back(bind("std", [](RunConfig& c) -> std::array<float, 3>& { return c.augment.std; }));
    f.push_back(bind("fixed_size_resize", [](RunConfig& c) -> bool& { return c.augment.fixed_size_resize; }));

    f.push_back(bind("dataset_root", [](RunConfig& c) -> std::string& { return c.dataset_root; }));
    f.push_back(bind("output_dir", [](RunConfig& c) -> std::string& { return c.output_dir; }));
    f.push_back(bind("cache_images", [](RunConfig& c) -> bool& { return c.cache_images; }));
    f.push_back(bind_enum("combine_mode", [](RunConfig& c) -> CombineMode& { return c.combine_mode; },
                          std::vector<std::pair<CombineMode, std::string>>{{CombineMode::Probability, "probability"},
                                                                           {CombineMode::Logit, "logit"}}));
    f.push_back(bind("pretrained", [](RunConfig& c) -> std::string& { return c.pretrained; }));
    f.push_back(bind("eval_batch_size", [](RunConfig& c) -> std::size_t& { return c.eval_batch_size; }));
    return f;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  try {
    if (model.stages != train.stages || model.backbone != train.backbone)
      throw std::invalid_argument("model and trainer disagree on stages/backbone");
    if (model.num_classes < 0) throw std::invalid_argument("num_classes must be >= 0");
    ModelConfig m = model;
    if (m.num_classes == 0) m.num_classes = 1;
    m.validate();
    train.validate();
    augment.validate();
    if (eval_batch_size < 1) throw std::invalid_argument("eval_batch_size must be >= 1");
    if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_run_config(const std::string& json_text, const std::string& origin) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ": expected a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(origin + ": unknown config key '" + key + "'");
    try {
      it->read(c, value);
    } catch (const json::exception& e) {
      throw ConfigError(origin + ": config key '" + key + "' has the wrong type: " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string dump_run_config(const RunConfig& cfg, int indent) {
  json j = json::object();
  for (const auto& f : fields()) f.write(j, cfg);
  return j.dump(indent);
}

RunConfig toy_run_config() {
  RunConfig c;
  c.set_backbone("tiny3");
  c.set_stages(3);
  c.model.neck_dim = 16;
  c.model.classifier_hidden = 64;
  c.model.attention.token_grid = 4;
  c.model.attention.attn_dim = 16;
  c.train.epochs = 30;
  c.train.batch_size = 8;
  c.train.steps = 3;
  c.augment.resize_side = 64;
  c.augment.crop_side = 56;
  c.eval_batch_size = 64;
  c.output_dir = "runs/toy";
  return c;
}

}  // namespace prenet
