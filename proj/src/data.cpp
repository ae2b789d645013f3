#include "prenet/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace prenet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

}  // namespace

DatasetManifest build_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root " + root.string() + " is not a directory");
  std::vector<std::string> classes;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) classes.push_back(d.path().filename().string());
  if (classes.empty()) throw std::runtime_error("dataset root " + root.string() + " contains no class directories");
  std::sort(classes.begin(), classes.end());

  DatasetManifest m;
  m.root = root.string();
  m.num_classes = int(classes.size());
  m.class_names = classes;
  for (int id = 0; id < m.num_classes; ++id) {
    const fs::path dir = root / classes[std::size_t(id)];
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (!f.is_regular_file() || !is_image_file(f.path())) continue;
      if (!std::ifstream(f.path(), std::ios::binary)) throw std::runtime_error("cannot read image file " + f.path().string());
      files.push_back((fs::path(classes[std::size_t(id)]) / f.path().filename()).generic_string());
    }
    if (files.empty()) throw std::runtime_error("class directory " + dir.string() + " contains no images");
    std::sort(files.begin(), files.end());
    for (auto& f : files) m.entries.push_back({std::move(f), id, classes[std::size_t(id)]});
  }
  return m;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  if (n < 3) return {n, 0, 0};
  const auto train = std::size_t(std::floor(0.6 * double(n) + 0.5));
  const auto val = std::min(n - train, std::size_t(std::floor(0.1 * double(n) + 0.5)));
  return {train, val, n - train - val};
}

SplitManifest split_manifest(const DatasetManifest& manifest, std::uint64_t seed) {
  if (manifest.entries.empty()) throw std::invalid_argument("cannot split an empty manifest");
  std::vector<std::vector<std::size_t>> by_class(std::size_t(manifest.num_classes));
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) by_class.at(std::size_t(manifest.entries[i].class_id)).push_back(i);
  SplitManifest s;
  s.seed = seed;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& items = by_class[c];
    Rng rng{seed, std::uint64_t(c)};
    rng.shuffle(items);
    const auto [n_train, n_val, n_test] = split_sizes(items.size());
    s.train.insert(s.train.end(), items.begin(), items.begin() + long(n_train));
    s.val.insert(s.val.end(), items.begin() + long(n_train), items.begin() + long(n_train + n_val));
    s.test.insert(s.test.end(), items.begin() + long(n_train + n_val), items.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest, const SplitManifest& split) {
  json entries = json::array();
  for (const auto& e : manifest.entries) entries.push_back({{"path", e.image_path}, {"class_id", e.class_id}, {"class_name", e.class_name}});
  json doc = {{"schema_version", kManifestSchemaVersion},
              {"root", manifest.root},
              {"num_classes", manifest.num_classes},
              {"classes", manifest.class_names},
              {"entries", entries},
              {"split",
               {{"seed", split.seed},
                {"ratios", split.ratios},
                {"train", split.train},
                {"val", split.val},
                {"test", split.test}}}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
}

std::pair<DatasetManifest, SplitManifest> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
  }
  if (doc.value("schema_version", -1) != kManifestSchemaVersion)
    throw std::runtime_error("manifest " + path.string() + " has unsupported schema_version");
  DatasetManifest m;
  m.root = doc.at("root").get<std::string>();
  m.num_classes = doc.at("num_classes").get<int>();
  m.class_names = doc.at("classes").get<std::vector<std::string>>();
  for (const auto& e : doc.at("entries"))
    m.entries.push_back({e.at("path").get<std::string>(), e.at("class_id").get<int>(), e.at("class_name").get<std::string>()});
  SplitManifest s;
  const auto& sp = doc.at("split");
  s.seed = sp.at("seed").get<std::uint64_t>();
  s.ratios = sp.at("ratios").get<std::array<double, 3>>();
  s.train = sp.at("train").get<std::vector<std::size_t>>();
  s.val = sp.at("val").get<std::vector<std::size_t>>();
  s.test = sp.at("test").get<std::vector<std::size_t>>();
  return {std::move(m), std::move(s)};
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> split, std::size_t batch_size,
                                                   std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(split.begin(), split.end());
  if (shuffle_seed) {
    Rng rng{*shuffle_seed, epoch};
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + long(i), order.begin() + long(std::min(order.size(), i + batch_size)));
  return batches;
}

Tensor<float> stack_images(const std::vector<Tensor<float>>& images) {
  if (images.empty()) return Tensor<float>({0, 3, 1, 1});
  const Shape one = images.front().shape();
  Shape shape{Index(images.size())};
  shape.insert(shape.end(), one.begin(), one.end());
  Tensor<float> out(shape);
  const Index n = images.front().size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != one) throw std::invalid_argument("stack_images: mixed image shapes");
    std::copy_n(images[i].data(), n, out.data() + Index(i) * n);
  }
  return out;
}

const Image& ImageDataset::image(std::size_t index) {
  if (cache_) {
    auto it = decoded_.find(index);
    if (it == decoded_.end()) it = decoded_.emplace(index, decode_image(manifest_.full_path(index))).first;
    return it->second;
  }
  scratch_ = decode_image(manifest_.full_path(index));
  return *scratch_;
}

LabeledBatch ImageDataset::train_batch(std::span<const std::size_t> indices, const AugmentConfig& cfg, Rng& rng) {
  std::vector<Tensor<float>> imgs;
  LabeledBatch b;
  for (std::size_t i : indices) {
    imgs.push_back(augment_train(image(i), cfg, rng));
    b.labels.push_back(manifest_.entries.at(i).class_id);
  }
  b.images = imgs.empty() ? Tensor<float>({0, 3, cfg.crop_side, cfg.crop_side}) : stack_images(imgs);
  return b;
}

LabeledBatch ImageDataset::eval_batch(std::span<const std::size_t> indices, const AugmentConfig& cfg) {
  std::vector<Tensor<float>> imgs;
  LabeledBatch b;
  for (std::size_t i : indices) {
    imgs.push_back(preprocess_eval(image(i), cfg));
    b.labels.push_back(manifest_.entries.at(i).class_id);
  }
  b.images = imgs.empty() ? Tensor<float>({0, 3, cfg.crop_side, cfg.crop_side}) : stack_images(imgs);
  return b;
}

}  // namespace prenet
