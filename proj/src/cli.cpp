#include "prenet/cli.hpp"

#include "prenet/fit.hpp"
#include "prenet/toy.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace prenet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TrainArgs {
  std::string config, data, out, backbone, resume, preset = "default";
  std::uint64_t seed = 0;
  int epochs = 0, stages = 0, steps = 0;
  double alpha = 0, beta = 0, lr = 0;
  std::size_t batch_size = 0;
};

struct EvalArgs {
  std::string checkpoint, data, out, split = "test";
};

struct PredictArgs {
  std::string checkpoint;
  std::vector<std::string> images;
  int topk = 5;
};

struct InspectArgs {
  std::string checkpoint, image, out;
  int target = -1;
};

struct ToyArgs {
  std::string out;
  std::uint64_t seed = 7;
  int per_class = 32;
  Index side = 64;
};

void print_metrics(std::ostream& out, const std::string& label, const MetricsReport& m) {
  out << std::fixed << std::setprecision(4) << label << ": n=" << m.n_samples << " top1=" << m.top1 << " top5=" << m.top5
      << " concat_top1=" << m.concat_top1;
  for (std::size_t u = 0; u < m.per_stage_top1.size(); ++u) out << " stage" << u + 1 << "_top1=" << m.per_stage_top1[u];
  out << '\n' << std::defaultfloat;
}

json metrics_json(const MetricsReport& m) {
  return {{"n_samples", m.n_samples}, {"top1", m.top1}, {"top5", m.top5}, {"concat_top1", m.concat_top1},
          {"per_stage_top1", m.per_stage_top1}};
}

const std::vector<std::size_t>& pick_split(const SplitManifest& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

int cmd_make_toy(const ToyArgs& a, std::ostream& out) {
  const std::size_t n = write_toy_dataset(a.out, {a.per_class, a.side, a.seed});
  out << "wrote " << n << " images to " << a.out << '\n';
  return kExitOk;
}

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
  RunConfig cfg;
  if (!a.config.empty())
    cfg = load_run_config(a.config);
  else if (a.preset == "toy")
    cfg = toy_run_config();
  else if (a.preset != "default")
    throw ConfigError("unknown preset '" + a.preset + "' (expected default or toy)");
  if (sub.count("--data")) cfg.dataset_root = a.data;
  if (sub.count("--out")) cfg.output_dir = a.out;
  if (sub.count("--seed")) cfg.train.seed = a.seed;
  if (sub.count("--epochs")) cfg.train.epochs = a.epochs;
  if (sub.count("--alpha")) cfg.train.alpha = a.alpha;
  if (sub.count("--beta")) cfg.train.beta = a.beta;
  if (sub.count("--lr")) cfg.train.base_lr = a.lr;
  if (sub.count("--stages")) cfg.set_stages(a.stages);
  if (sub.count("--steps")) cfg.train.steps = a.steps;
  if (sub.count("--backbone")) cfg.set_backbone(a.backbone);
  if (sub.count("--batch-size")) cfg.train.batch_size = a.batch_size;
  cfg.validate();
  if (cfg.dataset_root.empty()) throw ConfigError("no dataset: set dataset_root in the config or pass --data");

  DatasetManifest manifest = build_manifest(cfg.dataset_root);
  const SplitManifest split = split_manifest(manifest, cfg.train.seed);
  fs::create_directories(cfg.output_dir);
  save_manifest(fs::path(cfg.output_dir) / "manifest.json", manifest, split);
  ImageDataset data(manifest, cfg.cache_images);

  FitOptions opts;
  if (!a.resume.empty()) opts.resume = a.resume;
  opts.on_epoch = [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << " lr=" << r.lr << " total=" << r.total << " val_top1=" << r.val_top1 << '\n';
  };
  FitResult fitted = fit(cfg, data, split, opts);

  json summary = {{"best_epoch", fitted.log.best_epoch}, {"best_val_top1", fitted.log.best_val},
                  {"epochs_run", fitted.log.epochs.size()}};
  for (const char* name : {"train", "val", "test"}) {
    const auto& idx = pick_split(split, name);
    if (idx.empty()) continue;
    const MetricsReport m = evaluate(*fitted.model, data, idx, cfg.augment, cfg.eval_batch_size, cfg.combine_mode);
    print_metrics(out, std::string("final ") + name, m);
    summary[name] = metrics_json(m);
  }
  std::ofstream(fs::path(cfg.output_dir) / "summary.json") << summary.dump(2) << '\n';
  out << "checkpoints and metrics.csv written to " << cfg.output_dir << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  LoadedModel lm = load_model(a.checkpoint);
  const std::string root = a.data.empty() ? lm.config.dataset_root : a.data;
  if (root.empty()) throw ConfigError("checkpoint has no dataset_root; pass --data");
  DatasetManifest manifest = build_manifest(root);
  if (manifest.class_names != lm.checkpoint.class_names)
    throw std::runtime_error("dataset classes at " + root + " differ from the checkpoint's classes");
  const SplitManifest split = split_manifest(manifest, lm.config.train.seed);
  const auto& idx = pick_split(split, a.split);
  ImageDataset data(manifest, false);
  const MetricsReport m = evaluate(*lm.model, data, idx, lm.config.augment, lm.config.eval_batch_size, lm.config.combine_mode);
  print_metrics(out, a.split, m);

  const fs::path dir = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
  if (!dir.empty()) fs::create_directories(dir);
  const fs::path csv = dir / ("eval_" + a.split + ".csv");
  std::ofstream f(csv);
  if (!f) throw std::runtime_error("cannot write " + csv.string());
  f << "split,n_samples,top1,top5,concat_top1";
  for (std::size_t u = 0; u < m.per_stage_top1.size(); ++u) f << ",stage" << u + 1 << "_top1";
  f << '\n' << a.split << ',' << m.n_samples << ',' << m.top1 << ',' << m.top5 << ',' << m.concat_top1;
  for (double v : m.per_stage_top1) f << ',' << v;
  f << '\n';
  return kExitOk;
}

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  LoadedModel lm = load_model(a.checkpoint);
  const int classes = lm.config.model.num_classes;
  if (a.topk < 1 || a.topk > classes)
    throw ConfigError("--topk " + std::to_string(a.topk) + " must lie in [1, " + std::to_string(classes) + "]");
  for (const auto& path : a.images) {
    const Tensor<float> x = preprocess_eval(decode_image(path), lm.config.augment);
    const auto pred = predict(*lm.model, x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}), lm.config.combine_mode).front();
    std::vector<int> order(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) order[std::size_t(c)] = c;
    std::stable_sort(order.begin(), order.end(),
                     [&](int l, int r) { return pred.combined_scores(l) > pred.combined_scores(r); });
    out << path << '\n';
    for (int k = 0; k < a.topk; ++k) {
      const int c = order[std::size_t(k)];
      out << "  " << lm.checkpoint.class_names.at(std::size_t(c)) << ' ' << std::setprecision(6)
          << pred.combined_scores(c) << '\n';
    }
  }
  return kExitOk;
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  LoadedModel lm = load_model(a.checkpoint);
  const Tensor<float> x = preprocess_eval(decode_image(a.image), lm.config.augment);
  std::optional<int> target;
  if (a.target >= 0) target = a.target;
  const HeatmapSet<float> set = stage_heatmaps(*lm.model, x, target);

  fs::create_directories(a.out);
  const std::string stem = fs::path(a.image).stem().string();
  for (std::size_t k = 0; k < set.maps.size(); ++k) {
    const fs::path file = fs::path(a.out) / (stem + "_" + set.names[k] + ".png");
    write_gray_png(file, set.maps[k]);
    out << file.string() << '\n';
  }
  auto row = [](const Vector<float>& v) { return std::vector<float>(v.data(), v.data() + v.size()); };
  json heads = json::object();
  for (std::size_t u = 0; u < set.prediction.per_stage_probs.size(); ++u)
    heads["stage" + std::to_string(u + 1)] = row(set.prediction.per_stage_probs[u]);
  heads["concat"] = row(set.prediction.concat_probs);
  const json sidecar = {{"image", a.image},
                        {"classes", lm.checkpoint.class_names},
                        {"target_class", set.target_class},
                        {"predicted_class", set.prediction.predicted_class},
                        {"heads", heads},
                        {"combined_scores", row(set.prediction.combined_scores)}};
  const fs::path json_path = fs::path(a.out) / (stem + "_heads.json");
  std::ofstream(json_path) << sidecar.dump(2) << '\n';
  out << json_path.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Progressive region enhancement network for fine-grained image recognition", "prenet"};
  app.require_subcommand(1);

  ToyArgs toy;
  auto* make_toy = app.add_subcommand("make-toy", "Write the synthetic coloured-shape dataset");
  make_toy->add_option("--out", toy.out, "Destination directory")->required();
  make_toy->add_option("--seed", toy.seed, "Generator seed");
  make_toy->add_option("--per-class", toy.per_class, "Images per class")->check(CLI::PositiveNumber);
  make_toy->add_option("--side", toy.side, "Image side in pixels")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train with the progressive schedule");
  train->add_option("--config", tr.config, "JSON run config");
  train->add_option("--preset", tr.preset, "Base settings when no config is given: default or toy");
  train->add_option("--data", tr.data, "Dataset root (class directories of images)");
  train->add_option("--out", tr.out, "Output directory");
  train->add_option("--seed", tr.seed, "Seed for initialisation, splits, batches and augmentation");
  train->add_option("--epochs", tr.epochs, "Epoch count");
  train->add_option("--alpha", tr.alpha, "Weight of the concat cross-entropy");
  train->add_option("--beta", tr.beta, "Weight of the stage divergence term");
  train->add_option("--lr", tr.lr, "Base learning rate");
  train->add_option("--stages", tr.stages, "Number of local stages U");
  train->add_option("--steps", tr.steps, "Progressive steps S");
  train->add_option("--backbone", tr.backbone, "Backbone name");
  train->add_option("--batch-size", tr.batch_size, "Training batch size");
  train->add_option("--resume", tr.resume, "Continue from a last.ckpt");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", ev.data, "Dataset root (default: the one in the checkpoint config)");
  eval->add_option("--split", ev.split, "train, val or test");
  eval->add_option("--out", ev.out, "Directory for eval_<split>.csv (default: next to the checkpoint)");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Top-k combined predictions for images");
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--topk", pr.topk, "Number of classes to list");
  predict_cmd->add_option("images", pr.images, "Image files")->required();

  InspectArgs in;
  auto* inspect = app.add_subcommand("inspect", "Per-stage class-activation heatmaps for one image");
  inspect->add_option("--checkpoint", in.checkpoint, "Checkpoint file")->required();
  inspect->add_option("--image", in.image, "Image file")->required();
  inspect->add_option("--out", in.out, "Output directory")->required();
  inspect->add_option("--target", in.target, "Class index to explain (default: predicted class)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (make_toy->parsed()) return cmd_make_toy(toy, out);
    if (train->parsed()) return cmd_train(tr, *train, out);
    if (eval->parsed()) return cmd_eval(ev, out);
    if (predict_cmd->parsed()) return cmd_predict(pr, out);
    if (inspect->parsed()) return cmd_inspect(in, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace prenet
