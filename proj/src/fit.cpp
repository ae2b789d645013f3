#include "prenet/fit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace prenet {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

Checkpoint snapshot(const RunConfig& cfg, Prenet<float>& model, const Sgd<float>& opt, const Rng& rng,
                    const DatasetManifest& manifest, int epoch, const TrainingLog& log) {
  Checkpoint ck;
  ck.epoch = epoch;
  ck.rng_state = rng.state();
  ck.best_val = log.best_val;
  ck.best_epoch = log.best_epoch;
  ck.config_json = dump_run_config(cfg, -1);
  ck.class_names = manifest.class_names;
  capture_model(ck, model);
  capture_optimizer(ck, opt);
  return ck;
}

}  // namespace

std::string metrics_header(std::size_t passes) {
  std::string h = "epoch";
  for (std::size_t p = 1; p <= passes; ++p) h += ",pass" + std::to_string(p) + "_loss";
  return h + ",train_ce,concat_ce,kl,total,val_top1,val_top5,lr";
}

std::string metrics_row(const EpochRecord& r) {
  std::string row = std::to_string(r.epoch);
  for (double v : r.pass_losses) row += "," + number(v);
  for (double v : {r.train_ce, r.concat_ce, r.kl, r.total, r.val_top1, r.val_top5, r.lr}) row += "," + number(v);
  return row;
}

std::unique_ptr<Prenet<float>> build_model(const RunConfig& cfg) {
  auto model = std::make_unique<Prenet<float>>(cfg.model, cfg.train.seed);
  if (auto path = resolve_pretrained(cfg.pretrained)) load_pretrained_backbone(*path, *model);
  return model;
}

FitResult fit(RunConfig cfg, ImageDataset& data, const SplitManifest& split, const FitOptions& options) {
  const DatasetManifest& manifest = data.manifest();
  if (cfg.model.num_classes == 0) cfg.model.num_classes = manifest.num_classes;
  if (cfg.model.num_classes != manifest.num_classes)
    throw ConfigError("config num_classes " + std::to_string(cfg.model.num_classes) + " does not match the dataset's " +
                      std::to_string(manifest.num_classes));
  cfg.validate();
  if (split.train.empty()) throw std::runtime_error("training split is empty");

  const fs::path out_dir = cfg.output_dir;
  if (options.write_artifacts) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
      throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  }

  FitResult result;
  result.model = build_model(cfg);
  Prenet<float>& model = *result.model;
  Sgd<float> opt(cfg.train.base_lr, cfg.train.momentum, cfg.train.weight_decay);
  Rng rng{cfg.train.seed, 0x61756775ull};
  TrainingLog& log = result.log;

  int start = 0;
  if (options.resume) {
    const Checkpoint ck = load_checkpoint(*options.resume);
    restore_model(ck, model);
    restore_optimizer(ck, opt);
    rng.set_state(ck.rng_state);
    start = ck.epoch + 1;
    log.best_val = ck.best_val;
    log.best_epoch = ck.best_epoch;
  }

  const ProgressiveSchedule schedule = make_schedule(cfg.train.stages, cfg.train.steps);
  const LossWeights weights = cfg.train.weights();
  const std::size_t passes = schedule.passes.size();

  const fs::path csv_path = out_dir / "metrics.csv";
  std::ofstream csv;
  if (options.write_artifacts) {
    const bool append = options.resume && fs::exists(csv_path);
    csv.open(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
    if (!append) csv << metrics_header(passes) << '\n';
  }

  for (int epoch = start; epoch < cfg.train.epochs; ++epoch) {
    opt.lr = lr_at(epoch, cfg.train);
    std::optional<std::size_t> only_pass;
    if (cfg.train.schedule_mode == ScheduleMode::PerEpoch) only_pass = std::size_t(epoch) % passes;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr;
    std::vector<double> pass_sum(passes, 0.0);
    std::vector<std::size_t> pass_count(passes, 0);
    double ce = 0, concat = 0, kl = 0, total = 0;
    std::size_t concat_batches = 0;

    for (const auto& idx : make_batches(split.train, cfg.train.batch_size, cfg.train.seed, std::uint64_t(epoch))) {
      LabeledBatch batch = data.train_batch(idx, cfg.augment, rng);
      BatchReport rep = train_batch(model, batch.images, batch.labels, schedule, opt, weights, {}, only_pass);
      for (std::size_t k = 0, p = 0; p < passes; ++p) {
        if (only_pass && *only_pass != p) continue;
        pass_sum[p] += rep.pass_losses[k++];
        ++pass_count[p];
      }
      if (!rep.loss.per_stage_ce.empty()) {
        double s = 0;
        for (double v : rep.loss.per_stage_ce) s += v;
        ce += s / double(rep.loss.per_stage_ce.size());
        concat += rep.loss.concat_ce;
        kl += rep.loss.kl_term;
        total += rep.loss.total;
        ++concat_batches;
      }
      log.batches.push_back(std::move(rep));
    }
    for (std::size_t p = 0; p < passes; ++p) rec.pass_losses.push_back(pass_count[p] ? pass_sum[p] / double(pass_count[p]) : kNaN);
    const double nb = double(concat_batches);
    rec.train_ce = concat_batches ? ce / nb : kNaN;
    rec.concat_ce = concat_batches ? concat / nb : kNaN;
    rec.kl = concat_batches ? kl / nb : kNaN;
    rec.total = concat_batches ? total / nb : kNaN;

    rec.val_top1 = rec.val_top5 = kNaN;
    bool improved = log.best_epoch < 0 || split.val.empty();
    if (!split.val.empty()) {
      MetricsReport m = evaluate(model, data, split.val, cfg.augment, cfg.eval_batch_size, cfg.combine_mode);
      rec.val_top1 = m.top1;
      rec.val_top5 = m.top5;
      improved = improved || m.top1 > log.best_val;
      log.val.push_back(std::move(m));
    }
    if (improved) {
      log.best_epoch = epoch;
      log.best_val = std::isnan(rec.val_top1) ? -1 : rec.val_top1;
    }

    if (options.write_artifacts) {
      const Checkpoint ck = snapshot(cfg, model, opt, rng, manifest, epoch, log);
      if (improved) save_checkpoint(out_dir / "best.ckpt", ck);
      save_checkpoint(out_dir / "last.ckpt", ck);
      csv << metrics_row(rec) << '\n' << std::flush;
    }
    log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

LoadedModel load_model(const fs::path& checkpoint_path) {
  LoadedModel out;
  out.checkpoint = load_checkpoint(checkpoint_path);
  out.config = parse_run_config(out.checkpoint.config_json, checkpoint_path.string() + " config snapshot");
  out.config.pretrained.clear();
  if (out.config.model.num_classes == 0) out.config.model.num_classes = out.checkpoint.num_classes;
  out.model = build_model(out.config);
  restore_model(out.checkpoint, *out.model);
  return out;
}

}  // namespace prenet
