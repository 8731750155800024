#include "pnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "pnet/analysis.hpp"

namespace fs = std::filesystem;

namespace pnet {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (lr <= 0.0) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  model.validate();
  augment.validate();
}

std::string train_log_csv(const TrainLog& log) {
  std::string out = "epoch,train_loss,test_iou,test_dice,seconds\n";
  char buf[160];
  for (const auto& r : log.rows) {
    if (r.evaluated)
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.4f,%.4f,%.3f\n", r.epoch, r.mean_loss,
                    r.test_iou, r.test_dice, r.seconds);
    else
      std::snprintf(buf, sizeof(buf), "%d,%.6f,,,%.3f\n", r.epoch, r.mean_loss, r.seconds);
    out += buf;
  }
  return out;
}

namespace {

struct RngStreams {
  Rng init, shuffle, augment, dropout;

  explicit RngStreams(uint64_t seed)
      : init(substream_seed(seed, "init")),
        shuffle(substream_seed(seed, "shuffle")),
        augment(substream_seed(seed, "augment")),
        dropout(substream_seed(seed, "dropout")) {}

  std::vector<std::pair<std::string, uint64_t>> states() const {
    return {{"init", init.state},
            {"shuffle", shuffle.state},
            {"augment", augment.state},
            {"dropout", dropout.state}};
  }

  void restore(const std::vector<std::pair<std::string, uint64_t>>& saved) {
    for (const auto& [name, state] : saved) {
      if (name == "init")
        init.state = state;
      else if (name == "shuffle")
        shuffle.state = state;
      else if (name == "augment")
        augment.state = state;
      else if (name == "dropout")
        dropout.state = state;
      else
        throw DataError("checkpoint: unknown rng stream '" + name + "'");
    }
  }
};

// Split-level confusion in eval mode, batch 1 per image.
ConfusionCounts eval_confusion(PNet& model, const SampleManifest& manifest,
                               const std::vector<size_t>& indices) {
  ConfusionCounts counts;
  for (size_t idx : indices) {
    Sample s = load_sample(manifest.entries[idx], manifest.target_w, manifest.target_h);
    Tensor4 logits = model.forward(s.image, Mode::eval);
    accumulate_confusion(predict_mask(logits), s.mask, counts);
  }
  return counts;
}

}  // namespace

TrainResult train(const TrainConfig& config, const SampleManifest& manifest,
                  const std::string& resume_path) {
  config.validate();
  if (manifest.target_w % 16 != 0 || manifest.target_h % 16 != 0)
    throw ConfigError("manifest target size must be divisible by 16");
  const auto train_idx = manifest.split_indices("train");
  if (train_idx.empty()) throw DataError("manifest has no train split");
  const auto test_idx = manifest.split_indices("test");

  PNet model(config.model);
  RngStreams rng(config.seed);
  model.init_weights(rng.init);
  AdamState adam = model.make_adam_state();
  int start_epoch = 0;

  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    restore_model(model, ck);
    adam = restore_adam(model, ck);  // refuses eval-only checkpoints
    rng.restore(ck.rng_streams);
    start_epoch = static_cast<int>(ck.epoch);
  }

  if (!config.out_dir.empty()) fs::create_directories(config.out_dir);

  TrainResult result;
  auto snapshot = [&](uint64_t epoch) {
    Checkpoint ck = snapshot_model(model, &adam);
    ck.train_w = manifest.target_w;
    ck.train_h = manifest.target_h;
    ck.dataset_name = manifest.dataset_name;
    ck.epoch = epoch;
    ck.rng_streams = rng.states();
    return ck;
  };

  for (int epoch = start_epoch + 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const uint64_t shuffle_seed = rng.shuffle.next_u64();
    const uint64_t augment_seed = rng.augment.next_u64();
    BatchStream stream(manifest, "train", config.batch_size, shuffle_seed,
                       config.augment_enabled ? &config.augment : nullptr, augment_seed);

    double loss_sum = 0.0;
    int batch_index = 0;
    Batch batch;
    while (stream.next(batch)) {
      const double loss =
          model.train_step(batch.images, batch.masks, adam, config.lr, rng.dropout);
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      loss_sum += loss;
      ++batch_index;
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.mean_loss = loss_sum / std::max(1, batch_index);

    const bool evaluate_now =
        !test_idx.empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
    if (evaluate_now) {
      ConfusionCounts counts = eval_confusion(model, manifest, test_idx);
      row.evaluated = true;
      row.test_iou = iou(counts);
      row.test_dice = dice(counts);
      if (row.test_dice > result.best_dice) {
        result.best_dice = row.test_dice;
        result.best_epoch = epoch;
        result.best_checkpoint = snapshot(static_cast<uint64_t>(epoch));
      }
    }

    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.rows.push_back(row);

    if (!config.quiet) {
      if (row.evaluated)
        std::printf("[epoch %d/%d] loss %.4f  test iou %.4f dice %.4f  (%.1f s)\n", epoch,
                    config.epochs, row.mean_loss, row.test_iou, row.test_dice, row.seconds);
      else
        std::printf("[epoch %d/%d] loss %.4f  (%.1f s)\n", epoch, config.epochs, row.mean_loss,
                    row.seconds);
      std::fflush(stdout);
    }
  }

  result.final_checkpoint = snapshot(static_cast<uint64_t>(config.epochs));
  if (result.best_dice < 0.0) {
    result.best_checkpoint = result.final_checkpoint;
    result.best_epoch = config.epochs;
  }

  if (!config.out_dir.empty()) {
    result.final_path = (fs::path(config.out_dir) / "final.ckpt").string();
    result.best_path = (fs::path(config.out_dir) / "best.ckpt").string();
    result.log_path = (fs::path(config.out_dir) / "train_log.csv").string();
    save_checkpoint(result.final_checkpoint, result.final_path);
    save_checkpoint(result.best_checkpoint, result.best_path);
    std::ofstream log_file(result.log_path);
    if (!log_file) throw DataError("cannot write train log: " + result.log_path);
    log_file << train_log_csv(result.log);
  }
  return result;
}

MetricsReport evaluate(const Checkpoint& ckpt, const SampleManifest& manifest,
                       const EvalOptions& opts) {
  if (ckpt.train_w > 0 &&
      (ckpt.train_w != manifest.target_w || ckpt.train_h != manifest.target_h))
    throw DataError("checkpoint was trained at " + std::to_string(ckpt.train_w) + "x" +
                    std::to_string(ckpt.train_h) + " but the dataset targets " +
                    std::to_string(manifest.target_w) + "x" +
                    std::to_string(manifest.target_h));

  const auto indices = manifest.split_indices(opts.split);
  if (indices.empty()) throw DataError("split '" + opts.split + "' has no entries");

  PNet model(ckpt.config);
  restore_model(model, ckpt);

  if (!opts.dump_masks_dir.empty()) fs::create_directories(opts.dump_masks_dir);

  ConfusionCounts micro;
  double iou_sum = 0.0, dice_sum = 0.0;
  for (size_t idx : indices) {
    const ManifestEntry& entry = manifest.entries[idx];
    Sample s = load_sample(entry, manifest.target_w, manifest.target_h);
    Tensor4 logits = model.forward(s.image, Mode::eval);
    IntGrid pred = predict_mask(logits);

    ConfusionCounts counts;
    accumulate_confusion(pred, s.mask, counts);
    micro.merge(counts);
    iou_sum += iou(counts);
    dice_sum += dice(counts);

    if (!opts.dump_masks_dir.empty()) {
      const std::string stem = fs::path(entry.image_path).stem().string();
      write_mask_png(pred, (fs::path(opts.dump_masks_dir) / (stem + ".png")).string());
    }
  }

  MetricsReport report;
  report.dataset = manifest.dataset_name.empty() ? ckpt.dataset_name : manifest.dataset_name;
  report.method = opts.per_image ? "pnet+per-image" : "pnet";
  if (opts.per_image) {
    report.iou = iou_sum / static_cast<double>(indices.size());
    report.dice = dice_sum / static_cast<double>(indices.size());
  } else {
    report.iou = iou(micro);
    report.dice = dice(micro);
  }
  report.params = param_count(ckpt.config);
  report.flops = flop_count(ckpt.config, manifest.target_h, manifest.target_w);

  if (opts.run_fps) {
    Sample s = load_sample(manifest.entries[indices[0]], manifest.target_w, manifest.target_h);
    report.fps = fps_benchmark([&] { model.forward(s.image, Mode::eval); }, opts.fps_warmup,
                               opts.fps_iters);
  }
  return report;
}

void write_mask_png(const IntGrid& mask, const std::string& path) {
  if (mask.n != 1) throw ShapeError("write_mask_png: expected a single-image mask");
  cv::Mat m(mask.h, mask.w, CV_8UC1);
  for (int r = 0; r < mask.h; ++r) {
    uint8_t* row = m.ptr<uint8_t>(r);
    for (int q = 0; q < mask.w; ++q) row[q] = mask.at(0, r, q) != 0 ? 255 : 0;
  }
  if (!cv::imwrite(path, m)) throw DataError("cannot write mask PNG: " + path);
}

}  // namespace pnet
