#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pnet/checkpoint.hpp"
#include "pnet/dataset.hpp"
#include "pnet/metrics.hpp"
#include "pnet/model.hpp"

namespace pnet {

struct TrainConfig {
  int epochs = 200;
  double lr = 1e-4;
  int batch_size = 2;
  uint64_t seed = 42;
  ModelConfig model;
  AugmentPolicy augment;
  bool augment_enabled = true;
  int eval_every = 10;        // test-split evaluation cadence (epochs)
  std::string out_dir;        // empty: keep results in memory only
  std::string run_name = "pnet";
  bool quiet = false;

  void validate() const;
};

struct TrainLogRow {
  int epoch = 0;
  double mean_loss = 0.0;
  bool evaluated = false;
  double test_iou = 0.0;
  double test_dice = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
};

std::string train_log_csv(const TrainLog& log);

struct TrainResult {
  TrainLog log;
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;  // by test Dice; == final when never evaluated
  double best_dice = -1.0;
  int best_epoch = 0;
  std::string final_path, best_path, log_path;  // empty when out_dir unset
};

// Full training run: shuffled augmented epochs, Adam updates, periodic
// test-split evaluation, best-Dice and final checkpoints.
TrainResult train(const TrainConfig& config, const SampleManifest& manifest,
                  const std::string& resume_path = "");

struct EvalOptions {
  std::string split = "test";
  bool per_image = false;      // per-image means instead of split-level micro average
  bool run_fps = true;
  int fps_warmup = 10;
  int fps_iters = 100;
  std::string dump_masks_dir;  // empty: no PNG dump
};

MetricsReport evaluate(const Checkpoint& ckpt, const SampleManifest& manifest,
                       const EvalOptions& opts = {});

// 0/255 grayscale PNG of a single-image mask.
void write_mask_png(const IntGrid& mask, const std::string& path);

}  // namespace pnet
