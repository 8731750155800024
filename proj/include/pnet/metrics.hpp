#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pnet/tensor.hpp"

namespace pnet {

// Pixel counts for the foreground class, accumulated across a split.
struct ConfusionCounts {
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  uint64_t total() const { return tp + fp + fn + tn; }
  void merge(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
  }
};

struct MetricsReport {
  std::string dataset;
  std::string method;
  double iou = 0.0;
  double dice = 0.0;
  int64_t params = 0;
  int64_t flops = 0;
  double fps = 0.0;
};

// Per-pixel argmax over channels; ties go to the lower class index.
IntGrid predict_mask(const Tensor4& logits);

void accumulate_confusion(const IntGrid& pred, const IntGrid& gt, ConfusionCounts& counts);

// Empty-vs-empty (tp+fp+fn == 0) is defined as 1.0.
double iou(const ConfusionCounts& c);
double dice(const ConfusionCounts& c);

// Wall-clock throughput of run_once after a warmup, frames per second.
double fps_benchmark(const std::function<void()>& run_once, int warmup = 10, int iters = 100);

// CSV with header Dataset,Method,IOU,Dice,Params,FLOPs,FPS; metrics at
// fixed 4-decimal precision.
std::string emit_report(const std::vector<MetricsReport>& reports);

}  // namespace pnet
