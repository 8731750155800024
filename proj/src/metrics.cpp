#include "pnet/metrics.hpp"

#include <chrono>
#include <cstdio>

namespace pnet {

IntGrid predict_mask(const Tensor4& logits) {
  if (logits.c < 2) throw ShapeError("predict_mask: need at least 2 channels");
  IntGrid out(logits.n, logits.h, logits.w);
  for (int ni = 0; ni < logits.n; ++ni)
    for (int r = 0; r < logits.h; ++r)
      for (int q = 0; q < logits.w; ++q) {
        int best = 0;
        float best_v = logits.at(ni, 0, r, q);
        for (int k = 1; k < logits.c; ++k) {
          const float v = logits.at(ni, k, r, q);
          if (v > best_v) {  // strict: ties stay on the lower index
            best_v = v;
            best = k;
          }
        }
        out.at(ni, r, q) = best;
      }
  return out;
}

void accumulate_confusion(const IntGrid& pred, const IntGrid& gt, ConfusionCounts& counts) {
  if (!pred.same_shape(gt))
    throw ShapeError("accumulate_confusion: prediction and ground truth shapes differ");
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0;
    const bool g = gt.data[i] != 0;
    if (p && g)
      ++counts.tp;
    else if (p && !g)
      ++counts.fp;
    else if (!p && g)
      ++counts.fn;
    else
      ++counts.tn;
  }
}

double iou(const ConfusionCounts& c) {
  const uint64_t denom = c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice(const ConfusionCounts& c) {
  const uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double fps_benchmark(const std::function<void()>& run_once, int warmup, int iters) {
  if (iters < 1) throw ConfigError("fps_benchmark: iters must be >= 1");
  for (int i = 0; i < warmup; ++i) run_once();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) run_once();
  const auto t1 = std::chrono::steady_clock::now();
  const double sec = std::chrono::duration<double>(t1 - t0).count();
  return sec > 0.0 ? iters / sec : 0.0;
}

std::string emit_report(const std::vector<MetricsReport>& reports) {
  std::string out = "Dataset,Method,IOU,Dice,Params,FLOPs,FPS\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%.4f,%lld,%lld,%.4f\n", r.dataset.c_str(),
                  r.method.c_str(), r.iou, r.dice, static_cast<long long>(r.params),
                  static_cast<long long>(r.flops), r.fps);
    out += buf;
  }
  return out;
}

}  // namespace pnet
