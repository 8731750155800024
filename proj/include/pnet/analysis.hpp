#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pnet/model.hpp"

namespace pnet {

struct LayerStat {
  std::string name;
  int out_c = 0, out_h = 0, out_w = 0;
  int64_t params = 0;  // learned values (conv w+b, batchnorm scale+shift)
  int64_t flops = 0;   // eval-mode forward cost at this resolution
};

// Per-layer shape/cost ledger; param_count and flop_count are its totals,
// so the three always reconcile exactly.
struct StageTrace {
  std::vector<LayerStat> layers;
  int64_t total_params = 0;
  int64_t total_flops = 0;
};

StageTrace stage_shapes(const ModelConfig& config, int H, int W);

// Resolution-independent learned-parameter count.
int64_t param_count(const ModelConfig& config);

// Eval-mode forward FLOPs at H x W. Convolutions count 2*k^2*in_c*out_c
// per output element (k^2*in_c multiplies, k^2*in_c-1 adds, 1 bias add);
// elementwise layers count per-element costs. Exactly linear in H*W.
int64_t flop_count(const ModelConfig& config, int H, int W);

// Pixel span of a dilated kernel: k + (k-1)*(rate-1).
int effective_kernel(int k, int rate);

// Exact-cover rule: the gap between adjacent second-conv taps (r2 - 1
// cells) must equal the first conv's effective range, i.e.
// r2 == effective_kernel(3, r1) + 1.
bool dilation_pair_covers(int r1, int r2);

// Relaxed reading: ranges may undershoot the gap but must not overlap,
// r2 >= effective_kernel(3, r1) + 1.
bool dilation_pair_covers_at_least(int r1, int r2);

}  // namespace pnet
