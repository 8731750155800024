#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding, dilated taps)
// ---------------------------------------------------------------------------

// x: [n, in_c, h, w], w: [out_c, in_c, kh, kw], b: [out_c].
Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w, const std::vector<float>& b,
                       const ConvSpec& spec);

struct ConvGrads {
  Tensor4 x;
  Tensor4 w;
  std::vector<float> b;
};

ConvGrads conv2d_backward(const Tensor4& x, const Tensor4& w, const ConvSpec& spec,
                          const Tensor4& grad_out);

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (odd trailing rows/cols behave as -inf padding)
// ---------------------------------------------------------------------------

struct MaxPoolResult {
  Tensor4 y;
  std::vector<int32_t> argmax;  // per output element, linear index into the input plane
};

MaxPoolResult maxpool2d_forward(const Tensor4& x);
Tensor4 maxpool2d_backward(const Tensor4& grad_out, const std::vector<int32_t>& argmax,
                           int in_h, int in_w);

// ---------------------------------------------------------------------------
// Bilinear upsampling, half-pixel centers (align-corners off)
// ---------------------------------------------------------------------------

Tensor4 bilinear_upsample(const Tensor4& x, int factor);
// Transpose of the interpolation map; needs the input spatial dims back.
Tensor4 bilinear_upsample_backward(const Tensor4& grad_out, int factor, int in_h, int in_w);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormState {
  int channels = 0;
  std::vector<float> scale, shift;              // learned
  std::vector<float> running_mean, running_var; // tracked, not learned
  float momentum = 0.1f;
  float epsilon = 1e-5f;

  explicit BatchNormState(int c = 0) { reset(c); }
  void reset(int c) {
    channels = c;
    scale.assign(c, 1.0f);
    shift.assign(c, 0.0f);
    running_mean.assign(c, 0.0f);
    running_var.assign(c, 1.0f);
  }
};

struct BatchNormCache {
  Tensor4 xhat;
  std::vector<float> inv_std;  // per channel, of the statistics used
  Mode mode = Mode::train;
};

// Train mode normalizes by batch statistics over (n, h, w) per channel and
// updates running stats; eval mode uses the running stats.
Tensor4 batchnorm_forward(const Tensor4& x, BatchNormState& state, Mode mode,
                          BatchNormCache* cache = nullptr);
Tensor4 batchnorm_backward(const Tensor4& grad_out, const BatchNormState& state,
                           const BatchNormCache& cache, std::vector<float>& grad_scale,
                           std::vector<float>& grad_shift);

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor4 relu_forward(const Tensor4& x);
Tensor4 relu_backward(const Tensor4& grad_out, const Tensor4& x_pre);

Tensor4 add(const Tensor4& a, const Tensor4& b);

// Channel stacking; argument order preserved (a's channels first).
Tensor4 concat_channels(const Tensor4& a, const Tensor4& b);
void split_channels(const Tensor4& grad, int c_a, Tensor4& grad_a, Tensor4& grad_b);

// Inverted dropout: train mode zeroes with probability rate and scales
// survivors by 1/(1-rate); eval mode is the identity. The mask (0 or the
// survivor scale) is written for the backward pass.
Tensor4 dropout_forward(const Tensor4& x, float rate, Mode mode, Rng& rng,
                        std::vector<float>* mask_out = nullptr);
Tensor4 dropout_backward(const Tensor4& grad_out, const std::vector<float>& mask);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct SoftmaxCrossEntropyResult {
  double loss = 0.0;
  Tensor4 grad_logits;
};

// Mean pixelwise cross entropy over n*h*w; grad = (softmax - onehot)/(n*h*w).
SoftmaxCrossEntropyResult softmax_cross_entropy(const Tensor4& logits, const IntGrid& target);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct NamedParam {
  std::string name;
  std::vector<float>* value = nullptr;
  std::vector<float>* grad = nullptr;
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  void init_for(const std::vector<NamedParam>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value->size(), 0.0f);
      v.emplace_back(p.value->size(), 0.0f);
    }
    t = 0;
  }
};

// One bias-corrected update across every parameter; the step counter
// increments exactly once per call.
void adam_step(const std::vector<NamedParam>& params, AdamState& state, double lr);

}  // namespace pnet
