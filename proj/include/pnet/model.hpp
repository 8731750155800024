#pragma once

#include <array>
#include <string>
#include <vector>

#include "pnet/kernels.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

enum class DownsampleVariant { conv5x5, conv3x3, conv3x3_maxpool };

std::string to_string(DownsampleVariant v);
DownsampleVariant downsample_variant_from_string(const std::string& s);

// All architecture hyperparameters. Channel widths default to
// 32/64/128/256 with a 64-wide decoder; everything is configurable.
struct ModelConfig {
  std::array<int, 4> stage_widths = {32, 64, 128, 256};
  int decoder_width = 64;
  int num_classes = 2;
  int dilation_r1 = 2;
  int dilation_r2 = 6;
  DownsampleVariant downsample = DownsampleVariant::conv5x5;
  float dropout_rate = 0.3f;
  int input_channels = 3;
  // Where the skip connection taps encoder stage 1: after its patch block
  // (default) or straight off the downsample output.
  bool skip_pre_block = false;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Layers. Each owns its parameters, gradients and forward caches; backward
// is an explicit reverse traversal, no autograd tape.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  std::string name;
  ConvSpec spec;
  Tensor4 w;
  std::vector<float> b;
  Tensor4 gw;
  std::vector<float> gb;
  Tensor4 cached_x;

  void init(const std::string& layer_name, int out_c, int in_c, int k, int stride, int pad,
            int dilation);
  // Fan-in scaled normal, zero bias. Gain 2 ahead of relu, 1 for the
  // linear classifier head.
  void init_weights(Rng& rng, double gain = 2.0);
  Tensor4 forward(const Tensor4& x, bool retain);
  Tensor4 backward(const Tensor4& grad_out);
  void zero_grads();
};

struct BatchNormLayer {
  std::string name;
  BatchNormState state;
  std::vector<float> gscale, gshift;
  BatchNormCache cache;

  void init(const std::string& layer_name, int channels);
  Tensor4 forward(const Tensor4& x, Mode mode, bool retain);
  Tensor4 backward(const Tensor4& grad_out);
  void zero_grads();
};

// conv -> (optional 2x2 maxpool) -> batchnorm -> relu
struct DownsampleBlock {
  DownsampleVariant variant = DownsampleVariant::conv5x5;
  Conv2dLayer conv;
  BatchNormLayer bn;
  std::vector<int32_t> pool_argmax;
  int pool_in_h = 0, pool_in_w = 0;
  Tensor4 pre_relu;

  void init(const std::string& prefix, int in_c, int out_c, DownsampleVariant v);
  Tensor4 forward(const Tensor4& x, Mode mode, bool retain);
  Tensor4 backward(const Tensor4& grad_out);
};

// y = x + f2(f1(x)), fi = 3x3 conv(dilation r_i, pad r_i) -> batchnorm -> relu.
// No activation after the residual add.
struct PatchBlock {
  Conv2dLayer conv_a, conv_b;
  BatchNormLayer bn_a, bn_b;
  Tensor4 pre_relu_a, pre_relu_b;

  void init(const std::string& prefix, int channels, int r1, int r2);
  Tensor4 forward(const Tensor4& x, Mode mode, bool retain);
  Tensor4 backward(const Tensor4& grad_out);
};

// ---------------------------------------------------------------------------
// PNet: 4x (downsample -> patch block) encoder, upsample/concat/fuse decoder
// ---------------------------------------------------------------------------

struct EncoderStage {
  DownsampleBlock down;
  PatchBlock patch;
};

class PNet {
 public:
  explicit PNet(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  void init_weights(Rng& rng);

  // Train mode retains the caches backward() needs; eval mode does not.
  // dropout_rng is only consumed in train mode with a nonzero rate.
  Tensor4 forward(const Tensor4& x, Mode mode, Rng* dropout_rng = nullptr);

  // Accumulates parameter gradients and returns grad w.r.t. the input.
  Tensor4 backward(const Tensor4& grad_logits);

  // forward (train) -> cross-entropy -> backward -> one Adam step.
  double train_step(const Tensor4& images, const IntGrid& masks, AdamState& adam, double lr,
                    Rng& dropout_rng);

  void zero_grads();

  // Learned parameters in canonical order; serialization and Adam state
  // layout both depend on this order.
  std::vector<NamedParam> named_params();
  // Learned parameters plus batchnorm running stats (checkpoint payload).
  std::vector<NamedParam> named_tensors();

  AdamState make_adam_state();

 private:
  ModelConfig config_;
  std::array<EncoderStage, 4> stages_;
  Conv2dLayer fuse_conv_;
  BatchNormLayer fuse_bn_;
  Conv2dLayer mix_conv_;
  BatchNormLayer mix_bn_;
  Conv2dLayer classify_conv_;

  // decoder caches
  Tensor4 fuse_pre_relu_, mix_pre_relu_;
  std::vector<float> dropout_mask_;
  int skip_channels_ = 0;
  int up8_in_h_ = 0, up8_in_w_ = 0;
  int up2_in_h_ = 0, up2_in_w_ = 0;
};

}  // namespace pnet
