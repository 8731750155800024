#include "pnet/model.hpp"

#include <cmath>

namespace pnet {

std::string to_string(DownsampleVariant v) {
  switch (v) {
    case DownsampleVariant::conv5x5: return "conv5x5";
    case DownsampleVariant::conv3x3: return "conv3x3";
    case DownsampleVariant::conv3x3_maxpool: return "conv3x3_maxpool";
  }
  return "conv5x5";
}

DownsampleVariant downsample_variant_from_string(const std::string& s) {
  if (s == "conv5x5") return DownsampleVariant::conv5x5;
  if (s == "conv3x3") return DownsampleVariant::conv3x3;
  if (s == "conv3x3_maxpool") return DownsampleVariant::conv3x3_maxpool;
  throw ConfigError("unknown downsample variant '" + s +
                    "' (expected conv5x5 | conv3x3 | conv3x3_maxpool)");
}

void ModelConfig::validate() const {
  for (int wd : stage_widths)
    if (wd < 1) throw ConfigError("ModelConfig: stage widths must be >= 1");
  if (decoder_width < 1) throw ConfigError("ModelConfig: decoder width must be >= 1");
  if (num_classes < 2) throw ConfigError("ModelConfig: num_classes must be >= 2");
  if (dilation_r1 < 1 || dilation_r2 < 1)
    throw ConfigError("ModelConfig: dilation rates must be >= 1");
  if (dropout_rate < 0.0f || dropout_rate >= 1.0f)
    throw ConfigError("ModelConfig: dropout rate must be in [0, 1)");
  if (input_channels < 1) throw ConfigError("ModelConfig: input channels must be >= 1");
}

// ---------------------------------------------------------------------------
// Conv2dLayer
// ---------------------------------------------------------------------------

void Conv2dLayer::init(const std::string& layer_name, int out_c, int in_c, int k, int stride,
                       int pad, int dilation) {
  name = layer_name;
  spec = ConvSpec{k, k, stride, pad, dilation};
  w = Tensor4(out_c, in_c, k, k);
  b.assign(out_c, 0.0f);
  gw = Tensor4(out_c, in_c, k, k);
  gb.assign(out_c, 0.0f);
}

void Conv2dLayer::init_weights(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(w.c) * w.h * w.w;
  const double std_dev = std::sqrt(gain / fan_in);
  for (auto& v : w.data) v = static_cast<float>(rng.normal() * std_dev);
  std::fill(b.begin(), b.end(), 0.0f);
}

Tensor4 Conv2dLayer::forward(const Tensor4& x, bool retain) {
  if (retain) cached_x = x;
  return conv2d_forward(x, w, b, spec);
}

Tensor4 Conv2dLayer::backward(const Tensor4& grad_out) {
  ConvGrads g = conv2d_backward(cached_x, w, spec, grad_out);
  for (size_t i = 0; i < gw.size(); ++i) gw.data[i] += g.w.data[i];
  for (size_t i = 0; i < gb.size(); ++i) gb[i] += g.b[i];
  return g.x;
}

void Conv2dLayer::zero_grads() {
  std::fill(gw.data.begin(), gw.data.end(), 0.0f);
  std::fill(gb.begin(), gb.end(), 0.0f);
}

// ---------------------------------------------------------------------------
// BatchNormLayer
// ---------------------------------------------------------------------------

void BatchNormLayer::init(const std::string& layer_name, int channels) {
  name = layer_name;
  state.reset(channels);
  gscale.assign(channels, 0.0f);
  gshift.assign(channels, 0.0f);
}

Tensor4 BatchNormLayer::forward(const Tensor4& x, Mode mode, bool retain) {
  return batchnorm_forward(x, state, mode, retain ? &cache : nullptr);
}

Tensor4 BatchNormLayer::backward(const Tensor4& grad_out) {
  std::vector<float> gs, gh;
  Tensor4 gx = batchnorm_backward(grad_out, state, cache, gs, gh);
  for (size_t i = 0; i < gscale.size(); ++i) {
    gscale[i] += gs[i];
    gshift[i] += gh[i];
  }
  return gx;
}

void BatchNormLayer::zero_grads() {
  std::fill(gscale.begin(), gscale.end(), 0.0f);
  std::fill(gshift.begin(), gshift.end(), 0.0f);
}

// ---------------------------------------------------------------------------
// DownsampleBlock
// ---------------------------------------------------------------------------

void DownsampleBlock::init(const std::string& prefix, int in_c, int out_c,
                           DownsampleVariant v) {
  variant = v;
  switch (v) {
    case DownsampleVariant::conv5x5:
      conv.init(prefix, out_c, in_c, 5, 2, 2, 1);
      break;
    case DownsampleVariant::conv3x3:
      conv.init(prefix, out_c, in_c, 3, 2, 1, 1);
      break;
    case DownsampleVariant::conv3x3_maxpool:
      conv.init(prefix, out_c, in_c, 3, 1, 1, 1);
      break;
  }
  bn.init(prefix + ".bn", out_c);
}

Tensor4 DownsampleBlock::forward(const Tensor4& x, Mode mode, bool retain) {
  Tensor4 y = conv.forward(x, retain);
  if (variant == DownsampleVariant::conv3x3_maxpool) {
    pool_in_h = y.h;
    pool_in_w = y.w;
    MaxPoolResult p = maxpool2d_forward(y);
    if (retain) pool_argmax = std::move(p.argmax);
    y = std::move(p.y);
  }
  y = bn.forward(y, mode, retain);
  if (retain) pre_relu = y;
  return relu_forward(y);
}

Tensor4 DownsampleBlock::backward(const Tensor4& grad_out) {
  Tensor4 g = relu_backward(grad_out, pre_relu);
  g = bn.backward(g);
  if (variant == DownsampleVariant::conv3x3_maxpool)
    g = maxpool2d_backward(g, pool_argmax, pool_in_h, pool_in_w);
  return conv.backward(g);
}

// ---------------------------------------------------------------------------
// PatchBlock
// ---------------------------------------------------------------------------

void PatchBlock::init(const std::string& prefix, int channels, int r1, int r2) {
  conv_a.init(prefix + ".conv_a", channels, channels, 3, 1, r1, r1);
  conv_b.init(prefix + ".conv_b", channels, channels, 3, 1, r2, r2);
  bn_a.init(prefix + ".bn_a", channels);
  bn_b.init(prefix + ".bn_b", channels);
}

Tensor4 PatchBlock::forward(const Tensor4& x, Mode mode, bool retain) {
  Tensor4 t = conv_a.forward(x, retain);
  t = bn_a.forward(t, mode, retain);
  if (retain) pre_relu_a = t;
  t = relu_forward(t);
  t = conv_b.forward(t, retain);
  t = bn_b.forward(t, mode, retain);
  if (retain) pre_relu_b = t;
  t = relu_forward(t);
  return add(x, t);
}

Tensor4 PatchBlock::backward(const Tensor4& grad_out) {
  // residual: gradient flows both through the conv path and straight past it
  Tensor4 g = relu_backward(grad_out, pre_relu_b);
  g = bn_b.backward(g);
  g = conv_b.backward(g);
  g = relu_backward(g, pre_relu_a);
  g = bn_a.backward(g);
  g = conv_a.backward(g);
  return add(g, grad_out);
}

// ---------------------------------------------------------------------------
// PNet
// ---------------------------------------------------------------------------

PNet::PNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  int in_c = config_.input_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "enc" + std::to_string(i + 1);
    const int out_c = config_.stage_widths[static_cast<size_t>(i)];
    stages_[static_cast<size_t>(i)].down.init(prefix + ".down", in_c, out_c, config_.downsample);
    stages_[static_cast<size_t>(i)].patch.init(prefix + ".patch", out_c, config_.dilation_r1,
                                               config_.dilation_r2);
    in_c = out_c;
  }
  skip_channels_ = config_.stage_widths[0];
  const int concat_c = config_.stage_widths[3] + skip_channels_;
  fuse_conv_.init("dec.fuse", config_.decoder_width, concat_c, 3, 1, 1, 1);
  fuse_bn_.init("dec.fuse.bn", config_.decoder_width);
  mix_conv_.init("dec.mix", config_.decoder_width, config_.decoder_width, 1, 1, 0, 1);
  mix_bn_.init("dec.mix.bn", config_.decoder_width);
  classify_conv_.init("dec.classify", config_.num_classes, config_.decoder_width, 1, 1, 0, 1);
}

void PNet::init_weights(Rng& rng) {
  // canonical order: encoder stages, then decoder
  for (auto& st : stages_) {
    st.down.conv.init_weights(rng);
    st.patch.conv_a.init_weights(rng);
    st.patch.conv_b.init_weights(rng);
  }
  fuse_conv_.init_weights(rng);
  mix_conv_.init_weights(rng);
  classify_conv_.init_weights(rng, 1.0);
}

Tensor4 PNet::forward(const Tensor4& x, Mode mode, Rng* dropout_rng) {
  if (x.c != config_.input_channels)
    throw ShapeError("pnet_forward: expected " + std::to_string(config_.input_channels) +
                     " input channels, got " + std::to_string(x.c));
  if (x.h % 16 != 0 || x.w % 16 != 0)
    throw ShapeError("pnet_forward: input " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                     " not divisible by 16; resize the input first");
  const bool retain = (mode == Mode::train);

  Tensor4 t = x;
  Tensor4 skip;
  for (int i = 0; i < 4; ++i) {
    auto& st = stages_[static_cast<size_t>(i)];
    t = st.down.forward(t, mode, retain);
    if (i == 0 && config_.skip_pre_block) skip = t;
    t = st.patch.forward(t, mode, retain);
    if (i == 0 && !config_.skip_pre_block) skip = t;
  }

  up8_in_h_ = t.h;
  up8_in_w_ = t.w;
  t = bilinear_upsample(t, 8);
  t = concat_channels(t, skip);  // decoder features first, skip second

  t = fuse_conv_.forward(t, retain);
  t = fuse_bn_.forward(t, mode, retain);
  if (retain) fuse_pre_relu_ = t;
  t = relu_forward(t);

  if (mode == Mode::train && config_.dropout_rate > 0.0f) {
    if (!dropout_rng)
      throw ConfigError("pnet_forward: train mode with dropout requires an rng");
    t = dropout_forward(t, config_.dropout_rate, mode, *dropout_rng, &dropout_mask_);
  } else if (retain) {
    dropout_mask_.assign(t.size(), 1.0f);
  }

  t = mix_conv_.forward(t, retain);
  t = mix_bn_.forward(t, mode, retain);
  if (retain) mix_pre_relu_ = t;
  t = relu_forward(t);

  t = classify_conv_.forward(t, retain);
  up2_in_h_ = t.h;
  up2_in_w_ = t.w;
  return bilinear_upsample(t, 2);
}

Tensor4 PNet::backward(const Tensor4& grad_logits) {
  Tensor4 g = bilinear_upsample_backward(grad_logits, 2, up2_in_h_, up2_in_w_);
  g = classify_conv_.backward(g);

  g = relu_backward(g, mix_pre_relu_);
  g = mix_bn_.backward(g);
  g = mix_conv_.backward(g);

  g = dropout_backward(g, dropout_mask_);

  g = relu_backward(g, fuse_pre_relu_);
  g = fuse_bn_.backward(g);
  g = fuse_conv_.backward(g);

  Tensor4 g_dec, g_skip;
  split_channels(g, config_.stage_widths[3], g_dec, g_skip);
  g = bilinear_upsample_backward(g_dec, 8, up8_in_h_, up8_in_w_);

  for (int i = 3; i >= 0; --i) {
    auto& st = stages_[static_cast<size_t>(i)];
    if (i == 0 && !config_.skip_pre_block) g = add(g, g_skip);
    g = st.patch.backward(g);
    if (i == 0 && config_.skip_pre_block) g = add(g, g_skip);
    g = st.down.backward(g);
  }
  return g;
}

double PNet::train_step(const Tensor4& images, const IntGrid& masks, AdamState& adam,
                        double lr, Rng& dropout_rng) {
  zero_grads();
  Tensor4 logits = forward(images, Mode::train, &dropout_rng);
  SoftmaxCrossEntropyResult ce = softmax_cross_entropy(logits, masks);
  backward(ce.grad_logits);
  adam_step(named_params(), adam, lr);
  return ce.loss;
}

void PNet::zero_grads() {
  for (auto& st : stages_) {
    st.down.conv.zero_grads();
    st.down.bn.zero_grads();
    st.patch.conv_a.zero_grads();
    st.patch.conv_b.zero_grads();
    st.patch.bn_a.zero_grads();
    st.patch.bn_b.zero_grads();
  }
  fuse_conv_.zero_grads();
  fuse_bn_.zero_grads();
  mix_conv_.zero_grads();
  mix_bn_.zero_grads();
  classify_conv_.zero_grads();
}

namespace {

void push_conv(std::vector<NamedParam>& out, Conv2dLayer& c) {
  out.push_back({c.name + ".w", &c.w.data, &c.gw.data});
  out.push_back({c.name + ".b", &c.b, &c.gb});
}

void push_bn(std::vector<NamedParam>& out, BatchNormLayer& bn) {
  out.push_back({bn.name + ".scale", &bn.state.scale, &bn.gscale});
  out.push_back({bn.name + ".shift", &bn.state.shift, &bn.gshift});
}

void push_bn_running(std::vector<NamedParam>& out, BatchNormLayer& bn) {
  out.push_back({bn.name + ".running_mean", &bn.state.running_mean, nullptr});
  out.push_back({bn.name + ".running_var", &bn.state.running_var, nullptr});
}

}  // namespace

std::vector<NamedParam> PNet::named_params() {
  std::vector<NamedParam> out;
  for (auto& st : stages_) {
    push_conv(out, st.down.conv);
    push_bn(out, st.down.bn);
    push_conv(out, st.patch.conv_a);
    push_bn(out, st.patch.bn_a);
    push_conv(out, st.patch.conv_b);
    push_bn(out, st.patch.bn_b);
  }
  push_conv(out, fuse_conv_);
  push_bn(out, fuse_bn_);
  push_conv(out, mix_conv_);
  push_bn(out, mix_bn_);
  push_conv(out, classify_conv_);
  return out;
}

std::vector<NamedParam> PNet::named_tensors() {
  std::vector<NamedParam> out = named_params();
  for (auto& st : stages_) {
    push_bn_running(out, st.down.bn);
    push_bn_running(out, st.patch.bn_a);
    push_bn_running(out, st.patch.bn_b);
  }
  push_bn_running(out, fuse_bn_);
  push_bn_running(out, mix_bn_);
  return out;
}

AdamState PNet::make_adam_state() {
  AdamState st;
  st.init_for(named_params());
  return st;
}

}  // namespace pnet
