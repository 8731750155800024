#include "pnet/analysis.hpp"

namespace pnet {

namespace {

struct TraceBuilder {
  StageTrace trace;
  int64_t px(const LayerStat& s) const {
    return static_cast<int64_t>(s.out_h) * s.out_w;
  }

  void conv(const std::string& name, int in_c, int out_c, int k, int out_h, int out_w) {
    LayerStat s{name, out_c, out_h, out_w, 0, 0};
    s.params = static_cast<int64_t>(k) * k * in_c * out_c + out_c;
    s.flops = 2LL * k * k * in_c * out_c * px(s);
    add(s);
  }
  void batchnorm(const std::string& name, int c, int h, int w) {
    // scale + shift per element
    add({name, c, h, w, 2LL * c, 2LL * c * h * w});
  }
  void relu(const std::string& name, int c, int h, int w) {
    add({name, c, h, w, 0, static_cast<int64_t>(c) * h * w});
  }
  void residual_add(const std::string& name, int c, int h, int w) {
    add({name, c, h, w, 0, static_cast<int64_t>(c) * h * w});
  }
  void maxpool(const std::string& name, int c, int out_h, int out_w) {
    // 3 comparisons per 2x2 window
    add({name, c, out_h, out_w, 0, 3LL * c * out_h * out_w});
  }
  void upsample(const std::string& name, int c, int out_h, int out_w) {
    // 4 muls + 3 adds per bilinear output element
    add({name, c, out_h, out_w, 0, 7LL * c * out_h * out_w});
  }
  void dropout(const std::string& name, int c, int h, int w) {
    // identity at eval time
    add({name, c, h, w, 0, 0});
  }
  void add(const LayerStat& s) {
    trace.layers.push_back(s);
    trace.total_params += s.params;
    trace.total_flops += s.flops;
  }
};

}  // namespace

StageTrace stage_shapes(const ModelConfig& config, int H, int W) {
  config.validate();
  if (H % 16 != 0 || W % 16 != 0)
    throw ConfigError("stage_shapes: " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by 16");

  TraceBuilder tb;
  int in_c = config.input_channels;
  int h = H, w = W;
  for (int i = 0; i < 4; ++i) {
    const std::string p = "enc" + std::to_string(i + 1);
    const int out_c = config.stage_widths[static_cast<size_t>(i)];
    const int oh = h / 2, ow = w / 2;
    switch (config.downsample) {
      case DownsampleVariant::conv5x5:
        tb.conv(p + ".down", in_c, out_c, 5, oh, ow);
        break;
      case DownsampleVariant::conv3x3:
        tb.conv(p + ".down", in_c, out_c, 3, oh, ow);
        break;
      case DownsampleVariant::conv3x3_maxpool:
        tb.conv(p + ".down", in_c, out_c, 3, h, w);
        tb.maxpool(p + ".down.pool", out_c, oh, ow);
        break;
    }
    tb.batchnorm(p + ".down.bn", out_c, oh, ow);
    tb.relu(p + ".down.relu", out_c, oh, ow);

    tb.conv(p + ".patch.conv_a", out_c, out_c, 3, oh, ow);
    tb.batchnorm(p + ".patch.bn_a", out_c, oh, ow);
    tb.relu(p + ".patch.relu_a", out_c, oh, ow);
    tb.conv(p + ".patch.conv_b", out_c, out_c, 3, oh, ow);
    tb.batchnorm(p + ".patch.bn_b", out_c, oh, ow);
    tb.relu(p + ".patch.relu_b", out_c, oh, ow);
    tb.residual_add(p + ".patch.add", out_c, oh, ow);

    in_c = out_c;
    h = oh;
    w = ow;
  }

  const int dh = H / 2, dw = W / 2;  // decoder resolution
  tb.upsample("dec.up8", config.stage_widths[3], dh, dw);
  const int concat_c = config.stage_widths[3] + config.stage_widths[0];
  tb.conv("dec.fuse", concat_c, config.decoder_width, 3, dh, dw);
  tb.batchnorm("dec.fuse.bn", config.decoder_width, dh, dw);
  tb.relu("dec.fuse.relu", config.decoder_width, dh, dw);
  tb.dropout("dec.dropout", config.decoder_width, dh, dw);
  tb.conv("dec.mix", config.decoder_width, config.decoder_width, 1, dh, dw);
  tb.batchnorm("dec.mix.bn", config.decoder_width, dh, dw);
  tb.relu("dec.mix.relu", config.decoder_width, dh, dw);
  tb.conv("dec.classify", config.decoder_width, config.num_classes, 1, dh, dw);
  tb.upsample("dec.up2", config.num_classes, H, W);

  return tb.trace;
}

int64_t param_count(const ModelConfig& config) {
  return stage_shapes(config, 16, 16).total_params;
}

int64_t flop_count(const ModelConfig& config, int H, int W) {
  return stage_shapes(config, H, W).total_flops;
}

int effective_kernel(int k, int rate) {
  if (k < 1 || k % 2 == 0) throw ConfigError("effective_kernel: k must be odd and >= 1");
  if (rate < 1) throw ConfigError("effective_kernel: rate must be >= 1");
  return k + (k - 1) * (rate - 1);
}

bool dilation_pair_covers(int r1, int r2) {
  if (r1 < 1 || r2 < 1) throw ConfigError("dilation_pair_covers: rates must be >= 1");
  return r2 == effective_kernel(3, r1) + 1;
}

bool dilation_pair_covers_at_least(int r1, int r2) {
  if (r1 < 1 || r2 < 1) throw ConfigError("dilation_pair_covers: rates must be >= 1");
  return r2 >= effective_kernel(3, r1) + 1;
}

}  // namespace pnet
