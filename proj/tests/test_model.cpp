#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracle_f64.hpp"
#include "oracles.hpp"
#include "pnet/analysis.hpp"
#include "pnet/model.hpp"

using namespace pnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_widths = {4, 6, 8, 10};
  cfg.decoder_width = 6;
  cfg.dropout_rate = 0.0f;
  return cfg;
}

}  // namespace

TEST_CASE("patch block: zero-initialized conv path is the exact identity") {
  PatchBlock block;
  block.init("blk", 3, 2, 6);  // weights, biases, bn shifts all start at zero
  Rng rng(2);
  Tensor4 x(2, 3, 7, 9);
  oracle::fill_uniform(x, rng);

  Tensor4 y_train = block.forward(x, Mode::train, true);
  CHECK(y_train.data == x.data);  // bit exact
  Tensor4 y_eval = block.forward(x, Mode::eval, false);
  CHECK(y_eval.data == x.data);
}

TEST_CASE("patch block: preserves spatial dims for any pad==dilation pair") {
  Rng rng(3);
  for (auto [r1, r2] : {std::pair{1, 1}, {2, 6}, {3, 8}, {5, 2}}) {
    for (auto [h, w] : {std::pair{1, 1}, {2, 5}, {13, 4}, {8, 8}}) {
      PatchBlock block;
      block.init("blk", 2, r1, r2);
      block.conv_a.init_weights(rng);
      block.conv_b.init_weights(rng);
      Tensor4 x(1, 2, h, w);
      oracle::fill_uniform(x, rng);
      Tensor4 y = block.forward(x, Mode::train, false);
      CHECK(y.h == h);
      CHECK(y.w == w);
      CHECK(y.c == 2);
    }
  }
}

TEST_CASE("patch block: gradients vs the 64-bit oracle on a 1x2x8x8 case") {
  // wrap the block in a projection to scalarize it
  PatchBlock block;
  block.init("blk", 2, 2, 6);
  Rng rng(7);
  block.conv_a.init_weights(rng);
  block.conv_b.init_weights(rng);
  oracle::fill_uniform(block.bn_a.state.shift, rng, -0.2, 0.2);
  oracle::fill_uniform(block.bn_b.state.shift, rng, -0.2, 0.2);

  Tensor4 x(1, 2, 8, 8);
  oracle::fill_uniform(x, rng);
  Tensor4 proj = oracle::random_projection(1, 2, 8, 8, 55);

  // forward+backward through the implementation
  Tensor4 y = block.forward(x, Mode::train, true);
  Tensor4 gx = block.backward(proj);

  auto scalar = [&] {
    oracle::f64::ParamMap p;
    p["blk.conv_a.w"] = &block.conv_a.w.data;
    p["blk.conv_a.b"] = &block.conv_a.b;
    p["blk.conv_b.w"] = &block.conv_b.w.data;
    p["blk.conv_b.b"] = &block.conv_b.b;
    p["blk.bn_a.scale"] = &block.bn_a.state.scale;
    p["blk.bn_a.shift"] = &block.bn_a.state.shift;
    p["blk.bn_b.scale"] = &block.bn_b.state.scale;
    p["blk.bn_b.shift"] = &block.bn_b.state.shift;
    oracle::f64::T out = oracle::f64::patch_block(oracle::f64::from(x), p, "blk", 2, 6, 1e-5);
    double total = 0.0;
    for (size_t i = 0; i < out.v.size(); ++i) total += out.v[i] * proj.data[i];
    return total;
  };

  oracle::GradCheck check;
  auto run_group = [&](const std::string& name, std::vector<float>& values,
                       const std::vector<float>& grads) {
    std::vector<double> fd(values.size());
    for (size_t i = 0; i < values.size(); ++i)
      fd[i] = oracle::fd_derivative(values, i, 1e-5, scalar);
    check.add(name, fd, grads);
  };

  run_group("x", x.data, gx.data);
  run_group("conv_a.w", block.conv_a.w.data, block.conv_a.gw.data);
  run_group("conv_a.b", block.conv_a.b, block.conv_a.gb);
  run_group("conv_b.w", block.conv_b.w.data, block.conv_b.gw.data);
  run_group("bn_a.scale", block.bn_a.state.scale, block.bn_a.gscale);
  run_group("bn_b.shift", block.bn_b.state.shift, block.bn_b.gshift);
  for (const auto& group : check.groups) {
    INFO(group.name, " rel err ", check.group_err(group));
    CHECK(check.group_err(group) < 1e-3);
  }
  (void)y;
}

TEST_CASE("downsample: stride-2 arithmetic across the variants") {
  Rng rng(5);
  for (auto v :
       {DownsampleVariant::conv5x5, DownsampleVariant::conv3x3, DownsampleVariant::conv3x3_maxpool}) {
    DownsampleBlock block;
    block.init("down", 3, 4, v);
    block.conv.init_weights(rng);
    Tensor4 x(1, 3, 96, 64);
    oracle::fill_uniform(x, rng);
    Tensor4 y = block.forward(x, Mode::train, false);
    CHECK(y.c == 4);
    CHECK(y.h == 48);
    CHECK(y.w == 32);
  }
}

TEST_CASE("downsample conv3x3_maxpool: constant input stays constant before the norm") {
  Tensor4 x(1, 2, 8, 8, 3.0f);
  Tensor4 w(1, 2, 3, 3, 1.0f);
  Tensor4 conv_out = conv2d_forward(x, w, {0.0f}, ConvSpec{3, 3, 1, 1, 1});
  MaxPoolResult pooled = maxpool2d_forward(conv_out);
  const float interior = 3.0f * 2 * 9;  // all taps in bounds
  for (float val : pooled.y.data) CHECK(val == doctest::Approx(interior));
}

TEST_CASE("pnet forward: 224x224 gives full-resolution logits, stages halve") {
  ModelConfig cfg;  // paper-default widths
  PNet model(cfg);
  Rng rng(11);
  model.init_weights(rng);
  Tensor4 x(2, 3, 224, 224);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  Tensor4 logits = model.forward(x, Mode::eval);
  CHECK(logits.n == 2);
  CHECK(logits.c == 2);
  CHECK(logits.h == 224);
  CHECK(logits.w == 224);

  StageTrace trace = stage_shapes(cfg, 224, 224);
  int expected = 112;
  for (const auto& layer : trace.layers) {
    if (layer.name.ends_with(".patch.add")) {
      CHECK(layer.out_h == expected);
      CHECK(layer.out_w == expected);
      expected /= 2;
    }
  }
}

TEST_CASE("pnet forward: 384x288 logits and 288-channel skip concat") {
  ModelConfig cfg;
  PNet model(cfg);
  Rng rng(13);
  model.init_weights(rng);
  Tensor4 x(1, 3, 384, 288);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  Tensor4 logits = model.forward(x, Mode::eval);
  CHECK(logits.n == 1);
  CHECK(logits.c == 2);
  CHECK(logits.h == 384);
  CHECK(logits.w == 288);

  // the fuse conv consumes 256+32=288 channels at half resolution
  StageTrace trace = stage_shapes(cfg, 384, 288);
  for (const auto& layer : trace.layers)
    if (layer.name == "dec.fuse") {
      CHECK(layer.out_h == 192);
      CHECK(layer.out_w == 144);
      CHECK(layer.params == 9LL * 288 * 64 + 64);
    }
}

TEST_CASE("pnet forward: eval mode is deterministic") {
  PNet model(tiny_config());
  Rng rng(17);
  model.init_weights(rng);
  Tensor4 x(1, 3, 32, 32);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  Tensor4 a = model.forward(x, Mode::eval);
  Tensor4 b = model.forward(x, Mode::eval);
  CHECK(a.data == b.data);  // bit identical
}

TEST_CASE("pnet forward: rejects sizes not divisible by 16") {
  PNet model(tiny_config());
  Tensor4 x(1, 3, 100, 100);
  CHECK_THROWS_AS(model.forward(x, Mode::eval), ShapeError);
}

TEST_CASE("pnet: full-model gradient check against the 64-bit oracle") {
  ModelConfig cfg = tiny_config();
  PNet model(cfg);
  Rng rng(23);
  model.init_weights(rng);

  Tensor4 x(1, 3, 32, 32);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  IntGrid target(1, 32, 32);
  for (auto& t : target.data) t = static_cast<int32_t>(rng.below(2));

  model.zero_grads();
  Tensor4 logits = model.forward(x, Mode::train, &rng);  // dropout rate is 0
  auto ce = softmax_cross_entropy(logits, target);
  model.backward(ce.grad_logits);

  // loss agreement between the float32 route and the float64 route
  const double f64_loss = oracle::f64::model_loss(model, x, target);
  CHECK(oracle::rel_err(ce.loss, f64_loss) < 1e-4);

  auto scalar = [&] { return oracle::f64::model_loss(model, x, target); };
  oracle::GradCheck check;
  for (auto& param : model.named_params()) {
    std::vector<double> fd(param.value->size());
    for (size_t i = 0; i < param.value->size(); ++i)
      fd[i] = oracle::fd_derivative(*param.value, i, 1e-5, scalar);
    check.add(param.name, fd, *param.grad);
  }
  for (const auto& group : check.groups) {
    const double err = check.group_err(group);
    const bool is_conv = group.name.ends_with(".w") || group.name.ends_with(".b");
    INFO(group.name, " group rel err ", err);
    CHECK(err < (is_conv ? 1e-3 : 1e-2));
  }
}

TEST_CASE("pnet train step: zero learning rate leaves parameters unchanged") {
  PNet model(tiny_config());
  Rng rng(29);
  model.init_weights(rng);
  AdamState adam = model.make_adam_state();

  Tensor4 x(2, 3, 32, 32);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  IntGrid masks(2, 32, 32);
  for (auto& t : masks.data) t = static_cast<int32_t>(rng.below(2));

  std::vector<std::vector<float>> before;
  for (auto& p : model.named_params()) before.push_back(*p.value);
  Rng dropout(1);
  model.train_step(x, masks, adam, 0.0, dropout);
  size_t idx = 0;
  for (auto& p : model.named_params()) CHECK(*p.value == before[idx++]);
}

TEST_CASE("pnet train step: initial loss on balanced random data is near ln 2") {
  PNet model(tiny_config());
  Rng rng(31);
  model.init_weights(rng);
  AdamState adam = model.make_adam_state();

  Tensor4 x(2, 3, 32, 32);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  IntGrid masks(2, 32, 32);
  for (auto& t : masks.data) t = static_cast<int32_t>(rng.below(2));

  Rng dropout(1);
  const double loss = model.train_step(x, masks, adam, 1e-4, dropout);
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(0.3));  // ln 2 +- 0.2
  CHECK(std::fabs(loss - std::log(2.0)) < 0.2);
}

// ---------------------------------------------------------------------------
// Analyzers
// ---------------------------------------------------------------------------

TEST_CASE("stage trace: hand-counted layer parameter examples") {
  ModelConfig cfg;
  cfg.stage_widths = {2, 4, 4, 4};
  cfg.decoder_width = 4;
  StageTrace trace = stage_shapes(cfg, 64, 64);

  int64_t down1 = -1, patch1 = 0;
  for (const auto& layer : trace.layers) {
    if (layer.name == "enc1.down") down1 = layer.params;
    if (layer.name.starts_with("enc1.patch")) patch1 += layer.params;
  }
  CHECK(down1 == 25 * 3 * 2 + 2);  // 152
  CHECK(patch1 == 84);             // 2*(9*2*2+2) convs + 2 batchnorms at C=2
}

TEST_CASE("param_count: default config lands in the expected range") {
  ModelConfig cfg;
  const int64_t params = param_count(cfg);
  CHECK(params >= 2'000'000);
  CHECK(params <= 5'000'000);
  // resolution independent
  CHECK(stage_shapes(cfg, 384, 288).total_params == params);
  CHECK(stage_shapes(cfg, 224, 224).total_params == params);
}

TEST_CASE("flop_count: resolution ratios match the published 41.61/23.4 and 10.62/23.4") {
  ModelConfig cfg;
  const double base = static_cast<double>(flop_count(cfg, 288, 384));
  const double etis = static_cast<double>(flop_count(cfg, 384, 512));
  const double skin = static_cast<double>(flop_count(cfg, 224, 224));
  CHECK(std::fabs(etis / base - 1.7778) / 1.7778 < 0.001);
  CHECK(std::fabs(skin / base - 0.4537) / 0.4537 < 0.001);
}

TEST_CASE("flop_count: exactly homogeneous in H*W") {
  ModelConfig cfg;
  cfg.stage_widths = {8, 8, 8, 8};
  cfg.decoder_width = 8;
  CHECK(flop_count(cfg, 64, 96) * 4 == flop_count(cfg, 128, 192));
  for (auto v : {DownsampleVariant::conv3x3, DownsampleVariant::conv3x3_maxpool}) {
    cfg.downsample = v;
    CHECK(flop_count(cfg, 32, 32) * 9 == flop_count(cfg, 96, 96) );
  }
}

TEST_CASE("stage trace: totals reconcile with param_count and flop_count") {
  ModelConfig cfg;
  StageTrace trace = stage_shapes(cfg, 96, 96);
  int64_t p = 0, f = 0;
  for (const auto& layer : trace.layers) {
    p += layer.params;
    f += layer.flops;
  }
  CHECK(p == trace.total_params);
  CHECK(f == trace.total_flops);
  CHECK(p == param_count(cfg));
  CHECK(f == flop_count(cfg, 96, 96));
}

TEST_CASE("stage trace: encoder resolutions for the dataset presets") {
  ModelConfig cfg;
  StageTrace t1 = stage_shapes(cfg, 288, 384);  // H=288, W=384
  std::vector<std::pair<int, int>> res;
  for (const auto& layer : t1.layers)
    if (layer.name.ends_with(".patch.add")) res.emplace_back(layer.out_h, layer.out_w);
  REQUIRE(res.size() == 4);
  CHECK(res[0] == std::pair{144, 192});
  CHECK(res[1] == std::pair{72, 96});
  CHECK(res[2] == std::pair{36, 48});
  CHECK(res[3] == std::pair{18, 24});

  StageTrace t2 = stage_shapes(cfg, 224, 224);
  res.clear();
  for (const auto& layer : t2.layers)
    if (layer.name.ends_with(".patch.add")) res.emplace_back(layer.out_h, layer.out_w);
  CHECK(res[0].first == 112);
  CHECK(res[1].first == 56);
  CHECK(res[2].first == 28);
  CHECK(res[3].first == 14);
}

TEST_CASE("effective kernel span") {
  CHECK(effective_kernel(3, 1) == 3);
  CHECK(effective_kernel(3, 2) == 5);
  CHECK(effective_kernel(3, 6) == 13);
  CHECK(effective_kernel(3, 8) == 17);
  CHECK(effective_kernel(5, 2) == 9);
  CHECK_THROWS_AS(effective_kernel(4, 2), ConfigError);
  CHECK_THROWS_AS(effective_kernel(3, 0), ConfigError);
}

TEST_CASE("dilation pair coverage: published pairs") {
  CHECK(dilation_pair_covers(2, 6));
  CHECK(dilation_pair_covers(3, 8));
  CHECK_FALSE(dilation_pair_covers(2, 5));
  CHECK_FALSE(dilation_pair_covers(2, 7));
  CHECK(dilation_pair_covers_at_least(2, 7));
  CHECK_FALSE(dilation_pair_covers_at_least(2, 5));
}

TEST_CASE("dilation pair coverage agrees with the brute-force painter") {
  for (int r1 = 1; r1 <= 4; ++r1)
    for (int r2 = 2; r2 <= 10; ++r2) {
      INFO("pair (", r1, ",", r2, ")");
      CHECK(dilation_pair_covers(r1, r2) == oracle::coverage_paint(r1, r2));
    }
}

TEST_CASE("pnet shape contract across configs and sizes") {
  Rng rng(37);
  ModelConfig cfg = tiny_config();
  for (auto [h, w] : {std::pair{16, 16}, {32, 48}, {64, 32}}) {
    for (int k : {2, 3}) {
      cfg.num_classes = k;
      cfg.downsample =
          k == 2 ? DownsampleVariant::conv3x3_maxpool : DownsampleVariant::conv3x3;
      PNet model(cfg);
      model.init_weights(rng);
      Tensor4 x(1, 3, h, w);
      oracle::fill_uniform(x, rng, 0.0, 1.0);
      Tensor4 logits = model.forward(x, Mode::eval);
      CHECK(logits.c == k);
      CHECK(logits.h == h);
      CHECK(logits.w == w);
    }
  }
}
