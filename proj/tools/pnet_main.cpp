// Command-line front end: train / eval / analyze / ablate / predict / synth.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pnet/analysis.hpp"
#include "pnet/dataset.hpp"
#include "pnet/metrics.hpp"
#include "pnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace pnet;

namespace {

struct SizeWxH {
  int w = 0, h = 0;
};

SizeWxH parse_size(const std::string& s) {
  SizeWxH out;
  char sep = 0;
  if (std::sscanf(s.c_str(), "%d%c%d", &out.w, &sep, &out.h) != 3 ||
      (sep != 'x' && sep != 'X'))
    throw ConfigError("bad --size '" + s + "', expected WxH like 384x288");
  if (out.w < 16 || out.h < 16 || out.w % 16 != 0 || out.h % 16 != 0)
    throw ConfigError("--size " + s + " must have both dimensions divisible by 16");
  return out;
}

struct DatasetPreset {
  std::string size;
  int batch_size;
};

// Sizes and batch sizes bundled per benchmark.
std::optional<DatasetPreset> preset_for(const std::string& name) {
  if (name == "cvc") return DatasetPreset{"384x288", 2};
  if (name == "etis") return DatasetPreset{"512x384", 2};
  if (name == "skin") return DatasetPreset{"224x224", 4};
  return std::nullopt;
}

// Shared model flags; every key is also valid in the --config INI file.
struct ModelFlags {
  std::vector<int> widths = {32, 64, 128, 256};
  int decoder_width = 64;
  int classes = 2;
  std::vector<int> dilation = {2, 6};
  std::string downsample = "conv5x5";
  float dropout = 0.3f;
  bool skip_pre_block = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--widths", widths, "Encoder stage channel widths")
        ->expected(4)
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--decoder-width", decoder_width, "Decoder channel width")
        ->capture_default_str();
    cmd->add_option("--classes", classes, "Number of output classes")->capture_default_str();
    cmd->add_option("--dilation", dilation, "Patch-block atrous rate pair r1,r2")
        ->expected(2)
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--downsample", downsample,
                    "Downsample variant: conv5x5 | conv3x3 | conv3x3_maxpool")
        ->capture_default_str();
    cmd->add_option("--dropout", dropout, "Decoder dropout rate")->capture_default_str();
    cmd->add_flag("--skip-pre-block", skip_pre_block,
                  "Tap the skip connection before the first patch block");
  }

  ModelConfig build() const {
    ModelConfig cfg;
    for (size_t i = 0; i < 4; ++i) cfg.stage_widths[i] = widths[i];
    cfg.decoder_width = decoder_width;
    cfg.num_classes = classes;
    cfg.dilation_r1 = dilation[0];
    cfg.dilation_r2 = dilation[1];
    cfg.downsample = downsample_variant_from_string(downsample);
    cfg.dropout_rate = dropout;
    cfg.skip_pre_block = skip_pre_block;
    cfg.validate();
    return cfg;
  }
};

SampleManifest build_manifest(const std::string& data_dir, const std::string& name, int w,
                              int h, uint64_t seed, double ratio = 0.8) {
  SampleManifest m = scan_dataset((fs::path(data_dir) / "images").string(),
                                  (fs::path(data_dir) / "masks").string(), w, h, name);
  if (!m.unmatched.empty()) {
    std::fprintf(stderr, "warning: %zu unmatched files excluded:\n", m.unmatched.size());
    for (const auto& u : m.unmatched) std::fprintf(stderr, "  %s\n", u.c_str());
  }
  split_manifest(m, ratio, seed);
  return m;
}

void print_trace(const ModelConfig& cfg, int W, int H) {
  StageTrace trace = stage_shapes(cfg, H, W);
  std::printf("%-22s %18s %14s %16s\n", "layer", "output (c,h,w)", "params", "flops");
  for (const auto& l : trace.layers) {
    char shape[48];
    std::snprintf(shape, sizeof(shape), "%d x %d x %d", l.out_c, l.out_h, l.out_w);
    std::printf("%-22s %18s %14lld %16lld\n", l.name.c_str(), shape,
                static_cast<long long>(l.params), static_cast<long long>(l.flops));
  }
  std::printf("%-22s %18s %14lld %16lld\n", "total", "",
              static_cast<long long>(trace.total_params),
              static_cast<long long>(trace.total_flops));
  std::printf("params: %.4f M   flops: %.4f G (at %dx%d)\n",
              static_cast<double>(trace.total_params) / 1e6,
              static_cast<double>(trace.total_flops) / 1e9, W, H);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PNet medical-image segmentation engine"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "INI config file with [train] / [analyze] / [ablate] sections; "
                 "flags override file values");
  app.allow_config_extras(false);

  // ---- train -------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train a model on an image/mask directory");
  std::string t_data, t_name = "custom", t_size = "384x288", t_out = "runs/pnet", t_resume;
  TrainConfig t_cfg;
  ModelFlags t_model;
  bool t_no_augment = false;
  train_cmd->add_option("--data-dir", t_data, "Directory with images/ and masks/")->required();
  train_cmd->add_option("--dataset-name", t_name, "cvc | etis | skin | any label")
      ->capture_default_str();
  train_cmd->add_option("--size", t_size, "Training resolution WxH (divisible by 16)")
      ->capture_default_str();
  train_cmd->add_option("--epochs", t_cfg.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--lr", t_cfg.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--batch-size", t_cfg.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--seed", t_cfg.seed, "Seed for init/split/shuffle/augment/dropout")
      ->capture_default_str();
  train_cmd->add_option("--eval-every", t_cfg.eval_every, "Test-split evaluation cadence")
      ->capture_default_str();
  train_cmd->add_option("--out", t_out, "Output directory")->capture_default_str();
  train_cmd->add_option("--resume", t_resume, "Checkpoint to resume training from");
  train_cmd->add_flag("--no-augment", t_no_augment, "Disable training augmentation");
  train_cmd->add_flag("--quiet", t_cfg.quiet, "Suppress per-epoch progress lines");
  t_model.attach(train_cmd);
  train_cmd->configurable(true);
  train_cmd->fallthrough(true);

  // ---- eval --------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and emit a metrics CSV");
  std::string e_ckpt, e_data, e_split = "test", e_out, e_dump, e_manifest, e_size, e_name;
  uint64_t e_seed = 42;
  bool e_per_image = false, e_no_fps = false;
  int e_fps_iters = 100, e_fps_warmup = 10;
  eval_cmd->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data-dir", e_data, "Directory with images/ and masks/");
  eval_cmd->add_option("--split", e_split, "test | train | all")->capture_default_str();
  eval_cmd->add_option("--out", e_out, "Metrics CSV path (default: stdout only)");
  eval_cmd->add_option("--dump-masks", e_dump, "Directory for 0/255 predicted-mask PNGs");
  eval_cmd->add_option("--manifest", e_manifest,
                       "manifest.csv from the training run (reuses its exact split)");
  eval_cmd->add_option("--size", e_size, "Override evaluation resolution WxH");
  eval_cmd->add_option("--dataset-name", e_name, "Report label override");
  eval_cmd->add_option("--seed", e_seed, "Split seed when no manifest is given")
      ->capture_default_str();
  eval_cmd->add_flag("--per-image", e_per_image, "Per-image metric means instead of micro");
  eval_cmd->add_flag("--no-fps", e_no_fps, "Skip the FPS benchmark");
  eval_cmd->add_option("--fps-iters", e_fps_iters, "FPS benchmark iterations")
      ->capture_default_str();
  eval_cmd->add_option("--fps-warmup", e_fps_warmup, "FPS benchmark warmup iterations")
      ->capture_default_str();

  // ---- analyze -----------------------------------------------------------
  auto* analyze_cmd =
      app.add_subcommand("analyze", "Print the layer table, params, FLOPs and dilation geometry");
  std::string a_size = "384x288";
  ModelFlags a_model;
  analyze_cmd->add_option("--size", a_size, "Resolution WxH for FLOP accounting")
      ->capture_default_str();
  a_model.attach(analyze_cmd);
  analyze_cmd->configurable(true);
  analyze_cmd->fallthrough(true);

  // ---- ablate ------------------------------------------------------------
  auto* ablate_cmd =
      app.add_subcommand("ablate", "Train a configuration grid and rank the results by Dice");
  std::string ab_data, ab_grid, ab_out = "runs/ablate", ab_size = "384x288",
                                ab_name = "custom";
  TrainConfig ab_cfg;
  ab_cfg.epochs = 20;
  ModelFlags ab_model;
  ablate_cmd->add_option("--data-dir", ab_data, "Directory with images/ and masks/")->required();
  ablate_cmd->add_option("--grid", ab_grid, "downsample | dilation")->required();
  ablate_cmd->add_option("--epochs", ab_cfg.epochs, "Epochs per grid point")
      ->capture_default_str();
  ablate_cmd->add_option("--out", ab_out, "Output directory")->capture_default_str();
  ablate_cmd->add_option("--size", ab_size, "Resolution WxH")->capture_default_str();
  ablate_cmd->add_option("--dataset-name", ab_name, "cvc | etis | skin | any label")
      ->capture_default_str();
  ablate_cmd->add_option("--batch-size", ab_cfg.batch_size, "Batch size")->capture_default_str();
  ablate_cmd->add_option("--seed", ab_cfg.seed, "Shared seed for every grid point")
      ->capture_default_str();
  ablate_cmd->add_option("--eval-every", ab_cfg.eval_every, "Test-split evaluation cadence")
      ->capture_default_str();
  ablate_cmd->add_flag("--quiet", ab_cfg.quiet, "Suppress per-epoch progress lines");
  ab_model.attach(ablate_cmd);
  ablate_cmd->configurable(true);
  ablate_cmd->fallthrough(true);

  // ---- predict -----------------------------------------------------------
  auto* predict_cmd = app.add_subcommand("predict", "Segment a single image");
  std::string p_ckpt, p_image, p_out = "mask.png", p_size;
  predict_cmd->add_option("--checkpoint", p_ckpt, "Checkpoint file")->required();
  predict_cmd->add_option("--image", p_image, "Input image")->required();
  predict_cmd->add_option("--out", p_out, "Output mask PNG")->capture_default_str();
  predict_cmd->add_option("--size", p_size,
                          "Inference resolution WxH (default: checkpoint training size)");

  // ---- synth -------------------------------------------------------------
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic disk dataset");
  std::string s_out = "synthetic", s_size = "96x96";
  int s_count = 10;
  uint64_t s_seed = 7;
  synth_cmd->add_option("--out", s_out, "Output root (images/ and masks/ created inside)")
      ->capture_default_str();
  synth_cmd->add_option("--count", s_count, "Number of images")->capture_default_str();
  synth_cmd->add_option("--size", s_size, "Image size WxH")->capture_default_str();
  synth_cmd->add_option("--seed", s_seed, "Generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version exit 0, any usage problem exits 1
  }

  try {
    if (*train_cmd) {
      TrainConfig cfg = t_cfg;
      cfg.augment_enabled = !t_no_augment;
      if (auto preset = preset_for(t_name)) {
        if (train_cmd->count("--size") == 0) t_size = preset->size;
        if (train_cmd->count("--batch-size") == 0) cfg.batch_size = preset->batch_size;
      }
      const SizeWxH size = parse_size(t_size);
      cfg.model = t_model.build();
      cfg.out_dir = t_out;
      SampleManifest manifest = build_manifest(t_data, t_name, size.w, size.h, cfg.seed);
      fs::create_directories(t_out);
      write_manifest_csv(manifest, (fs::path(t_out) / "manifest.csv").string());

      TrainResult res = train(cfg, manifest, t_resume);
      std::printf("final checkpoint: %s\n", res.final_path.c_str());
      std::printf("best checkpoint:  %s (dice %.4f at epoch %d)\n", res.best_path.c_str(),
                  res.best_dice, res.best_epoch);
      return 0;
    }

    if (*eval_cmd) {
      Checkpoint ckpt = load_checkpoint(e_ckpt);
      int w = ckpt.train_w, h = ckpt.train_h;
      if (!e_size.empty()) {
        const SizeWxH s = parse_size(e_size);
        w = s.w;
        h = s.h;
      }
      if (w <= 0 || h <= 0)
        throw ConfigError("checkpoint carries no training size; pass --size WxH");
      const std::string name = e_name.empty() ? ckpt.dataset_name : e_name;

      SampleManifest manifest;
      if (!e_manifest.empty()) {
        manifest = read_manifest_csv(e_manifest, w, h, name);
      } else if (!e_data.empty()) {
        manifest = build_manifest(e_data, name, w, h, e_seed);
      } else {
        throw ConfigError("pass --data-dir or --manifest");
      }

      EvalOptions opts;
      opts.split = e_split;
      opts.per_image = e_per_image;
      opts.run_fps = !e_no_fps;
      opts.fps_iters = e_fps_iters;
      opts.fps_warmup = e_fps_warmup;
      opts.dump_masks_dir = e_dump;
      MetricsReport report = evaluate(ckpt, manifest, opts);

      const std::string csv = emit_report({report});
      std::fputs(csv.c_str(), stdout);
      if (!e_out.empty()) {
        std::ofstream f(e_out);
        if (!f) throw DataError("cannot write " + e_out);
        f << csv;
      }
      return 0;
    }

    if (*analyze_cmd) {
      const SizeWxH size = parse_size(a_size);
      const ModelConfig cfg = a_model.build();
      print_trace(cfg, size.w, size.h);
      const int e1 = effective_kernel(3, cfg.dilation_r1);
      const int e2 = effective_kernel(3, cfg.dilation_r2);
      std::printf("dilation pair (%d, %d): effective kernels %dx%d and %dx%d\n",
                  cfg.dilation_r1, cfg.dilation_r2, e1, e1, e2, e2);
      std::printf("covers (exact): %s\n",
                  dilation_pair_covers(cfg.dilation_r1, cfg.dilation_r2) ? "true" : "false");
      std::printf("covers (at least): %s\n",
                  dilation_pair_covers_at_least(cfg.dilation_r1, cfg.dilation_r2) ? "true"
                                                                                  : "false");
      return 0;
    }

    if (*ablate_cmd) {
      SizeWxH size{};
      if (auto preset = preset_for(ab_name); preset && ablate_cmd->count("--size") == 0) {
        size = parse_size(preset->size);
        if (ablate_cmd->count("--batch-size") == 0) ab_cfg.batch_size = preset->batch_size;
      } else {
        size = parse_size(ab_size);
      }

      struct GridPoint {
        std::string tag;
        ModelConfig cfg;
      };
      std::vector<GridPoint> grid;
      if (ab_grid == "downsample") {
        for (auto v : {DownsampleVariant::conv5x5, DownsampleVariant::conv3x3,
                       DownsampleVariant::conv3x3_maxpool}) {
          ModelConfig cfg = ab_model.build();
          cfg.downsample = v;
          grid.push_back({"pnet-" + to_string(v), cfg});
        }
      } else if (ab_grid == "dilation") {
        for (auto [r1, r2] : {std::pair{2, 5}, {2, 6}, {2, 7}, {3, 8}}) {
          ModelConfig cfg = ab_model.build();
          cfg.dilation_r1 = r1;
          cfg.dilation_r2 = r2;
          grid.push_back({"pnet-d" + std::to_string(r1) + "x" + std::to_string(r2), cfg});
        }
      } else {
        throw ConfigError("--grid must be 'downsample' or 'dilation', got '" + ab_grid + "'");
      }

      // one manifest, one split: every grid point sees identical data
      SampleManifest manifest = build_manifest(ab_data, ab_name, size.w, size.h, ab_cfg.seed);
      fs::create_directories(ab_out);
      write_manifest_csv(manifest, (fs::path(ab_out) / "manifest.csv").string());

      std::vector<MetricsReport> reports;
      for (const auto& point : grid) {
        std::printf("=== %s\n", point.tag.c_str());
        std::fflush(stdout);
        TrainConfig cfg = ab_cfg;
        cfg.model = point.cfg;
        cfg.out_dir = (fs::path(ab_out) / point.tag).string();
        cfg.run_name = point.tag;
        TrainResult res = train(cfg, manifest);

        EvalOptions opts;
        opts.run_fps = false;
        MetricsReport rep = evaluate(res.best_checkpoint, manifest, opts);
        rep.method = point.tag;
        reports.push_back(rep);
      }
      std::sort(reports.begin(), reports.end(),
                [](const MetricsReport& a, const MetricsReport& b) { return a.dice > b.dice; });
      const std::string csv = emit_report(reports);
      std::fputs(csv.c_str(), stdout);
      std::ofstream f((fs::path(ab_out) / "ablation.csv").string());
      f << csv;
      return 0;
    }

    if (*predict_cmd) {
      Checkpoint ckpt = load_checkpoint(p_ckpt);
      int w = ckpt.train_w, h = ckpt.train_h;
      if (!p_size.empty()) {
        const SizeWxH s = parse_size(p_size);
        w = s.w;
        h = s.h;
      }
      if (w <= 0 || h <= 0)
        throw ConfigError("checkpoint carries no training size; pass --size WxH");

      PNet model(ckpt.config);
      restore_model(model, ckpt);
      Tensor4 image = load_image_tensor(p_image, w, h);
      Tensor4 logits = model.forward(image, Mode::eval);
      IntGrid mask = predict_mask(logits);
      write_mask_png(mask, p_out);

      int64_t fg = 0;
      for (int32_t v : mask.data) fg += v;
      std::printf("foreground fraction: %.4f\n",
                  static_cast<double>(fg) / static_cast<double>(mask.size()));
      return 0;
    }

    if (*synth_cmd) {
      const SizeWxH size = parse_size(s_size);
      make_synthetic_disks(s_out, s_count, size.w, size.h, s_seed);
      std::printf("wrote %d image/mask pairs under %s\n", s_count, s_out.c_str());
      return 0;
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
