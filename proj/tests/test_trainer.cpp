#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "pnet/analysis.hpp"
#include "pnet/trainer.hpp"

using namespace pnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("pnet_trn_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_widths = {4, 6, 8, 10};
  cfg.decoder_width = 6;
  return cfg;
}

TrainConfig tiny_train(const std::string& out) {
  TrainConfig cfg;
  cfg.model = tiny_config();
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 11;
  cfg.eval_every = 2;
  cfg.quiet = true;
  cfg.out_dir = out;
  return cfg;
}

SampleManifest disk_manifest(const TempDir& dir, int count, int size, uint64_t seed) {
  make_synthetic_disks(dir.str(), count, size, size, seed);
  SampleManifest m = scan_dataset((dir.path / "images").string(), (dir.path / "masks").string(),
                                  size, size, "synthetic");
  split_manifest(m, 0.8, seed);
  return m;
}

}  // namespace

TEST_CASE("checkpoint: save/load round trip reproduces eval logits bit-exactly") {
  TempDir dir("ckpt");
  PNet model(tiny_config());
  Rng rng(3);
  model.init_weights(rng);
  // move the running stats off their defaults
  Tensor4 warm(2, 3, 32, 32);
  oracle::fill_uniform(warm, rng, 0.0, 1.0);
  Rng drop(1);
  model.forward(warm, Mode::train, &drop);

  AdamState adam = model.make_adam_state();
  Checkpoint ck = snapshot_model(model, &adam);
  ck.train_w = 32;
  ck.train_h = 32;
  ck.dataset_name = "t";
  ck.epoch = 5;
  ck.rng_streams = {{"init", 1}, {"shuffle", 2}, {"augment", 3}, {"dropout", 4}};

  const std::string path = (dir.path / "model.ckpt").string();
  save_checkpoint(ck, path);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.epoch == 5);
  CHECK(loaded.dataset_name == "t");
  CHECK(loaded.train_w == 32);
  CHECK(loaded.config.stage_widths == tiny_config().stage_widths);
  REQUIRE(loaded.rng_streams.size() == 4);
  CHECK(loaded.rng_streams[1].second == 2);

  PNet restored(loaded.config);
  restore_model(restored, loaded);
  Tensor4 x(1, 3, 32, 32);
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  Tensor4 a = model.forward(x, Mode::eval);
  Tensor4 b = restored.forward(x, Mode::eval);
  CHECK(a.data == b.data);
}

TEST_CASE("checkpoint: corrupt magic, truncation, version and name mismatches rejected") {
  TempDir dir("ckpt_bad");
  PNet model(tiny_config());
  Rng rng(5);
  model.init_weights(rng);
  Checkpoint ck = snapshot_model(model);
  const std::string path = (dir.path / "ok.ckpt").string();
  save_checkpoint(ck, path);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("BOGUS!!!", 8);
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  // truncate a valid file
  save_checkpoint(ck, path);
  fs::resize_file(path, fs::file_size(path) / 2);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  // tensor set from a different architecture
  save_checkpoint(ck, path);
  Checkpoint loaded = load_checkpoint(path);
  ModelConfig other = tiny_config();
  other.stage_widths = {6, 6, 6, 6};
  PNet wrong(other);
  CHECK_THROWS_AS(restore_model(wrong, loaded), DataError);

  // future format version
  save_checkpoint(ck, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), DataError);

  CHECK_THROWS_AS(load_checkpoint((dir.path / "missing.ckpt").string()), DataError);
}

TEST_CASE("checkpoint without optimizer state loads for eval but cannot resume") {
  TempDir dir("ckpt_noadam");
  PNet model(tiny_config());
  Rng rng(7);
  model.init_weights(rng);
  Checkpoint ck = snapshot_model(model);  // no adam
  const std::string path = (dir.path / "eval_only.ckpt").string();
  save_checkpoint(ck, path);

  Checkpoint loaded = load_checkpoint(path);
  PNet restored(loaded.config);
  restore_model(restored, loaded);  // fine for eval
  CHECK_THROWS_AS(restore_adam(restored, loaded), DataError);

  TempDir data("ckpt_noadam_data");
  SampleManifest m = disk_manifest(data, 6, 32, 3);
  TrainConfig cfg = tiny_train("");
  CHECK_THROWS_AS(train(cfg, m, path), DataError);
}

TEST_CASE("train: epochs must be at least 1") {
  TempDir data("epochs0");
  SampleManifest m = disk_manifest(data, 4, 32, 5);
  TrainConfig cfg = tiny_train("");
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(cfg, m), ConfigError);
}

TEST_CASE("train: fixed seed reproduces the log and checkpoint exactly") {
  TempDir data("determinism");
  SampleManifest m = disk_manifest(data, 6, 32, 13);

  TrainConfig cfg = tiny_train("");
  TrainResult r1 = train(cfg, m);
  TrainResult r2 = train(cfg, m);
  REQUIRE(r1.log.rows.size() == r2.log.rows.size());
  for (size_t i = 0; i < r1.log.rows.size(); ++i) {
    CHECK(r1.log.rows[i].epoch == r2.log.rows[i].epoch);
    CHECK(r1.log.rows[i].mean_loss == r2.log.rows[i].mean_loss);  // bitwise
    CHECK(r1.log.rows[i].evaluated == r2.log.rows[i].evaluated);
    CHECK(r1.log.rows[i].test_iou == r2.log.rows[i].test_iou);
    CHECK(r1.log.rows[i].test_dice == r2.log.rows[i].test_dice);
  }
  REQUIRE(r1.final_checkpoint.tensors.size() == r2.final_checkpoint.tensors.size());
  for (size_t i = 0; i < r1.final_checkpoint.tensors.size(); ++i)
    CHECK(r1.final_checkpoint.tensors[i].second == r2.final_checkpoint.tensors[i].second);

  // a different seed genuinely changes the run
  cfg.seed = 999;
  TrainResult r3 = train(cfg, m);
  CHECK(r3.log.rows[0].mean_loss != r1.log.rows[0].mean_loss);
}

TEST_CASE("train: writes checkpoints, manifest-loadable log, finite losses") {
  TempDir data("artifacts");
  TempDir out("artifacts_out");
  SampleManifest m = disk_manifest(data, 6, 32, 17);
  TrainConfig cfg = tiny_train(out.str());
  TrainResult res = train(cfg, m);

  CHECK(fs::exists(res.final_path));
  CHECK(fs::exists(res.best_path));
  CHECK(fs::exists(res.log_path));
  for (const auto& row : res.log.rows) CHECK(std::isfinite(row.mean_loss));

  std::ifstream log(res.log_path);
  std::string header;
  std::getline(log, header);
  CHECK(header == "epoch,train_loss,test_iou,test_dice,seconds");
  int lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  CHECK(lines == cfg.epochs);

  Checkpoint best = load_checkpoint(res.best_path);
  CHECK(best.has_adam);
  CHECK(best.dataset_name == "synthetic");
}

TEST_CASE("train: resuming reproduces a continuous run exactly") {
  TempDir data("resume");
  TempDir out("resume_out");
  SampleManifest m = disk_manifest(data, 6, 32, 19);
  TrainConfig cfg = tiny_train(out.str());
  cfg.epochs = 2;
  TrainResult first = train(cfg, m);

  cfg.epochs = 4;
  TrainResult resumed = train(cfg, m, first.final_path);
  CHECK(resumed.log.rows.size() == 2);  // epochs 3 and 4
  CHECK(resumed.log.rows[0].epoch == 3);
  CHECK(resumed.final_checkpoint.epoch == 4);

  // optimizer moments, rng streams and running stats all travel through
  // the checkpoint, so split training matches one continuous run bitwise
  cfg.out_dir.clear();
  TrainResult continuous = train(cfg, m);
  REQUIRE(continuous.final_checkpoint.tensors.size() ==
          resumed.final_checkpoint.tensors.size());
  for (size_t i = 0; i < continuous.final_checkpoint.tensors.size(); ++i)
    CHECK(continuous.final_checkpoint.tensors[i].second ==
          resumed.final_checkpoint.tensors[i].second);
  CHECK(continuous.log.rows[2].mean_loss == resumed.log.rows[0].mean_loss);
  CHECK(continuous.log.rows[3].mean_loss == resumed.log.rows[1].mean_loss);
}

TEST_CASE("train: exploding updates abort with a batch diagnostic") {
  TempDir data("nanloss");
  SampleManifest m = disk_manifest(data, 6, 32, 23);
  TrainConfig cfg = tiny_train("");
  cfg.lr = 1e28;  // drives activations to overflow on the next forward
  cfg.epochs = 3;
  CHECK_THROWS_WITH_AS(train(cfg, m), doctest::Contains("epoch"), NumericError);
}

TEST_CASE("evaluate: deterministic metrics, zero-entry split rejected") {
  TempDir data("eval");
  SampleManifest m = disk_manifest(data, 6, 32, 29);
  TrainConfig cfg = tiny_train("");
  cfg.epochs = 2;
  TrainResult res = train(cfg, m);

  EvalOptions opts;
  opts.split = "test";
  opts.run_fps = false;
  MetricsReport a = evaluate(res.final_checkpoint, m, opts);
  MetricsReport b = evaluate(res.final_checkpoint, m, opts);
  CHECK(a.iou == b.iou);
  CHECK(a.dice == b.dice);
  CHECK(a.params == param_count(res.final_checkpoint.config));
  CHECK(a.iou >= 0.0);
  CHECK(a.iou <= a.dice);

  for (auto& e : m.entries) e.split = "train";
  CHECK_THROWS_AS(evaluate(res.final_checkpoint, m, opts), DataError);

  // resolution mismatch between checkpoint and dataset
  SampleManifest wrong = m;
  wrong.target_w = wrong.target_h = 64;
  CHECK_THROWS_AS(evaluate(res.final_checkpoint, wrong, opts), DataError);
}

TEST_CASE("evaluate: per-image averaging mode and mask dumps") {
  TempDir data("eval_dump");
  TempDir out("eval_dump_out");
  SampleManifest m = disk_manifest(data, 6, 32, 31);
  TrainConfig cfg = tiny_train("");
  cfg.epochs = 1;
  TrainResult res = train(cfg, m);

  EvalOptions opts;
  opts.split = "test";
  opts.run_fps = false;
  opts.per_image = true;
  opts.dump_masks_dir = out.str();
  MetricsReport rep = evaluate(res.final_checkpoint, m, opts);
  CHECK(rep.method == "pnet+per-image");
  int pngs = 0;
  for (const auto& f : fs::directory_iterator(out.path))
    if (f.path().extension() == ".png") ++pngs;
  CHECK(pngs == 2);  // 6 images, 80/20 split -> 2 test entries... (floor(4.8)=4 train)
}

TEST_CASE("train step example: a fixed 4-image batch overfits within 300 steps") {
  TempDir data("overfit");
  make_synthetic_disks(data.str(), 4, 32, 32, 37);
  SampleManifest m = scan_dataset((data.path / "images").string(),
                                  (data.path / "masks").string(), 32, 32, "syn");
  Tensor4 images(4, 3, 32, 32);
  IntGrid masks(4, 32, 32);
  for (int i = 0; i < 4; ++i) {
    Sample s = load_sample(m.entries[static_cast<size_t>(i)], 32, 32);
    std::copy(s.image.data.begin(), s.image.data.end(),
              images.data.begin() + static_cast<size_t>(i) * 3 * 32 * 32);
    std::copy(s.mask.data.begin(), s.mask.data.end(),
              masks.data.begin() + static_cast<size_t>(i) * 32 * 32);
  }

  ModelConfig mc;  // default widths, no dropout so the batch loss is noise-free
  mc.dropout_rate = 0.0f;
  PNet model(mc);
  Rng rng(41);
  model.init_weights(rng);
  AdamState adam = model.make_adam_state();
  Rng dropout(42);

  double loss = 1e9;
  int step = 0;
  for (; step < 300 && loss >= 0.05; ++step)
    loss = model.train_step(images, masks, adam, 1e-4, dropout);
  INFO("reached loss ", loss, " after ", step, " steps");
  CHECK(loss < 0.05);
}
