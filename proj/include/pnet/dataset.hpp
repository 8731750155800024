#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

struct ManifestEntry {
  std::string image_path;
  std::string mask_path;
  std::string split;  // "train", "test", or "" before splitting
};

struct SampleManifest {
  std::string dataset_name;
  int target_w = 0, target_h = 0;
  uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> unmatched;  // stems missing their counterpart, excluded

  std::vector<size_t> split_indices(const std::string& split) const;
};

// Image scaled to [0,1], mask strictly {0,1}.
struct Sample {
  Tensor4 image;  // [1, 3, H, W]
  IntGrid mask;   // [1, H, W]
};

struct AugmentPolicy {
  bool rotate90 = true;
  double mirror_prob = 0.5;
  double brightness_lo = 0.8, brightness_hi = 1.2;
  double contrast_lo = 0.8, contrast_hi = 1.2;

  void validate() const;
};

struct Batch {
  Tensor4 images;  // [B, 3, H, W]
  IntGrid masks;   // [B, H, W]
  std::vector<size_t> entry_indices;
};

// Pairs <image_dir>/<stem>.<ext> with <mask_dir>/<stem>.<ext> for
// png/jpg/jpeg/bmp, ordered lexicographically by stem.
SampleManifest scan_dataset(const std::string& image_dir, const std::string& mask_dir,
                            int target_w, int target_h, const std::string& dataset_name = "");

// Seeded shuffle, first floor(ratio * N) entries become the train split.
void split_manifest(SampleManifest& manifest, double ratio, uint64_t seed);

// Decode, bilinear-resize to target, scale to [0,1]; mask nearest-resized
// and binarized at threshold 127.
Sample load_sample(const ManifestEntry& entry, int target_w, int target_h);

// Image half of load_sample, for single-image inference.
Tensor4 load_image_tensor(const std::string& path, int target_w, int target_h);

// Geometric ops hit image and mask identically; photometric ops hit the
// image only. Consumes exactly four rng draws per call.
void augment_sample(Sample& sample, const AugmentPolicy& policy, Rng& rng);

// Epoch-seeded shuffled batches over one split; the final partial batch is
// kept. Augmentation is applied only when a policy is supplied.
class BatchStream {
 public:
  BatchStream(const SampleManifest& manifest, const std::string& split, int batch_size,
              uint64_t shuffle_seed, const AugmentPolicy* policy = nullptr,
              uint64_t augment_seed = 0);

  size_t batch_count() const;
  bool next(Batch& out);
  void reset();

 private:
  const SampleManifest* manifest_;
  std::vector<size_t> order_;
  int batch_size_;
  size_t pos_ = 0;
  const AugmentPolicy* policy_;
  Rng augment_rng_;
  uint64_t augment_seed_;
};

void write_manifest_csv(const SampleManifest& manifest, const std::string& path);
SampleManifest read_manifest_csv(const std::string& path, int target_w, int target_h,
                                 const std::string& dataset_name = "");

// Writes <root>/images and <root>/masks: bright disks at random positions
// over noisy backgrounds. Used by the smoke tests and the synth command.
void make_synthetic_disks(const std::string& root_dir, int count, int w, int h, uint64_t seed);

}  // namespace pnet
