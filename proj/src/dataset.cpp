#include "pnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pnet/parallel.hpp"

namespace fs = std::filesystem;

namespace pnet {

void AugmentPolicy::validate() const {
  if (mirror_prob < 0.0 || mirror_prob > 1.0)
    throw ConfigError("AugmentPolicy: mirror probability must be in [0,1]");
  if (brightness_lo > 1.0 || brightness_hi < 1.0 || contrast_lo > 1.0 || contrast_hi < 1.0)
    throw ConfigError("AugmentPolicy: factor ranges must contain 1.0");
}

std::vector<size_t> SampleManifest::split_indices(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < entries.size(); ++i)
    if (split == "all" || entries[i].split == split) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Scanning & splitting
// ---------------------------------------------------------------------------

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::map<std::string, fs::path> index_by_stem(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !has_image_extension(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    auto [it, inserted] = out.emplace(stem, entry.path());
    if (!inserted)
      throw DataError("duplicate stem '" + stem + "' in " + dir + ": " +
                      it->second.string() + " vs " + entry.path().string());
  }
  return out;
}

}  // namespace

SampleManifest scan_dataset(const std::string& image_dir, const std::string& mask_dir,
                            int target_w, int target_h, const std::string& dataset_name) {
  if (target_w % 16 != 0 || target_h % 16 != 0)
    throw ConfigError("target size " + std::to_string(target_w) + "x" +
                      std::to_string(target_h) + " must be divisible by 16");
  auto images = index_by_stem(image_dir);
  auto masks = index_by_stem(mask_dir);

  SampleManifest m;
  m.dataset_name = dataset_name;
  m.target_w = target_w;
  m.target_h = target_h;
  for (const auto& [stem, img_path] : images) {
    auto it = masks.find(stem);
    if (it == masks.end()) {
      m.unmatched.push_back(stem + " (no mask)");
      continue;
    }
    m.entries.push_back({img_path.string(), it->second.string(), ""});
  }
  for (const auto& [stem, mask_path] : masks)
    if (!images.count(stem)) m.unmatched.push_back(stem + " (no image)");

  if (m.entries.empty())
    throw DataError("no image/mask pairs found under " + image_dir + " and " + mask_dir);
  return m;  // std::map iteration is already lexicographic by stem
}

void split_manifest(SampleManifest& manifest, double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0)
    throw ConfigError("split ratio must be in (0, 1), got " + std::to_string(ratio));
  const size_t n = manifest.entries.size();
  if (n < 2) throw DataError("cannot split a manifest with fewer than 2 entries");

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const size_t n_train = static_cast<size_t>(ratio * static_cast<double>(n));
  for (size_t i = 0; i < n; ++i)
    manifest.entries[order[i]].split = i < n_train ? "train" : "test";
  manifest.seed = seed;
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

Tensor4 load_image_tensor(const std::string& path, int target_w, int target_h) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot decode image: " + path);
  cv::Mat img_r;
  cv::resize(img, img_r, cv::Size(target_w, target_h), 0, 0, cv::INTER_LINEAR);
  Tensor4 t(1, 3, target_h, target_w);
  for (int r = 0; r < target_h; ++r) {
    const cv::Vec3b* irow = img_r.ptr<cv::Vec3b>(r);
    for (int q = 0; q < target_w; ++q) {
      // OpenCV loads BGR; tensor channels are RGB
      t.at(0, 0, r, q) = static_cast<float>(irow[q][2]) / 255.0f;
      t.at(0, 1, r, q) = static_cast<float>(irow[q][1]) / 255.0f;
      t.at(0, 2, r, q) = static_cast<float>(irow[q][0]) / 255.0f;
    }
  }
  return t;
}

Sample load_sample(const ManifestEntry& entry, int target_w, int target_h) {
  cv::Mat mask = cv::imread(entry.mask_path, cv::IMREAD_GRAYSCALE);
  if (mask.empty()) throw DataError("cannot decode mask: " + entry.mask_path);
  cv::Mat mask_r;
  cv::resize(mask, mask_r, cv::Size(target_w, target_h), 0, 0, cv::INTER_NEAREST);

  Sample s;
  s.image = load_image_tensor(entry.image_path, target_w, target_h);
  s.mask = IntGrid(1, target_h, target_w);
  for (int r = 0; r < target_h; ++r) {
    const uint8_t* mrow = mask_r.ptr<uint8_t>(r);
    for (int q = 0; q < target_w; ++q) s.mask.at(0, r, q) = mrow[q] > 127 ? 1 : 0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

// 90 degrees counterclockwise; requires h == w here (callers guard).
template <typename T>
void rot90_square(std::vector<T>& data, int channels, int hw) {
  std::vector<T> tmp(static_cast<size_t>(hw) * hw);
  for (int c = 0; c < channels; ++c) {
    T* plane = data.data() + static_cast<size_t>(c) * hw * hw;
    for (int r = 0; r < hw; ++r)
      for (int q = 0; q < hw; ++q) tmp[static_cast<size_t>(r) * hw + q] = plane[static_cast<size_t>(q) * hw + (hw - 1 - r)];
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

template <typename T>
void rot180(std::vector<T>& data, int channels, int h, int w) {
  const size_t plane_sz = static_cast<size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* plane = data.data() + static_cast<size_t>(c) * plane_sz;
    std::reverse(plane, plane + plane_sz);
  }
}

template <typename T>
void mirror_horizontal(std::vector<T>& data, int channels, int h, int w) {
  const size_t plane_sz = static_cast<size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* plane = data.data() + static_cast<size_t>(c) * plane_sz;
    for (int r = 0; r < h; ++r) std::reverse(plane + static_cast<size_t>(r) * w, plane + static_cast<size_t>(r) * w + w);
  }
}

}  // namespace

void augment_sample(Sample& sample, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  // fixed draw count keeps downstream draws aligned whatever the policy does
  const int rot_draw = static_cast<int>(rng.below(4));
  const bool mirror = rng.uniform() < policy.mirror_prob;
  const float brightness = static_cast<float>(rng.uniform(policy.brightness_lo, policy.brightness_hi));
  const float contrast = static_cast<float>(rng.uniform(policy.contrast_lo, policy.contrast_hi));

  const int h = sample.image.h, w = sample.image.w;
  int k = policy.rotate90 ? rot_draw : 0;
  if (h != w) k &= 2;  // only 0/180 keep a non-square canvas intact
  if (k == 2) {
    rot180(sample.image.data, 3, h, w);
    rot180(sample.mask.data, 1, h, w);
  } else {
    for (int i = 0; i < k; ++i) {
      rot90_square(sample.image.data, 3, h);
      rot90_square(sample.mask.data, 1, h);
    }
  }
  if (mirror) {
    mirror_horizontal(sample.image.data, 3, sample.image.h, sample.image.w);
    mirror_horizontal(sample.mask.data, 1, sample.mask.h, sample.mask.w);
  }

  // factor-1.0 draws must leave the tensor bit-identical
  if (brightness == 1.0f && contrast == 1.0f) return;
  double mean = 0.0;
  for (float v : sample.image.data) mean += v;
  mean /= static_cast<double>(sample.image.size());
  const float fmean = static_cast<float>(mean);
  for (auto& v : sample.image.data) {
    if (brightness != 1.0f) v *= brightness;
    if (contrast != 1.0f) v = (v - fmean) * contrast + fmean;
    v = std::clamp(v, 0.0f, 1.0f);
  }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

BatchStream::BatchStream(const SampleManifest& manifest, const std::string& split,
                         int batch_size, uint64_t shuffle_seed, const AugmentPolicy* policy,
                         uint64_t augment_seed)
    : manifest_(&manifest),
      order_(manifest.split_indices(split)),
      batch_size_(batch_size),
      policy_(policy),
      augment_rng_(augment_seed),
      augment_seed_(augment_seed) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (order_.empty()) throw DataError("split '" + split + "' has no entries");
  Rng rng(shuffle_seed);
  rng.shuffle(order_);
}

size_t BatchStream::batch_count() const {
  return (order_.size() + static_cast<size_t>(batch_size_) - 1) / batch_size_;
}

void BatchStream::reset() {
  pos_ = 0;
  augment_rng_ = Rng(augment_seed_);
}

bool BatchStream::next(Batch& out) {
  if (pos_ >= order_.size()) return false;
  const size_t count = std::min(static_cast<size_t>(batch_size_), order_.size() - pos_);
  const int th = manifest_->target_h, tw = manifest_->target_w;

  // Augmentation rng states are reserved sequentially in batch order, so
  // the emitted stream does not depend on how many workers load samples.
  std::vector<uint64_t> aug_states(count);
  if (policy_)
    for (size_t i = 0; i < count; ++i) {
      aug_states[i] = augment_rng_.state;
      augment_rng_.below(4);  // advance by the fixed four draws per sample
      augment_rng_.uniform();
      augment_rng_.uniform();
      augment_rng_.uniform();
    }

  out.images = Tensor4(static_cast<int>(count), 3, th, tw);
  out.masks = IntGrid(static_cast<int>(count), th, tw);
  out.entry_indices.assign(order_.begin() + static_cast<long>(pos_),
                           order_.begin() + static_cast<long>(pos_ + count));

  parallel_for(static_cast<int>(count), [&](int i) {
    const ManifestEntry& entry = manifest_->entries[out.entry_indices[static_cast<size_t>(i)]];
    Sample s = load_sample(entry, tw, th);
    if (policy_) {
      Rng local;
      local.state = aug_states[static_cast<size_t>(i)];
      augment_sample(s, *policy_, local);
    }
    std::copy(s.image.data.begin(), s.image.data.end(),
              out.images.data.begin() + static_cast<size_t>(i) * 3 * th * tw);
    std::copy(s.mask.data.begin(), s.mask.data.end(),
              out.masks.data.begin() + static_cast<size_t>(i) * th * tw);
  });

  pos_ += count;
  return true;
}

// ---------------------------------------------------------------------------
// Manifest CSV
// ---------------------------------------------------------------------------

void write_manifest_csv(const SampleManifest& manifest, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  f << "image,mask,split\n";
  for (const auto& e : manifest.entries)
    f << e.image_path << "," << e.mask_path << "," << e.split << "\n";
}

SampleManifest read_manifest_csv(const std::string& path, int target_w, int target_h,
                                 const std::string& dataset_name) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read manifest: " + path);
  SampleManifest m;
  m.dataset_name = dataset_name;
  m.target_w = target_w;
  m.target_h = target_h;
  std::string line;
  if (!std::getline(f, line) || line != "image,mask,split")
    throw DataError("bad manifest header in " + path);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    if (!std::getline(ss, e.image_path, ',') || !std::getline(ss, e.mask_path, ','))
      throw DataError("bad manifest row in " + path + ": " + line);
    std::getline(ss, e.split, ',');
    m.entries.push_back(e);
  }
  if (m.entries.empty()) throw DataError("empty manifest: " + path);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

void make_synthetic_disks(const std::string& root_dir, int count, int w, int h,
                          uint64_t seed) {
  fs::create_directories(fs::path(root_dir) / "images");
  fs::create_directories(fs::path(root_dir) / "masks");
  Rng rng(seed);

  for (int i = 0; i < count; ++i) {
    cv::Mat img(h, w, CV_8UC3);
    cv::Mat mask(h, w, CV_8UC1, cv::Scalar(0));

    const double cx = rng.uniform(0.25, 0.75) * w;
    const double cy = rng.uniform(0.25, 0.75) * h;
    const double radius = rng.uniform(0.15, 0.30) * std::min(w, h);
    // dim noisy background, bright tinted disk
    const double tint_r = rng.uniform(0.85, 1.0);
    const double tint_g = rng.uniform(0.85, 1.0);
    const double tint_b = rng.uniform(0.85, 1.0);

    for (int r = 0; r < h; ++r) {
      cv::Vec3b* irow = img.ptr<cv::Vec3b>(r);
      uint8_t* mrow = mask.ptr<uint8_t>(r);
      for (int q = 0; q < w; ++q) {
        const double dx = q - cx, dy = r - cy;
        const bool inside = dx * dx + dy * dy <= radius * radius;
        const double noise = rng.uniform(-0.03, 0.03);
        double rr, gg, bb;
        if (inside) {
          rr = tint_r * 0.9 + noise;
          gg = tint_g * 0.9 + noise;
          bb = tint_b * 0.9 + noise;
          mrow[q] = 255;
        } else {
          const double base = 0.15 + 0.06 * rng.uniform();
          rr = base + noise;
          gg = base + noise;
          bb = base + noise;
        }
        auto to_u8 = [](double v) {
          return static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        };
        irow[q] = cv::Vec3b(to_u8(bb), to_u8(gg), to_u8(rr));  // BGR
      }
    }

    char name[32];
    std::snprintf(name, sizeof(name), "disk_%03d.png", i);
    cv::imwrite((fs::path(root_dir) / "images" / name).string(), img);
    cv::imwrite((fs::path(root_dir) / "masks" / name).string(), mask);
  }
}

}  // namespace pnet
