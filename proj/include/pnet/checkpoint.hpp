#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pnet/kernels.hpp"
#include "pnet/model.hpp"

namespace pnet {

// Binary snapshot of a model: magic "PNETCKPT", version, ModelConfig,
// name-tagged little-endian float arrays in canonical order (learned
// parameters then batchnorm running stats), optional Adam state, epoch
// counter and the trainer rng stream states.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  ModelConfig config;
  int train_w = 0, train_h = 0;  // resolution the model was trained at
  std::string dataset_name;

  std::vector<std::pair<std::string, std::vector<float>>> tensors;

  bool has_adam = false;
  int64_t adam_t = 0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_epsilon = 1e-8;
  std::vector<std::vector<float>> adam_m, adam_v;  // canonical parameter order

  uint64_t epoch = 0;
  std::vector<std::pair<std::string, uint64_t>> rng_streams;
};

// Copies model state out / into a checkpoint; names must match exactly.
Checkpoint snapshot_model(PNet& model, const AdamState* adam = nullptr);
void restore_model(PNet& model, const Checkpoint& ckpt);
AdamState restore_adam(PNet& model, const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pnet
