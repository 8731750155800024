#include "pnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pnet {

namespace {

constexpr char kMagic[8] = {'P', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};

// Little-endian fixed-width writers. x86 and every target we care about is
// little-endian; memcpy keeps the aliasing rules happy.
template <typename T>
void put(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const uint32_t len = get<uint32_t>(is);
  if (len > (1u << 20)) throw DataError("checkpoint: implausible string length");
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}

void put_floats(std::ostream& os, const std::vector<float>& v) {
  put<uint32_t>(os, static_cast<uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> get_floats(std::istream& is) {
  const uint32_t len = get<uint32_t>(is);
  std::vector<float> v(len);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(float)));
  if (!is) throw DataError("checkpoint: truncated float array");
  return v;
}

}  // namespace

Checkpoint snapshot_model(PNet& model, const AdamState* adam) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& t : model.named_tensors()) ck.tensors.emplace_back(t.name, *t.value);
  if (adam) {
    ck.has_adam = true;
    ck.adam_t = adam->t;
    ck.adam_beta1 = adam->beta1;
    ck.adam_beta2 = adam->beta2;
    ck.adam_epsilon = adam->epsilon;
    ck.adam_m = adam->m;
    ck.adam_v = adam->v;
  }
  return ck;
}

void restore_model(PNet& model, const Checkpoint& ckpt) {
  auto tensors = model.named_tensors();
  if (tensors.size() != ckpt.tensors.size())
    throw DataError("checkpoint: tensor count " + std::to_string(ckpt.tensors.size()) +
                    " does not match model (" + std::to_string(tensors.size()) + ")");
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, values] = ckpt.tensors[i];
    if (name != tensors[i].name)
      throw DataError("checkpoint: tensor name mismatch at position " + std::to_string(i) +
                      ": '" + name + "' vs model '" + tensors[i].name + "'");
    if (values.size() != tensors[i].value->size())
      throw DataError("checkpoint: tensor '" + name + "' has " +
                      std::to_string(values.size()) + " values, model expects " +
                      std::to_string(tensors[i].value->size()));
    *tensors[i].value = values;
  }
}

AdamState restore_adam(PNet& model, const Checkpoint& ckpt) {
  if (!ckpt.has_adam)
    throw DataError("checkpoint has no optimizer state; cannot resume training from it");
  AdamState st = model.make_adam_state();
  if (ckpt.adam_m.size() != st.m.size())
    throw DataError("checkpoint: optimizer moment count does not match model parameters");
  for (size_t i = 0; i < st.m.size(); ++i)
    if (ckpt.adam_m[i].size() != st.m[i].size())
      throw DataError("checkpoint: optimizer moment size mismatch at index " +
                      std::to_string(i));
  st.m = ckpt.adam_m;
  st.v = ckpt.adam_v;
  st.t = ckpt.adam_t;
  st.beta1 = ckpt.adam_beta1;
  st.beta2 = ckpt.adam_beta2;
  st.epsilon = ckpt.adam_epsilon;
  return st;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);

  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, Checkpoint::kVersion);

  const ModelConfig& c = ckpt.config;
  for (int wd : c.stage_widths) put<uint32_t>(os, static_cast<uint32_t>(wd));
  put<uint32_t>(os, static_cast<uint32_t>(c.decoder_width));
  put<uint32_t>(os, static_cast<uint32_t>(c.num_classes));
  put<uint32_t>(os, static_cast<uint32_t>(c.dilation_r1));
  put<uint32_t>(os, static_cast<uint32_t>(c.dilation_r2));
  put<uint32_t>(os, static_cast<uint32_t>(c.downsample));
  put<float>(os, c.dropout_rate);
  put<uint32_t>(os, static_cast<uint32_t>(c.input_channels));
  put<uint8_t>(os, c.skip_pre_block ? 1 : 0);
  put<uint32_t>(os, static_cast<uint32_t>(ckpt.train_w));
  put<uint32_t>(os, static_cast<uint32_t>(ckpt.train_h));
  put_string(os, ckpt.dataset_name);

  put<uint8_t>(os, ckpt.has_adam ? 1 : 0);
  put<uint64_t>(os, ckpt.epoch);

  put<uint32_t>(os, static_cast<uint32_t>(ckpt.rng_streams.size()));
  for (const auto& [name, state] : ckpt.rng_streams) {
    put_string(os, name);
    put<uint64_t>(os, state);
  }

  put<uint32_t>(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, values] : ckpt.tensors) {
    put_string(os, name);
    put_floats(os, values);
  }

  if (ckpt.has_adam) {
    put<int64_t>(os, ckpt.adam_t);
    put<double>(os, ckpt.adam_beta1);
    put<double>(os, ckpt.adam_beta2);
    put<double>(os, ckpt.adam_epsilon);
    put<uint32_t>(os, static_cast<uint32_t>(ckpt.adam_m.size()));
    for (size_t i = 0; i < ckpt.adam_m.size(); ++i) {
      put_floats(os, ckpt.adam_m[i]);
      put_floats(os, ckpt.adam_v[i]);
    }
  }
  if (!os) throw DataError("write failure on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("not a PNet checkpoint (bad magic): " + path);
  const uint32_t version = get<uint32_t>(is);
  if (version != Checkpoint::kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) +
                    " (expected " + std::to_string(Checkpoint::kVersion) + ")");

  Checkpoint ck;
  for (int i = 0; i < 4; ++i)
    ck.config.stage_widths[static_cast<size_t>(i)] = static_cast<int>(get<uint32_t>(is));
  ck.config.decoder_width = static_cast<int>(get<uint32_t>(is));
  ck.config.num_classes = static_cast<int>(get<uint32_t>(is));
  ck.config.dilation_r1 = static_cast<int>(get<uint32_t>(is));
  ck.config.dilation_r2 = static_cast<int>(get<uint32_t>(is));
  const uint32_t variant = get<uint32_t>(is);
  if (variant > 2) throw DataError("checkpoint: unknown downsample variant");
  ck.config.downsample = static_cast<DownsampleVariant>(variant);
  ck.config.dropout_rate = get<float>(is);
  ck.config.input_channels = static_cast<int>(get<uint32_t>(is));
  ck.config.skip_pre_block = get<uint8_t>(is) != 0;
  ck.train_w = static_cast<int>(get<uint32_t>(is));
  ck.train_h = static_cast<int>(get<uint32_t>(is));
  ck.dataset_name = get_string(is);

  ck.has_adam = get<uint8_t>(is) != 0;
  ck.epoch = get<uint64_t>(is);

  const uint32_t n_streams = get<uint32_t>(is);
  for (uint32_t i = 0; i < n_streams; ++i) {
    std::string name = get_string(is);
    const uint64_t state = get<uint64_t>(is);
    ck.rng_streams.emplace_back(std::move(name), state);
  }

  const uint32_t n_tensors = get<uint32_t>(is);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = get_string(is);
    ck.tensors.emplace_back(std::move(name), get_floats(is));
  }

  if (ck.has_adam) {
    ck.adam_t = get<int64_t>(is);
    ck.adam_beta1 = get<double>(is);
    ck.adam_beta2 = get<double>(is);
    ck.adam_epsilon = get<double>(is);
    const uint32_t n_params = get<uint32_t>(is);
    for (uint32_t i = 0; i < n_params; ++i) {
      ck.adam_m.push_back(get_floats(is));
      ck.adam_v.push_back(get_floats(is));
    }
  }
  return ck;
}

}  // namespace pnet
