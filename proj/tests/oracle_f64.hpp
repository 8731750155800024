#pragma once

// Double-precision re-implementation of every layer PNet composes, written
// against plain loops with no code shared with the library kernels. Used as
// the 64-bit evaluation route for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "pnet/model.hpp"
#include "pnet/tensor.hpp"

namespace oracle::f64 {

struct T {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  T() = default;
  T(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
    v.assign(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0);
  }
  size_t idx(int ni, int ci, int hi, int wi) const {
    return ((static_cast<size_t>(ni) * c + ci) * h + hi) * w + wi;
  }
  double& at(int ni, int ci, int hi, int wi) { return v[idx(ni, ci, hi, wi)]; }
  double at(int ni, int ci, int hi, int wi) const { return v[idx(ni, ci, hi, wi)]; }
};

inline T from(const pnet::Tensor4& x) {
  T t(x.n, x.c, x.h, x.w);
  for (size_t i = 0; i < x.size(); ++i) t.v[i] = x.data[i];
  return t;
}

inline T conv(const T& x, const std::vector<float>& w, const std::vector<float>& b, int out_c,
              int k, int stride, int pad, int dil) {
  const int oh = (x.h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int ow = (x.w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  T y(x.n, out_c, oh, ow);
  for (int ni = 0; ni < x.n; ++ni)
    for (int oc = 0; oc < out_c; ++oc)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          double acc = b[static_cast<size_t>(oc)];
          for (int ic = 0; ic < x.c; ++ic)
            for (int kr = 0; kr < k; ++kr)
              for (int kc = 0; kc < k; ++kc) {
                const int ih = r * stride - pad + kr * dil;
                const int iw = q * stride - pad + kc * dil;
                if (ih < 0 || ih >= x.h || iw < 0 || iw >= x.w) continue;
                const size_t widx = ((static_cast<size_t>(oc) * x.c + ic) * k + kr) * k + kc;
                acc += x.at(ni, ic, ih, iw) * w[widx];
              }
          y.at(ni, oc, r, q) = acc;
        }
  return y;
}

inline T bn_train(const T& x, const std::vector<float>& scale, const std::vector<float>& shift,
                  double eps) {
  T y(x.n, x.c, x.h, x.w);
  const double m = static_cast<double>(x.n) * x.h * x.w;
  for (int ci = 0; ci < x.c; ++ci) {
    double sum = 0.0, sq = 0.0;
    for (int ni = 0; ni < x.n; ++ni)
      for (int r = 0; r < x.h; ++r)
        for (int q = 0; q < x.w; ++q) {
          const double val = x.at(ni, ci, r, q);
          sum += val;
          sq += val * val;
        }
    const double mu = sum / m;
    const double var = std::max(0.0, sq / m - mu * mu);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int ni = 0; ni < x.n; ++ni)
      for (int r = 0; r < x.h; ++r)
        for (int q = 0; q < x.w; ++q)
          y.at(ni, ci, r, q) =
              scale[static_cast<size_t>(ci)] * (x.at(ni, ci, r, q) - mu) * inv_std +
              shift[static_cast<size_t>(ci)];
  }
  return y;
}

inline T relu(T x) {
  for (auto& val : x.v) val = val > 0.0 ? val : 0.0;
  return x;
}

inline T add(const T& a, const T& b) {
  T y = a;
  for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

inline T maxpool(const T& x) {
  T y(x.n, x.c, (x.h + 1) / 2, (x.w + 1) / 2);
  for (int ni = 0; ni < x.n; ++ni)
    for (int ci = 0; ci < x.c; ++ci)
      for (int r = 0; r < y.h; ++r)
        for (int q = 0; q < y.w; ++q) {
          double best = -std::numeric_limits<double>::infinity();
          for (int dr = 0; dr < 2 && 2 * r + dr < x.h; ++dr)
            for (int dq = 0; dq < 2 && 2 * q + dq < x.w; ++dq)
              best = std::max(best, x.at(ni, ci, 2 * r + dr, 2 * q + dq));
          y.at(ni, ci, r, q) = best;
        }
  return y;
}

inline T upsample(const T& x, int factor) {
  T y(x.n, x.c, x.h * factor, x.w * factor);
  auto src = [&](int d, int in_dim) {
    double s = (d + 0.5) / factor - 0.5;
    if (s < 0.0) s = 0.0;
    int i0 = std::min(static_cast<int>(s), in_dim - 1);
    const int i1 = std::min(i0 + 1, in_dim - 1);
    return std::tuple<int, int, double>(i0, i1, s - i0);
  };
  for (int ni = 0; ni < x.n; ++ni)
    for (int ci = 0; ci < x.c; ++ci)
      for (int r = 0; r < y.h; ++r) {
        auto [r0, r1, fr] = src(r, x.h);
        for (int q = 0; q < y.w; ++q) {
          auto [q0, q1, fq] = src(q, x.w);
          y.at(ni, ci, r, q) = (1 - fr) * ((1 - fq) * x.at(ni, ci, r0, q0) + fq * x.at(ni, ci, r0, q1)) +
                               fr * ((1 - fq) * x.at(ni, ci, r1, q0) + fq * x.at(ni, ci, r1, q1));
        }
      }
  return y;
}

inline T concat(const T& a, const T& b) {
  T y(a.n, a.c + b.c, a.h, a.w);
  for (int ni = 0; ni < a.n; ++ni) {
    for (int ci = 0; ci < a.c; ++ci)
      for (int r = 0; r < a.h; ++r)
        for (int q = 0; q < a.w; ++q) y.at(ni, ci, r, q) = a.at(ni, ci, r, q);
    for (int ci = 0; ci < b.c; ++ci)
      for (int r = 0; r < a.h; ++r)
        for (int q = 0; q < a.w; ++q) y.at(ni, a.c + ci, r, q) = b.at(ni, ci, r, q);
  }
  return y;
}

inline double cross_entropy(const T& logits, const pnet::IntGrid& target) {
  double total = 0.0;
  for (int ni = 0; ni < logits.n; ++ni)
    for (int r = 0; r < logits.h; ++r)
      for (int q = 0; q < logits.w; ++q) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < logits.c; ++k) mx = std::max(mx, logits.at(ni, k, r, q));
        double denom = 0.0;
        for (int k = 0; k < logits.c; ++k) denom += std::exp(logits.at(ni, k, r, q) - mx);
        const int32_t t = target.at(ni, r, q);
        total += -(logits.at(ni, t, r, q) - mx - std::log(denom));
      }
  return total / (static_cast<double>(logits.n) * logits.h * logits.w);
}

// Parameter arrays fetched by canonical name.
using ParamMap = std::map<std::string, const std::vector<float>*>;

inline ParamMap param_map(pnet::PNet& model) {
  ParamMap map;
  for (const auto& p : model.named_params()) map[p.name] = p.value;
  return map;
}

inline const std::vector<float>& fetch(const ParamMap& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) throw std::runtime_error("oracle: missing parameter " + name);
  return *it->second;
}

// Patch block at double precision: conv(r1)+bn+relu, conv(r2)+bn+relu,
// residual add.
inline T patch_block(const T& x, const ParamMap& p, const std::string& prefix, int r1, int r2,
                     double bn_eps) {
  T t = conv(x, fetch(p, prefix + ".conv_a.w"), fetch(p, prefix + ".conv_a.b"), x.c, 3, 1, r1, r1);
  t = relu(bn_train(t, fetch(p, prefix + ".bn_a.scale"), fetch(p, prefix + ".bn_a.shift"), bn_eps));
  t = conv(t, fetch(p, prefix + ".conv_b.w"), fetch(p, prefix + ".conv_b.b"), x.c, 3, 1, r2, r2);
  t = relu(bn_train(t, fetch(p, prefix + ".bn_b.scale"), fetch(p, prefix + ".bn_b.shift"), bn_eps));
  return add(x, t);
}

// Full train-mode forward + loss at double precision. Assumes dropout rate
// 0 in the config (the check configs use that).
inline double model_loss(pnet::PNet& model, const pnet::Tensor4& input,
                         const pnet::IntGrid& target, double bn_eps = 1e-5) {
  const pnet::ModelConfig& cfg = model.config();
  const ParamMap p = param_map(model);

  T t = from(input);
  T skip;
  int in_c = cfg.input_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "enc" + std::to_string(i + 1);
    const int out_c = cfg.stage_widths[static_cast<size_t>(i)];
    switch (cfg.downsample) {
      case pnet::DownsampleVariant::conv5x5:
        t = conv(t, fetch(p, prefix + ".down.w"), fetch(p, prefix + ".down.b"), out_c, 5, 2, 2, 1);
        break;
      case pnet::DownsampleVariant::conv3x3:
        t = conv(t, fetch(p, prefix + ".down.w"), fetch(p, prefix + ".down.b"), out_c, 3, 2, 1, 1);
        break;
      case pnet::DownsampleVariant::conv3x3_maxpool:
        t = conv(t, fetch(p, prefix + ".down.w"), fetch(p, prefix + ".down.b"), out_c, 3, 1, 1, 1);
        t = maxpool(t);
        break;
    }
    t = relu(bn_train(t, fetch(p, prefix + ".down.bn.scale"), fetch(p, prefix + ".down.bn.shift"),
                      bn_eps));
    if (i == 0 && cfg.skip_pre_block) skip = t;
    t = patch_block(t, p, prefix + ".patch", cfg.dilation_r1, cfg.dilation_r2, bn_eps);
    if (i == 0 && !cfg.skip_pre_block) skip = t;
    in_c = out_c;
  }
  (void)in_c;

  t = upsample(t, 8);
  t = concat(t, skip);
  t = conv(t, fetch(p, "dec.fuse.w"), fetch(p, "dec.fuse.b"), cfg.decoder_width, 3, 1, 1, 1);
  t = relu(bn_train(t, fetch(p, "dec.fuse.bn.scale"), fetch(p, "dec.fuse.bn.shift"), bn_eps));
  t = conv(t, fetch(p, "dec.mix.w"), fetch(p, "dec.mix.b"), cfg.decoder_width, 1, 1, 0, 1);
  t = relu(bn_train(t, fetch(p, "dec.mix.bn.scale"), fetch(p, "dec.mix.bn.shift"), bn_eps));
  t = conv(t, fetch(p, "dec.classify.w"), fetch(p, "dec.classify.b"), cfg.num_classes, 1, 1, 0, 1);
  t = upsample(t, 2);
  return cross_entropy(t, target);
}

}  // namespace oracle::f64
