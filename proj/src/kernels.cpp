#include "pnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "pnet/parallel.hpp"

namespace pnet {

namespace {

// Range of output columns ow for which iw = ow*stride + off lies in [0, w).
// Keeps the hot loops free of bounds checks.
inline void col_range(int off, int stride, int in_w, int out_w, int& lo, int& hi) {
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  int last = in_w - 1 - off;  // largest iw offset reachable
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  if (hi < lo) hi = lo;
}

// acc[lo..hi) += wv * x[lo*stride + off ..]; compile-time stride lets the
// unit-stride case vectorize.
template <int kStride>
inline void axpy_row(double* acc, const float* xrow, float wv, int off, int lo, int hi) {
  const float* xp = xrow + static_cast<size_t>(lo) * kStride + off;
  if constexpr (kStride == 1) {
    for (int q = lo; q < hi; ++q) acc[q] += static_cast<double>(wv) * static_cast<double>(xp[q - lo]);
  } else {
    for (int q = lo; q < hi; ++q) {
      acc[q] += static_cast<double>(wv) * static_cast<double>(*xp);
      xp += kStride;
    }
  }
}

inline void axpy_row_any(double* acc, const float* xrow, float wv, int off, int stride, int lo,
                         int hi) {
  if (stride == 1)
    axpy_row<1>(acc, xrow, wv, off, lo, hi);
  else if (stride == 2)
    axpy_row<2>(acc, xrow, wv, off, lo, hi);
  else {
    const float* xp = xrow + static_cast<size_t>(lo) * stride + off;
    for (int q = lo; q < hi; ++q) {
      acc[q] += static_cast<double>(wv) * static_cast<double>(*xp);
      xp += stride;
    }
  }
}

// sum over q of x[q*stride + off] * g[q], for the weight gradient.
template <int kStride>
inline double dot_row(const float* xrow, const float* grow, int off, int lo, int hi) {
  const float* xp = xrow + static_cast<size_t>(lo) * kStride + off;
  double s = 0.0;
  if constexpr (kStride == 1) {
    for (int q = lo; q < hi; ++q) s += static_cast<double>(xp[q - lo]) * static_cast<double>(grow[q]);
  } else {
    for (int q = lo; q < hi; ++q) {
      s += static_cast<double>(*xp) * static_cast<double>(grow[q]);
      xp += kStride;
    }
  }
  return s;
}

inline double dot_row_any(const float* xrow, const float* grow, int off, int stride, int lo,
                          int hi) {
  if (stride == 1) return dot_row<1>(xrow, grow, off, lo, hi);
  if (stride == 2) return dot_row<2>(xrow, grow, off, lo, hi);
  const float* xp = xrow + static_cast<size_t>(lo) * stride + off;
  double s = 0.0;
  for (int q = lo; q < hi; ++q) {
    s += static_cast<double>(*xp) * static_cast<double>(grow[q]);
    xp += stride;
  }
  return s;
}

// acc[q*stride + off] += wv * g[q], scatter within a private row (the
// input-gradient gather).
template <int kStride>
inline void scatter_row(double* acc, const float* grow, float wv, int off, int lo, int hi) {
  double* ap = acc + static_cast<size_t>(lo) * kStride + off;
  if constexpr (kStride == 1) {
    for (int q = lo; q < hi; ++q) ap[q - lo] += static_cast<double>(wv) * static_cast<double>(grow[q]);
  } else {
    for (int q = lo; q < hi; ++q) {
      *ap += static_cast<double>(wv) * static_cast<double>(grow[q]);
      ap += kStride;
    }
  }
}

inline void scatter_row_any(double* acc, const float* grow, float wv, int off, int stride,
                            int lo, int hi) {
  if (stride == 1)
    scatter_row<1>(acc, grow, wv, off, lo, hi);
  else if (stride == 2)
    scatter_row<2>(acc, grow, wv, off, lo, hi);
  else {
    double* ap = acc + static_cast<size_t>(lo) * stride + off;
    for (int q = lo; q < hi; ++q) {
      *ap += static_cast<double>(wv) * static_cast<double>(grow[q]);
      ap += stride;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w, const std::vector<float>& b,
                       const ConvSpec& spec) {
  spec.validate();
  if (w.h != spec.kh || w.w != spec.kw)
    throw ShapeError("conv2d: weight kernel dims " + std::to_string(w.h) + "x" +
                     std::to_string(w.w) + " do not match spec " + std::to_string(spec.kh) +
                     "x" + std::to_string(spec.kw));
  if (x.c != w.c)
    throw ShapeError("conv2d: input channels " + std::to_string(x.c) +
                     " != weight in_channels " + std::to_string(w.c));
  if (static_cast<int>(b.size()) != w.n)
    throw ShapeError("conv2d: bias length " + std::to_string(b.size()) +
                     " != out_channels " + std::to_string(w.n));
  const int oh = spec.out_h(x.h);
  const int ow = spec.out_w(x.w);
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d: non-positive output size " + std::to_string(oh) + "x" +
                     std::to_string(ow) + " for input " + x.shape_str());

  const int out_c = w.n;
  Tensor4 y(x.n, out_c, oh, ow);

  parallel_for(x.n * out_c, [&](int job) {
    const int ni = job / out_c;
    const int oc = job % out_c;
    std::vector<double> acc(ow);
    for (int r = 0; r < oh; ++r) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(b[oc]));
      for (int ic = 0; ic < x.c; ++ic) {
        const float* xplane = x.plane(ni, ic);
        const float* wplane = w.plane(oc, ic);
        for (int kr = 0; kr < spec.kh; ++kr) {
          const int ir = r * spec.stride - spec.padding + kr * spec.dilation;
          if (ir < 0 || ir >= x.h) continue;
          const float* xrow = xplane + static_cast<size_t>(ir) * x.w;
          const float* wrow = wplane + static_cast<size_t>(kr) * spec.kw;
          for (int kc = 0; kc < spec.kw; ++kc) {
            const float wv = wrow[kc];
            const int off = kc * spec.dilation - spec.padding;
            int lo, hi;
            col_range(off, spec.stride, x.w, ow, lo, hi);
            axpy_row_any(acc.data(), xrow, wv, off, spec.stride, lo, hi);
          }
        }
      }
      float* yrow = y.plane(ni, oc) + static_cast<size_t>(r) * ow;
      for (int q = 0; q < ow; ++q) yrow[q] = static_cast<float>(acc[q]);
    }
  });
  return y;
}

ConvGrads conv2d_backward(const Tensor4& x, const Tensor4& w, const ConvSpec& spec,
                          const Tensor4& grad_out) {
  spec.validate();
  const int oh = spec.out_h(x.h);
  const int ow = spec.out_w(x.w);
  if (grad_out.n != x.n || grad_out.c != w.n || grad_out.h != oh || grad_out.w != ow)
    throw ShapeError("conv2d_backward: grad_out shape " + grad_out.shape_str() +
                     " does not match forward output " + std::to_string(x.n) + "x" +
                     std::to_string(w.n) + "x" + std::to_string(oh) + "x" + std::to_string(ow));

  ConvGrads g;
  g.x = Tensor4(x.n, x.c, x.h, x.w);
  g.w = Tensor4(w.n, w.c, w.h, w.w);
  g.b.assign(w.n, 0.0f);

  // grad_b[oc] = sum of grad_out over n, h', w'
  for (int oc = 0; oc < w.n; ++oc) {
    double acc = 0.0;
    for (int ni = 0; ni < x.n; ++ni) {
      const float* gp = grad_out.plane(ni, oc);
      const size_t cnt = static_cast<size_t>(oh) * ow;
      for (size_t i = 0; i < cnt; ++i) acc += gp[i];
    }
    g.b[oc] = static_cast<float>(acc);
  }

  // grad_w: each output channel owns a disjoint weight slice.
  parallel_for(w.n, [&](int oc) {
    std::vector<double> acc(static_cast<size_t>(x.c) * spec.kh * spec.kw, 0.0);
    for (int ni = 0; ni < x.n; ++ni) {
      const float* gplane = grad_out.plane(ni, oc);
      for (int r = 0; r < oh; ++r) {
        const float* grow = gplane + static_cast<size_t>(r) * ow;
        for (int kr = 0; kr < spec.kh; ++kr) {
          const int ir = r * spec.stride - spec.padding + kr * spec.dilation;
          if (ir < 0 || ir >= x.h) continue;
          for (int ic = 0; ic < x.c; ++ic) {
            const float* xrow = x.plane(ni, ic) + static_cast<size_t>(ir) * x.w;
            double* arow = acc.data() + (static_cast<size_t>(ic) * spec.kh + kr) * spec.kw;
            for (int kc = 0; kc < spec.kw; ++kc) {
              const int off = kc * spec.dilation - spec.padding;
              int lo, hi;
              col_range(off, spec.stride, x.w, ow, lo, hi);
              arow[kc] += dot_row_any(xrow, grow, off, spec.stride, lo, hi);
            }
          }
        }
      }
    }
    float* wg = g.w.plane(oc, 0);
    for (size_t i = 0; i < acc.size(); ++i) wg[i] = static_cast<float>(acc[i]);
  });

  // grad_x, gather form: each (n, ic) plane is owned by one job, scatter
  // stays within the private row accumulator.
  parallel_for(x.n * x.c, [&](int job) {
    const int ni = job / x.c;
    const int ic = job % x.c;
    float* gxplane = g.x.plane(ni, ic);
    std::vector<double> acc(x.w);
    for (int ih = 0; ih < x.h; ++ih) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int kr = 0; kr < spec.kh; ++kr) {
        const int t = ih + spec.padding - kr * spec.dilation;
        if (t < 0 || t % spec.stride != 0) continue;
        const int r = t / spec.stride;
        if (r >= oh) continue;
        for (int oc = 0; oc < w.n; ++oc) {
          const float* grow = grad_out.plane(ni, oc) + static_cast<size_t>(r) * ow;
          const float* wrow = w.plane(oc, ic) + static_cast<size_t>(kr) * spec.kw;
          for (int kc = 0; kc < spec.kw; ++kc) {
            const float wv = wrow[kc];
            const int off = kc * spec.dilation - spec.padding;
            int lo, hi;
            col_range(off, spec.stride, x.w, ow, lo, hi);
            scatter_row_any(acc.data(), grow, wv, off, spec.stride, lo, hi);
          }
        }
      }
      float* gxrow = gxplane + static_cast<size_t>(ih) * x.w;
      for (int q = 0; q < x.w; ++q) gxrow[q] = static_cast<float>(acc[q]);
    }
  });

  return g;
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

MaxPoolResult maxpool2d_forward(const Tensor4& x) {
  const int oh = (x.h + 1) / 2;
  const int ow = (x.w + 1) / 2;
  MaxPoolResult res;
  res.y = Tensor4(x.n, x.c, oh, ow);
  res.argmax.assign(res.y.size(), 0);

  parallel_for(x.n * x.c, [&](int job) {
    const int ni = job / x.c;
    const int ci = job % x.c;
    const float* xp = x.plane(ni, ci);
    float* yp = res.y.plane(ni, ci);
    int32_t* ap = res.argmax.data() + res.y.index(ni, ci, 0, 0);
    for (int r = 0; r < oh; ++r) {
      for (int q = 0; q < ow; ++q) {
        float best = -std::numeric_limits<float>::infinity();
        int32_t best_idx = 0;
        // first (lowest linear index) argmax wins on ties
        for (int dr = 0; dr < 2; ++dr) {
          const int ir = 2 * r + dr;
          if (ir >= x.h) break;
          for (int dq = 0; dq < 2; ++dq) {
            const int iq = 2 * q + dq;
            if (iq >= x.w) break;
            const int32_t idx = ir * x.w + iq;
            if (xp[idx] > best) {
              best = xp[idx];
              best_idx = idx;
            }
          }
        }
        yp[static_cast<size_t>(r) * ow + q] = best;
        ap[static_cast<size_t>(r) * ow + q] = best_idx;
      }
    }
  });
  return res;
}

Tensor4 maxpool2d_backward(const Tensor4& grad_out, const std::vector<int32_t>& argmax,
                           int in_h, int in_w) {
  if (argmax.size() != grad_out.size())
    throw ShapeError("maxpool2d_backward: argmax size does not match grad_out");
  Tensor4 gx(grad_out.n, grad_out.c, in_h, in_w);
  parallel_for(grad_out.n * grad_out.c, [&](int job) {
    const int ni = job / grad_out.c;
    const int ci = job % grad_out.c;
    const float* gp = grad_out.plane(ni, ci);
    const int32_t* ap = argmax.data() + grad_out.index(ni, ci, 0, 0);
    float* gxp = gx.plane(ni, ci);
    const size_t cnt = static_cast<size_t>(grad_out.h) * grad_out.w;
    for (size_t i = 0; i < cnt; ++i) gxp[ap[i]] += gp[i];
  });
  return gx;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling
// ---------------------------------------------------------------------------

namespace {

struct LinearTap {
  int i0, i1;
  float w0, w1;
};

// Half-pixel-center source coordinates, clamped at the borders.
std::vector<LinearTap> upsample_taps(int out_dim, int in_dim, int factor) {
  std::vector<LinearTap> taps(out_dim);
  const double scale = 1.0 / factor;
  for (int d = 0; d < out_dim; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in_dim - 1) i0 = in_dim - 1;
    const int i1 = std::min(i0 + 1, in_dim - 1);
    const float f = static_cast<float>(src - i0);
    taps[d] = {i0, i1, 1.0f - f, f};
  }
  return taps;
}

}  // namespace

Tensor4 bilinear_upsample(const Tensor4& x, int factor) {
  if (factor < 1) throw ConfigError("bilinear_upsample: factor must be >= 1");
  if (factor == 1) return x;
  const int oh = x.h * factor;
  const int ow = x.w * factor;
  Tensor4 y(x.n, x.c, oh, ow);
  const auto rows = upsample_taps(oh, x.h, factor);
  const auto cols = upsample_taps(ow, x.w, factor);

  parallel_for(x.n * x.c, [&](int job) {
    const float* xp = x.plane(job / x.c, job % x.c);
    float* yp = y.plane(job / x.c, job % x.c);
    for (int r = 0; r < oh; ++r) {
      const auto& tr = rows[r];
      const float* r0 = xp + static_cast<size_t>(tr.i0) * x.w;
      const float* r1 = xp + static_cast<size_t>(tr.i1) * x.w;
      float* yrow = yp + static_cast<size_t>(r) * ow;
      for (int q = 0; q < ow; ++q) {
        const auto& tc = cols[q];
        const float top = tr.w0 * (tc.w0 * r0[tc.i0] + tc.w1 * r0[tc.i1]);
        const float bot = tr.w1 * (tc.w0 * r1[tc.i0] + tc.w1 * r1[tc.i1]);
        yrow[q] = top + bot;
      }
    }
  });
  return y;
}

Tensor4 bilinear_upsample_backward(const Tensor4& grad_out, int factor, int in_h, int in_w) {
  if (factor < 1) throw ConfigError("bilinear_upsample_backward: factor must be >= 1");
  if (factor == 1) return grad_out;
  if (grad_out.h != in_h * factor || grad_out.w != in_w * factor)
    throw ShapeError("bilinear_upsample_backward: grad_out " + grad_out.shape_str() +
                     " does not match factor * input dims");
  Tensor4 gx(grad_out.n, grad_out.c, in_h, in_w);
  const auto rows = upsample_taps(grad_out.h, in_h, factor);
  const auto cols = upsample_taps(grad_out.w, in_w, factor);

  parallel_for(grad_out.n * grad_out.c, [&](int job) {
    const float* gp = grad_out.plane(job / grad_out.c, job % grad_out.c);
    float* gxp = gx.plane(job / grad_out.c, job % grad_out.c);
    std::vector<double> acc(static_cast<size_t>(in_h) * in_w, 0.0);
    for (int r = 0; r < grad_out.h; ++r) {
      const auto& tr = rows[r];
      const float* grow = gp + static_cast<size_t>(r) * grad_out.w;
      for (int q = 0; q < grad_out.w; ++q) {
        const auto& tc = cols[q];
        const double gv = grow[q];
        acc[static_cast<size_t>(tr.i0) * in_w + tc.i0] += gv * tr.w0 * tc.w0;
        acc[static_cast<size_t>(tr.i0) * in_w + tc.i1] += gv * tr.w0 * tc.w1;
        acc[static_cast<size_t>(tr.i1) * in_w + tc.i0] += gv * tr.w1 * tc.w0;
        acc[static_cast<size_t>(tr.i1) * in_w + tc.i1] += gv * tr.w1 * tc.w1;
      }
    }
    for (size_t i = 0; i < acc.size(); ++i) gxp[i] = static_cast<float>(acc[i]);
  });
  return gx;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

Tensor4 batchnorm_forward(const Tensor4& x, BatchNormState& state, Mode mode,
                          BatchNormCache* cache) {
  if (x.c != state.channels)
    throw ShapeError("batchnorm: input channels " + std::to_string(x.c) +
                     " != state channels " + std::to_string(state.channels));
  Tensor4 y(x.n, x.c, x.h, x.w);
  const size_t plane_sz = static_cast<size_t>(x.h) * x.w;
  const double m = static_cast<double>(x.n) * plane_sz;

  if (cache) {
    cache->xhat = Tensor4(x.n, x.c, x.h, x.w);
    cache->inv_std.assign(x.c, 0.0f);
    cache->mode = mode;
  }

  std::vector<float> mean_c(x.c), inv_std_c(x.c);
  if (mode == Mode::train) {
    for (int ci = 0; ci < x.c; ++ci) {
      double sum = 0.0, sq = 0.0;
      for (int ni = 0; ni < x.n; ++ni) {
        const float* xp = x.plane(ni, ci);
        for (size_t i = 0; i < plane_sz; ++i) {
          sum += xp[i];
          sq += static_cast<double>(xp[i]) * xp[i];
        }
      }
      const double mu = sum / m;
      double var = sq / m - mu * mu;
      if (var < 0.0) var = 0.0;  // roundoff guard
      mean_c[ci] = static_cast<float>(mu);
      inv_std_c[ci] = static_cast<float>(1.0 / std::sqrt(var + state.epsilon));
      state.running_mean[ci] = static_cast<float>((1.0 - state.momentum) * state.running_mean[ci] +
                                                  state.momentum * mu);
      state.running_var[ci] = static_cast<float>((1.0 - state.momentum) * state.running_var[ci] +
                                                 state.momentum * var);
    }
  } else {
    for (int ci = 0; ci < x.c; ++ci) {
      mean_c[ci] = state.running_mean[ci];
      inv_std_c[ci] = static_cast<float>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[ci]) + state.epsilon));
    }
  }

  parallel_for(x.n * x.c, [&](int job) {
    const int ni = job / x.c;
    const int ci = job % x.c;
    const float* xp = x.plane(ni, ci);
    float* yp = y.plane(ni, ci);
    float* hp = cache ? cache->xhat.plane(ni, ci) : nullptr;
    const float mu = mean_c[ci];
    const float is = inv_std_c[ci];
    const float sc = state.scale[ci];
    const float sh = state.shift[ci];
    for (size_t i = 0; i < plane_sz; ++i) {
      const float xhat = (xp[i] - mu) * is;
      if (hp) hp[i] = xhat;
      yp[i] = sc * xhat + sh;
    }
  });

  if (cache) cache->inv_std = inv_std_c;
  return y;
}

Tensor4 batchnorm_backward(const Tensor4& grad_out, const BatchNormState& state,
                           const BatchNormCache& cache, std::vector<float>& grad_scale,
                           std::vector<float>& grad_shift) {
  const Tensor4& xhat = cache.xhat;
  if (!grad_out.same_shape(xhat))
    throw ShapeError("batchnorm_backward: grad_out " + grad_out.shape_str() +
                     " does not match cached forward " + xhat.shape_str());
  Tensor4 gx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
  grad_scale.assign(state.channels, 0.0f);
  grad_shift.assign(state.channels, 0.0f);
  const size_t plane_sz = static_cast<size_t>(grad_out.h) * grad_out.w;
  const double m = static_cast<double>(grad_out.n) * plane_sz;

  parallel_for(grad_out.c, [&](int ci) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int ni = 0; ni < grad_out.n; ++ni) {
      const float* gp = grad_out.plane(ni, ci);
      const float* hp = xhat.plane(ni, ci);
      for (size_t i = 0; i < plane_sz; ++i) {
        sum_g += gp[i];
        sum_gx += static_cast<double>(gp[i]) * hp[i];
      }
    }
    grad_shift[ci] = static_cast<float>(sum_g);
    grad_scale[ci] = static_cast<float>(sum_gx);

    const double sc_is = static_cast<double>(state.scale[ci]) * cache.inv_std[ci];
    if (cache.mode == Mode::train) {
      const double mean_g = sum_g / m;
      const double mean_gx = sum_gx / m;
      for (int ni = 0; ni < grad_out.n; ++ni) {
        const float* gp = grad_out.plane(ni, ci);
        const float* hp = xhat.plane(ni, ci);
        float* gxp = gx.plane(ni, ci);
        for (size_t i = 0; i < plane_sz; ++i)
          gxp[i] = static_cast<float>(sc_is * (gp[i] - mean_g - hp[i] * mean_gx));
      }
    } else {
      // Running stats are constants in eval mode.
      for (int ni = 0; ni < grad_out.n; ++ni) {
        const float* gp = grad_out.plane(ni, ci);
        float* gxp = gx.plane(ni, ci);
        for (size_t i = 0; i < plane_sz; ++i) gxp[i] = static_cast<float>(sc_is * gp[i]);
      }
    }
  });
  return gx;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor4 relu_forward(const Tensor4& x) {
  Tensor4 y = x;
  for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor4 relu_backward(const Tensor4& grad_out, const Tensor4& x_pre) {
  if (!grad_out.same_shape(x_pre))
    throw ShapeError("relu_backward: shape mismatch " + grad_out.shape_str() + " vs " +
                     x_pre.shape_str());
  Tensor4 gx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
  for (size_t i = 0; i < gx.size(); ++i)
    gx.data[i] = x_pre.data[i] > 0.0f ? grad_out.data[i] : 0.0f;
  return gx;
}

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  if (!a.same_shape(b))
    throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor4 y = a;
  for (size_t i = 0; i < y.size(); ++i) y.data[i] += b.data[i];
  return y;
}

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw ShapeError("concat_channels: n/h/w mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  Tensor4 y(a.n, a.c + b.c, a.h, a.w);
  const size_t plane_sz = static_cast<size_t>(a.h) * a.w;
  for (int ni = 0; ni < a.n; ++ni) {
    std::memcpy(y.plane(ni, 0), a.plane(ni, 0), plane_sz * a.c * sizeof(float));
    std::memcpy(y.plane(ni, a.c), b.plane(ni, 0), plane_sz * b.c * sizeof(float));
  }
  return y;
}

void split_channels(const Tensor4& grad, int c_a, Tensor4& grad_a, Tensor4& grad_b) {
  if (c_a < 1 || c_a >= grad.c)
    throw ShapeError("split_channels: invalid split point " + std::to_string(c_a));
  grad_a = Tensor4(grad.n, c_a, grad.h, grad.w);
  grad_b = Tensor4(grad.n, grad.c - c_a, grad.h, grad.w);
  const size_t plane_sz = static_cast<size_t>(grad.h) * grad.w;
  for (int ni = 0; ni < grad.n; ++ni) {
    std::memcpy(grad_a.plane(ni, 0), grad.plane(ni, 0), plane_sz * c_a * sizeof(float));
    std::memcpy(grad_b.plane(ni, 0), grad.plane(ni, c_a), plane_sz * (grad.c - c_a) * sizeof(float));
  }
}

Tensor4 dropout_forward(const Tensor4& x, float rate, Mode mode, Rng& rng,
                        std::vector<float>* mask_out) {
  if (rate < 0.0f || rate >= 1.0f)
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0f) {
    if (mask_out) mask_out->assign(x.size(), 1.0f);
    return x;
  }
  const float keep_scale = 1.0f / (1.0f - rate);
  Tensor4 y(x.n, x.c, x.h, x.w);
  if (mask_out) mask_out->assign(x.size(), 0.0f);
  for (size_t i = 0; i < x.size(); ++i) {
    const bool keep = rng.uniform() >= rate;
    const float mv = keep ? keep_scale : 0.0f;
    if (mask_out) (*mask_out)[i] = mv;
    y.data[i] = x.data[i] * mv;
  }
  return y;
}

Tensor4 dropout_backward(const Tensor4& grad_out, const std::vector<float>& mask) {
  if (mask.size() != grad_out.size())
    throw ShapeError("dropout_backward: mask size does not match grad_out");
  Tensor4 gx = grad_out;
  for (size_t i = 0; i < gx.size(); ++i) gx.data[i] *= mask[i];
  return gx;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

SoftmaxCrossEntropyResult softmax_cross_entropy(const Tensor4& logits, const IntGrid& target) {
  if (target.n != logits.n || target.h != logits.h || target.w != logits.w)
    throw ShapeError("softmax_cross_entropy: target dims do not match logits " +
                     logits.shape_str());
  const int K = logits.c;
  for (int32_t t : target.data)
    if (t < 0 || t >= K)
      throw DataError("softmax_cross_entropy: target class " + std::to_string(t) +
                      " out of range [0, " + std::to_string(K) + ")");
  const double inv_count = 1.0 / (static_cast<double>(logits.n) * logits.h * logits.w);

  SoftmaxCrossEntropyResult res;
  res.grad_logits = Tensor4(logits.n, logits.c, logits.h, logits.w);
  std::vector<double> pixel_loss(static_cast<size_t>(logits.n) * logits.h * logits.w);

  parallel_for(logits.n, [&](int ni) {
    std::vector<double> p(K);
    for (int r = 0; r < logits.h; ++r) {
      for (int q = 0; q < logits.w; ++q) {
        const int32_t t = target.at(ni, r, q);
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at(ni, k, r, q)));
        double denom = 0.0;
        for (int k = 0; k < K; ++k) {
          p[k] = std::exp(static_cast<double>(logits.at(ni, k, r, q)) - mx);
          denom += p[k];
        }
        for (int k = 0; k < K; ++k) p[k] /= denom;
        pixel_loss[target.index(ni, r, q)] = -std::log(std::max(p[t], 1e-300));
        for (int k = 0; k < K; ++k) {
          const double onehot = (k == t) ? 1.0 : 0.0;
          res.grad_logits.at(ni, k, r, q) = static_cast<float>((p[k] - onehot) * inv_count);
        }
      }
    }
  });

  double total = 0.0;
  for (double v : pixel_loss) total += v;
  res.loss = total * inv_count;
  return res;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(const std::vector<NamedParam>& params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: state not initialized for this parameter set");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = *params[pi].value;
    const auto& grad = *params[pi].grad;
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    if (value.size() != grad.size() || value.size() != m.size())
      throw ShapeError("adam_step: size mismatch for parameter " + params[pi].name);
    for (size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      value[i] = static_cast<float>(value[i] - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

}  // namespace pnet
