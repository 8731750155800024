#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnet {

// Error taxonomy. The CLI maps these onto exit codes, everything else
// just propagates them.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Rank-4 array in (batch, channel, row, col) order, row-major with the
// column index fastest. 32-bit storage; reductions accumulate in 64-bit.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_) {
    if (n_ < 1 || c_ < 1 || h_ < 1 || w_ < 1)
      throw ShapeError("Tensor4: all dimensions must be >= 1, got " + shape_str());
    data.assign(static_cast<size_t>(n_) * c_ * h_ * w_, fill);
  }

  size_t size() const { return data.size(); }

  size_t index(int ni, int ci, int hi, int wi) const {
    return ((static_cast<size_t>(ni) * c + ci) * h + hi) * w + wi;
  }
  float& at(int ni, int ci, int hi, int wi) { return data[index(ni, ci, hi, wi)]; }
  float at(int ni, int ci, int hi, int wi) const { return data[index(ni, ci, hi, wi)]; }

  const float* plane(int ni, int ci) const { return data.data() + index(ni, ci, 0, 0); }
  float* plane(int ni, int ci) { return data.data() + index(ni, ci, 0, 0); }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) +
           "x" + std::to_string(w);
  }
};

// Integer grid for class masks, (batch, row, col).
struct IntGrid {
  int n = 0, h = 0, w = 0;
  std::vector<int32_t> data;

  IntGrid() = default;
  IntGrid(int n_, int h_, int w_, int32_t fill = 0) : n(n_), h(h_), w(w_) {
    if (n_ < 1 || h_ < 1 || w_ < 1)
      throw ShapeError("IntGrid: all dimensions must be >= 1");
    data.assign(static_cast<size_t>(n_) * h_ * w_, fill);
  }

  size_t size() const { return data.size(); }
  size_t index(int ni, int hi, int wi) const {
    return (static_cast<size_t>(ni) * h + hi) * w + wi;
  }
  int32_t& at(int ni, int hi, int wi) { return data[index(ni, hi, wi)]; }
  int32_t at(int ni, int hi, int wi) const { return data[index(ni, hi, wi)]; }
  bool same_shape(const IntGrid& o) const { return n == o.n && h == o.h && w == o.w; }
};

// Convolution geometry. Square kernels only; padding is zero-fill.
struct ConvSpec {
  int kh = 3, kw = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  void validate() const {
    if (stride < 1) throw ConfigError("ConvSpec: stride must be >= 1");
    if (dilation < 1) throw ConfigError("ConvSpec: dilation must be >= 1");
    if (padding < 0) throw ConfigError("ConvSpec: padding must be >= 0");
    if (kh < 1 || kw < 1) throw ConfigError("ConvSpec: kernel dims must be >= 1");
  }

  // floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1
  int out_dim(int in, int k) const {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
  }
  int out_h(int in_h) const { return out_dim(in_h, kh); }
  int out_w(int in_w) const { return out_dim(in_w, kw); }
};

}  // namespace pnet
