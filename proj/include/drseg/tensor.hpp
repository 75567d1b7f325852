#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace drseg {

// Dense rank-3 tensor in HWC layout, double precision throughout.
// Vectors are stored as 1x1xC, scalars as 1x1x1.
struct Tensor {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, 0.0) {
    if (h_ < 1 || w_ < 1 || c_ < 1) throw std::invalid_argument("Tensor: dims must be >= 1");
  }

  static Tensor zeros(int h, int w, int c) { return Tensor(h, w, c); }

  static Tensor full(int h, int w, int c, double value) {
    Tensor t(h, w, c);
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return full(1, 1, 1, value); }

  int size() const { return h * w * c; }

  double& at(int y, int x, int ch) { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }

  double* row(int y, int x) { return v.data() + (static_cast<size_t>(y) * w + x) * c; }
  const double* row(int y, int x) const { return v.data() + (static_cast<size_t>(y) * w + x) * c; }

  bool same_shape(const Tensor& o) const { return h == o.h && w == o.w && c == o.c; }

  std::string shape_str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

// Binary mask, values restricted to {0,1}.
struct Mask {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

  int size() const { return h * w; }
  bool same_shape(const Mask& o) const { return h == o.h && w == o.w; }

  int area() const {
    int n = 0;
    for (uint8_t b : v) n += (b != 0);
    return n;
  }
};

}  // namespace drseg
