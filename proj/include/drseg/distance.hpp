#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "drseg/tensor.hpp"

namespace drseg {

// Contour pixels: foreground with at least one background 4-neighbor.
// Pixels on the image border count as interior unless an in-image background
// neighbor exists.
inline Mask contour(const Mask& mask) {
  Mask c(mask.h, mask.w);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = (y > 0 && !mask.at(y - 1, x)) || (y + 1 < mask.h && !mask.at(y + 1, x)) ||
                        (x > 0 && !mask.at(y, x - 1)) || (x + 1 < mask.w && !mask.at(y, x + 1));
      if (edge) c.at(y, x) = 1;
    }
  return c;
}

namespace detail {

constexpr double kEdtInf = 1e20;

// Felzenszwalb-Huttenlocher 1D squared distance transform (lower envelope of
// parabolas). Exact for squared Euclidean distances.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, int n,
                   std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtInf;
  z[1] = kEdtInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Squared Euclidean distance from every pixel to the nearest seed pixel.
// Pixels are kEdtInf when no seed exists.
inline std::vector<double> edt_squared(const Mask& seeds) {
  const int h = seeds.h, w = seeds.w;
  std::vector<double> g(static_cast<size_t>(h) * w);
  for (int i = 0; i < h * w; ++i) g[i] = seeds.v[i] ? 0.0 : detail::kEdtInf;

  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);

  // columns
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[static_cast<size_t>(y) * w + x];
    detail::edt_1d(f, d, h, v, z);
    for (int y = 0; y < h; ++y) g[static_cast<size_t>(y) * w + x] = d[y];
  }
  // rows
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = g[static_cast<size_t>(y) * w + x];
    detail::edt_1d(f, d, w, v, z);
    for (int x = 0; x < w; ++x) g[static_cast<size_t>(y) * w + x] = d[x];
  }
  return g;
}

// Signed distance transform (D9/D10): Euclidean distance to the nearest
// contour pixel, negative inside the foreground, positive outside, zero on
// the contour. Masks with no contour (all-foreground / all-background) map to
// a uniform-sign field clamped at max(H, W).
inline Tensor signed_distance(const Mask& mask) {
  Tensor out(mask.h, mask.w, 1);
  const Mask c = contour(mask);
  const double clamp = static_cast<double>(std::max(mask.h, mask.w));
  bool any = false;
  for (uint8_t b : c.v) any |= (b != 0);
  if (!any) {
    for (int i = 0; i < mask.size(); ++i) out.v[i] = mask.v[i] ? -clamp : clamp;
    return out;
  }
  const std::vector<double> d2 = edt_squared(c);
  for (int i = 0; i < mask.size(); ++i) {
    const double d = std::min(std::sqrt(d2[i]), clamp);
    out.v[i] = mask.v[i] ? -d : d;
  }
  return out;
}

}  // namespace drseg
