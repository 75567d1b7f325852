#pragma once

#include <stdexcept>
#include <vector>

#include "drseg/tensor.hpp"

namespace drseg {

// Optional mask cleanup: drop small 4-connected components, then close with a
// disk. Both default off (min_area=0, radius=0 -> identity).
inline Mask postprocess(const Mask& mask, int min_area, int closing_radius) {
  if (min_area < 0) throw std::invalid_argument("postprocess: min_area must be >= 0");
  if (closing_radius < 0) throw std::invalid_argument("postprocess: closing_radius must be >= 0");
  Mask out = mask;
  const int h = mask.h, w = mask.w;

  if (min_area > 0) {
    std::vector<int> label(static_cast<size_t>(h) * w, -1);
    std::vector<int> stack;
    int next = 0;
    std::vector<int> areas;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int idx = y * w + x;
        if (!out.v[idx] || label[idx] >= 0) continue;
        stack.assign(1, idx);
        label[idx] = next;
        int area = 0;
        while (!stack.empty()) {
          const int cur = stack.back();
          stack.pop_back();
          ++area;
          const int cy = cur / w, cx = cur % w;
          const int ny[4] = {cy - 1, cy + 1, cy, cy};
          const int nx[4] = {cx, cx, cx - 1, cx + 1};
          for (int k = 0; k < 4; ++k) {
            if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
            const int nidx = ny[k] * w + nx[k];
            if (out.v[nidx] && label[nidx] < 0) {
              label[nidx] = next;
              stack.push_back(nidx);
            }
          }
        }
        areas.push_back(area);
        ++next;
      }
    for (int i = 0; i < h * w; ++i)
      if (out.v[i] && areas[label[i]] < min_area) out.v[i] = 0;
  }

  if (closing_radius > 0) {
    // disk structuring element offsets
    std::vector<std::pair<int, int>> disk;
    for (int dy = -closing_radius; dy <= closing_radius; ++dy)
      for (int dx = -closing_radius; dx <= closing_radius; ++dx)
        if (dy * dy + dx * dx <= closing_radius * closing_radius) disk.push_back({dy, dx});

    auto dilate = [&](const Mask& m) {
      Mask r(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!m.at(y, x)) continue;
          for (auto [dy, dx] : disk) {
            const int ny = y + dy, nx = x + dx;
            if (ny >= 0 && ny < h && nx >= 0 && nx < w) r.at(ny, nx) = 1;
          }
        }
      return r;
    };
    auto erode = [&](const Mask& m) {
      // out-of-image counts as foreground so closing never shrinks the input
      Mask r(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          bool all = true;
          for (auto [dy, dx] : disk) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (!m.at(ny, nx)) {
              all = false;
              break;
            }
          }
          r.at(y, x) = all ? 1 : 0;
        }
      return r;
    };
    out = erode(dilate(out));
  }
  return out;
}

}  // namespace drseg
