#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "drseg/png_io.hpp"
#include "drseg/rng.hpp"
#include "drseg/tensor.hpp"

namespace drseg {

// ---------------------------------------------------------------------------
// Configuration and sample type
// ---------------------------------------------------------------------------

struct SynthConfig {
  int image_size = 128;
  double lesion_area_lo = 0.08;   // fraction of the image
  double lesion_area_hi = 0.25;
  double lesion_irregularity = 0.6;  // radial perturbation amplitude
  double contrast = 0.45;            // lesion vs skin intensity gap
  int hair_count_lo = 0;
  int hair_count_hi = 6;
  bool ruler_on = false;
  int specular_count_lo = 0;
  int specular_count_hi = 3;
  std::string skin_tone_mode = "light";  // light | dark
  uint64_t seed = 0;

  void validate() const {
    if (image_size < 16) throw std::invalid_argument("SynthConfig.image_size: must be >= 16");
    if (!(lesion_area_lo > 0.0 && lesion_area_hi < 0.6 && lesion_area_lo <= lesion_area_hi))
      throw std::invalid_argument(
          "SynthConfig.lesion_area_range: need 0 < lo <= hi < 0.6 so the lesion fits");
    if (lesion_area_lo * image_size * image_size < 9.0)
      throw std::invalid_argument("SynthConfig.lesion_area_range: lower bound smaller than 9 px");
    if (lesion_irregularity < 0.0)
      throw std::invalid_argument("SynthConfig.lesion_irregularity: must be >= 0");
    if (hair_count_lo < 0 || hair_count_hi < hair_count_lo)
      throw std::invalid_argument("SynthConfig.hair_count_range: need 0 <= lo <= hi");
    if (specular_count_lo < 0 || specular_count_hi < specular_count_lo)
      throw std::invalid_argument("SynthConfig.specular_count_range: need 0 <= lo <= hi");
    if (skin_tone_mode != "light" && skin_tone_mode != "dark")
      throw std::invalid_argument("SynthConfig.skin_tone_mode: must be 'light' or 'dark'");
  }
};

struct Sample {
  std::string id;
  std::string patient_id;
  std::map<std::string, std::string> strata;  // skin_tone, gender, age_group, site
  Tensor image;        // HxWx3 in [0,1]
  Mask mask;           // lesion
  Mask artifact_mask;  // union of drawn hair / ruler / specular pixels
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline int flood_count(const Mask& m, int sy, int sx) {
  Mask seen(m.h, m.w);
  std::vector<std::pair<int, int>> stack{{sy, sx}};
  seen.at(sy, sx) = 1;
  int count = 0;
  while (!stack.empty()) {
    auto [y, x] = stack.back();
    stack.pop_back();
    ++count;
    const int ny[4] = {y - 1, y + 1, y, y};
    const int nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= m.h || nx[k] < 0 || nx[k] >= m.w) continue;
      if (m.at(ny[k], nx[k]) && !seen.at(ny[k], nx[k])) {
        seen.at(ny[k], nx[k]) = 1;
        stack.push_back({ny[k], nx[k]});
      }
    }
  }
  return count;
}

inline bool single_component(const Mask& m) {
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) return flood_count(m, y, x) == m.area();
  return false;  // empty mask
}

struct LesionShape {
  double cy, cx, rot, sx, sy;
  double harmonics[4];  // amplitudes for k = 2..5
  double phases[4];
};

inline Mask rasterize_lesion(const LesionShape& s, double radius, int size) {
  Mask m(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = y - s.cy, dx = x - s.cx;
      const double u = (dx * std::cos(s.rot) + dy * std::sin(s.rot)) / s.sx;
      const double v = (-dx * std::sin(s.rot) + dy * std::cos(s.rot)) / s.sy;
      const double rho = std::hypot(u, v);
      const double theta = std::atan2(v, u);
      double pert = 0.0;
      for (int k = 0; k < 4; ++k) pert += s.harmonics[k] * std::cos((k + 2) * theta + s.phases[k]);
      if (rho <= radius * (1.0 + pert)) m.at(y, x) = 1;
    }
  return m;
}

inline void stamp_disk(Tensor& img, Mask& amask, double cy, double cx, double rad,
                       const double color[3], double alpha_max) {
  const int y0 = std::max(0, static_cast<int>(cy - rad - 1));
  const int y1 = std::min(img.h - 1, static_cast<int>(cy + rad + 1));
  const int x0 = std::max(0, static_cast<int>(cx - rad - 1));
  const int x1 = std::min(img.w - 1, static_cast<int>(cx + rad + 1));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(y - cy, x - cx);
      if (d > rad + 0.5) continue;
      // soft 1px falloff at the rim
      const double a = alpha_max * std::clamp(rad + 0.5 - d, 0.0, 1.0);
      if (a <= 0.0) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0 - a) * img.at(y, x, c) + a * color[c];
      if (a > 0.08) amask.at(y, x) = 1;
    }
}

}  // namespace detail

// Seeded synthetic dermoscopy sample: radially perturbed elliptical lesion on
// a skin-toned background, with optional hair strokes, ruler ticks and
// specular highlights recorded in artifact_mask. Bit-identical for identical
// (config, seed).
inline Sample generate_sample(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int S = cfg.image_size;
  Rng base(cfg.seed);
  Rng rng = base.split(seed + 1);

  Sample out;
  const uint64_t patient = seed / 2;  // two images per patient
  {
    std::ostringstream os;
    os << "img" << std::setw(4) << std::setfill('0') << seed;
    out.id = os.str();
    std::ostringstream op;
    op << "p" << std::setw(3) << std::setfill('0') << patient;
    out.patient_id = op.str();
  }
  {
    Rng prng = Rng(cfg.seed).split(patient + 7777);
    out.strata["skin_tone"] = cfg.skin_tone_mode;
    out.strata["gender"] = prng.coin() ? "female" : "male";
    const char* ages[3] = {"18-30", "31-50", "51+"};
    out.strata["age_group"] = ages[prng.below(3)];
    const char* sites[4] = {"trunk", "limbs", "head_neck", "acral"};
    out.strata["site"] = sites[prng.below(4)];
  }

  // --- background skin ---
  const bool dark = cfg.skin_tone_mode == "dark";
  double skin[3];
  if (dark) {
    skin[0] = 0.45 + rng.uniform(-0.04, 0.04);
    skin[1] = 0.30 + rng.uniform(-0.03, 0.03);
    skin[2] = 0.24 + rng.uniform(-0.03, 0.03);
  } else {
    skin[0] = 0.87 + rng.uniform(-0.04, 0.04);
    skin[1] = 0.70 + rng.uniform(-0.04, 0.04);
    skin[2] = 0.62 + rng.uniform(-0.04, 0.04);
  }
  const double gphase_y = rng.uniform(0.0, 6.28), gphase_x = rng.uniform(0.0, 6.28);
  const double gamp = rng.uniform(0.01, 0.04);
  out.image = Tensor(S, S, 3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double grad = gamp * (std::cos(2.0 * 3.14159265 * y / S + gphase_y) +
                                  std::cos(2.0 * 3.14159265 * x / S + gphase_x));
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = skin[c] + grad;
    }

  // --- lesion mask (area constrained, single component) ---
  const double target_frac = rng.uniform(cfg.lesion_area_lo, cfg.lesion_area_hi);
  const double lo_px = cfg.lesion_area_lo * S * S, hi_px = cfg.lesion_area_hi * S * S;
  Mask lesion;
  bool ok = false;
  for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
    detail::LesionShape sh;
    sh.cy = S * 0.5 + rng.uniform(-0.12, 0.12) * S;
    sh.cx = S * 0.5 + rng.uniform(-0.12, 0.12) * S;
    sh.rot = rng.uniform(0.0, 3.14159265);
    const double ecc = rng.uniform(0.0, 0.35);
    sh.sx = std::sqrt(1.0 + ecc);
    sh.sy = 1.0 / sh.sx;
    double total_amp = 0.0;
    for (int k = 0; k < 4; ++k) {
      sh.harmonics[k] = cfg.lesion_irregularity * rng.uniform(-0.12, 0.12) / (k + 1);
      sh.phases[k] = rng.uniform(0.0, 6.28318);
      total_amp += std::fabs(sh.harmonics[k]);
    }
    if (total_amp > 0.4) {  // keep the radial function well away from zero
      const double sc = 0.4 / total_amp;
      for (int k = 0; k < 4; ++k) sh.harmonics[k] *= sc;
    }
    double radius = std::sqrt(target_frac * S * S / 3.14159265);
    for (int iter = 0; iter < 4; ++iter) {
      lesion = detail::rasterize_lesion(sh, radius, S);
      const int area = lesion.area();
      if (area == 0) break;
      if (area >= lo_px && area <= hi_px && iter > 0) break;
      radius *= std::sqrt(target_frac * S * S / area);
    }
    const int area = lesion.area();
    ok = area >= lo_px && area <= hi_px && detail::single_component(lesion);
  }
  if (!ok)
    throw std::runtime_error("generate_sample: could not satisfy the lesion area constraint");
  out.mask = lesion;

  // --- lesion appearance: darker pigmented interior with smooth falloff ---
  double lesion_core[3] = {skin[0] - cfg.contrast, skin[1] - cfg.contrast * 1.1,
                           skin[2] - cfg.contrast * 0.9};
  for (double& v : lesion_core) v = std::max(0.03, v);
  // distance-from-edge proxy: normalized radial coordinate via blur of mask
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (!lesion.at(y, x)) continue;
      // soft interior weight: fraction of lesion pixels in a 5x5 window
      int inside = 0, tot = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= S || nx < 0 || nx >= S) continue;
          ++tot;
          inside += lesion.at(ny, nx);
        }
      const double a = 0.5 + 0.5 * (static_cast<double>(inside) / tot);
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) = (1.0 - a) * out.image.at(y, x, c) + a * lesion_core[c];
    }

  // texture noise everywhere, slightly stronger inside the lesion
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double sigma = lesion.at(y, x) ? 0.025 : 0.015;
      const double n = rng.normal() * sigma;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) += n;
    }

  // --- artifacts ---
  out.artifact_mask = Mask(S, S);
  const int n_hair = rng.range(cfg.hair_count_lo, cfg.hair_count_hi);
  for (int h = 0; h < n_hair; ++h) {
    double p0y = rng.uniform(0, S), p0x = rng.uniform(0, S);
    double p1y = rng.uniform(0, S), p1x = rng.uniform(0, S);
    double cyc = 0.5 * (p0y + p1y) + rng.uniform(-0.4, 0.4) * S;
    double cxc = 0.5 * (p0x + p1x) + rng.uniform(-0.4, 0.4) * S;
    const double width = rng.uniform(0.5, 1.5);  // radius: strokes 1-3 px wide
    const double shade = rng.uniform(0.03, 0.18);
    const double hair_color[3] = {shade, shade * 0.9, shade * 0.8};
    const int steps = 3 * S;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const double omt = 1.0 - t;
      const double y = omt * omt * p0y + 2 * omt * t * cyc + t * t * p1y;
      const double x = omt * omt * p0x + 2 * omt * t * cxc + t * t * p1x;
      detail::stamp_disk(out.image, out.artifact_mask, y, x, width, hair_color, 0.85);
    }
  }

  if (cfg.ruler_on) {
    const int yr = rng.coin() ? rng.range(4, S / 5) : rng.range(4 * S / 5, S - 10);
    const int spacing = rng.range(6, 10);
    const double black[3] = {0.02, 0.02, 0.02};
    int tick = 0;
    for (int x = rng.range(2, spacing); x < S - 2; x += spacing, ++tick) {
      const int len = (tick % 5 == 0) ? 8 : 5;
      for (int y = yr; y < std::min(S, yr + len); ++y)
        detail::stamp_disk(out.image, out.artifact_mask, y, x, 0.6, black, 1.0);
    }
  }

  const int n_spec = rng.range(cfg.specular_count_lo, cfg.specular_count_hi);
  for (int sidx = 0; sidx < n_spec; ++sidx) {
    const double cy = rng.uniform(0, S), cx = rng.uniform(0, S);
    const double sg = rng.uniform(1.0, 3.0);
    const double amp = rng.uniform(0.5, 0.95);
    const int r = static_cast<int>(3 * sg) + 1;
    for (int y = std::max(0, int(cy) - r); y <= std::min(S - 1, int(cy) + r); ++y)
      for (int x = std::max(0, int(cx) - r); x <= std::min(S - 1, int(cx) + r); ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double add = amp * std::exp(-d2 / (2 * sg * sg));
        if (add < 0.02) continue;
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) += add;
        if (add > 0.15) out.artifact_mask.at(y, x) = 1;
      }
  }

  // clamp and quantize to the 8-bit grid so PNG round-trips are exact
  for (double& v : out.image.v) {
    v = std::clamp(v, 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline Sample flip_h(const Sample& s) {
  Sample o = s;
  for (int y = 0; y < s.image.h; ++y)
    for (int x = 0; x < s.image.w; ++x) {
      for (int c = 0; c < 3; ++c) o.image.at(y, x, c) = s.image.at(y, s.image.w - 1 - x, c);
      o.mask.at(y, x) = s.mask.at(y, s.mask.w - 1 - x);
      o.artifact_mask.at(y, x) = s.artifact_mask.at(y, s.mask.w - 1 - x);
    }
  return o;
}

inline Sample flip_v(const Sample& s) {
  Sample o = s;
  for (int y = 0; y < s.image.h; ++y)
    for (int x = 0; x < s.image.w; ++x) {
      for (int c = 0; c < 3; ++c) o.image.at(y, x, c) = s.image.at(s.image.h - 1 - y, x, c);
      o.mask.at(y, x) = s.mask.at(s.mask.h - 1 - y, x);
      o.artifact_mask.at(y, x) = s.artifact_mask.at(s.mask.h - 1 - y, x);
    }
  return o;
}

// Quarter-turn counterclockwise, k times. Square images only (the generator
// emits squares).
inline Sample rot90(const Sample& s, int k) {
  k = ((k % 4) + 4) % 4;
  Sample o = s;
  if (k == 0) return o;
  const int n = s.image.h;
  if (s.image.w != n) throw std::invalid_argument("rot90: square images only");
  Sample cur = s;
  for (int t = 0; t < k; ++t) {
    Sample nxt = cur;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        // (y, x) <- (x, n-1-y)
        for (int c = 0; c < 3; ++c) nxt.image.at(y, x, c) = cur.image.at(x, n - 1 - y, c);
        nxt.mask.at(y, x) = cur.mask.at(x, n - 1 - y);
        nxt.artifact_mask.at(y, x) = cur.artifact_mask.at(x, n - 1 - y);
      }
    cur = nxt;
  }
  return cur;
}

namespace detail {

inline double bilinear(const Tensor& img, double y, double x, int c) {
  y = std::clamp(y, 0.0, img.h - 1.0);
  x = std::clamp(x, 0.0, img.w - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
  const double fy = y - y0, fx = x - x0;
  return img.at(y0, x0, c) * (1 - fy) * (1 - fx) + img.at(y0, x1, c) * (1 - fy) * fx +
         img.at(y1, x0, c) * fy * (1 - fx) + img.at(y1, x1, c) * fy * fx;
}

inline uint8_t nearest_mask(const Mask& m, double y, double x) {
  const int yy = std::clamp(static_cast<int>(std::lround(y)), 0, m.h - 1);
  const int xx = std::clamp(static_cast<int>(std::lround(x)), 0, m.w - 1);
  return m.at(yy, xx);
}

}  // namespace detail

// Warps by an inverse displacement field: output(y,x) samples
// input(y + dy(y,x), x + dx(y,x)). Bilinear for the image, nearest for masks.
inline Sample warp(const Sample& s, const Tensor& dy, const Tensor& dx) {
  if (dy.h != s.image.h || dy.w != s.image.w || dx.h != s.image.h || dx.w != s.image.w)
    throw std::invalid_argument("warp: displacement field shape mismatch");
  Sample o = s;
  for (int y = 0; y < s.image.h; ++y)
    for (int x = 0; x < s.image.w; ++x) {
      const double sy = y + dy.at(y, x, 0);
      const double sx = x + dx.at(y, x, 0);
      for (int c = 0; c < 3; ++c) o.image.at(y, x, c) = detail::bilinear(s.image, sy, sx, c);
      o.mask.at(y, x) = detail::nearest_mask(s.mask, sy, sx);
      o.artifact_mask.at(y, x) = detail::nearest_mask(s.artifact_mask, sy, sx);
    }
  return o;
}

// Smooth random displacement field: white noise box-blurred three times
// (approximately Gaussian), scaled to the requested amplitude.
inline std::pair<Tensor, Tensor> elastic_field(int h, int w, double amplitude, int smooth_radius,
                                               Rng& rng) {
  auto make = [&]() {
    Tensor f(h, w, 1);
    for (double& v : f.v) v = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < 3; ++pass) {
      Tensor b(h, w, 1);
      const int r = smooth_radius;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double sum = 0.0;
          int cnt = 0;
          for (int dy2 = -r; dy2 <= r; ++dy2) {
            const int ny = y + dy2;
            if (ny < 0 || ny >= h) continue;
            for (int dx2 = -r; dx2 <= r; ++dx2) {
              const int nx = x + dx2;
              if (nx < 0 || nx >= w) continue;
              sum += f.at(ny, nx, 0);
              ++cnt;
            }
          }
          b.at(y, x, 0) = sum / cnt;
        }
      f = b;
    }
    double mx = 0.0;
    for (double v : f.v) mx = std::max(mx, std::fabs(v));
    if (mx > 0.0)
      for (double& v : f.v) v *= amplitude / mx;
    return f;
  };
  Tensor dy = make();
  Tensor dx = make();
  return {dy, dx};
}

// Crop a window and resize back to the original size.
inline Sample crop_resize(const Sample& s, int y0, int x0, int ch, int cw) {
  const int H = s.image.h, W = s.image.w;
  if (ch < 1 || cw < 1 || ch > H || cw > W)
    throw std::invalid_argument("crop_resize: crop larger than image (or empty)");
  if (y0 < 0 || x0 < 0 || y0 + ch > H || x0 + cw > W)
    throw std::invalid_argument("crop_resize: window out of bounds");
  if (y0 == 0 && x0 == 0 && ch == H && cw == W) return s;
  Sample o = s;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double sy = y0 + (H == 1 ? 0.0 : static_cast<double>(y) * (ch - 1) / (H - 1));
      const double sx = x0 + (W == 1 ? 0.0 : static_cast<double>(x) * (cw - 1) / (W - 1));
      for (int c = 0; c < 3; ++c) o.image.at(y, x, c) = detail::bilinear(s.image, sy, sx, c);
      o.mask.at(y, x) = detail::nearest_mask(s.mask, sy, sx);
      o.artifact_mask.at(y, x) = detail::nearest_mask(s.artifact_mask, sy, sx);
    }
  return o;
}

inline Sample color_jitter(const Sample& s, double brightness, double contrast_gain,
                           const double channel_gain[3]) {
  Sample o = s;
  // contrast pivots around the per-image mean
  double mean = 0.0;
  for (double v : s.image.v) mean += v;
  mean /= s.image.size();
  for (int y = 0; y < s.image.h; ++y)
    for (int x = 0; x < s.image.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = s.image.at(y, x, c);
        v = mean + (v - mean) * contrast_gain;
        v = v * channel_gain[c] + brightness;
        o.image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
  return o;
}

// The full augmentation draw: flips, quarter turns, random crop, elastic
// deformation, photometric jitter. strength in [0,1]; 0 is the identity.
inline Sample augment(const Sample& s, uint64_t seed, double strength) {
  if (strength < 0.0 || strength > 1.0)
    throw std::invalid_argument("augment: strength must be in [0,1]");
  if (strength == 0.0) return s;
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x5bd1e995);

  Sample cur = s;
  // random crop (keeps >= 80% of each side at full strength)
  {
    const int H = s.image.h, W = s.image.w;
    const double keep = 1.0 - 0.2 * strength * rng.uniform();
    const int ch = std::max(8, static_cast<int>(H * keep));
    const int cw = std::max(8, static_cast<int>(W * keep));
    const int y0 = static_cast<int>(rng.below(H - ch + 1));
    const int x0 = static_cast<int>(rng.below(W - cw + 1));
    cur = crop_resize(cur, y0, x0, ch, cw);
  }
  if (rng.coin()) cur = flip_h(cur);
  if (rng.coin()) cur = flip_v(cur);
  if (cur.image.h == cur.image.w) cur = rot90(cur, static_cast<int>(rng.below(4)));
  // elastic
  {
    const double amp = 4.0 * strength;
    if (amp > 0.0) {
      auto [dy, dx] = elastic_field(cur.image.h, cur.image.w, amp, 8, rng);
      cur = warp(cur, dy, dx);
    }
  }
  // photometric
  {
    const double b = rng.uniform(-0.15, 0.15) * strength;
    const double cg = 1.0 + rng.uniform(-0.25, 0.25) * strength;
    double gains[3];
    for (double& g : gains) g = 1.0 + rng.uniform(-0.1, 0.1) * strength;
    cur = color_jitter(cur, b, cg, gains);
  }
  return cur;
}

// Two independently augmented views for the contrastive objective.
inline std::pair<Sample, Sample> two_views(const Sample& s, uint64_t seed, double strength = 0.5) {
  Rng rng(seed ^ 0x2e7151ab3ULL);
  const uint64_t sa = rng.next_u64();
  const uint64_t sb = rng.next_u64();
  return {augment(s, sa, strength), augment(s, sb, strength)};
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------
// images/<id>.png (RGB), masks/<id>.png ({0,255}), optional artifacts/<id>.png,
// meta.csv with columns id,patient_id,skin_tone,gender,age_group,site.

inline void save_dataset(const std::vector<Sample>& samples, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(directory) / "images");
  fs::create_directories(fs::path(directory) / "masks");
  fs::create_directories(fs::path(directory) / "artifacts");
  std::ofstream meta(fs::path(directory) / "meta.csv");
  if (!meta) throw std::runtime_error("save_dataset: cannot write meta.csv in " + directory);
  meta << "id,patient_id,skin_tone,gender,age_group,site\n";
  for (const Sample& s : samples) {
    write_png_rgb((fs::path(directory) / "images" / (s.id + ".png")).string(), s.image);
    write_png_mask((fs::path(directory) / "masks" / (s.id + ".png")).string(), s.mask);
    write_png_mask((fs::path(directory) / "artifacts" / (s.id + ".png")).string(),
                   s.artifact_mask);
    auto get = [&s](const char* k) {
      auto it = s.strata.find(k);
      return it == s.strata.end() ? std::string() : it->second;
    };
    meta << s.id << "," << s.patient_id << "," << get("skin_tone") << "," << get("gender") << ","
         << get("age_group") << "," << get("site") << "\n";
  }
}

inline std::vector<Sample> load_dataset(const std::string& directory,
                                        std::vector<std::string>* warnings = nullptr) {
  namespace fs = std::filesystem;
  std::vector<Sample> out;
  const fs::path meta_path = fs::path(directory) / "meta.csv";
  if (!fs::exists(meta_path)) {
    if (warnings)
      warnings->push_back("load_dataset: no meta.csv in " + directory + "; empty dataset");
    return out;
  }
  std::ifstream meta(meta_path);
  std::string line;
  std::getline(meta, line);  // header
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() < 6)
      throw std::runtime_error("load_dataset: malformed meta.csv row: " + line);
    Sample s;
    s.id = cols[0];
    s.patient_id = cols[1];
    s.strata["skin_tone"] = cols[2];
    s.strata["gender"] = cols[3];
    s.strata["age_group"] = cols[4];
    s.strata["site"] = cols[5];
    const fs::path img = fs::path(directory) / "images" / (s.id + ".png");
    const fs::path msk = fs::path(directory) / "masks" / (s.id + ".png");
    if (!fs::exists(img)) throw std::runtime_error("load_dataset: missing image " + img.string());
    if (!fs::exists(msk)) throw std::runtime_error("load_dataset: missing mask " + msk.string());
    s.image = read_png_rgb(img.string());
    s.mask = read_png_mask(msk.string());
    const fs::path art = fs::path(directory) / "artifacts" / (s.id + ".png");
    s.artifact_mask = fs::exists(art) ? read_png_mask(art.string()) : Mask(s.mask.h, s.mask.w);
    out.push_back(std::move(s));
  }
  if (out.empty() && warnings)
    warnings->push_back("load_dataset: meta.csv lists no samples in " + directory);
  return out;
}

// Dataset-level generation helper: `count` samples, two per patient; when
// mix_tones is set, patient parity alternates the skin-tone mode so the
// stratified reports have both groups.
inline std::vector<Sample> synth_dataset(const SynthConfig& cfg, int count,
                                         bool mix_tones = false) {
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SynthConfig c = cfg;
    if (mix_tones) c.skin_tone_mode = ((i / 2) % 2 == 0) ? "light" : "dark";
    out.push_back(generate_sample(c, static_cast<uint64_t>(i)));
  }
  return out;
}

}  // namespace drseg
