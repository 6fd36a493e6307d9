// Value-level resampling: bilinear for real images/logit maps, nearest for
// label maps, pooled downsampling for binary masks and validity weights.
// None of these participate in gradients.
#pragma once

#include "eomt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace eomt {

// align_corners=false sampling: src = (dst + 0.5) * (in / out) - 0.5, clamped.
template <typename S>
Tensor<S> bilinear_resize_plane(const Tensor<S>& src, int out_h, int out_w) {
  check(src.rank() == 2, "bilinear_resize_plane: rank-2 input");
  const int h = src.dim(0), w = src.dim(1);
  check(out_h >= 1 && out_w >= 1, "bilinear_resize_plane: bad output size");
  if (out_h == h && out_w == w) return src;
  Tensor<S> out(Shape{out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                       wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
      out.at(y, x) = static_cast<S>(v);
    }
  }
  return out;
}

template <typename S>
Tensor<S> bilinear_resize_chw(const Tensor<S>& src, int out_h, int out_w) {
  check(src.rank() == 3, "bilinear_resize_chw: rank-3 input");
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (out_h == h && out_w == w) return src;
  Tensor<S> out(Shape{c, out_h, out_w});
  for (int ci = 0; ci < c; ++ci) {
    Tensor<S> plane(Shape{h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) plane.at(y, x) = src.at(ci, y, x);
    Tensor<S> rp = bilinear_resize_plane(plane, out_h, out_w);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) out.at(ci, y, x) = rp.at(y, x);
  }
  return out;
}

// Nearest-neighbor for categorical maps: src index = floor((dst + 0.5) * in / out).
inline std::vector<std::int32_t> nearest_resize_map(const std::vector<std::int32_t>& src,
                                                    int h, int w, int out_h, int out_w) {
  check(static_cast<std::int64_t>(src.size()) == static_cast<std::int64_t>(h) * w,
        "nearest_resize_map: size mismatch");
  std::vector<std::int32_t> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    int iy = static_cast<int>((y + 0.5) * h / out_h);
    iy = std::min(iy, h - 1);
    for (int x = 0; x < out_w; ++x) {
      int ix = static_cast<int>((x + 0.5) * w / out_w);
      ix = std::min(ix, w - 1);
      out[static_cast<std::size_t>(y) * out_w + x] = src[static_cast<std::size_t>(iy) * w + ix];
    }
  }
  return out;
}

// Binary-mask downsample by integer factor: output 1 iff ones hold a strict
// majority of the window.
template <typename S>
Tensor<S> majority_downsample(const Tensor<S>& mask, int factor) {
  check(mask.rank() == 2, "majority_downsample: rank-2 input");
  const int h = mask.dim(0), w = mask.dim(1);
  check(h % factor == 0 && w % factor == 0, "majority_downsample: extents not divisible");
  const int oh = h / factor, ow = w / factor;
  Tensor<S> out(Shape{oh, ow});
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      int ones = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          if (mask.at(y * factor + dy, x * factor + dx) > S(0.5)) ++ones;
      out.at(y, x) = (2 * ones > factor * factor) ? S(1) : S(0);
    }
  return out;
}

// Window-mean downsample, used for fractional validity weights.
template <typename S>
Tensor<S> mean_downsample(const Tensor<S>& plane, int factor) {
  check(plane.rank() == 2, "mean_downsample: rank-2 input");
  const int h = plane.dim(0), w = plane.dim(1);
  check(h % factor == 0 && w % factor == 0, "mean_downsample: extents not divisible");
  const int oh = h / factor, ow = w / factor;
  Tensor<S> out(Shape{oh, ow});
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      S acc = S(0);
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) acc += plane.at(y * factor + dy, x * factor + dx);
      out.at(y, x) = acc / static_cast<S>(factor * factor);
    }
  return out;
}

}  // namespace eomt
