#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "detrpose/ops.hpp"

namespace detrpose {

// Maps are stored [H, W, C]. Points are (x, y) in normalized [0,1]^2 with
// pixel centers at ((j + 0.5) / W, (i + 0.5) / H).
namespace detail {

template <typename T>
struct BilinearTap {
  std::size_t i00, i01, i10, i11;  // pixel offsets (row * W + col)
  T fx, fy;
  T dx_du, dy_dv;  // d(pixel coord)/d(normalized coord); 0 when clamped
};

template <typename T>
BilinearTap<T> bilinear_tap(T u, T v, std::size_t h, std::size_t w) {
  BilinearTap<T> tap{};
  auto axis = [](T c, std::size_t extent, std::size_t& lo, std::size_t& hi, T& frac, T& deriv) {
    const T hi_lim = static_cast<T>(extent - 1);
    T p = c * static_cast<T>(extent) - T(0.5);
    deriv = static_cast<T>(extent);
    if (p <= T(0)) {
      p = T(0);
      deriv = T(0);
    } else if (p >= hi_lim) {
      p = hi_lim;
      deriv = T(0);
    }
    lo = static_cast<std::size_t>(std::floor(p));
    if (lo > extent - 1) lo = extent - 1;
    hi = std::min(lo + 1, extent - 1);
    frac = p - static_cast<T>(lo);
  };
  std::size_t x0, x1, y0, y1;
  axis(u, w, x0, x1, tap.fx, tap.dx_du);
  axis(v, h, y0, y1, tap.fy, tap.dy_dv);
  tap.i00 = y0 * w + x0;
  tap.i01 = y0 * w + x1;
  tap.i10 = y1 * w + x0;
  tap.i11 = y1 * w + x1;
  return tap;
}

}  // namespace detail

// Border-clamped bilinear interpolation: map [H,W,C], points [P,2] -> [P,C].
// Differentiable with respect to both the map and the points.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& points) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [H,W,C], got " + shape_str(map.shape()));
  detail::require_2d(points, "bilinear_sample");
  if (points.dim(1) != 2) throw DimensionError("bilinear_sample: points must be [P,2]");
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2), p = points.dim(0);
  std::vector<T> out(p * c);
  std::vector<detail::BilinearTap<T>> taps(p);
  const T* md = map.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    const auto tap = detail::bilinear_tap(points[i * 2], points[i * 2 + 1], h, w);
    taps[i] = tap;
    const T w00 = (1 - tap.fx) * (1 - tap.fy), w01 = tap.fx * (1 - tap.fy);
    const T w10 = (1 - tap.fx) * tap.fy, w11 = tap.fx * tap.fy;
    for (std::size_t ch = 0; ch < c; ++ch)
      out[i * c + ch] = w00 * md[tap.i00 * c + ch] + w01 * md[tap.i01 * c + ch] +
                        w10 * md[tap.i10 * c + ch] + w11 * md[tap.i11 * c + ch];
  }
  return make_result<T>({p, c}, std::move(out), {map, points}, [taps = std::move(taps), c](TensorNode<T>& self) {
    const T* md = self.parents[0]->data.data();
    T* gm = parent_grad(self, 0);
    T* gp = parent_grad(self, 1);
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const auto& tap = taps[i];
      const T* g = self.grad.data() + i * c;
      if (gm) {
        const T w00 = (1 - tap.fx) * (1 - tap.fy), w01 = tap.fx * (1 - tap.fy);
        const T w10 = (1 - tap.fx) * tap.fy, w11 = tap.fx * tap.fy;
        for (std::size_t ch = 0; ch < c; ++ch) {
          gm[tap.i00 * c + ch] += w00 * g[ch];
          gm[tap.i01 * c + ch] += w01 * g[ch];
          gm[tap.i10 * c + ch] += w10 * g[ch];
          gm[tap.i11 * c + ch] += w11 * g[ch];
        }
      }
      if (gp) {
        T gx = T(0), gy = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T v00 = md[tap.i00 * c + ch], v01 = md[tap.i01 * c + ch];
          const T v10 = md[tap.i10 * c + ch], v11 = md[tap.i11 * c + ch];
          gx += g[ch] * ((1 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
          gy += g[ch] * ((1 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
        }
        gp[i * 2] += gx * tap.dx_du;
        gp[i * 2 + 1] += gy * tap.dy_dv;
      }
    }
  });
}

struct LevelShape {
  std::size_t height = 0;
  std::size_t width = 0;
};

// Multi-scale deformable attention core.
//   values[l]: [H_l * W_l, D] per level
//   locations: [Q, heads * L * M * 2] normalized (x, y) sampling points
//   weights:   [Q, heads * L * M] attention weights (already normalized)
// Output [Q, D]; head h reads channels [h*D/heads, (h+1)*D/heads).
template <typename T>
Tensor<T> ms_deform_attn(const std::vector<Tensor<T>>& values, const std::vector<LevelShape>& levels,
                         const Tensor<T>& locations, const Tensor<T>& weights, std::size_t heads,
                         std::size_t points) {
  const std::size_t nl = levels.size();
  if (values.size() != nl || nl == 0) throw DimensionError("ms_deform_attn: level count mismatch");
  const std::size_t d = values[0].dim(1);
  for (std::size_t l = 0; l < nl; ++l)
    if (values[l].rank() != 2 || values[l].dim(0) != levels[l].height * levels[l].width || values[l].dim(1) != d)
      throw DimensionError("ms_deform_attn: value level " + std::to_string(l) + " has shape " +
                           shape_str(values[l].shape()));
  if (heads == 0 || d % heads != 0) throw DimensionError("ms_deform_attn: width not divisible by heads");
  const std::size_t q = locations.dim(0), per = heads * nl * points, dh = d / heads;
  if (locations.shape() != Shape{q, per * 2} || weights.shape() != Shape{q, per})
    throw DimensionError("ms_deform_attn: locations/weights shape");

  std::vector<detail::BilinearTap<T>> taps(q * per);
  std::vector<T> out(q * d, T(0));
  for (std::size_t qi = 0; qi < q; ++qi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < nl; ++l) {
        const T* vd = values[l].data().data();
        for (std::size_t m = 0; m < points; ++m) {
          const std::size_t s = ((h * nl) + l) * points + m;
          const auto tap = detail::bilinear_tap(locations[qi * per * 2 + s * 2], locations[qi * per * 2 + s * 2 + 1],
                                                levels[l].height, levels[l].width);
          taps[qi * per + s] = tap;
          const T a = weights[qi * per + s];
          const T w00 = a * (1 - tap.fx) * (1 - tap.fy), w01 = a * tap.fx * (1 - tap.fy);
          const T w10 = a * (1 - tap.fx) * tap.fy, w11 = a * tap.fx * tap.fy;
          T* o = out.data() + qi * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            const std::size_t ch = h * dh + c;
            o[c] += w00 * vd[tap.i00 * d + ch] + w01 * vd[tap.i01 * d + ch] + w10 * vd[tap.i10 * d + ch] +
                    w11 * vd[tap.i11 * d + ch];
          }
        }
      }

  std::vector<Tensor<T>> parents = values;
  parents.push_back(locations);
  parents.push_back(weights);
  return make_result<T>(
      {q, d}, std::move(out), std::move(parents),
      [taps = std::move(taps), q, per, nl, heads, points, d, dh](TensorNode<T>& self) {
        T* gloc = parent_grad(self, nl);
        T* gw = parent_grad(self, nl + 1);
        const auto& wd = parent_data(self, nl + 1);
        for (std::size_t qi = 0; qi < q; ++qi)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < nl; ++l) {
              const T* vd = self.parents[l]->data.data();
              T* gv = parent_grad(self, l);
              for (std::size_t m = 0; m < points; ++m) {
                const std::size_t s = ((h * nl) + l) * points + m;
                const auto& tap = taps[qi * per + s];
                const T a = wd[qi * per + s];
                const T* g = self.grad.data() + qi * d + h * dh;
                const T b00 = (1 - tap.fx) * (1 - tap.fy), b01 = tap.fx * (1 - tap.fy);
                const T b10 = (1 - tap.fx) * tap.fy, b11 = tap.fx * tap.fy;
                T gsample = T(0), gx = T(0), gy = T(0);
                for (std::size_t c = 0; c < dh; ++c) {
                  const std::size_t ch = h * dh + c;
                  const T v00 = vd[tap.i00 * d + ch], v01 = vd[tap.i01 * d + ch];
                  const T v10 = vd[tap.i10 * d + ch], v11 = vd[tap.i11 * d + ch];
                  gsample += g[c] * (b00 * v00 + b01 * v01 + b10 * v10 + b11 * v11);
                  gx += g[c] * ((1 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                  gy += g[c] * ((1 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                  if (gv) {
                    gv[tap.i00 * d + ch] += a * b00 * g[c];
                    gv[tap.i01 * d + ch] += a * b01 * g[c];
                    gv[tap.i10 * d + ch] += a * b10 * g[c];
                    gv[tap.i11 * d + ch] += a * b11 * g[c];
                  }
                }
                if (gw) gw[qi * per + s] += gsample;
                if (gloc) {
                  gloc[qi * per * 2 + s * 2] += a * gx * tap.dx_du;
                  gloc[qi * per * 2 + s * 2 + 1] += a * gy * tap.dy_dv;
                }
              }
            }
      });
}

// Non-overlapping s x s patches: image [H,W,C] -> [(H/s)*(W/s), s*s*C].
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t s) {
  if (image.rank() != 3) throw DimensionError("patchify: expected [H,W,C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (s == 0 || h % s != 0 || w % s != 0) throw ArgumentError("patchify: extent not divisible by stride");
  const std::size_t ph = h / s, pw = w / s, row = s * s * c;
  std::vector<std::size_t> src(ph * pw * row);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            src[(py * pw + px) * row + (dy * s + dx) * c + ch] = ((py * s + dy) * w + (px * s + dx)) * c + ch;
  return reshape(gather(image, std::move(src)), {ph * pw, row});
}

// 3x3 neighbourhood unfolding with zero padding: x [H*W, C] -> [H*W, 9C].
template <typename T>
Tensor<T> unfold3x3(const Tensor<T>& x, std::size_t h, std::size_t w) {
  detail::require_2d(x, "unfold3x3");
  if (x.dim(0) != h * w) throw DimensionError("unfold3x3: row count is not H*W");
  const std::size_t c = x.dim(1), n = h * w;
  std::vector<T> out(n * 9 * c, T(0));
  // src index per output slot, or npos for padding
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> src(n * 9, npos);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yi = static_cast<std::ptrdiff_t>(i) + dy, xj = static_cast<std::ptrdiff_t>(j) + dx;
          if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(h) || xj >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t k = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
          const std::size_t s = static_cast<std::size_t>(yi) * w + static_cast<std::size_t>(xj);
          src[(i * w + j) * 9 + k] = s;
          std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(s * c), c,
                      out.begin() + static_cast<std::ptrdiff_t>(((i * w + j) * 9 + k) * c));
        }
  return make_result<T>({n, 9 * c}, std::move(out), {x}, [src = std::move(src), c](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t slot = 0; slot < src.size(); ++slot) {
      if (src[slot] == npos) continue;
      for (std::size_t ch = 0; ch < c; ++ch) gx[src[slot] * c + ch] += self.grad[slot * c + ch];
    }
  });
}

}  // namespace detrpose
