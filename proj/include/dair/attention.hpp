#pragma once

// Factorized affine pose algebra and the differentiable bilinear sampler
// used by both read and write attention.
//
// Coordinates are normalized: (-1, -1) is the centre of the top-left pixel
// and (+1, +1) the centre of the bottom-right pixel. The sampler pulls: each
// output pixel at normalized p reads the input at M * p.
//
// The decoding transform T_d = T_st * T_r * T_k places an object: it maps a
// point of the glimpse frame to the canvas. Its exact inverse T_e maps the
// canvas back into the glimpse frame. Reading a glimpse therefore pulls the
// image through T_d and writing an object pulls the glimpse through T_e.

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "dair/tensor.hpp"

namespace dair {

/// The seven pose scalars. `S` is a number type or a Tensor column [B, 1].
template <class S>
struct AffinePose {
  S s_x, s_y, t_x, t_y, omega, k_x, k_y;
};

/// Top two rows of a homogeneous 2-D transform; the bottom row is [0, 0, 1].
template <class S>
struct Affine {
  S a, b, c;
  S d, e, f;
};

/// Row-major 3x3 homogeneous transform with bottom row exactly [0, 0, 1].
struct AffineMatrix {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static AffineMatrix identity() { return {}; }

  static AffineMatrix from_affine(const Affine<double>& t) { return {{t.a, t.b, t.c, t.d, t.e, t.f, 0, 0, 1}}; }

  Affine<double> affine() const { return {m[0], m[1], m[2], m[3], m[4], m[5]}; }

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

  friend AffineMatrix operator*(const AffineMatrix& x, const AffineMatrix& y) {
    AffineMatrix out;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += x(r, k) * y(k, c);
        out.m[static_cast<std::size_t>(r * 3 + c)] = acc;
      }
    out.m[6] = 0;
    out.m[7] = 0;
    out.m[8] = 1;
    return out;
  }

  /// max |this - other| over all entries.
  double max_abs_diff(const AffineMatrix& other) const {
    double worst = 0;
    for (std::size_t i = 0; i < 9; ++i) worst = std::max(worst, std::abs(m[i] - other.m[i]));
    return worst;
  }
};

struct PoseFactors {
  AffineMatrix st, r, k, d;
};

namespace detail {

inline void check_pose(const AffinePose<double>& p) {
  for (double v : {p.s_x, p.s_y, p.t_x, p.t_y, p.omega, p.k_x, p.k_y}) {
    if (!std::isfinite(v)) throw std::invalid_argument("pose has a non-finite field");
  }
}

}  // namespace detail

/// T_st, T_r, T_k and their product T_d. With shear disabled T_k is the
/// identity; with the merged block T_r holds R * K and T_k is the identity.
inline PoseFactors pose_to_matrices(const AffinePose<double>& p, bool enable_shear, bool merge_rot_shear) {
  detail::check_pose(p);
  double kx = enable_shear ? p.k_x : 0.0, ky = enable_shear ? p.k_y : 0.0;
  double c = std::cos(p.omega), s = std::sin(p.omega);
  PoseFactors f;
  f.st.m = {p.s_x, 0, p.t_x, 0, p.s_y, p.t_y, 0, 0, 1};
  f.r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  f.k.m = {1 + kx * ky, kx, 0, ky, 1, 0, 0, 0, 1};
  if (merge_rot_shear) {
    f.r = f.r * f.k;
    f.k = AffineMatrix::identity();
  }
  f.d = f.st * f.r * f.k;
  return f;
}

/// T_e = T_k^-1 T_r^-1 T_st^-1, each factor inverted in closed form.
inline AffineMatrix inverse_pose_matrix(const AffinePose<double>& p, bool enable_shear, bool merge_rot_shear) {
  detail::check_pose(p);
  constexpr double min_scale = 1e-6;
  if (!(p.s_x > min_scale) || !(p.s_y > min_scale)) {
    throw std::invalid_argument("pose scale must exceed 1e-6 to invert");
  }
  double kx = enable_shear ? p.k_x : 0.0, ky = enable_shear ? p.k_y : 0.0;
  double c = std::cos(p.omega), s = std::sin(p.omega);
  AffineMatrix st_inv, r_inv, k_inv;
  st_inv.m = {1 / p.s_x, 0, -p.t_x / p.s_x, 0, 1 / p.s_y, -p.t_y / p.s_y, 0, 0, 1};
  r_inv.m = {c, s, 0, -s, c, 0, 0, 0, 1};
  k_inv.m = {1, -kx, 0, -ky, 1 + kx * ky, 0, 0, 0, 1};
  if (merge_rot_shear) {
    // R * K has unit determinant, so its inverse is the adjugate.
    AffineMatrix rk = pose_to_matrices(p, enable_shear, true).r;
    AffineMatrix rk_inv;
    rk_inv.m = {rk(1, 1), -rk(0, 1), 0, -rk(1, 0), rk(0, 0), 0, 0, 0, 1};
    return rk_inv * st_inv;
  }
  return k_inv * r_inv * st_inv;
}

/// T_d in closed form over any arithmetic-like scalar (plain numbers or
/// tensor columns).
template <class S>
Affine<S> placement(const AffinePose<S>& p, bool enable_shear) {
  using std::cos;
  using std::sin;
  S c = cos(p.omega), s = sin(p.omega);
  if (!enable_shear) {
    return {p.s_x * c, p.s_x * -s, p.t_x, p.s_y * s, p.s_y * c, p.t_y};
  }
  S kxky = p.k_x * p.k_y;
  S m00 = c * (1.0 + kxky) - s * p.k_y;
  S m01 = c * p.k_x - s;
  S m10 = s * (1.0 + kxky) + c * p.k_y;
  S m11 = s * p.k_x + c;
  return {p.s_x * m00, p.s_x * m01, p.t_x, p.s_y * m10, p.s_y * m11, p.t_y};
}

/// T_e = T_d^-1 in closed form. R * K is unimodular, so the linear part of
/// the inverse is adj(R K) diag(1/s_x, 1/s_y).
template <class S>
Affine<S> placement_inverse(const AffinePose<S>& p, bool enable_shear) {
  using std::cos;
  using std::sin;
  S c = cos(p.omega), s = sin(p.omega);
  S m00 = c, m01 = -s, m10 = s, m11 = c;
  if (enable_shear) {
    S kxky = p.k_x * p.k_y;
    m00 = c * (1.0 + kxky) - s * p.k_y;
    m01 = c * p.k_x - s;
    m10 = s * (1.0 + kxky) + c * p.k_y;
    m11 = s * p.k_x + c;
  }
  S a = m11 / p.s_x, b = -m01 / p.s_y;
  S d = -m10 / p.s_x, e = m00 / p.s_y;
  S tx = -(a * p.t_x + b * p.t_y);
  S ty = -(d * p.t_x + e * p.t_y);
  return {a, b, tx, d, e, ty};
}

namespace detail {

inline double normalized_coord(std::size_t i, std::size_t n) {
  return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

// Pixel-space sample position, snapped onto the lattice when within a few
// ulps so that lattice-aligned transforms reproduce pixels exactly.
template <class T>
T to_pixel(T normalized, std::size_t n) {
  T p = (normalized + T(1)) * T(0.5) * static_cast<T>(n - 1);
  T r = std::round(p);
  if (std::abs(p - r) <= T(16) * std::numeric_limits<T>::epsilon() * std::max(T(1), std::abs(p))) p = r;
  return p;
}

// The four bilinear taps around one pixel-space sample position.
template <class T>
struct Bilinear {
  long x0, y0;
  T wx, wy;

  Bilinear(T px, T py) {
    T fx = std::floor(px), fy = std::floor(py);
    x0 = static_cast<long>(fx);
    y0 = static_cast<long>(fy);
    wx = px - fx;
    wy = py - fy;
  }

  static T at(const T* img, long h, long w, long y, long x) {
    return (x < 0 || y < 0 || x >= w || y >= h) ? T(0) : img[y * w + x];
  }

  T sample(const T* img, long h, long w) const {
    return (T(1) - wy) * ((T(1) - wx) * at(img, h, w, y0, x0) + wx * at(img, h, w, y0, x0 + 1)) +
           wy * ((T(1) - wx) * at(img, h, w, y0 + 1, x0) + wx * at(img, h, w, y0 + 1, x0 + 1));
  }

  void slopes(const T* img, long h, long w, T& dx, T& dy) const {
    T v00 = at(img, h, w, y0, x0), v01 = at(img, h, w, y0, x0 + 1);
    T v10 = at(img, h, w, y0 + 1, x0), v11 = at(img, h, w, y0 + 1, x0 + 1);
    dx = (T(1) - wy) * (v01 - v00) + wy * (v11 - v10);
    dy = (T(1) - wx) * (v10 - v00) + wx * (v11 - v01);
  }

  void scatter(T* g, long h, long w, T go) const {
    auto put = [&](long y, long x, T wgt) {
      if (x >= 0 && y >= 0 && x < w && y < h) g[y * w + x] += go * wgt;
    };
    put(y0, x0, (T(1) - wy) * (T(1) - wx));
    put(y0, x0 + 1, (T(1) - wy) * wx);
    put(y0 + 1, x0, wy * (T(1) - wx));
    put(y0 + 1, x0 + 1, wy * wx);
  }

  bool outside(long h, long w) const { return x0 + 1 < 0 || y0 + 1 < 0 || x0 >= w || y0 >= h; }
};

}  // namespace detail

/// Batched bilinear pull sampler with zero padding.
/// image [B, H, W], theta [B, 6] holding rows (a b c; d e f) -> [B, out_h, out_w].
template <class T>
Tensor<T> grid_sample(const Tensor<T>& image, const Tensor<T>& theta, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3 || theta.rank() != 2 || theta.dim(1) != 6 || theta.dim(0) != image.dim(0)) {
    throw ShapeError("grid_sample expects image [B, H, W] and theta [B, 6], got " + shape_str(image.shape()) +
                     " and " + shape_str(theta.shape()));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("grid_sample output must be at least 1x1");
  const std::size_t batch = image.dim(0);
  const long h = static_cast<long>(image.dim(1)), w = static_cast<long>(image.dim(2));
  const std::size_t in_h = image.dim(1), in_w = image.dim(2);
  const std::size_t in_plane = in_h * in_w, out_plane = out_h * out_w;

  std::vector<T> xs(out_w), ys(out_h);
  for (std::size_t j = 0; j < out_w; ++j) xs[j] = static_cast<T>(detail::normalized_coord(j, out_w));
  for (std::size_t i = 0; i < out_h; ++i) ys[i] = static_cast<T>(detail::normalized_coord(i, out_h));

  // visit(batch, output flat index, output x, output y, taps)
  auto for_each_sample = [=](const std::vector<T>& th, auto&& visit) {
    for (std::size_t b = 0; b < batch; ++b) {
      const T* t = th.data() + b * 6;
      for (std::size_t i = 0; i < out_h; ++i) {
        for (std::size_t j = 0; j < out_w; ++j) {
          T sx = t[0] * xs[j] + t[1] * ys[i] + t[2];
          T sy = t[3] * xs[j] + t[4] * ys[i] + t[5];
          detail::Bilinear<T> tap(detail::to_pixel(sx, in_w), detail::to_pixel(sy, in_h));
          if (tap.outside(h, w)) continue;
          visit(b, b * out_plane + i * out_w + j, xs[j], ys[i], tap);
        }
      }
    }
  };

  std::vector<T> out(batch * out_plane, T(0));
  const T* img = image.data().data();
  for_each_sample(theta.to_vector(), [&](std::size_t b, std::size_t o, T, T, const detail::Bilinear<T>& tap) {
    out[o] = tap.sample(img + b * in_plane, h, w);
  });

  return detail::make_result<T>(
      Shape{batch, out_h, out_w}, std::move(out), {image, theta},
      [=](detail::Node<T>& self) {
        auto& pi = *self.parents[0];
        auto& pt = *self.parents[1];
        const T half_w = T(0.5) * static_cast<T>(w - 1), half_h = T(0.5) * static_cast<T>(h - 1);
        T* gi = pi.requires_grad ? pi.grad_buffer().data() : nullptr;
        T* gt = pt.requires_grad ? pt.grad_buffer().data() : nullptr;
        for_each_sample(pt.value, [&](std::size_t b, std::size_t o, T x, T y, const detail::Bilinear<T>& tap) {
          T go = self.grad[o];
          if (go == T(0)) return;
          if (gi) tap.scatter(gi + b * in_plane, h, w, go);
          if (gt) {
            T dx, dy;
            tap.slopes(pi.value.data() + b * in_plane, h, w, dx, dy);
            T gsx = go * dx * half_w, gsy = go * dy * half_h;
            T* g = gt + b * 6;
            g[0] += gsx * x;
            g[1] += gsx * y;
            g[2] += gsx;
            g[3] += gsy * x;
            g[4] += gsy * y;
            g[5] += gsy;
          }
        });
      });
}

/// Single-image convenience form: image [H, W] -> [out_h, out_w].
template <class T>
Tensor<T> grid_sample(const Tensor<T>& image, const AffineMatrix& matrix, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 2) throw ShapeError("grid_sample expects image [H, W], got " + shape_str(image.shape()));
  Affine<double> a = matrix.affine();
  Tensor<T> theta(Shape{1, 6}, std::vector<T>{T(a.a), T(a.b), T(a.c), T(a.d), T(a.e), T(a.f)});
  Tensor<T> out = grid_sample(reshape(image, Shape{1, image.dim(0), image.dim(1)}), theta, out_h, out_w);
  return reshape(out, Shape{out_h, out_w});
}

/// Packs closed-form transforms over tensor columns [B, 1] into theta [B, 6].
template <class T>
Tensor<T> pack_theta(const Affine<Tensor<T>>& t) {
  return concat<T>({t.a, t.b, t.c, t.d, t.e, t.f}, 1);
}

/// Number of raw pose scalars the model emits: 5 without shear, 7 with.
inline std::size_t pose_raw_dim(bool enable_shear) { return enable_shear ? 7 : 5; }

/// Maps unconstrained network outputs [B, 5 or 7] to a pose:
/// s = 0.1 + 0.9 sigmoid(raw - 0.9), t = tanh(raw), omega = raw,
/// k = 0.5 tanh(raw). A zero raw vector places a window about a third of the
/// canvas wide at the centre.
template <class T>
AffinePose<Tensor<T>> pose_from_raw(const Tensor<T>& raw, bool enable_shear) {
  if (raw.rank() != 2 || raw.dim(1) != pose_raw_dim(enable_shear)) {
    throw ShapeError("raw pose must be [B, " + std::to_string(pose_raw_dim(enable_shear)) + "], got " +
                     shape_str(raw.shape()));
  }
  auto col = [&](std::size_t i) { return slice(raw, 1, i, 1); };
  AffinePose<Tensor<T>> p;
  p.s_x = sigmoid(col(0) - 0.9) * 0.9 + 0.1;
  p.s_y = sigmoid(col(1) - 0.9) * 0.9 + 0.1;
  p.t_x = tanh(col(2));
  p.t_y = tanh(col(3));
  p.omega = col(4);
  if (enable_shear) {
    p.k_x = tanh(col(5)) * 0.5;
    p.k_y = tanh(col(6)) * 0.5;
  } else {
    p.k_x = Tensor<T>::zeros(Shape{raw.dim(0), 1});
    p.k_y = p.k_x;
  }
  return p;
}

/// Pose of batch row `b` as plain numbers.
template <class T>
AffinePose<double> pose_row(const AffinePose<Tensor<T>>& p, std::size_t b) {
  return {static_cast<double>(p.s_x[b]), static_cast<double>(p.s_y[b]), static_cast<double>(p.t_x[b]),
          static_cast<double>(p.t_y[b]), static_cast<double>(p.omega[b]), static_cast<double>(p.k_x[b]),
          static_cast<double>(p.k_y[b])};
}

/// Pixel-centre index coordinate of a normalized coordinate along an axis of n pixels.
inline double normalized_to_pixel(double v, std::size_t n) { return (v + 1.0) * 0.5 * static_cast<double>(n - 1); }

inline double pixel_to_normalized(double p, std::size_t n) { return n == 1 ? 0.0 : 2.0 * p / static_cast<double>(n - 1) - 1.0; }

}  // namespace dair
