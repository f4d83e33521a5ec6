#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eqcm/rng.hpp"
#include "eqcm/tensor.hpp"

namespace eqcm {

enum class TransformKind : std::uint8_t { flip_h, flip_v, rotate90, scale, translate };

inline const char* kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::flip_h: return "flip-h";
    case TransformKind::flip_v: return "flip-v";
    case TransformKind::rotate90: return "rot90";
    case TransformKind::scale: return "scale";
    case TransformKind::translate: return "translate";
  }
  return "?";
}

// One spatial transform pi from the family Pi. Parameter bounds:
// scale ratio in [0.8, 1.2]; |dh| < 0.3*H, |dw| < 0.3*W; quarter turns in {1,2,3}.
struct AffineTransform {
  TransformKind kind = TransformKind::flip_h;
  int quarter_turns = 1;     // rotate90 only, counterclockwise
  double scale_ratio = 1.0;  // scale only
  double dh = 0.0, dw = 0.0; // translate only, pixels

  std::string describe() const {
    switch (kind) {
      case TransformKind::rotate90: return std::string("rot90 k=") + std::to_string(quarter_turns);
      case TransformKind::scale: return "scale s=" + std::to_string(scale_ratio);
      case TransformKind::translate:
        return "translate dh=" + std::to_string(dh) + " dw=" + std::to_string(dw);
      default: return kind_name(kind);
    }
  }
};

// Maps an output pixel (oy, ox) to the source-grid coordinates it samples.
// Flips and quarter turns land on integral coordinates, so the shared
// bilinear path reproduces them as exact index permutations.
inline void source_coords(const AffineTransform& t, int H, int W, int oy, int ox, double& sy,
                          double& sx) {
  switch (t.kind) {
    case TransformKind::flip_h:
      sy = oy;
      sx = (W - 1) - ox;
      return;
    case TransformKind::flip_v:
      sy = (H - 1) - oy;
      sx = ox;
      return;
    case TransformKind::rotate90:
      switch (t.quarter_turns) {
        case 1: sy = ox; sx = (W - 1) - oy; return;
        case 2: sy = (H - 1) - oy; sx = (W - 1) - ox; return;
        default: sy = (H - 1) - ox; sx = oy; return;
      }
    case TransformKind::scale: {
      const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
      sy = cy + (oy - cy) / t.scale_ratio;
      sx = cx + (ox - cx) / t.scale_ratio;
      return;
    }
    case TransformKind::translate:
      sy = oy - t.dh;
      sx = ox - t.dw;
      return;
  }
}

// 1 where the sampled point lies inside the source domain, 0 where zero
// fill was used. Flip and rot90 masks are all ones.
struct ValidityMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> m;

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto b : m) n += b;
    return n;
  }
  bool all_valid() const { return valid_count() == m.size(); }
};

inline void check_rot90_square(const AffineTransform& t, int H, int W) {
  if (t.kind == TransformKind::rotate90 && (t.quarter_turns % 2) == 1 && H != W)
    throw std::invalid_argument("rot90 with odd quarter turns requires a square grid, got " +
                                std::to_string(H) + "x" + std::to_string(W));
}

inline ValidityMask validity_mask(const AffineTransform& t, int H, int W) {
  check_rot90_square(t, H, W);
  ValidityMask mask;
  mask.h = H;
  mask.w = W;
  mask.m.assign(static_cast<std::size_t>(H) * W, 0);
  for (int oy = 0; oy < H; ++oy)
    for (int ox = 0; ox < W; ++ox) {
      double sy, sx;
      source_coords(t, H, W, oy, ox, sy, sx);
      const bool in = sy >= 0.0 && sy <= H - 1 && sx >= 0.0 && sx <= W - 1;
      mask.m[static_cast<std::size_t>(oy) * W + ox] = in ? 1 : 0;
    }
  return mask;
}

// Warps every [H, W] plane of a [..., H, W] grid: bilinear about the image
// center, zero fill outside. Output shape equals input shape.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& grid, const AffineTransform& t) {
  require(grid.rank() >= 2, "apply_transform: rank >= 2 required, got " + grid.shape_str());
  const int H = grid.dim(grid.rank() - 2);
  const int W = grid.dim(grid.rank() - 1);
  check_rot90_square(t, H, W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t planes = grid.numel() / plane;

  Tensor<T> out(grid.shape);
  for (int oy = 0; oy < H; ++oy)
    for (int ox = 0; ox < W; ++ox) {
      double sy, sx;
      source_coords(t, H, W, oy, ox, sy, sx);
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const double wy = sy - y0, wx = sx - x0;
      const double w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx;
      const double w10 = wy * (1 - wx), w11 = wy * wx;
      const std::size_t o = static_cast<std::size_t>(oy) * W + ox;
      for (std::size_t p = 0; p < planes; ++p) {
        const T* in = grid.data() + p * plane;
        double acc = 0.0;
        if (y0 >= 0 && y0 < H) {
          if (x0 >= 0 && x0 < W) acc += w00 * in[static_cast<std::size_t>(y0) * W + x0];
          if (x0 + 1 >= 0 && x0 + 1 < W) acc += w01 * in[static_cast<std::size_t>(y0) * W + x0 + 1];
        }
        if (y0 + 1 >= 0 && y0 + 1 < H) {
          if (x0 >= 0 && x0 < W) acc += w10 * in[static_cast<std::size_t>(y0 + 1) * W + x0];
          if (x0 + 1 >= 0 && x0 + 1 < W)
            acc += w11 * in[static_cast<std::size_t>(y0 + 1) * W + x0 + 1];
        }
        out.data()[p * plane + o] = static_cast<T>(acc);
      }
    }
  return out;
}

// Reverse-mode counterpart of apply_transform: scatters output-side
// gradients onto the bilinear source corners.
template <typename T>
void apply_transform_backward(const Tensor<T>& out_grad, const AffineTransform& t,
                              Tensor<T>& in_grad) {
  const int H = out_grad.dim(out_grad.rank() - 2);
  const int W = out_grad.dim(out_grad.rank() - 1);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t planes = out_grad.numel() / plane;
  for (int oy = 0; oy < H; ++oy)
    for (int ox = 0; ox < W; ++ox) {
      double sy, sx;
      source_coords(t, H, W, oy, ox, sy, sx);
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const double wy = sy - y0, wx = sx - x0;
      const double w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx;
      const double w10 = wy * (1 - wx), w11 = wy * wx;
      const std::size_t o = static_cast<std::size_t>(oy) * W + ox;
      for (std::size_t p = 0; p < planes; ++p) {
        const T g = out_grad.data()[p * plane + o];
        T* gi = in_grad.data() + p * plane;
        if (y0 >= 0 && y0 < H) {
          if (x0 >= 0 && x0 < W) gi[static_cast<std::size_t>(y0) * W + x0] += static_cast<T>(w00 * g);
          if (x0 + 1 >= 0 && x0 + 1 < W)
            gi[static_cast<std::size_t>(y0) * W + x0 + 1] += static_cast<T>(w01 * g);
        }
        if (y0 + 1 >= 0 && y0 + 1 < H) {
          if (x0 >= 0 && x0 < W)
            gi[static_cast<std::size_t>(y0 + 1) * W + x0] += static_cast<T>(w10 * g);
          if (x0 + 1 >= 0 && x0 + 1 < W)
            gi[static_cast<std::size_t>(y0 + 1) * W + x0 + 1] += static_cast<T>(w11 * g);
        }
      }
    }
}

// Zeroes both arrays where the mask is 0; returns the valid pixel count used
// to normalize masked losses. An all-invalid mask marks a degenerate
// transform and is rejected.
template <typename T>
std::size_t restrict_to_valid(Tensor<T>& a, Tensor<T>& b, const ValidityMask& mask) {
  require(a.same_shape(b), "restrict_to_valid: shape mismatch " + a.shape_str() + " vs " +
                               b.shape_str());
  const std::size_t plane = static_cast<std::size_t>(mask.h) * mask.w;
  require(a.numel() % plane == 0, "restrict_to_valid: mask does not tile array");
  const std::size_t count = mask.valid_count();
  if (count == 0) throw std::invalid_argument("restrict_to_valid: all-invalid mask (degenerate transform)");
  const std::size_t planes = a.numel() / plane;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      if (!mask.m[i]) {
        a.data()[p * plane + i] = T(0);
        b.data()[p * plane + i] = T(0);
      }
  return count;
}

// The sampler draws one kind uniformly from the enabled subset, then its
// parameters uniformly within bounds. "flip" enables both axes.
struct TransformSampler {
  bool flip = true, rot90 = true, scale = true, translate = true;

  static TransformSampler all() { return {}; }

  std::vector<TransformKind> enabled_kinds() const {
    std::vector<TransformKind> ks;
    if (flip) {
      ks.push_back(TransformKind::flip_h);
      ks.push_back(TransformKind::flip_v);
    }
    if (rot90) ks.push_back(TransformKind::rotate90);
    if (scale) ks.push_back(TransformKind::scale);
    if (translate) ks.push_back(TransformKind::translate);
    return ks;
  }

  AffineTransform sample(Rng& rng, int H, int W) const {
    const auto kinds = enabled_kinds();
    require(!kinds.empty(), "transform sampler: no kinds enabled");
    AffineTransform t;
    t.kind = kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(kinds.size()) - 1))];
    switch (t.kind) {
      case TransformKind::rotate90:
        t.quarter_turns = static_cast<int>(rng.uniform_int(1, 3));
        break;
      case TransformKind::scale:
        t.scale_ratio = rng.uniform(0.8, 1.2);
        break;
      case TransformKind::translate: {
        double uy, ux;
        do {
          uy = 2.0 * rng.uniform() - 1.0;
        } while (uy <= -1.0);
        do {
          ux = 2.0 * rng.uniform() - 1.0;
        } while (ux <= -1.0);
        t.dh = 0.3 * H * uy;
        t.dw = 0.3 * W * ux;
        break;
      }
      default: break;
    }
    return t;
  }
};

}  // namespace eqcm
