#pragma once

#include <algorithm>
#include <array>
#include <deque>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eqcm/tensor.hpp"
#include "eqcm/transforms.hpp"

#if defined(__GNUC__) || defined(__clang__)
#define EQCM_RESTRICT __restrict__
#else
#define EQCM_RESTRICT
#endif

namespace eqcm {

using NodeId = int;

enum class Op : std::uint8_t {
  leaf,
  conv2d,
  relu,
  softmax_rows,
  softmax_channels,
  global_avg_pool,
  add,
  sub,
  mul,
  div_elem,
  scale,
  log_clamped,
  sum_all,
  warp,
  mask_mul,
  spatial_l2_norm,
  spatial_max_norm,
  slice_channels,
};

// Define-by-run tape. Nodes are appended in construction order, which is a
// topological order by construction; backward() walks it in exact reverse.
// A graph lives for one forward/backward round and is confined to one
// worker while in use.
template <typename T>
class Graph {
 public:
  NodeId leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.op = Op::leaf;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  NodeId conv2d(NodeId x, NodeId w, NodeId b, int padding) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    const Tensor<T>& bv = val(b);
    require(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1,
            "conv2d: need input[N,Cin,H,W], kernel[Cout,Cin,kh,kw], bias[Cout]; got input " +
                xv.shape_str() + ", kernel " + wv.shape_str());
    require(padding >= 0, "conv2d: padding must be >= 0");
    const int kh = wv.dim(2), kw = wv.dim(3);
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
    require(xv.dim(1) == wv.dim(1), "conv2d: channel mismatch between input " + xv.shape_str() +
                                        " and kernel " + wv.shape_str());
    require(bv.dim(0) == wv.dim(0), "conv2d: bias extent does not match kernel " + wv.shape_str());
    const int oh = xv.dim(2) + 2 * padding - kh + 1;
    const int ow = xv.dim(3) + 2 * padding - kw + 1;
    require(oh >= 1 && ow >= 1, "conv2d: output would be empty for input " + xv.shape_str() +
                                    " and kernel " + wv.shape_str());

    Node n;
    n.op = Op::conv2d;
    n.set_inputs(x, w, b);
    n.pad = padding;
    n.val = Tensor<T>({xv.dim(0), wv.dim(0), oh, ow});
    conv2d_forward(xv, wv, bv, padding, n.val);
    return push_with_grad_flag(std::move(n));
  }

  NodeId relu(NodeId x) {
    Node n;
    n.op = Op::relu;
    n.set_inputs(x);
    const Tensor<T>& xv = val(x);
    n.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) n.val.v[i] = xv.v[i] > T(0) ? xv.v[i] : T(0);
    return push_with_grad_flag(std::move(n));
  }

  // Row-wise softmax over [N, C] with max subtraction.
  NodeId softmax_rows(NodeId x) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() == 2 && xv.dim(1) >= 2, "softmax: need [N,C] with C >= 2, got " + xv.shape_str());
    Node n;
    n.op = Op::softmax_rows;
    n.set_inputs(x);
    n.val = Tensor<T>(xv.shape);
    const int N = xv.dim(0), C = xv.dim(1);
    for (int i = 0; i < N; ++i) {
      const T* row = xv.data() + static_cast<std::size_t>(i) * C;
      T* out = n.val.data() + static_cast<std::size_t>(i) * C;
      T m = row[0];
      for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        out[c] = std::exp(row[c] - m);
        z += out[c];
      }
      for (int c = 0; c < C; ++c) out[c] = static_cast<T>(out[c] / z);
    }
    return push_with_grad_flag(std::move(n));
  }

  // Channel-wise softmax over [N, C, H, W]; per-pixel class distribution.
  NodeId softmax_channels(NodeId x) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() == 4 && xv.dim(1) >= 2, "softmax_channels: need [N,C,H,W], got " + xv.shape_str());
    Node n;
    n.op = Op::softmax_channels;
    n.set_inputs(x);
    n.val = Tensor<T>(xv.shape);
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    for (int i = 0; i < N; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = (static_cast<std::size_t>(i) * C) * plane + p;
        T m = xv.v[base];
        for (int c = 1; c < C; ++c) m = std::max(m, xv.v[base + c * plane]);
        double z = 0.0;
        for (int c = 0; c < C; ++c) {
          const T e = std::exp(xv.v[base + c * plane] - m);
          n.val.v[base + c * plane] = e;
          z += e;
        }
        for (int c = 0; c < C; ++c)
          n.val.v[base + c * plane] = static_cast<T>(n.val.v[base + c * plane] / z);
      }
    return push_with_grad_flag(std::move(n));
  }

  NodeId global_avg_pool(NodeId x) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() == 4, "global_avg_pool: need [N,C,H,W], got " + xv.shape_str());
    Node n;
    n.op = Op::global_avg_pool;
    n.set_inputs(x);
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    n.val = Tensor<T>({N, C});
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < C; ++c) {
        const T* p = xv.data() + (static_cast<std::size_t>(i) * C + c) * plane;
        double acc = 0.0;
        for (std::size_t k = 0; k < plane; ++k) acc += p[k];
        n.val.v[static_cast<std::size_t>(i) * C + c] = static_cast<T>(acc / static_cast<double>(plane));
      }
    return push_with_grad_flag(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(Op::div_elem, a, b); }

  NodeId scale(NodeId x, double c) {
    Node n;
    n.op = Op::scale;
    n.set_inputs(x);
    n.cparam = c;
    const Tensor<T>& xv = val(x);
    n.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) n.val.v[i] = static_cast<T>(c * xv.v[i]);
    return push_with_grad_flag(std::move(n));
  }

  NodeId log_clamped(NodeId x, double floor = 1e-12) {
    Node n;
    n.op = Op::log_clamped;
    n.set_inputs(x);
    n.cparam = floor;
    const Tensor<T>& xv = val(x);
    n.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      n.val.v[i] = static_cast<T>(std::log(std::max(static_cast<double>(xv.v[i]), floor)));
    return push_with_grad_flag(std::move(n));
  }

  NodeId sum(NodeId x) {
    Node n;
    n.op = Op::sum_all;
    n.set_inputs(x);
    const Tensor<T>& xv = val(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv.v[i];
    n.val = Tensor<T>({1});
    n.val.v[0] = static_cast<T>(acc);
    return push_with_grad_flag(std::move(n));
  }

  NodeId mean(NodeId x) { return scale(sum(x), 1.0 / static_cast<double>(val(x).numel())); }

  NodeId warp(NodeId x, const AffineTransform& tf) {
    Node n;
    n.op = Op::warp;
    n.set_inputs(x);
    n.tf = tf;
    n.val = apply_transform(val(x), tf);
    return push_with_grad_flag(std::move(n));
  }

  // Broadcast multiply by a constant [H, W] mask over the leading dims.
  NodeId mask_mul(NodeId x, NodeId mask) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& mv = val(mask);
    require(mv.rank() == 2, "mask_mul: mask must be [H,W], got " + mv.shape_str());
    require(!node(mask).requires_grad, "mask_mul: mask must be a constant");
    require(xv.rank() >= 2 && xv.dim(xv.rank() - 2) == mv.dim(0) &&
                xv.dim(xv.rank() - 1) == mv.dim(1),
            "mask_mul: trailing dims of " + xv.shape_str() + " do not match mask " + mv.shape_str());
    Node n;
    n.op = Op::mask_mul;
    n.set_inputs(x, mask);
    n.val = Tensor<T>(xv.shape);
    const std::size_t plane = mv.numel();
    const std::size_t planes = xv.numel() / plane;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < plane; ++i)
        n.val.v[p * plane + i] = xv.v[p * plane + i] * mv.v[i];
    return push_with_grad_flag(std::move(n));
  }

  // Per-slice (all leading dims) L2 normalization over the trailing two
  // spatial dims, with a norm floor.
  NodeId spatial_l2_normalize(NodeId x, double eps = 1e-8) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() >= 2, "spatial_l2_normalize: rank >= 2 required");
    Node n;
    n.op = Op::spatial_l2_norm;
    n.set_inputs(x);
    n.cparam = eps;
    n.val = Tensor<T>(xv.shape);
    const std::size_t plane =
        static_cast<std::size_t>(xv.dim(xv.rank() - 2)) * xv.dim(xv.rank() - 1);
    const std::size_t slices = xv.numel() / plane;
    n.aux.resize(slices);
    n.arg.resize(slices);
    for (std::size_t s = 0; s < slices; ++s) {
      const T* p = xv.data() + s * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]) * p[i];
      const double norm = std::sqrt(acc);
      const bool clamped = !(norm > eps);
      const double d = clamped ? eps : norm;
      n.aux[s] = static_cast<T>(d);
      n.arg[s] = clamped ? 1 : 0;
      for (std::size_t i = 0; i < plane; ++i)
        n.val.v[s * plane + i] = static_cast<T>(p[i] / d);
    }
    return push_with_grad_flag(std::move(n));
  }

  // Per-slice max normalization over the trailing two spatial dims:
  // y = x / max(max(x), eps). Used for CAM normalization after relu.
  NodeId spatial_max_normalize(NodeId x, double eps = 1e-8) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() >= 2, "spatial_max_normalize: rank >= 2 required");
    Node n;
    n.op = Op::spatial_max_norm;
    n.set_inputs(x);
    n.cparam = eps;
    n.val = Tensor<T>(xv.shape);
    const std::size_t plane =
        static_cast<std::size_t>(xv.dim(xv.rank() - 2)) * xv.dim(xv.rank() - 1);
    const std::size_t slices = xv.numel() / plane;
    n.aux.resize(slices);
    n.arg.resize(slices);
    for (std::size_t s = 0; s < slices; ++s) {
      const T* p = xv.data() + s * plane;
      std::size_t amax = 0;
      for (std::size_t i = 1; i < plane; ++i)
        if (p[i] > p[amax]) amax = i;
      const double m = p[amax];
      const bool clamped = !(m > eps);
      const double d = clamped ? eps : m;
      n.aux[s] = static_cast<T>(d);
      n.arg[s] = clamped ? -1 : static_cast<std::int64_t>(amax);
      for (std::size_t i = 0; i < plane; ++i)
        n.val.v[s * plane + i] = static_cast<T>(p[i] / d);
    }
    return push_with_grad_flag(std::move(n));
  }

  // Channel range [from, to) of a [N, C, ...] tensor.
  NodeId slice_channels(NodeId x, int from, int to) {
    const Tensor<T>& xv = val(x);
    require(xv.rank() >= 2, "slice_channels: rank >= 2 required");
    require(0 <= from && from < to && to <= xv.dim(1),
            "slice_channels: bad range for " + xv.shape_str());
    Node n;
    n.op = Op::slice_channels;
    n.set_inputs(x);
    n.from = from;
    n.to = to;
    std::vector<int> os = xv.shape;
    os[1] = to - from;
    n.val = Tensor<T>(os);
    const int N = xv.dim(0), C = xv.dim(1);
    std::size_t inner = 1;
    for (int d = 2; d < xv.rank(); ++d) inner *= static_cast<std::size_t>(xv.dim(d));
    for (int i = 0; i < N; ++i)
      for (int c = from; c < to; ++c)
        std::copy_n(xv.data() + (static_cast<std::size_t>(i) * C + c) * inner, inner,
                    n.val.data() + (static_cast<std::size_t>(i) * (to - from) + (c - from)) * inner);
    return push_with_grad_flag(std::move(n));
  }

  // Constant copy of a node's value; gradients do not flow through.
  NodeId detach(NodeId x) { return leaf(val(x), false); }

  // Reverse-mode accumulation from a scalar loss. Clears previous gradients,
  // so each call stands alone. Parameters unreachable from the loss keep
  // zero gradients.
  void backward(NodeId loss) {
    require(val(loss).numel() == 1, "backward: loss must be scalar, got " + val(loss).shape_str());
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        if (n.grad.numel() != n.val.numel()) n.grad = Tensor<T>(n.val.shape);
        else n.grad.fill(T(0));
      }
    }
    if (!node(loss).requires_grad) return;

    // only nodes on a path from the loss carry gradient; skipping the rest
    // matters when several objectives share one graph
    std::vector<std::uint8_t> needed(nodes_.size(), 0);
    needed[static_cast<std::size_t>(loss)] = 1;
    for (NodeId id = loss; id >= 0; --id) {
      const Node& n = node(id);
      if (!needed[static_cast<std::size_t>(id)] || !n.requires_grad) continue;
      for (int i = 0; i < n.n_in; ++i) {
        const NodeId in = n.in[static_cast<std::size_t>(i)];
        if (node(in).requires_grad) needed[static_cast<std::size_t>(in)] = 1;
      }
    }

    node(loss).grad.v[0] = T(1);
    for (NodeId id = loss; id >= 0; --id) {
      Node& n = node(id);
      if (!needed[static_cast<std::size_t>(id)] || !n.requires_grad || n.op == Op::leaf) continue;
      backward_one(n);
    }
  }

  const Tensor<T>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  const Tensor<T>& grad(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    require(n.requires_grad && n.grad.numel() == n.val.numel(),
            "grad: node has no gradient (run backward on a reachable loss first)");
    return n.grad;
  }
  bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::leaf;
    std::array<NodeId, 3> in{-1, -1, -1};
    int n_in = 0;
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    int pad = 0;
    int from = 0, to = 0;
    double cparam = 0.0;
    AffineTransform tf{};
    std::vector<T> aux;
    std::vector<std::int64_t> arg;

    void set_inputs(NodeId a, NodeId b = -1, NodeId c = -1) {
      in = {a, b, c};
      n_in = (c >= 0) ? 3 : (b >= 0 ? 2 : 1);
    }
  };

  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor<T>& val(NodeId id) const { return node(id).val; }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_with_grad_flag(Node n) {
    for (int i = 0; i < n.n_in; ++i)
      if (node(n.in[static_cast<std::size_t>(i)]).requires_grad) n.requires_grad = true;
    return push(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    require(av.same_shape(bv), "elementwise op: shape mismatch " + av.shape_str() + " vs " +
                                   bv.shape_str());
    Node n;
    n.op = op;
    n.set_inputs(a, b);
    n.val = Tensor<T>(av.shape);
    switch (op) {
      case Op::add:
        for (std::size_t i = 0; i < av.numel(); ++i) n.val.v[i] = av.v[i] + bv.v[i];
        break;
      case Op::sub:
        for (std::size_t i = 0; i < av.numel(); ++i) n.val.v[i] = av.v[i] - bv.v[i];
        break;
      case Op::mul:
        for (std::size_t i = 0; i < av.numel(); ++i) n.val.v[i] = av.v[i] * bv.v[i];
        break;
      default:
        for (std::size_t i = 0; i < av.numel(); ++i) n.val.v[i] = av.v[i] / bv.v[i];
        break;
    }
    return push_with_grad_flag(std::move(n));
  }

  // Dot product with eight fixed-order lane accumulators: vectorizable
  // without float reassociation, deterministic for a given length.
  static T lane_dot(const T* EQCM_RESTRICT a, const T* EQCM_RESTRICT b, int n) {
    T lanes[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8)
      for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
    T tail = T(0);
    for (; i < n; ++i) tail += a[i] * b[i];
    return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
            ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail;
  }

  static void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad,
                             Tensor<T>& out) {
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int OH = out.dim(2), OW = out.dim(3);
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Cout; ++co) {
        T* op = out.data() + (static_cast<std::size_t>(n) * Cout + co) * OH * OW;
        std::fill_n(op, static_cast<std::size_t>(OH) * OW, b.v[static_cast<std::size_t>(co)]);
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            const int oy_lo = std::max(0, pad - ky), oy_hi = std::min(OH, H + pad - ky);
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = w.v[((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw + kx];
              const int ox_lo = std::max(0, pad - kx), ox_hi = std::min(OW, W + pad - kx);
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const T* EQCM_RESTRICT ir =
                    x.data() + ((static_cast<std::size_t>(n) * Cin + ci) * H +
                                (oy + ky - pad)) * W + (kx - pad);
                T* EQCM_RESTRICT orow = op + static_cast<std::size_t>(oy) * OW;
                for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * ir[ox];
              }
            }
          }
      }
  }

  void conv2d_backward(Node& n) {
    const Tensor<T>& x = val(n.in[0]);
    const Tensor<T>& w = val(n.in[1]);
    const Tensor<T>& g = n.grad;
    const int pad = n.pad;
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int OH = n.val.dim(2), OW = n.val.dim(3);

    if (Node& nx = node(n.in[0]); nx.requires_grad) {
      Tensor<T>& gx = nx.grad;
      for (int nn = 0; nn < N; ++nn)
        for (int co = 0; co < Cout; ++co) {
          const T* gp = g.data() + (static_cast<std::size_t>(nn) * Cout + co) * OH * OW;
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < kh; ++ky) {
              const int oy_lo = std::max(0, pad - ky), oy_hi = std::min(OH, H + pad - ky);
              for (int kx = 0; kx < kw; ++kx) {
                const T wv = w.v[((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw + kx];
                const int ox_lo = std::max(0, pad - kx), ox_hi = std::min(OW, W + pad - kx);
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  T* EQCM_RESTRICT gir =
                      gx.data() + ((static_cast<std::size_t>(nn) * Cin + ci) * H +
                                   (oy + ky - pad)) * W + (kx - pad);
                  const T* EQCM_RESTRICT grow = gp + static_cast<std::size_t>(oy) * OW;
                  for (int ox = ox_lo; ox < ox_hi; ++ox) gir[ox] += wv * grow[ox];
                }
              }
            }
        }
    }

    if (Node& nw = node(n.in[1]); nw.requires_grad) {
      Tensor<T>& gw = nw.grad;
      for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            const int oy_lo = std::max(0, pad - ky), oy_hi = std::min(OH, H + pad - ky);
            for (int kx = 0; kx < kw; ++kx) {
              const int ox_lo = std::max(0, pad - kx), ox_hi = std::min(OW, W + pad - kx);
              double acc = 0.0;
              for (int nn = 0; nn < N; ++nn) {
                const T* gp = g.data() + (static_cast<std::size_t>(nn) * Cout + co) * OH * OW;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const T* EQCM_RESTRICT ir =
                      x.data() + ((static_cast<std::size_t>(nn) * Cin + ci) * H +
                                  (oy + ky - pad)) * W + (kx - pad);
                  const T* EQCM_RESTRICT grow = gp + static_cast<std::size_t>(oy) * OW;
                  acc += static_cast<double>(lane_dot(grow + ox_lo, ir + ox_lo, ox_hi - ox_lo));
                }
              }
              gw.v[((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw + kx] +=
                  static_cast<T>(acc);
            }
          }
    }

    if (Node& nb = node(n.in[2]); nb.requires_grad) {
      Tensor<T>& gb = nb.grad;
      for (int nn = 0; nn < N; ++nn)
        for (int co = 0; co < Cout; ++co) {
          const T* gp = g.data() + (static_cast<std::size_t>(nn) * Cout + co) * OH * OW;
          double acc = 0.0;
          for (std::size_t i = 0; i < static_cast<std::size_t>(OH) * OW; ++i) acc += gp[i];
          gb.v[static_cast<std::size_t>(co)] += static_cast<T>(acc);
        }
    }
  }

  void backward_one(Node& n) {
    const Tensor<T>& g = n.grad;
    auto in_grad = [&](int i) -> Tensor<T>& { return node(n.in[static_cast<std::size_t>(i)]).grad; };
    auto in_needs = [&](int i) { return node(n.in[static_cast<std::size_t>(i)]).requires_grad; };
    auto in_val = [&](int i) -> const Tensor<T>& { return val(n.in[static_cast<std::size_t>(i)]); };

    switch (n.op) {
      case Op::conv2d:
        conv2d_backward(n);
        break;
      case Op::relu: {
        if (!in_needs(0)) break;
        const Tensor<T>& x = in_val(0);
        Tensor<T>& gx = in_grad(0);
        for (std::size_t i = 0; i < g.numel(); ++i)
          if (x.v[i] > T(0)) gx.v[i] += g.v[i];
        break;
      }
      case Op::softmax_rows: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const int N = n.val.dim(0), C = n.val.dim(1);
        for (int i = 0; i < N; ++i) {
          const T* y = n.val.data() + static_cast<std::size_t>(i) * C;
          const T* gr = g.data() + static_cast<std::size_t>(i) * C;
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += static_cast<double>(gr[c]) * y[c];
          T* gxr = gx.data() + static_cast<std::size_t>(i) * C;
          for (int c = 0; c < C; ++c) gxr[c] += static_cast<T>(y[c] * (gr[c] - dot));
        }
        break;
      }
      case Op::softmax_channels: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const int N = n.val.dim(0), C = n.val.dim(1);
        const std::size_t plane = static_cast<std::size_t>(n.val.dim(2)) * n.val.dim(3);
        for (int i = 0; i < N; ++i)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = (static_cast<std::size_t>(i) * C) * plane + p;
            double dot = 0.0;
            for (int c = 0; c < C; ++c)
              dot += static_cast<double>(g.v[base + c * plane]) * n.val.v[base + c * plane];
            for (int c = 0; c < C; ++c)
              gx.v[base + c * plane] +=
                  static_cast<T>(n.val.v[base + c * plane] * (g.v[base + c * plane] - dot));
          }
        break;
      }
      case Op::global_avg_pool: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const Tensor<T>& x = in_val(0);
        const int N = x.dim(0), C = x.dim(1);
        const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
        for (int i = 0; i < N; ++i)
          for (int c = 0; c < C; ++c) {
            const T gv = static_cast<T>(g.v[static_cast<std::size_t>(i) * C + c] /
                                        static_cast<double>(plane));
            T* p = gx.data() + (static_cast<std::size_t>(i) * C + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] += gv;
          }
        break;
      }
      case Op::add:
        if (in_needs(0)) {
          Tensor<T>& ga = in_grad(0);
          for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
        }
        if (in_needs(1)) {
          Tensor<T>& gb = in_grad(1);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
        }
        break;
      case Op::sub:
        if (in_needs(0)) {
          Tensor<T>& ga = in_grad(0);
          for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
        }
        if (in_needs(1)) {
          Tensor<T>& gb = in_grad(1);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.v[i] -= g.v[i];
        }
        break;
      case Op::mul:
        if (in_needs(0)) {
          Tensor<T>& ga = in_grad(0);
          const Tensor<T>& bv = in_val(1);
          for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * bv.v[i];
        }
        if (in_needs(1)) {
          Tensor<T>& gb = in_grad(1);
          const Tensor<T>& av = in_val(0);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i] * av.v[i];
        }
        break;
      case Op::div_elem: {
        const Tensor<T>& bv = in_val(1);
        if (in_needs(0)) {
          Tensor<T>& ga = in_grad(0);
          for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] / bv.v[i];
        }
        if (in_needs(1)) {
          Tensor<T>& gb = in_grad(1);
          for (std::size_t i = 0; i < g.numel(); ++i)
            gb.v[i] -= g.v[i] * n.val.v[i] / bv.v[i];
        }
        break;
      }
      case Op::scale: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        for (std::size_t i = 0; i < g.numel(); ++i)
          gx.v[i] += static_cast<T>(n.cparam * g.v[i]);
        break;
      }
      case Op::log_clamped: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const Tensor<T>& x = in_val(0);
        for (std::size_t i = 0; i < g.numel(); ++i)
          if (static_cast<double>(x.v[i]) > n.cparam) gx.v[i] += g.v[i] / x.v[i];
        break;
      }
      case Op::sum_all: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const T gv = g.v[0];
        for (std::size_t i = 0; i < gx.numel(); ++i) gx.v[i] += gv;
        break;
      }
      case Op::warp:
        if (in_needs(0)) apply_transform_backward(g, n.tf, in_grad(0));
        break;
      case Op::mask_mul: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const Tensor<T>& mv = in_val(1);
        const std::size_t plane = mv.numel();
        const std::size_t planes = g.numel() / plane;
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t i = 0; i < plane; ++i)
            gx.v[p * plane + i] += g.v[p * plane + i] * mv.v[i];
        break;
      }
      case Op::spatial_l2_norm: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const std::size_t plane =
            static_cast<std::size_t>(n.val.dim(n.val.rank() - 2)) * n.val.dim(n.val.rank() - 1);
        const std::size_t slices = n.val.numel() / plane;
        for (std::size_t s = 0; s < slices; ++s) {
          const double d = n.aux[s];
          const T* y = n.val.data() + s * plane;
          const T* gs = g.data() + s * plane;
          T* gxs = gx.data() + s * plane;
          if (n.arg[s]) {  // norm floored at eps: constant divisor
            for (std::size_t i = 0; i < plane; ++i) gxs[i] += static_cast<T>(gs[i] / d);
          } else {
            double dot = 0.0;
            for (std::size_t i = 0; i < plane; ++i) dot += static_cast<double>(gs[i]) * y[i];
            for (std::size_t i = 0; i < plane; ++i)
              gxs[i] += static_cast<T>((gs[i] - y[i] * dot) / d);
          }
        }
        break;
      }
      case Op::spatial_max_norm: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const std::size_t plane =
            static_cast<std::size_t>(n.val.dim(n.val.rank() - 2)) * n.val.dim(n.val.rank() - 1);
        const std::size_t slices = n.val.numel() / plane;
        for (std::size_t s = 0; s < slices; ++s) {
          const double d = n.aux[s];
          const T* y = n.val.data() + s * plane;
          const T* gs = g.data() + s * plane;
          T* gxs = gx.data() + s * plane;
          for (std::size_t i = 0; i < plane; ++i) gxs[i] += static_cast<T>(gs[i] / d);
          if (n.arg[s] >= 0) {
            double dot = 0.0;
            for (std::size_t i = 0; i < plane; ++i) dot += static_cast<double>(gs[i]) * y[i];
            gxs[static_cast<std::size_t>(n.arg[s])] -= static_cast<T>(dot / d);
          }
        }
        break;
      }
      case Op::slice_channels: {
        if (!in_needs(0)) break;
        Tensor<T>& gx = in_grad(0);
        const Tensor<T>& x = in_val(0);
        const int N = x.dim(0), C = x.dim(1);
        std::size_t inner = 1;
        for (int d = 2; d < x.rank(); ++d) inner *= static_cast<std::size_t>(x.dim(d));
        const int span = n.to - n.from;
        for (int i = 0; i < N; ++i)
          for (int c = n.from; c < n.to; ++c) {
            const T* gs = g.data() + (static_cast<std::size_t>(i) * span + (c - n.from)) * inner;
            T* gxs = gx.data() + (static_cast<std::size_t>(i) * C + c) * inner;
            for (std::size_t k = 0; k < inner; ++k) gxs[k] += gs[k];
          }
        break;
      }
      case Op::leaf:
        break;
    }
  }

  // deque: value/grad references handed to callers must survive node appends
  std::deque<Node> nodes_;
};

}  // namespace eqcm
