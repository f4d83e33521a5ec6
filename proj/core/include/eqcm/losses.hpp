#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eqcm/graph.hpp"
#include "eqcm/tensor.hpp"
#include "eqcm/transforms.hpp"

namespace eqcm {

// Weighting of the objective terms and the ablation toggles.
struct LossWeights {
  double lambda_kd = 0.5;
  int schedule_T = 15;
  bool kd = false;    // distillation term on softmax outputs
  bool er = false;    // within-modality equivariance term on CAMs
  bool cmer = false;  // cross-modality equivariance term on CAMs

  void validate() const {
    require(lambda_kd >= 0.0, "loss weights: lambda_kd must be >= 0");
    require(schedule_T >= 1, "loss weights: schedule T must be >= 1");
  }

  static LossWeights full() {
    LossWeights w;
    w.kd = w.er = w.cmer = true;
    return w;
  }
};

// Equivariance weight ramp: exp(-(t-T)^2) while t < T, then 1.
inline double lambda_e(int t, int T) {
  require(t >= 0, "lambda_e: epoch index must be >= 0");
  if (t >= T) return 1.0;
  const double d = static_cast<double>(t) - T;
  return std::exp(-d * d);
}

struct LossBreakdown {
  int modality = 0;
  int epoch = 0;
  double l_c = 0.0;
  double l_kd = 0.0;    // mean over peers, before lambda_kd
  double l_er = 0.0;    // before lambda_e
  double l_cmer = 0.0;  // mean over peers, before lambda_e
  double lambda_e = 0.0;
  double total = 0.0;
};

namespace detail {
template <typename T>
void check_probs(const Tensor<T>& p) {
  require(p.rank() == 2 && p.dim(1) >= 2, "loss: expected probabilities [N,C]");
  const int N = p.dim(0), C = p.dim(1);
  for (int i = 0; i < N; ++i) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += p.v[static_cast<std::size_t>(i) * C + c];
    require(std::abs(s - 1.0) <= 1e-5, "loss: probability row does not sum to 1");
  }
}

template <typename T>
void check_one_hot(const Tensor<T>& y) {
  require(y.rank() == 2, "loss: expected one-hot labels [N,C]");
  const int N = y.dim(0), C = y.dim(1);
  for (int i = 0; i < N; ++i) {
    int ones = 0;
    for (int c = 0; c < C; ++c) {
      const T v = y.v[static_cast<std::size_t>(i) * C + c];
      if (v == T(1)) ++ones;
      else require(v == T(0), "loss: label row is not one-hot");
    }
    require(ones == 1, "loss: label row is not one-hot");
  }
}
}  // namespace detail

// Mean over the batch of -y^T log(p), log clamped at 1e-12.
template <typename T>
NodeId ce_loss(Graph<T>& g, NodeId probs, const Tensor<T>& one_hot) {
  const Tensor<T>& p = g.value(probs);
  detail::check_probs(p);
  detail::check_one_hot(one_hot);
  require(p.same_shape(one_hot),
          "ce_loss: probs " + p.shape_str() + " vs labels " + one_hot.shape_str());
  const NodeId y = g.leaf(one_hot, false);
  const NodeId picked = g.mul(y, g.log_clamped(probs));
  return g.scale(g.sum(picked), -1.0 / p.dim(0));
}

// Both-branch image-level supervision: (CE(p, y) + CE(p_t, y)) / 2.
template <typename T>
NodeId classification_loss(Graph<T>& g, NodeId probs, NodeId probs_t, const Tensor<T>& one_hot) {
  return g.scale(g.add(ce_loss(g, probs, one_hot), ce_loss(g, probs_t, one_hot)), 0.5);
}

// Batch mean of p^T log(p/q); the target p is a constant (callers pass
// either a detached node's value or an external target).
template <typename T>
NodeId kl_div(Graph<T>& g, const Tensor<T>& p_target, NodeId q) {
  detail::check_probs(p_target);
  const Tensor<T>& qv = g.value(q);
  detail::check_probs(qv);
  require(p_target.same_shape(qv),
          "kl_div: target " + p_target.shape_str() + " vs " + qv.shape_str());
  const NodeId p = g.leaf(p_target, false);
  const NodeId ref = g.sum(g.mul(p, g.log_clamped(p)));        // sum p log p, constant
  const NodeId cross = g.sum(g.mul(p, g.log_clamped(q)));      // sum p log q
  return g.scale(g.sub(ref, cross), 1.0 / p_target.dim(0));
}

// Mutual-distillation term for one peer: KL(peer || self) averaged over the
// two branches. Peer distributions are constants for the self network.
template <typename T>
NodeId kd_loss(Graph<T>& g, const Tensor<T>& p_peer, const Tensor<T>& p_peer_t, NodeId p_self,
               NodeId p_self_t) {
  return g.scale(g.add(kl_div(g, p_peer, p_self), kl_div(g, p_peer_t, p_self_t)), 0.5);
}

namespace detail {
// Mean over batch, classes, and valid pixels of (a - b)^2. The per-valid-
// pixel mean keeps these terms on the same gradient scale as the GAP-diluted
// classification loss.
template <typename T>
NodeId masked_sq_l2(Graph<T>& g, NodeId a, NodeId b, NodeId mask_leaf,
                    std::size_t valid_count) {
  const Tensor<T>& av = g.value(a);
  require(av.rank() == 4, "map loss: expected [N,C,H,W] maps");
  const NodeId d = g.sub(a, b);
  const NodeId sq = g.mul(d, d);
  const NodeId masked = g.mask_mul(sq, mask_leaf);
  const double denom =
      static_cast<double>(av.dim(0)) * av.dim(1) * static_cast<double>(valid_count);
  return g.scale(g.sum(masked), 1.0 / denom);
}

template <typename T>
NodeId mask_leaf_for(Graph<T>& g, const ValidityMask& mask) {
  require(mask.valid_count() > 0, "map loss: all-invalid mask (degenerate transform)");
  Tensor<T> m({mask.h, mask.w});
  for (std::size_t i = 0; i < m.numel(); ++i) m.v[i] = static_cast<T>(mask.m[i]);
  return g.leaf(m, false);
}
}  // namespace detail

// Within-modality equivariance: mean over batch, classes and valid pixels of
// (pi(M) - M_t)^2; both CAMs are live nodes of the same network.
template <typename T>
NodeId er_loss(Graph<T>& g, NodeId cam, NodeId cam_t, const AffineTransform& pi,
               const ValidityMask& mask) {
  const NodeId mask_leaf = detail::mask_leaf_for(g, mask);
  return detail::masked_sq_l2(g, g.warp(cam, pi), cam_t, mask_leaf, mask.valid_count());
}

// Cross-modality equivariance against one peer. Self CAMs are live nodes;
// peer CAMs are constants (stop-gradient). Each map is L2-normalized
// per class over its spatial support before comparison.
template <typename T>
NodeId cmer_loss(Graph<T>& g, NodeId cam_self, NodeId cam_t_self, const Tensor<T>& cam_peer,
                 const Tensor<T>& cam_t_peer, const AffineTransform& pi,
                 const ValidityMask& mask, double eps = 1e-8) {
  const NodeId mask_leaf = detail::mask_leaf_for(g, mask);
  const std::size_t valid = mask.valid_count();

  const NodeId n_self = g.spatial_l2_normalize(cam_self, eps);
  const NodeId n_self_t = g.spatial_l2_normalize(cam_t_self, eps);
  const NodeId n_peer = g.spatial_l2_normalize(g.leaf(cam_peer, false), eps);
  const NodeId n_peer_t = g.spatial_l2_normalize(g.leaf(cam_t_peer, false), eps);

  const NodeId first = detail::masked_sq_l2(g, g.warp(n_peer, pi), n_self_t, mask_leaf, valid);
  const NodeId second = detail::masked_sq_l2(g, n_peer_t, g.warp(n_self, pi), mask_leaf, valid);
  return g.scale(g.add(first, second), 0.5);
}

// One network's branch outputs, as assembled by siamese_step.
template <typename T>
struct BranchOutputs {
  NodeId probs = -1;
  NodeId probs_t = -1;
  NodeId cam = -1;
  NodeId cam_t = -1;
};

template <typename T>
struct ObjectiveNodes {
  NodeId total = -1;
  NodeId l_c = -1;
  NodeId l_kd = -1;    // -1 when toggled off
  NodeId l_er = -1;
  NodeId l_cmer = -1;
  double lambda_e = 0.0;
};

// Per-network objective over K modalities:
//   L = L_C + lambda_kd * mean_peers(L_KD) + lambda_e(t) * (L_ER + mean_peers(L_CMER))
// Peer outputs enter as detached constants, so the objective moves only the
// k-th network's parameters. With K == 2 this reduces to the two-network
// formulas term by term.
template <typename T>
ObjectiveNodes<T> network_objective(Graph<T>& g, int k,
                                    const std::vector<BranchOutputs<T>>& nets,
                                    const Tensor<T>& one_hot, const LossWeights& w, int epoch,
                                    const AffineTransform& pi, const ValidityMask& mask) {
  w.validate();
  const int K = static_cast<int>(nets.size());
  require(K >= 1, "objective: need at least one network");
  require(k >= 0 && k < K, "objective: modality index out of range");
  require(K >= 2 || !(w.kd || w.cmer),
          "objective: KD/CMER toggled on requires at least 2 modalities (K=1 given)");

  const BranchOutputs<T>& self = nets[static_cast<std::size_t>(k)];
  ObjectiveNodes<T> out;
  out.lambda_e = lambda_e(epoch, w.schedule_T);
  out.l_c = classification_loss(g, self.probs, self.probs_t, one_hot);
  NodeId total = out.l_c;

  if (w.kd) {
    NodeId acc = -1;
    for (int l = 0; l < K; ++l) {
      if (l == k) continue;
      const BranchOutputs<T>& peer = nets[static_cast<std::size_t>(l)];
      const NodeId term = kd_loss(g, g.value(peer.probs), g.value(peer.probs_t), self.probs,
                                  self.probs_t);
      acc = (acc < 0) ? term : g.add(acc, term);
    }
    out.l_kd = g.scale(acc, 1.0 / (K - 1));
    total = g.add(total, g.scale(out.l_kd, w.lambda_kd));
  }

  NodeId equiv = -1;
  if (w.er) {
    out.l_er = er_loss(g, self.cam, self.cam_t, pi, mask);
    equiv = out.l_er;
  }
  if (w.cmer) {
    NodeId acc = -1;
    for (int l = 0; l < K; ++l) {
      if (l == k) continue;
      const BranchOutputs<T>& peer = nets[static_cast<std::size_t>(l)];
      const NodeId term = cmer_loss(g, self.cam, self.cam_t, g.value(peer.cam),
                                    g.value(peer.cam_t), pi, mask);
      acc = (acc < 0) ? term : g.add(acc, term);
    }
    out.l_cmer = g.scale(acc, 1.0 / (K - 1));
    equiv = (equiv < 0) ? out.l_cmer : g.add(equiv, out.l_cmer);
  }
  if (equiv >= 0) total = g.add(total, g.scale(equiv, out.lambda_e));

  out.total = total;
  return out;
}

template <typename T>
LossBreakdown breakdown_from_nodes(const Graph<T>& g, const ObjectiveNodes<T>& nodes,
                                   int modality, int epoch) {
  LossBreakdown b;
  b.modality = modality;
  b.epoch = epoch;
  b.lambda_e = nodes.lambda_e;
  b.l_c = g.value(nodes.l_c).v[0];
  if (nodes.l_kd >= 0) b.l_kd = g.value(nodes.l_kd).v[0];
  if (nodes.l_er >= 0) b.l_er = g.value(nodes.l_er).v[0];
  if (nodes.l_cmer >= 0) b.l_cmer = g.value(nodes.l_cmer).v[0];
  b.total = g.value(nodes.total).v[0];
  return b;
}

}  // namespace eqcm
