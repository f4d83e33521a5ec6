#include <cmath>

#include "doctest.h"
#include "eqcm/grad_check.hpp"
#include "eqcm/losses.hpp"
#include "eqcm/model.hpp"
#include "test_util.hpp"

using namespace eqcm;

namespace {

// ---- independent scalar-loop oracles ----

template <typename T>
double ce_oracle(const Tensor<T>& p, const Tensor<T>& y) {
  const int N = p.dim(0), C = p.dim(1);
  double acc = 0;
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c)
      if (y.v[static_cast<std::size_t>(i) * C + c] == T(1))
        acc -= std::log(std::max(static_cast<double>(p.v[static_cast<std::size_t>(i) * C + c]), 1e-12));
  return acc / N;
}

template <typename T>
double kl_oracle(const Tensor<T>& p, const Tensor<T>& q) {
  const int N = p.dim(0), C = p.dim(1);
  double acc = 0;
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c) {
      const double pv = p.v[static_cast<std::size_t>(i) * C + c];
      if (pv == 0.0) continue;  // 0 log 0 := 0
      const double qv = std::max(static_cast<double>(q.v[static_cast<std::size_t>(i) * C + c]), 1e-12);
      acc += pv * (std::log(std::max(pv, 1e-12)) - std::log(qv));
    }
  return acc / N;
}

// hand-rolled horizontal flip of an [N, C, H, W] map
template <typename T>
Tensor<T> flip_h_oracle(const Tensor<T>& m) {
  Tensor<T> out(m.shape);
  const int H = m.dim(2), W = m.dim(3);
  const std::size_t planes = m.numel() / (static_cast<std::size_t>(H) * W);
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out.v[(p * H + y) * W + x] = m.v[(p * H + y) * W + (W - 1 - x)];
  return out;
}

// mean over (batch x class) planes and valid pixels of the squared difference
template <typename T>
double masked_sq_l2_oracle(const Tensor<T>& a, const Tensor<T>& b, const ValidityMask& mask) {
  const int H = a.dim(2), W = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t planes = a.numel() / plane;
  double acc = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.m[i]) {
        const double d = static_cast<double>(a.v[p * plane + i]) - b.v[p * plane + i];
        acc += d * d;
      }
  return acc / (static_cast<double>(planes) * static_cast<double>(mask.valid_count()));
}

template <typename T>
Tensor<T> l2_normalize_oracle(const Tensor<T>& m, double eps = 1e-8) {
  Tensor<T> out(m.shape);
  const std::size_t plane = static_cast<std::size_t>(m.dim(2)) * m.dim(3);
  const std::size_t planes = m.numel() / plane;
  for (std::size_t p = 0; p < planes; ++p) {
    double norm = 0;
    for (std::size_t i = 0; i < plane; ++i)
      norm += static_cast<double>(m.v[p * plane + i]) * m.v[p * plane + i];
    norm = std::sqrt(norm);
    const double d = norm > eps ? norm : eps;
    for (std::size_t i = 0; i < plane; ++i)
      out.v[p * plane + i] = static_cast<T>(m.v[p * plane + i] / d);
  }
  return out;
}

// step-by-step Eq-style CMER oracle for a horizontal flip
template <typename T>
double cmer_oracle_flip(const Tensor<T>& m_self, const Tensor<T>& mt_self,
                        const Tensor<T>& m_peer, const Tensor<T>& mt_peer,
                        const ValidityMask& mask) {
  const auto first =
      masked_sq_l2_oracle(flip_h_oracle(l2_normalize_oracle(m_peer)), l2_normalize_oracle(mt_self), mask);
  const auto second =
      masked_sq_l2_oracle(l2_normalize_oracle(mt_peer), flip_h_oracle(l2_normalize_oracle(m_self)), mask);
  return 0.5 * (first + second);
}

ValidityMask all_valid(int h, int w) {
  ValidityMask m;
  m.h = h;
  m.w = w;
  m.m.assign(static_cast<std::size_t>(h) * w, 1);
  return m;
}

AffineTransform flip_h() {
  AffineTransform t;
  t.kind = TransformKind::flip_h;
  return t;
}

template <typename T>
double scalar(const Graph<T>& g, NodeId id) {
  return g.value(id).v[0];
}

// random [N, 1, H, W] map in [0, 1], CAM-like
template <typename T = float>
Tensor<T> random_cam(int n, int h, int w, Rng& rng) {
  return testutil::random_tensor<T>({n, 1, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("ce_loss: exact one-hot prediction, closed form, oracle") {
  Graph<float> g;
  const auto y = testutil::one_hot<float>({0, 1}, 2);
  CHECK(scalar(g, ce_loss(g, g.leaf(y), y)) == doctest::Approx(0.0).epsilon(1e-9));

  Graph<float> g2;
  const auto y2 = testutil::one_hot<float>({0}, 2);
  const Tensor<float> p2({1, 2}, {0.5f, 0.5f});
  CHECK(scalar(g2, ce_loss(g2, g2.leaf(p2), y2)) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Rng rng(1);
  Graph<float> g3;
  const auto p3 = testutil::random_probs<float>(6, 3, rng);
  const auto y3 = testutil::one_hot<float>({0, 2, 1, 1, 0, 2}, 3);
  CHECK(scalar(g3, ce_loss(g3, g3.leaf(p3), y3)) ==
        doctest::Approx(ce_oracle(p3, y3)).epsilon(1e-6));
}

TEST_CASE("ce_loss rejects labels that are not one-hot") {
  Graph<float> g;
  const Tensor<float> p({1, 2}, {0.5f, 0.5f});
  CHECK_THROWS_AS(ce_loss(g, g.leaf(p), Tensor<float>({1, 2}, {1.0f, 1.0f})),
                  std::invalid_argument);
  CHECK_THROWS_AS(ce_loss(g, g.leaf(p), Tensor<float>({1, 2}, {0.3f, 0.7f})),
                  std::invalid_argument);
}

TEST_CASE("classification_loss: both-branch supervision") {
  const auto y = testutil::one_hot<float>({0}, 2);
  Graph<float> g;
  CHECK(scalar(g, classification_loss(g, g.leaf(y), g.leaf(y), y)) ==
        doctest::Approx(0.0).epsilon(1e-9));

  Graph<float> g2;
  const Tensor<float> uniform({1, 2}, {0.5f, 0.5f});
  CHECK(scalar(g2, classification_loss(g2, g2.leaf(y), g2.leaf(uniform), y)) ==
        doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-6));

  Rng rng(2);
  Graph<float> g3;
  const auto p = testutil::random_probs<float>(4, 2, rng);
  const auto pt = testutil::random_probs<float>(4, 2, rng);
  const auto y3 = testutil::one_hot<float>({0, 1, 1, 0}, 2);
  CHECK(scalar(g3, classification_loss(g3, g3.leaf(p), g3.leaf(pt), y3)) ==
        doctest::Approx(0.5 * (ce_oracle(p, y3) + ce_oracle(pt, y3))).epsilon(1e-7));
}

TEST_CASE("kl_div: zero on equal distributions, closed form, nonnegative oracle") {
  Rng rng(3);
  const auto p = testutil::random_probs<float>(5, 4, rng);
  Graph<float> g;
  CHECK(std::abs(scalar(g, kl_div(g, p, g.leaf(p)))) <= 1e-9);

  Graph<float> g2;
  const Tensor<float> point({1, 2}, {1.0f, 0.0f});
  const Tensor<float> uniform({1, 2}, {0.5f, 0.5f});
  CHECK(scalar(g2, kl_div(g2, point, g2.leaf(uniform))) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));

  for (int trial = 0; trial < 20; ++trial) {
    // strict oracle equality on the double instantiation of the same code
    Graph<double> g3;
    const auto a = testutil::random_probs<double>(3, 4, rng);
    const auto b = testutil::random_probs<double>(3, 4, rng);
    const double got = scalar(g3, kl_div(g3, a, g3.leaf(b)));
    CHECK(got >= -1e-9);
    CHECK(got == doctest::Approx(kl_oracle(a, b)).epsilon(1e-9).scale(1.0));

    Graph<float> g4;
    const auto af = a.cast<float>();
    const auto bf = b.cast<float>();
    const double got32 = scalar(g4, kl_div(g4, af, g4.leaf(bf)));
    CHECK(got32 >= -1e-9);
    CHECK(got32 == doctest::Approx(kl_oracle(af, bf)).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("kd_loss: zero when peer matches self; definition check") {
  Rng rng(4);
  const auto p = testutil::random_probs<float>(4, 2, rng);
  const auto pt = testutil::random_probs<float>(4, 2, rng);
  Graph<float> g;
  CHECK(std::abs(scalar(g, kd_loss(g, p, pt, g.leaf(p), g.leaf(pt)))) <= 1e-9);

  Graph<float> g2;
  const auto a = testutil::random_probs<float>(4, 2, rng);
  const auto at = testutil::random_probs<float>(4, 2, rng);
  CHECK(scalar(g2, kd_loss(g2, p, pt, g2.leaf(a), g2.leaf(at))) ==
        doctest::Approx(0.5 * (kl_oracle(p, a) + kl_oracle(pt, at))).epsilon(1e-7));
}

TEST_CASE("er_loss: zero at exact equivariance, masked oracle for flips") {
  Rng rng(5);
  const auto m = random_cam(2, 8, 8, rng);

  // identity-equivalent pi (scale 1.0), transformed CAM equals the original
  AffineTransform ident;
  ident.kind = TransformKind::scale;
  ident.scale_ratio = 1.0;
  Graph<float> g;
  CHECK(std::abs(scalar(g, er_loss(g, g.leaf(m, true), g.leaf(m, true), ident,
                                   validity_mask(ident, 8, 8)))) <= 1e-9);

  // rot90: M_t built as exactly pi(M)
  AffineTransform rot;
  rot.kind = TransformKind::rotate90;
  rot.quarter_turns = 1;
  Graph<float> g2;
  const auto mt = apply_transform(m, rot);
  CHECK(std::abs(scalar(g2, er_loss(g2, g2.leaf(m, true), g2.leaf(mt, true), rot,
                                    validity_mask(rot, 8, 8)))) <= 1e-9);

  // random pair under a flip matches the elementwise oracle
  Graph<float> g3;
  const auto other = random_cam(2, 8, 8, rng);
  const double got =
      scalar(g3, er_loss(g3, g3.leaf(m, true), g3.leaf(other, true), flip_h(), all_valid(8, 8)));
  CHECK(got == doctest::Approx(masked_sq_l2_oracle(flip_h_oracle(m), other, all_valid(8, 8)))
                   .epsilon(1e-7));
}

TEST_CASE("er_loss rejects an all-invalid mask") {
  Rng rng(6);
  const auto m = random_cam(1, 4, 4, rng);
  ValidityMask none;
  none.h = none.w = 4;
  none.m.assign(16, 0);
  Graph<float> g;
  CHECK_THROWS_AS(er_loss(g, g.leaf(m, true), g.leaf(m, true), flip_h(), none),
                  std::invalid_argument);
}

TEST_CASE("cmer_loss: zero on matched normalized maps and on all-zero maps") {
  Rng rng(7);
  const auto m = random_cam(2, 8, 8, rng);
  AffineTransform rot;
  rot.kind = TransformKind::rotate90;
  rot.quarter_turns = 2;
  const auto mt = apply_transform(m, rot);
  Graph<float> g;
  CHECK(std::abs(scalar(g, cmer_loss(g, g.leaf(m, true), g.leaf(mt, true), m, mt, rot,
                                     validity_mask(rot, 8, 8)))) <= 1e-9);

  Tensor<float> zero({2, 1, 8, 8});
  Graph<float> g2;
  CHECK(std::abs(scalar(g2, cmer_loss(g2, g2.leaf(zero, true), g2.leaf(zero, true), zero, zero,
                                      flip_h(), all_valid(8, 8)))) <= 1e-9);
}

TEST_CASE("cmer_loss matches the normalize-transform-subtract oracle") {
  Rng rng(8);
  const auto m_self = random_cam(2, 8, 8, rng);
  const auto mt_self = random_cam(2, 8, 8, rng);
  const auto m_peer = random_cam(2, 8, 8, rng);
  const auto mt_peer = random_cam(2, 8, 8, rng);
  Graph<float> g;
  const double got = scalar(
      g, cmer_loss(g, g.leaf(m_self, true), g.leaf(mt_self, true), m_peer, mt_peer, flip_h(),
                   all_valid(8, 8)));
  CHECK(got == doctest::Approx(cmer_oracle_flip(m_self, mt_self, m_peer, mt_peer, all_valid(8, 8)))
                   .epsilon(1e-6));
}

TEST_CASE("lambda_e: paper constants and monotonicity") {
  CHECK(lambda_e(15, 15) == doctest::Approx(1.0));
  CHECK(lambda_e(20, 15) == doctest::Approx(1.0));
  CHECK(lambda_e(14, 15) == doctest::Approx(std::exp(-1.0)).epsilon(1e-9));
  double prev = 0.0;
  for (int t = 0; t <= 40; ++t) {
    const double v = lambda_e(t, 15);
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
    CHECK(v >= prev);
    prev = v;
  }
  CHECK_THROWS_AS(lambda_e(-1, 15), std::invalid_argument);
}

namespace {

template <typename T>
struct FakeNets {
  Graph<T> g;
  std::vector<BranchOutputs<T>> nets;
  std::vector<Tensor<T>> probs, probs_t, cams, cams_t;
  Tensor<T> y;
};

// K synthetic networks' branch outputs as constant leaves
template <typename T>
FakeNets<T> make_fake(int k, int n, int h, int w, Rng& rng) {
  FakeNets<T> f;
  std::vector<int> classes;
  for (int i = 0; i < n; ++i) classes.push_back(i % 2);
  f.y = testutil::one_hot<T>(classes, 2);
  for (int i = 0; i < k; ++i) {
    f.probs.push_back(testutil::random_probs<T>(n, 2, rng));
    f.probs_t.push_back(testutil::random_probs<T>(n, 2, rng));
    f.cams.push_back(random_cam<T>(n, h, w, rng));
    f.cams_t.push_back(random_cam<T>(n, h, w, rng));
    BranchOutputs<T> b;
    b.probs = f.g.leaf(f.probs.back(), true);
    b.probs_t = f.g.leaf(f.probs_t.back(), true);
    b.cam = f.g.leaf(f.cams.back(), true);
    b.cam_t = f.g.leaf(f.cams_t.back(), true);
    f.nets.push_back(b);
  }
  return f;
}

}  // namespace

TEST_CASE("objective: all toggles off reduces to the classification loss") {
  Rng rng(9);
  FakeNets<float> f = make_fake<float>(2, 4, 8, 8, rng);
  LossWeights w;  // no toggles
  const auto obj = network_objective(f.g, 0, f.nets, f.y, w, 3, flip_h(), all_valid(8, 8));
  CHECK(scalar(f.g, obj.total) == doctest::Approx(scalar(f.g, obj.l_c)).epsilon(1e-9));
  CHECK(obj.l_kd == -1);
  CHECK(obj.l_er == -1);
  CHECK(obj.l_cmer == -1);
}

TEST_CASE("objective: K=2 equals the hand-assembled two-network formula") {
  Rng rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    FakeNets<double> f = make_fake<double>(2, 3, 8, 8, rng);
    LossWeights w = LossWeights::full();
    const int epoch = trial % 20;
    for (int k = 0; k < 2; ++k) {
      const auto obj =
          network_objective(f.g, k, f.nets, f.y, w, epoch, flip_h(), all_valid(8, 8));
      const int peer = 1 - k;
      const double expect =
          0.5 * (ce_oracle(f.probs[k], f.y) + ce_oracle(f.probs_t[k], f.y)) +
          w.lambda_kd * 0.5 *
              (kl_oracle(f.probs[peer], f.probs[k]) + kl_oracle(f.probs_t[peer], f.probs_t[k])) +
          lambda_e(epoch, w.schedule_T) *
              (masked_sq_l2_oracle(flip_h_oracle(f.cams[k]), f.cams_t[k], all_valid(8, 8)) +
               cmer_oracle_flip(f.cams[k], f.cams_t[k], f.cams[peer], f.cams_t[peer],
                                all_valid(8, 8)));
      CHECK(scalar(f.g, obj.total) == doctest::Approx(expect).epsilon(1e-7).scale(1.0));
    }
  }
}

TEST_CASE("objective: K=3 matches the independent sum-of-parts oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    FakeNets<double> f = make_fake<double>(3, 2, 8, 8, rng);
    LossWeights w = LossWeights::full();
    const int epoch = 16;
    const int k = trial % 3;
    const auto obj = network_objective(f.g, k, f.nets, f.y, w, epoch, flip_h(), all_valid(8, 8));

    double kd_sum = 0, cmer_sum = 0;
    for (int l = 0; l < 3; ++l) {
      if (l == k) continue;
      kd_sum +=
          0.5 * (kl_oracle(f.probs[l], f.probs[k]) + kl_oracle(f.probs_t[l], f.probs_t[k]));
      cmer_sum += cmer_oracle_flip(f.cams[k], f.cams_t[k], f.cams[l], f.cams_t[l], all_valid(8, 8));
    }
    const double expect =
        0.5 * (ce_oracle(f.probs[k], f.y) + ce_oracle(f.probs_t[k], f.y)) +
        w.lambda_kd * kd_sum / 2.0 +
        lambda_e(epoch, w.schedule_T) *
            (masked_sq_l2_oracle(flip_h_oracle(f.cams[k]), f.cams_t[k], all_valid(8, 8)) +
             cmer_sum / 2.0);
    CHECK(scalar(f.g, obj.total) == doctest::Approx(expect).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("objective: breakdown identity and toggle linearity") {
  Rng rng(12);
  for (int mask_bits = 0; mask_bits < 8; ++mask_bits) {
    FakeNets<double> f = make_fake<double>(2, 3, 8, 8, rng);
    LossWeights w;
    w.kd = mask_bits & 1;
    w.er = mask_bits & 2;
    w.cmer = mask_bits & 4;
    const int epoch = 7;
    const auto obj = network_objective(f.g, 0, f.nets, f.y, w, epoch, flip_h(), all_valid(8, 8));
    const auto bd = breakdown_from_nodes(f.g, obj, 0, epoch);
    const double reassembled =
        bd.l_c + w.lambda_kd * bd.l_kd + bd.lambda_e * (bd.l_er + bd.l_cmer);
    CHECK(bd.total == doctest::Approx(reassembled).epsilon(1e-6).scale(1.0));
    CHECK(bd.l_c >= -1e-9);
    CHECK(bd.l_kd >= -1e-9);
    CHECK(bd.l_er >= -1e-9);
    CHECK(bd.l_cmer >= -1e-9);
  }
}

TEST_CASE("objective: K=1 with KD or CMER toggled on is rejected") {
  Rng rng(13);
  FakeNets<float> f = make_fake<float>(1, 2, 8, 8, rng);
  LossWeights w;
  w.kd = true;
  CHECK_THROWS_AS(network_objective(f.g, 0, f.nets, f.y, w, 0, flip_h(), all_valid(8, 8)),
                  std::invalid_argument);
  w.kd = false;
  w.cmer = true;
  CHECK_THROWS_AS(network_objective(f.g, 0, f.nets, f.y, w, 0, flip_h(), all_valid(8, 8)),
                  std::invalid_argument);

  // single-modality mode: classification + within-modality equivariance only
  LossWeights er_only;
  er_only.er = true;
  const auto obj = network_objective(f.g, 0, f.nets, f.y, er_only, 20, flip_h(), all_valid(8, 8));
  CHECK(scalar(f.g, obj.total) ==
        doctest::Approx(scalar(f.g, obj.l_c) + scalar(f.g, obj.l_er)).epsilon(1e-7));
}

TEST_CASE("objective: stop-gradient keeps peer parameter gradients exactly zero") {
  const auto arch = ArchDescriptor::classifier(1, 2);
  std::vector<NetworkState> nets = {init_params(41, arch, 0), init_params(41, arch, 1)};
  Rng rng(14);
  Tensor<float> y = testutil::one_hot<float>({0, 1}, 2);

  AffineTransform pi;
  pi.kind = TransformKind::rotate90;
  pi.quarter_turns = 1;
  const ValidityMask mask = validity_mask(pi, 8, 8);

  Graph<float> g;
  std::vector<std::vector<NodeId>> ids(2);
  std::vector<BranchOutputs<float>> branches(2);
  for (int k = 0; k < 2; ++k) {
    for (const auto& [name, t] : nets[static_cast<std::size_t>(k)].params)
      ids[static_cast<std::size_t>(k)].push_back(g.leaf(t, true));
    const auto x = testutil::random_tensor<float>({2, 1, 8, 8}, rng, 0.0, 1.0);
    const auto s = siamese_step(g, ids[static_cast<std::size_t>(k)], arch, g.leaf(x), pi);
    branches[static_cast<std::size_t>(k)] = {s.plain.probs, s.transformed.probs, s.cam, s.cam_t};
  }

  const auto obj = network_objective(g, 0, branches, y, LossWeights::full(), 20, pi, mask);
  g.backward(obj.total);

  bool own_nonzero = false;
  for (NodeId id : ids[0])
    for (float v : g.grad(id).v) own_nonzero = own_nonzero || v != 0.0f;
  CHECK(own_nonzero);

  for (NodeId id : ids[1])
    for (float v : g.grad(id).v) CHECK(v == 0.0f);  // exact zero, not approximately
}

TEST_CASE("per-term gradients match finite differences") {
  Rng rng(15);
  AffineTransform pi;
  pi.kind = TransformKind::scale;
  pi.scale_ratio = 0.85;  // exercises the validity mask
  const ValidityMask mask = validity_mask(pi, 6, 6);

  const auto m0 = testutil::random_tensor<double>({1, 1, 6, 6}, rng, 0.05, 1.0);
  const auto mt0 = testutil::random_tensor<double>({1, 1, 6, 6}, rng, 0.05, 1.0);
  const auto peer = testutil::random_tensor<double>({1, 1, 6, 6}, rng, 0.05, 1.0);
  const auto peer_t = testutil::random_tensor<double>({1, 1, 6, 6}, rng, 0.05, 1.0);

  SUBCASE("er term") {
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"m", m0}, {"mt", mt0}};
    auto build = [&](Graph<double>& g, const std::vector<NodeId>& p) {
      return er_loss(g, p[0], p[1], pi, mask);
    };
    CHECK(grad_check(params, build, 1e-4, 1e-5).pass());
  }

  SUBCASE("cmer term") {
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"m", m0}, {"mt", mt0}};
    auto build = [&](Graph<double>& g, const std::vector<NodeId>& p) {
      return cmer_loss(g, p[0], p[1], peer, peer_t, pi, mask);
    };
    CHECK(grad_check(params, build, 1e-4, 1e-5).pass());
  }

  SUBCASE("kd and classification terms") {
    // logits as free parameters; softmax keeps them valid distributions
    const auto logits = testutil::random_tensor<double>({3, 2}, rng);
    const auto logits_t = testutil::random_tensor<double>({3, 2}, rng);
    const auto y = testutil::one_hot<double>({0, 1, 0}, 2);
    const auto target = testutil::random_probs<double>(3, 2, rng);
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"z", logits},
                                                                  {"zt", logits_t}};
    auto build = [&](Graph<double>& g, const std::vector<NodeId>& p) {
      const NodeId probs = g.softmax_rows(p[0]);
      const NodeId probs_t = g.softmax_rows(p[1]);
      const NodeId cls = classification_loss(g, probs, probs_t, y);
      const NodeId kd = kd_loss(g, target, target, probs, probs_t);
      return g.add(cls, g.scale(kd, 0.5));
    };
    CHECK(grad_check(params, build, 1e-4, 1e-5).pass());
  }
}
