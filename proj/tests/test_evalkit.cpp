#include <cmath>

#include "doctest.h"
#include "eqcm/eval.hpp"
#include "eqcm/synth.hpp"
#include "test_util.hpp"

using namespace eqcm;

namespace {

BinaryMask mask_of(int h, int w, std::vector<std::uint8_t> bits) {
  BinaryMask m;
  m.h = h;
  m.w = w;
  m.m = std::move(bits);
  return m;
}

BinaryMask random_mask(int h, int w, double p, Rng& rng) {
  BinaryMask m;
  m.h = h;
  m.w = w;
  m.m.resize(static_cast<std::size_t>(h) * w);
  for (auto& b : m.m) b = rng.bernoulli(p) ? 1 : 0;
  return m;
}

// Independent ASSD oracle: its own boundary rule (scan 4-neighbors with an
// offset list, border-as-background) and an all-pairs nearest sweep.
double assd_oracle(const BinaryMask& a, const BinaryMask& b) {
  const int H = a.h, W = a.w;
  auto boundary = [&](const BinaryMask& m) {
    std::vector<std::pair<int, int>> out;
    const int offs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!m.m[static_cast<std::size_t>(y) * W + x]) continue;
        bool edge = false;
        for (const auto& o : offs) {
          const int ny = y + o[0], nx = x + o[1];
          const bool neighbor_fg = ny >= 0 && ny < H && nx >= 0 && nx < W &&
                                   m.m[static_cast<std::size_t>(ny) * W + nx];
          if (!neighbor_fg) edge = true;
        }
        if (edge) out.emplace_back(y, x);
      }
    return out;
  };
  const auto ba = boundary(a);
  const auto bb = boundary(b);
  double total = 0.0;
  for (const auto& p : ba) {
    double best = 1e300;
    for (const auto& q : bb)
      best = std::min(best, std::hypot(static_cast<double>(p.first - q.first),
                                       static_cast<double>(p.second - q.second)));
    total += best;
  }
  for (const auto& q : bb) {
    double best = 1e300;
    for (const auto& p : ba)
      best = std::min(best, std::hypot(static_cast<double>(p.first - q.first),
                                       static_cast<double>(p.second - q.second)));
    total += best;
  }
  return total / static_cast<double>(ba.size() + bb.size());
}

}  // namespace

TEST_CASE("binarize: thresholds with ties to foreground") {
  Tensor<real> hi({2, 2});
  hi.fill(0.6f);
  CHECK(binarize(hi, 0.5).area() == 4);

  Tensor<real> lo({2, 2});
  lo.fill(0.4f);
  CHECK(binarize(lo, 0.5).area() == 0);

  Tensor<real> tie({1, 2});
  tie.v = {0.5f, 0.4999f};
  const auto m = binarize(tie, 0.5);
  CHECK(m.m[0] == 1);  // >= convention
  CHECK(m.m[1] == 0);

  CHECK_THROWS_AS(binarize(tie, 1.5), std::invalid_argument);
}

TEST_CASE("dsc: closed forms and conventions") {
  const auto a = mask_of(2, 2, {1, 1, 0, 0});
  CHECK(dsc(a, a) == 1.0);

  const auto b = mask_of(2, 2, {0, 0, 1, 1});
  CHECK(dsc(a, b) == 0.0);

  // |pred| = 4, |gt| = 4, overlap 2
  const auto p = mask_of(2, 4, {1, 1, 1, 1, 0, 0, 0, 0});
  const auto g = mask_of(2, 4, {1, 1, 0, 0, 1, 1, 0, 0});
  CHECK(dsc(p, g) == 0.5);

  const auto empty = mask_of(2, 2, {0, 0, 0, 0});
  CHECK(dsc(empty, empty) == 1.0);  // both empty
  CHECK(dsc(a, empty) == 0.0);
}

TEST_CASE("dsc: exhaustive enumeration over an 8-pixel 4x4 region") {
  for (int pa = 0; pa < 256; ++pa)
    for (int pb = 0; pb < 256; pb += 3) {  // every third partner keeps it quick
      std::vector<std::uint8_t> abits(16, 0), bbits(16, 0);
      for (int i = 0; i < 8; ++i) {
        abits[static_cast<std::size_t>(i)] = (pa >> i) & 1;
        bbits[static_cast<std::size_t>(i)] = (pb >> i) & 1;
      }
      const auto a = mask_of(4, 4, abits);
      const auto b = mask_of(4, 4, bbits);
      int inter = 0, na = 0, nb = 0;
      for (int i = 0; i < 8; ++i) {
        inter += ((pa >> i) & 1) & ((pb >> i) & 1);
        na += (pa >> i) & 1;
        nb += (pb >> i) & 1;
      }
      const double expect = (na + nb) == 0 ? 1.0 : 2.0 * inter / (na + nb);
      CHECK(dsc(a, b) == expect);  // exact
      CHECK(dsc(a, b) == dsc(b, a));
    }
}

TEST_CASE("assd: closed forms") {
  const auto a = mask_of(4, 4, {0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(assd(a, a) == 0.0);

  // two single-pixel masks three pixels apart on one axis
  auto p = mask_of(1, 8, {0, 1, 0, 0, 0, 0, 0, 0});
  auto g = mask_of(1, 8, {0, 0, 0, 0, 1, 0, 0, 0});
  CHECK(assd(p, g) == doctest::Approx(3.0));

  const auto empty = mask_of(1, 8, {0, 0, 0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(assd(p, empty), UndefinedMetric);
  CHECK_THROWS_AS(assd(empty, g), UndefinedMetric);
}

TEST_CASE("assd matches the all-pairs brute-force oracle on random 16x16 pairs") {
  Rng rng(21);
  int tested = 0;
  while (tested < 200) {
    const auto a = random_mask(16, 16, rng.uniform(0.05, 0.5), rng);
    const auto b = random_mask(16, 16, rng.uniform(0.05, 0.5), rng);
    if (a.empty_mask() || b.empty_mask()) continue;
    ++tested;
    const double got = assd(a, b);
    const double expect = assd_oracle(a, b);
    CHECK(std::abs(got - expect) <= 1e-9);
    CHECK(std::abs(assd(a, b) - assd(b, a)) <= 1e-12);  // symmetry
    CHECK(got >= 0.0);
  }
}

TEST_CASE("assd respects pixel spacing") {
  auto p = mask_of(1, 8, {0, 1, 0, 0, 0, 0, 0, 0});
  auto g = mask_of(1, 8, {0, 0, 0, 0, 1, 0, 0, 0});
  p.spacing_x = 2.0;
  CHECK(assd(p, g) == doctest::Approx(6.0));
}

TEST_CASE("fuse_max: dominance and definition") {
  Tensor<real> lo({2, 2});
  lo.fill(0.2f);
  Tensor<real> hi({2, 2});
  hi.fill(0.7f);
  CHECK(fuse_max({lo, hi}).v == hi.v);
  CHECK(fuse_max({lo}).v == lo.v);  // K = 1 identity
  CHECK_THROWS_AS(fuse_max({}), std::invalid_argument);

  Rng rng(22);
  std::vector<Tensor<real>> maps;
  for (int k = 0; k < 3; ++k) maps.push_back(testutil::random_tensor<float>({4, 4}, rng, 0.0, 1.0));
  const auto fused = fuse_max(maps);
  for (std::size_t i = 0; i < fused.numel(); ++i) {
    float expect = 0;
    for (const auto& m : maps) {
      expect = std::max(expect, m.v[i]);
      CHECK(fused.v[i] >= m.v[i]);  // pixelwise dominance
    }
    CHECK(fused.v[i] == expect);
  }
}

TEST_CASE("threshold_sweep: closed form at tau 0, step at a constant, validation") {
  Rng rng(23);
  const auto gt = random_mask(4, 4, 0.4, rng);
  Tensor<real> cam({4, 4});
  cam.fill(0.625f);  // exactly representable so the tie row is a real tie

  const auto curve = threshold_sweep({cam}, {gt}, {0.0, 0.6, 0.625, 0.7});
  // tau = 0: all-foreground prediction
  CHECK(curve[0].mean_dsc ==
        doctest::Approx(2.0 * gt.area() / (16.0 + gt.area())).epsilon(1e-12));
  // constant cam: same value until tau passes the constant, then a drop
  CHECK(curve[1].mean_dsc == curve[0].mean_dsc);
  CHECK(curve[2].mean_dsc == curve[0].mean_dsc);  // ties binarize to foreground
  CHECK(curve[3].mean_dsc == 0.0);                // empty prediction vs nonempty gt

  CHECK_THROWS_AS(threshold_sweep({cam}, {gt}, {}), std::invalid_argument);
  CHECK_THROWS_AS(threshold_sweep({cam}, {gt}, {0.5, 1.2}), std::invalid_argument);
}

TEST_CASE("confusion_ratios: closed forms and the TP=0 contract") {
  const auto gt = mask_of(2, 4, {1, 1, 1, 1, 1, 1, 0, 0});
  CHECK(confusion_ratios(gt, gt) == std::pair<double, double>{0.0, 0.0});

  // FN = 2, TP = 4, FP = 0
  const auto pred = mask_of(2, 4, {1, 1, 1, 1, 0, 0, 0, 0});
  const auto [ru, ro] = confusion_ratios(pred, gt);
  CHECK(ru == doctest::Approx(0.5));
  CHECK(ro == 0.0);

  const auto disjoint = mask_of(2, 4, {0, 0, 0, 0, 0, 0, 1, 1});
  CHECK_THROWS_AS(confusion_ratios(disjoint, gt), UndefinedMetric);
}

TEST_CASE("ratio identity: DSC == 2TP/(2TP+FP+FN) on random masks") {
  Rng rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_mask(8, 8, rng.uniform(0.1, 0.6), rng);
    const auto b = random_mask(8, 8, rng.uniform(0.1, 0.6), rng);
    const auto c = confusion_counts(a, b);
    const double denom = static_cast<double>(2 * c.tp + c.fp + c.fn);
    const double identity = denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / denom;
    CHECK(std::abs(dsc(a, b) - identity) <= 1e-9);
  }
}

namespace {

// 1x1-conv network that copies its input into the foreground class map, so
// CAMs reproduce the (noise-free) lesion mask exactly.
NetworkState identity_net(int modality) {
  ArchDescriptor arch;
  arch.in_channels = 1;
  arch.num_classes = 2;
  arch.layers = {{2, 1, 0, false}};
  NetworkState net;
  net.modality = modality;
  net.arch = arch;
  Tensor<real> w({2, 1, 1, 1});
  w.v = {0.0f, 1.0f};  // background dead, foreground = input
  net.params.emplace_back("conv0.weight", std::move(w));
  net.params.emplace_back("conv0.bias", Tensor<real>({2}));
  return net;
}

Dataset mask_valued_dataset(int n, std::uint64_t seed) {
  DatasetSpec spec;
  spec.n_train = 1;
  spec.n_val = 1;
  spec.n_test = n;
  spec.seed = seed;
  spec.lesion_prevalence = 0.7;
  // images equal the lesion indicator: organ/background render to 0
  spec.profiles = {{0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 1.0, 0.0}};
  return generate(spec);
}

}  // namespace

TEST_CASE("evaluate: perfect predictions give DSC 1 and ASSD 0 on every row") {
  const Dataset data = mask_valued_dataset(12, 31);
  const std::vector<NetworkState> nets = {identity_net(0), identity_net(1)};
  const EvalReport report = evaluate(nets, data.test, 0.5);
  REQUIRE(report.rows.size() == 3);  // two modalities + fused
  for (const auto& row : report.rows) {
    CHECK(row.dsc_mean == doctest::Approx(1.0));
    CHECK(row.dsc_std == doctest::Approx(0.0));
    CHECK(row.assd_mean == doctest::Approx(0.0));
    CHECK(row.ratios_defined);
    CHECK(row.r_u == 0.0);
    CHECK(row.r_o == 0.0);
    // healthy samples have empty prediction and gt: excluded from ASSD
    CHECK(row.assd_excluded == 12 - row.samples + row.assd_excluded);  // bounded by samples
  }
}

TEST_CASE("evaluate: all-zero maps give DSC 0 rows with ASSD flagged undefined") {
  DatasetSpec spec;
  spec.n_train = 1;
  spec.n_val = 1;
  spec.n_test = 8;
  spec.seed = 32;
  spec.lesion_prevalence = 0.999999;  // every test sample carries a lesion
  const Dataset data = generate(spec);

  NetworkState dead = identity_net(0);
  dead.params[0].second.fill(0.0f);  // all-zero class maps
  NetworkState dead2 = dead;
  dead2.modality = 1;
  const EvalReport report = evaluate({dead, dead2}, data.test, 0.5);
  for (const auto& row : report.rows) {
    CHECK(row.dsc_mean == doctest::Approx(0.0));
    CHECK(row.assd_excluded == 8);  // undefined everywhere, excluded and counted
    CHECK(!row.ratios_defined);     // TP == 0 signaled distinctly
  }
}

TEST_CASE("evaluate: fused row is recomputable from the persisted map dump") {
  const std::string dir = testutil::scratch_dir("evalkit_dump");
  const Dataset data = mask_valued_dataset(10, 33);
  // non-trivial nets: modality 1 halved so fusion actually selects pixels
  NetworkState a = identity_net(0);
  NetworkState b = identity_net(1);
  b.params[0].second.v[1] = 0.6f;

  std::vector<std::vector<Tensor<real>>> maps;
  const EvalReport report = evaluate({a, b}, data.test, 0.5, default_sweep_grid(),
                                     MapSource::cam, &maps);
  save_cam_dump(dir + "/cams.bin", data.test, maps);
  const CamDump dump = load_cam_dump(dir + "/cams.bin");
  REQUIRE(dump.maps.size() == data.test.size());

  double dsc_sum = 0;
  for (std::size_t i = 0; i < dump.maps.size(); ++i) {
    CHECK(dump.ids[i] == data.test[i].id);
    for (int k = 0; k < 2; ++k)
      CHECK(dump.maps[i][static_cast<std::size_t>(k)].v == maps[i][static_cast<std::size_t>(k)].v);
    const auto fused = fuse_max(dump.maps[i]);
    dsc_sum += dsc(binarize(fused, 0.5),
                   mask_from_bytes(data.test[i].gt_mask, data.test[i].h, data.test[i].w));
  }
  CHECK(report.rows.back().dsc_mean ==
        doctest::Approx(dsc_sum / static_cast<double>(dump.maps.size())).epsilon(1e-12));
}

TEST_CASE("report serialization carries the rows and the sweep") {
  const Dataset data = mask_valued_dataset(4, 34);
  const std::vector<NetworkState> nets = {identity_net(0), identity_net(1)};
  const EvalReport report = evaluate(nets, data.test, 0.5);
  const std::string json = report_json(report);
  CHECK(json.find("\"fused\"") != std::string::npos);
  CHECK(json.find("\"sweep\"") != std::string::npos);
  const std::string text = report_text(report);
  CHECK(text.find("fused") != std::string::npos);
}
