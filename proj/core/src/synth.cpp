#include "eqcm/synth.hpp"

#include <algorithm>
#include <cmath>

#include "eqcm/io.hpp"
#include "eqcm/rng.hpp"

namespace eqcm {

void DatasetSpec::validate() const {
  require(n_train >= 1 && n_val >= 1 && n_test >= 1, "dataspec: split counts must be >= 1");
  require(height >= 8 && width >= 8, "dataspec: extents must be >= 8");
  require(modalities >= 2 && modalities <= 4, "dataspec: modality count must be in [2, 4]");
  require(lesion_prevalence > 0.0 && lesion_prevalence < 1.0,
          "dataspec: lesion prevalence must be in (0, 1)");
  if (!profiles.empty())
    require(static_cast<int>(profiles.size()) == modalities,
            "dataspec: profile count must match modality count");
  for (const auto& p : profiles)
    require(p.noise_sigma >= 0.0, "dataspec: noise sigma must be >= 0");
}

std::vector<ModalityProfile> default_profiles(int k) {
  const ModalityProfile bright{0.15, 0.45, 0.85, 0.10};  // lesion brighter, strong contrast
  const ModalityProfile dark{0.80, 0.62, 0.40, 0.10};    // lesion darker, weaker contrast
  std::vector<ModalityProfile> out{bright, dark};
  auto lerp = [&](double a) {
    ModalityProfile p;
    p.background = bright.background + a * (dark.background - bright.background);
    p.organ = bright.organ + a * (dark.organ - bright.organ);
    p.lesion = bright.lesion + a * (dark.lesion - bright.lesion);
    p.noise_sigma = bright.noise_sigma + a * (dark.noise_sigma - bright.noise_sigma);
    return p;
  };
  if (k >= 3) out.push_back(lerp(1.0 / 3.0));
  if (k >= 4) out.push_back(lerp(2.0 / 3.0));
  out.resize(static_cast<std::size_t>(k));
  return out;
}

std::vector<ModalityProfile> DatasetSpec::resolved_profiles() const {
  return profiles.empty() ? default_profiles(modalities) : profiles;
}

namespace {

struct Ellipse {
  double cy = 0, cx = 0;   // center, pixels
  double a = 1, b = 1;     // semi-axes, pixels
  double phi = 0;          // rotation

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(phi), s = std::sin(phi);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

ModalitySample make_sample(std::uint64_t id, const DatasetSpec& spec,
                           const std::vector<ModalityProfile>& profiles) {
  const int H = spec.height, W = spec.width;
  Rng rng(splitmix64(splitmix64(spec.seed ^ 0x455143u) + id));

  Ellipse organ;
  organ.cy = 0.5 * (H - 1) + rng.uniform(-0.06, 0.06) * H;
  organ.cx = 0.5 * (W - 1) + rng.uniform(-0.06, 0.06) * W;
  organ.a = rng.uniform(0.26, 0.38) * H;
  organ.b = rng.uniform(0.26, 0.38) * W;
  organ.phi = rng.uniform(0.0, 3.14159265358979323846);

  const bool wants_lesion = rng.bernoulli(spec.lesion_prevalence);
  Ellipse lesion;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
  std::size_t area = 0;
  if (wants_lesion) {
    // redraw until the rasterized lesion is nonempty; tiny draws can fall
    // between pixel centers at 32x32
    do {
      const double frac = rng.uniform(0.02, 0.15);
      const double aspect = rng.uniform(0.6, 1.6);
      lesion.a = std::sqrt(frac * organ.a * organ.b * aspect);
      lesion.b = std::sqrt(frac * organ.a * organ.b / aspect);
      lesion.phi = rng.uniform(0.0, 3.14159265358979323846);
      const double r = rng.uniform(0.0, 0.55);
      const double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double c = std::cos(organ.phi), s = std::sin(organ.phi);
      const double u = r * organ.a * std::cos(th);
      const double v = r * organ.b * std::sin(th);
      lesion.cy = organ.cy + s * u + c * v;
      lesion.cx = organ.cx + c * u - s * v;
      area = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const bool in = lesion.contains(y, x);
          mask[static_cast<std::size_t>(y) * W + x] = in ? 1 : 0;
          area += in;
        }
    } while (area == 0);
  }

  ModalitySample sample;
  sample.id = id;
  sample.h = H;
  sample.w = W;
  sample.gt_mask = std::move(mask);
  sample.label = {area > 0 ? real(0) : real(1), area > 0 ? real(1) : real(0)};

  for (const auto& prof : profiles) {
    Tensor<real> img({H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = prof.background;
        if (sample.gt_mask[static_cast<std::size_t>(y) * W + x]) v = prof.lesion;
        else if (organ.contains(y, x)) v = prof.organ;
        v += prof.noise_sigma * rng.normal();
        img.v[static_cast<std::size_t>(y) * W + x] =
            static_cast<real>(std::clamp(v, 0.0, 1.0));
      }
    sample.images.push_back(std::move(img));
  }
  return sample;
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  const auto profiles = spec.resolved_profiles();
  Dataset out;
  out.k = spec.modalities;
  out.c = 2;
  out.h = spec.height;
  out.w = spec.width;

  std::uint64_t id = 0;
  auto fill = [&](std::vector<ModalitySample>& split, int n) {
    split.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) split.push_back(make_sample(id++, spec, profiles));
  };
  fill(out.train, spec.n_train);
  fill(out.val, spec.n_val);
  fill(out.test, spec.n_test);
  return out;
}

static const char kDatasetMagic[9] = "EQCMDAT1";

void save_dataset(const std::vector<ModalitySample>& samples, int k, int c,
                  const std::string& path) {
  require(!samples.empty(), "save_dataset: empty sample list");
  const int H = samples.front().h, W = samples.front().w;
  BinWriter w(path);
  w.magic(kDatasetMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(k));
  w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(H));
  w.u32(static_cast<std::uint32_t>(W));
  w.u64(samples.size());
  for (const auto& s : samples) {
    require(static_cast<int>(s.images.size()) == k && s.h == H && s.w == W &&
                static_cast<int>(s.label.size()) == c,
            "save_dataset: inhomogeneous sample " + std::to_string(s.id));
    w.u64(s.id);
    for (real x : s.label) w.f32(x);
    w.bytes(s.gt_mask.data(), s.gt_mask.size());
    for (const auto& img : s.images)
      for (real x : img.v) w.f32(x);
  }
  w.close();
}

DatasetFile load_dataset(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kDatasetMagic);
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported dataset version " + std::to_string(version), r.pos() - 4);
  DatasetFile out;
  out.k = static_cast<int>(r.u32());
  out.c = static_cast<int>(r.u32());
  out.h = static_cast<int>(r.u32());
  out.w = static_cast<int>(r.u32());
  if (out.k < 1 || out.k > 8) throw IoError("modality count out of range", r.pos() - 16);
  if (out.c < 2 || out.c > 64) throw IoError("class count out of range", r.pos() - 12);
  if (out.h < 1 || out.h > 4096 || out.w < 1 || out.w > 4096)
    throw IoError("image extents out of range", r.pos() - 8);
  const std::uint64_t count = r.u64();
  if (count > (1ull << 24)) throw IoError("sample count out of range", r.pos() - 8);

  const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
  out.samples.resize(count);
  for (auto& s : out.samples) {
    s.id = r.u64();
    s.h = out.h;
    s.w = out.w;
    s.label.resize(static_cast<std::size_t>(out.c));
    for (auto& x : s.label) x = r.f32();
    s.gt_mask.resize(plane);
    r.bytes(s.gt_mask.data(), plane);
    s.images.reserve(static_cast<std::size_t>(out.k));
    for (int m = 0; m < out.k; ++m) {
      Tensor<real> img({out.h, out.w});
      r.bytes(img.data(), plane * sizeof(real));
      s.images.push_back(std::move(img));
    }
  }
  if (!r.at_eof()) throw IoError("trailing bytes after dataset payload", r.pos());
  return out;
}

std::uint64_t dataset_digest(const std::vector<ModalitySample>& samples) {
  Fnv1a h;
  for (const auto& s : samples) {
    h.feed_value(s.id);
    for (real x : s.label) h.feed_value(x);
    h.feed(s.gt_mask.data(), s.gt_mask.size());
    for (const auto& img : s.images) h.feed(img.data(), img.numel() * sizeof(real));
  }
  return h.digest();
}

}  // namespace eqcm
