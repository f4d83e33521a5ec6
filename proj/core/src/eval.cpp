#include "eqcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "eqcm/io.hpp"
#include "json.hpp"

namespace eqcm {

BinaryMask mask_from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w) {
  require(bytes.size() == static_cast<std::size_t>(h) * w, "mask_from_bytes: size mismatch");
  BinaryMask out;
  out.h = h;
  out.w = w;
  out.m = bytes;
  for (auto& b : out.m) b = b ? 1 : 0;
  return out;
}

BinaryMask binarize(const Tensor<real>& map, double tau) {
  require(tau >= 0.0 && tau <= 1.0, "binarize: tau must be in [0, 1]");
  require(map.rank() == 2, "binarize: expected an [H, W] map, got " + map.shape_str());
  BinaryMask out;
  out.h = map.dim(0);
  out.w = map.dim(1);
  out.m.resize(map.numel());
  for (std::size_t i = 0; i < map.numel(); ++i)
    out.m[i] = static_cast<double>(map.v[i]) >= tau ? 1 : 0;
  return out;
}

double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  require(pred.h == gt.h && pred.w == gt.w, "dsc: shape mismatch");
  std::uint64_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.m.size(); ++i) {
    inter += pred.m[i] & gt.m[i];
    a += pred.m[i];
    b += gt.m[i];
  }
  if (a + b == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask) {
  std::vector<std::pair<int, int>> out;
  const int H = mask.h, W = mask.w;
  auto at = [&](int y, int x) -> int {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0;  // border counts as background
    return mask.m[static_cast<std::size_t>(y) * W + x];
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!at(y, x)) continue;
      if (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1))
        out.emplace_back(y, x);
    }
  return out;
}

double assd(const BinaryMask& pred, const BinaryMask& gt) {
  require(pred.h == gt.h && pred.w == gt.w, "assd: shape mismatch");
  if (pred.empty_mask() || gt.empty_mask())
    throw UndefinedMetric("assd: undefined on an empty mask");
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  const double sy = pred.spacing_y, sx = pred.spacing_x;

  auto nearest = [&](const std::pair<int, int>& p, const std::vector<std::pair<int, int>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
      const double dy = (p.first - q.first) * sy;
      const double dx = (p.second - q.second) * sx;
      best = std::min(best, dy * dy + dx * dx);
    }
    return std::sqrt(best);
  };

  double acc = 0.0;
  for (const auto& p : bp) acc += nearest(p, bg);
  for (const auto& q : bg) acc += nearest(q, bp);
  return acc / static_cast<double>(bp.size() + bg.size());
}

Tensor<real> fuse_max(const std::vector<Tensor<real>>& maps) {
  require(!maps.empty(), "fuse_max: empty map list");
  Tensor<real> out = maps.front();
  for (std::size_t k = 1; k < maps.size(); ++k) {
    require(maps[k].same_shape(out), "fuse_max: shape mismatch at map " + std::to_string(k));
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] = std::max(out.v[i], maps[k].v[i]);
  }
  return out;
}

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt) {
  require(pred.h == gt.h && pred.w == gt.w, "confusion: shape mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.m.size(); ++i) {
    c.tp += pred.m[i] & gt.m[i];
    c.fp += pred.m[i] & static_cast<std::uint8_t>(1 - gt.m[i]);
    c.fn += static_cast<std::uint8_t>(1 - pred.m[i]) & gt.m[i];
  }
  return c;
}

std::pair<double, double> confusion_ratios(const BinaryMask& pred, const BinaryMask& gt) {
  const ConfusionCounts c = confusion_counts(pred, gt);
  if (c.tp == 0) throw UndefinedMetric("confusion_ratios: TP == 0, ratios undefined");
  return {static_cast<double>(c.fn) / static_cast<double>(c.tp),
          static_cast<double>(c.fp) / static_cast<double>(c.tp)};
}

std::vector<double> default_sweep_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(0.05 * i);
  return grid;
}

std::vector<SweepPoint> threshold_sweep(const std::vector<Tensor<real>>& maps,
                                        const std::vector<BinaryMask>& gts,
                                        const std::vector<double>& grid) {
  require(!grid.empty(), "threshold_sweep: empty grid");
  for (double tau : grid)
    require(tau >= 0.0 && tau <= 1.0, "threshold_sweep: grid values must be in [0, 1]");
  require(maps.size() == gts.size() && !maps.empty(), "threshold_sweep: maps/gts mismatch");

  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (double tau : grid) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const double d = dsc(binarize(maps[i], tau), gts[i]);
      sum += d;
      sq += d * d;
    }
    const double n = static_cast<double>(maps.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sq / n - mean * mean);
    out.push_back({tau, mean, std::sqrt(var)});
  }
  return out;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& sweep) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write sweep csv: " + path);
  f << "tau,mean_dsc,std_dsc\n" << std::setprecision(9);
  for (const auto& p : sweep) f << p.tau << ',' << p.mean_dsc << ',' << p.std_dsc << '\n';
}

std::vector<std::vector<Tensor<real>>> predict_maps(const std::vector<NetworkState>& nets,
                                                    const std::vector<ModalitySample>& split,
                                                    MapSource source) {
  require(!nets.empty(), "predict_maps: no networks");
  std::vector<std::vector<Tensor<real>>> out;
  out.reserve(split.size());
  for (const auto& s : split) {
    require(s.images.size() == nets.size(), "predict_maps: sample K does not match checkpoints");
    std::vector<Tensor<real>> per_modality;
    for (std::size_t k = 0; k < nets.size(); ++k) {
      Tensor<real> x({1, 1, s.h, s.w});
      std::copy_n(s.images[k].data(), x.numel(), x.data());
      const ForwardResult f = forward(nets[k], x);
      Tensor<real> plane({s.h, s.w});
      if (source == MapSource::cam) {
        const Tensor<real> cam = cam_from_features(f.features, nets[k].arch.num_classes);
        std::copy_n(cam.data(), plane.numel(), plane.data());  // foreground channel
      } else {
        Graph<real> g;
        const NodeId probs = g.softmax_channels(g.leaf(f.features, false));
        const Tensor<real>& pv = g.value(probs);
        const std::size_t off = static_cast<std::size_t>(s.h) * s.w;  // channel 1
        std::copy_n(pv.data() + off, plane.numel(), plane.data());
      }
      per_modality.push_back(std::move(plane));
    }
    out.push_back(std::move(per_modality));
  }
  return out;
}

namespace {

struct RunningStats {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double stddev() const {
    if (!n) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - m * m));
  }
};

EvalRow metrics_for(const std::string& name, const std::vector<Tensor<real>>& maps,
                    const std::vector<BinaryMask>& gts, double tau) {
  EvalRow row;
  row.name = name;
  row.samples = maps.size();
  RunningStats ds, as;
  ConfusionCounts pooled;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const BinaryMask pred = binarize(maps[i], tau);
    ds.add(dsc(pred, gts[i]));
    const ConfusionCounts c = confusion_counts(pred, gts[i]);
    pooled.tp += c.tp;
    pooled.fp += c.fp;
    pooled.fn += c.fn;
    if (pred.empty_mask() || gts[i].empty_mask()) {
      ++row.assd_excluded;
    } else {
      as.add(assd(pred, gts[i]));
    }
  }
  row.dsc_mean = ds.mean();
  row.dsc_std = ds.stddev();
  row.assd_mean = as.mean();
  row.assd_std = as.stddev();
  if (pooled.tp > 0) {
    row.ratios_defined = true;
    row.r_u = static_cast<double>(pooled.fn) / static_cast<double>(pooled.tp);
    row.r_o = static_cast<double>(pooled.fp) / static_cast<double>(pooled.tp);
  }
  return row;
}

}  // namespace

EvalReport evaluate(const std::vector<NetworkState>& nets,
                    const std::vector<ModalitySample>& split, double tau,
                    const std::vector<double>& sweep_grid, MapSource source,
                    std::vector<std::vector<Tensor<real>>>* maps_out) {
  require(!split.empty(), "evaluate: empty split");
  require(tau >= 0.0 && tau <= 1.0, "evaluate: tau must be in [0, 1]");
  const auto maps = predict_maps(nets, split, source);

  std::vector<BinaryMask> gts;
  gts.reserve(split.size());
  for (const auto& s : split) gts.push_back(mask_from_bytes(s.gt_mask, s.h, s.w));

  EvalReport report;
  report.tau = tau;
  report.samples = split.size();

  const std::size_t K = nets.size();
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Tensor<real>> mk;
    mk.reserve(maps.size());
    for (const auto& per : maps) mk.push_back(per[k]);
    report.rows.push_back(metrics_for("modality " + std::to_string(k), mk, gts, tau));
  }

  std::vector<Tensor<real>> fused;
  fused.reserve(maps.size());
  for (const auto& per : maps) fused.push_back(fuse_max(per));
  report.rows.push_back(metrics_for("fused", fused, gts, tau));
  report.sweep = threshold_sweep(fused, gts, sweep_grid);

  if (maps_out) *maps_out = maps;
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  j["tau"] = report.tau;
  j["samples"] = report.samples;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row;
    row["name"] = r.name;
    row["dsc_mean"] = r.dsc_mean;
    row["dsc_std"] = r.dsc_std;
    row["assd_mean"] = r.assd_mean;
    row["assd_std"] = r.assd_std;
    row["assd_excluded"] = r.assd_excluded;
    row["samples"] = r.samples;
    row["ratios_defined"] = r.ratios_defined;
    if (r.ratios_defined) {
      row["r_u"] = r.r_u;
      row["r_o"] = r.r_o;
    }
    j["rows"].push_back(row);
  }
  j["sweep"] = nlohmann::json::array();
  for (const auto& p : report.sweep)
    j["sweep"].push_back({{"tau", p.tau}, {"mean_dsc", p.mean_dsc}, {"std_dsc", p.std_dsc}});
  return j.dump(2);
}

std::string report_text(const EvalReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "threshold tau = " << report.tau << ", samples = " << report.samples << "\n";
  os << std::left << std::setw(14) << "row" << std::right << std::setw(10) << "DSC"
     << std::setw(10) << "sd" << std::setw(10) << "ASSD" << std::setw(10) << "sd"
     << std::setw(8) << "excl" << std::setw(10) << "r_u" << std::setw(10) << "r_o" << "\n";
  for (const auto& r : report.rows) {
    os << std::left << std::setw(14) << r.name << std::right << std::setw(10) << r.dsc_mean
       << std::setw(10) << r.dsc_std << std::setw(10) << r.assd_mean << std::setw(10)
       << r.assd_std << std::setw(8) << r.assd_excluded;
    if (r.ratios_defined)
      os << std::setw(10) << r.r_u << std::setw(10) << r.r_o;
    else
      os << std::setw(10) << "undef" << std::setw(10) << "undef";
    os << "\n";
  }
  return os.str();
}

static const char kCamMagic[9] = "EQCMCAM1";

void save_cam_dump(const std::string& path, const std::vector<ModalitySample>& split,
                   const std::vector<std::vector<Tensor<real>>>& maps) {
  require(split.size() == maps.size() && !maps.empty(), "cam dump: maps/split mismatch");
  const int K = static_cast<int>(maps.front().size());
  const int H = maps.front().front().dim(0);
  const int W = maps.front().front().dim(1);
  BinWriter w(path);
  w.magic(kCamMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(K));
  w.u32(1);  // channels per map (binary setting: one foreground class)
  w.u32(static_cast<std::uint32_t>(H));
  w.u32(static_cast<std::uint32_t>(W));
  w.u64(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    w.u64(split[i].id);
    for (const auto& m : maps[i])
      for (real x : m.v) w.f32(x);
  }
  w.close();
}

CamDump load_cam_dump(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kCamMagic);
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported cam dump version", r.pos() - 4);
  CamDump out;
  out.k = static_cast<int>(r.u32());
  out.channels = static_cast<int>(r.u32());
  out.h = static_cast<int>(r.u32());
  out.w = static_cast<int>(r.u32());
  if (out.k < 1 || out.k > 8 || out.channels < 1 || out.channels > 64 || out.h < 1 ||
      out.h > 4096 || out.w < 1 || out.w > 4096)
    throw IoError("cam dump header out of range", r.pos());
  const std::uint64_t count = r.u64();
  if (count > (1ull << 24)) throw IoError("cam dump sample count out of range", r.pos() - 8);
  const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
  out.ids.resize(count);
  out.maps.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.ids[i] = r.u64();
    out.maps[i].reserve(static_cast<std::size_t>(out.k));
    for (int k = 0; k < out.k; ++k) {
      Tensor<real> m(out.channels == 1 ? std::vector<int>{out.h, out.w}
                                       : std::vector<int>{out.channels, out.h, out.w});
      r.bytes(m.data(), plane * static_cast<std::size_t>(out.channels) * sizeof(real));
      out.maps[i].push_back(std::move(m));
    }
  }
  if (!r.at_eof()) throw IoError("trailing bytes after cam dump payload", r.pos());
  return out;
}

}  // namespace eqcm
