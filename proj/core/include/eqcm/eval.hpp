#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eqcm/model.hpp"
#include "eqcm/synth.hpp"
#include "eqcm/tensor.hpp"

namespace eqcm {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> m;
  double spacing_y = 1.0, spacing_x = 1.0;

  std::size_t area() const {
    std::size_t n = 0;
    for (auto b : m) n += b;
    return n;
  }
  bool empty_mask() const { return area() == 0; }
};

BinaryMask mask_from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w);

// pixel = 1 iff value >= tau (ties binarize to foreground)
BinaryMask binarize(const Tensor<real>& map, double tau);

// 2|A and B| / (|A| + |B|); both empty -> 1 by convention.
double dsc(const BinaryMask& pred, const BinaryMask& gt);

// Thrown where a metric is undefined on the given operands; callers decide
// the sentinel policy.
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Average symmetric surface distance over boundary pixels (foreground pixels
// with a background 4-neighbor; the image border counts as background).
// Undefined on an empty operand.
double assd(const BinaryMask& pred, const BinaryMask& gt);

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask);

// Pixelwise maximum across modalities.
Tensor<real> fuse_max(const std::vector<Tensor<real>>& maps);

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt);

// (r_u, r_o) = (FN/TP, FP/TP); throws UndefinedMetric when TP == 0.
std::pair<double, double> confusion_ratios(const BinaryMask& pred, const BinaryMask& gt);

struct SweepPoint {
  double tau = 0;
  double mean_dsc = 0;
  double std_dsc = 0;
};

std::vector<double> default_sweep_grid();  // 0.05 .. 0.95 step 0.05

// Mean/std DSC over samples at each threshold.
std::vector<SweepPoint> threshold_sweep(const std::vector<Tensor<real>>& maps,
                                        const std::vector<BinaryMask>& gts,
                                        const std::vector<double>& grid);

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& sweep);

struct EvalRow {
  std::string name;  // "modality k" or "fused"
  double dsc_mean = 0, dsc_std = 0;
  double assd_mean = 0, assd_std = 0;
  std::size_t assd_excluded = 0;  // samples where ASSD was undefined
  std::size_t samples = 0;
  bool ratios_defined = false;
  double r_u = 0, r_o = 0;  // pooled over the split
};

struct EvalReport {
  std::vector<EvalRow> rows;  // one per modality, then fused
  std::vector<SweepPoint> sweep;  // on the fused map
  double tau = 0.5;
  std::size_t samples = 0;
};

// Which map the metrics threshold: the max-normalized CAM (weak models) or
// the per-pixel softmax foreground probability (the fully supervised bound).
enum class MapSource { cam, softmax_fg };

// Per-sample foreground maps for one checkpointed network set:
// out[sample][modality] is an [H, W] grid in [0, 1].
std::vector<std::vector<Tensor<real>>> predict_maps(const std::vector<NetworkState>& nets,
                                                    const std::vector<ModalitySample>& split,
                                                    MapSource source = MapSource::cam);

EvalReport evaluate(const std::vector<NetworkState>& nets,
                    const std::vector<ModalitySample>& split, double tau,
                    const std::vector<double>& sweep_grid = default_sweep_grid(),
                    MapSource source = MapSource::cam,
                    std::vector<std::vector<Tensor<real>>>* maps_out = nullptr);

std::string report_json(const EvalReport& report);
std::string report_text(const EvalReport& report);

// CAM dump container: magic "EQCMCAM1", u32 version, u32 K, u32 channels,
// u32 H, u32 W, u64 count, then per sample: u64 id, K x channels x H*W f32.
void save_cam_dump(const std::string& path, const std::vector<ModalitySample>& split,
                   const std::vector<std::vector<Tensor<real>>>& maps);
struct CamDump {
  int k = 0, channels = 0, h = 0, w = 0;
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<Tensor<real>>> maps;  // [sample][modality] -> [H, W]
};
CamDump load_cam_dump(const std::string& path);

}  // namespace eqcm
