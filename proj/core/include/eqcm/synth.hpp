#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eqcm/tensor.hpp"

namespace eqcm {

// Co-registered per-modality images of one latent scene, plus the one-hot
// image-level label. The pixel mask is ground truth for evaluation only; the
// training losses never see it except in the fully supervised mode.
struct ModalitySample {
  std::uint64_t id = 0;
  int h = 0, w = 0;
  std::vector<Tensor<real>> images;   // K grids [H, W], values in [0, 1]
  std::vector<real> label;            // one-hot, length C; index 0 = healthy
  std::vector<std::uint8_t> gt_mask;  // H*W, lesion support

  bool lesion_present() const { return label.size() > 1 && label[1] == real(1); }
  std::size_t mask_area() const {
    std::size_t n = 0;
    for (auto b : gt_mask) n += b;
    return n;
  }
};

// How one modality renders the latent scene: three monotone intensity levels
// (monotone increasing or decreasing in the latent tissue intensity) plus
// additive Gaussian noise.
struct ModalityProfile {
  double background = 0.0;
  double organ = 0.0;
  double lesion = 0.0;
  double noise_sigma = 0.0;
};

struct DatasetSpec {
  int n_train = 512;
  int n_val = 128;
  int n_test = 128;
  int height = 32;
  int width = 32;
  int modalities = 2;  // K in [2, 4]
  double lesion_prevalence = 0.5;
  std::vector<ModalityProfile> profiles;  // empty -> defaults for K
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<ModalityProfile> resolved_profiles() const;
};

// Modality 1 renders the lesion brighter than the organ at high contrast,
// modality 2 darker at low contrast; further modalities interpolate.
std::vector<ModalityProfile> default_profiles(int k);

struct Dataset {
  int k = 0, c = 2, h = 0, w = 0;
  std::vector<ModalitySample> train, val, test;
};

// Each sample is built from one shared latent scene: an elliptical organ and,
// with the configured prevalence, an elliptical lesion covering 2-15% of the
// organ area. All K modalities render the same scene, so the lesion support
// is identical across them. Fully reproducible from the seed.
Dataset generate(const DatasetSpec& spec);

// Container format: magic "EQCMDAT1", u32 version, u32 K, u32 C, u32 H,
// u32 W, u64 sample count, then per sample: u64 id, C x f32 label,
// H*W x u8 mask, K x H*W x f32 images. Little-endian throughout.
void save_dataset(const std::vector<ModalitySample>& samples, int k, int c,
                  const std::string& path);

struct DatasetFile {
  int k = 0, c = 0, h = 0, w = 0;
  std::vector<ModalitySample> samples;
};

DatasetFile load_dataset(const std::string& path);

std::uint64_t dataset_digest(const std::vector<ModalitySample>& samples);

}  // namespace eqcm
