#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqcm/graph.hpp"
#include "eqcm/rng.hpp"
#include "eqcm/tensor.hpp"
#include "eqcm/transforms.hpp"

namespace eqcm {

struct ConvLayerSpec {
  int out_channels = 0;
  int kernel = 3;
  int padding = 1;
  bool relu = true;
};

// Plain convolutional classifier: stride-1 convs only, so the class maps
// keep the input resolution and need no upsampling before the map losses.
struct ArchDescriptor {
  int in_channels = 1;
  int num_classes = 2;
  std::vector<ConvLayerSpec> layers;

  // 3 conv blocks (3x3, relu, padding 1; widths 8 -> 16 -> 16) followed by a
  // 1x1 conv to num_classes channels.
  static ArchDescriptor classifier(int in_channels = 1, int num_classes = 2) {
    ArchDescriptor d;
    d.in_channels = in_channels;
    d.num_classes = num_classes;
    d.layers = {{8, 3, 1, true}, {16, 3, 1, true}, {16, 3, 1, true}, {num_classes, 1, 0, false}};
    return d;
  }

  void validate() const {
    require(num_classes >= 2, "architecture: need at least 2 classes");
    require(!layers.empty(), "architecture: need at least one layer");
    require(layers.back().out_channels == num_classes,
            "architecture: final layer must emit one channel per class");
    for (const auto& l : layers) {
      require(l.out_channels >= 1, "architecture: nonpositive width");
      require(l.kernel % 2 == 1 && l.kernel >= 1, "architecture: kernels must be odd");
    }
  }

  int receptive_radius() const {
    int r = 0;
    for (const auto& l : layers) r += l.kernel / 2;
    return r;
  }
};

// Parameters of one per-modality classifier. Tensor order is
// conv0.weight, conv0.bias, conv1.weight, ... matching the layer list.
struct NetworkState {
  int modality = 0;
  ArchDescriptor arch;
  std::vector<std::pair<std::string, Tensor<real>>> params;

  const Tensor<real>& tensor(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw std::invalid_argument("network: no tensor named " + name);
  }
};

// Kaiming fan-in normal kernels, zero biases; deterministic from the seed,
// which callers offset by the modality index to decorrelate the K networks.
NetworkState init_params(std::uint64_t seed, const ArchDescriptor& arch, int modality = 0);

// ---- graph builders (templated so gradient checking can run in double) ----

template <typename T>
struct ForwardNodes {
  NodeId features = -1;  // final conv output: one class map per class
  NodeId logits = -1;    // global average pool of the class maps
  NodeId probs = -1;     // row softmax
};

template <typename T>
ForwardNodes<T> forward_network(Graph<T>& g, const std::vector<NodeId>& param_ids,
                                const ArchDescriptor& arch, NodeId input) {
  require(param_ids.size() == 2 * arch.layers.size(),
          "forward: parameter count does not match architecture");
  NodeId x = input;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    x = g.conv2d(x, param_ids[2 * i], param_ids[2 * i + 1], arch.layers[i].padding);
    if (arch.layers[i].relu) x = g.relu(x);
  }
  ForwardNodes<T> out;
  out.features = x;
  out.logits = g.global_avg_pool(x);
  out.probs = g.softmax_rows(out.logits);
  return out;
}

// Single-step CAM: the final conv's class maps, background channel dropped,
// relu then per-class spatial max-normalization into [0, 1].
template <typename T>
NodeId cam_from_features_node(Graph<T>& g, NodeId features, int num_classes,
                              double eps = 1e-8) {
  NodeId fg = g.slice_channels(features, 1, num_classes);
  return g.spatial_max_normalize(g.relu(fg), eps);
}

template <typename T>
struct SiameseNodes {
  ForwardNodes<T> plain;        // branch over x
  ForwardNodes<T> transformed;  // branch over pi(x), same weights
  NodeId cam = -1;              // M
  NodeId cam_t = -1;            // CAM of the transformed branch
};

// Two weight-shared branches over (x, pi(x)); gradients flow through both.
template <typename T>
SiameseNodes<T> siamese_step(Graph<T>& g, const std::vector<NodeId>& param_ids,
                             const ArchDescriptor& arch, NodeId input,
                             const AffineTransform& pi) {
  SiameseNodes<T> out;
  out.plain = forward_network(g, param_ids, arch, input);
  out.transformed = forward_network(g, param_ids, arch, g.warp(input, pi));
  out.cam = cam_from_features_node(g, out.plain.features, arch.num_classes);
  out.cam_t = cam_from_features_node(g, out.transformed.features, arch.num_classes);
  return out;
}

// ---- non-graph conveniences for evaluation ----

struct ForwardResult {
  Tensor<real> features, logits, probs;
};

// Runs the same graph routine without gradients.
ForwardResult forward(const NetworkState& net, const Tensor<real>& x);

Tensor<real> cam_from_features(const Tensor<real>& features, int num_classes);

// ---- checkpoint container ----
// Wire format: magic "EQCMCKP1", u32 version, u32 network count, then per
// network: u32 modality id, u32 tensor count, per tensor: u32 name length +
// UTF-8 name, u32 rank, extents as u32, values as little-endian f32.

struct TensorRecord {
  std::string name;
  Tensor<real> t;
};

struct NetworkRecord {
  std::uint32_t modality = 0;
  std::vector<TensorRecord> tensors;
};

void write_checkpoint(const std::string& path, const std::vector<NetworkRecord>& nets);
std::vector<NetworkRecord> read_checkpoint(const std::string& path);

// Conversion to/from records; loading validates every tensor against the
// architecture implied by the record and names the first mismatch.
NetworkRecord to_record(const NetworkState& net);
NetworkState network_from_record(const NetworkRecord& rec);

void save_networks(const std::string& path, const std::vector<NetworkState>& nets);
std::vector<NetworkState> load_networks(const std::string& path);

}  // namespace eqcm
