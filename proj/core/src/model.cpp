#include "eqcm/model.hpp"

#include <cmath>

#include "eqcm/io.hpp"

namespace eqcm {

NetworkState init_params(std::uint64_t seed, const ArchDescriptor& arch, int modality) {
  arch.validate();
  Rng rng(seed + static_cast<std::uint64_t>(modality));
  NetworkState net;
  net.modality = modality;
  net.arch = arch;
  int cin = arch.in_channels;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    Tensor<real> w({l.out_channels, cin, l.kernel, l.kernel});
    const double fan_in = static_cast<double>(cin) * l.kernel * l.kernel;
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& x : w.v) x = static_cast<real>(stddev * rng.normal());
    Tensor<real> b({l.out_channels});
    const std::string base = "conv" + std::to_string(i);
    net.params.emplace_back(base + ".weight", std::move(w));
    net.params.emplace_back(base + ".bias", std::move(b));
    cin = l.out_channels;
  }
  return net;
}

ForwardResult forward(const NetworkState& net, const Tensor<real>& x) {
  Graph<real> g;
  std::vector<NodeId> ids;
  ids.reserve(net.params.size());
  for (const auto& [name, t] : net.params) ids.push_back(g.leaf(t, false));
  const auto nodes = forward_network(g, ids, net.arch, g.leaf(x, false));
  return {g.value(nodes.features), g.value(nodes.logits), g.value(nodes.probs)};
}

Tensor<real> cam_from_features(const Tensor<real>& features, int num_classes) {
  Graph<real> g;
  return g.value(cam_from_features_node(g, g.leaf(features, false), num_classes));
}

static const char kCheckpointMagic[9] = "EQCMCKP1";

void write_checkpoint(const std::string& path, const std::vector<NetworkRecord>& nets) {
  BinWriter w(path);
  w.magic(kCheckpointMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(nets.size()));
  for (const auto& net : nets) {
    w.u32(net.modality);
    w.u32(static_cast<std::uint32_t>(net.tensors.size()));
    for (const auto& rec : net.tensors) {
      w.str(rec.name);
      w.u32(static_cast<std::uint32_t>(rec.t.rank()));
      for (int d : rec.t.shape) w.u32(static_cast<std::uint32_t>(d));
      for (real x : rec.t.v) w.f32(x);
    }
  }
  w.close();
}

std::vector<NetworkRecord> read_checkpoint(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version), r.pos() - 4);
  const std::uint32_t count = r.u32();
  if (count > 64) throw IoError("implausible network count", r.pos() - 4);
  std::vector<NetworkRecord> nets(count);
  for (auto& net : nets) {
    net.modality = r.u32();
    const std::uint32_t tc = r.u32();
    if (tc > 4096) throw IoError("implausible tensor count", r.pos() - 4);
    net.tensors.resize(tc);
    for (auto& rec : net.tensors) {
      rec.name = r.str(4096);
      const std::uint32_t rank = r.u32();
      if (rank == 0 || rank > 8) throw IoError("implausible tensor rank", r.pos() - 4);
      std::vector<int> shape(rank);
      std::size_t n = 1;
      for (auto& d : shape) {
        const std::uint32_t e = r.u32();
        if (e == 0 || e > (1u << 24)) throw IoError("tensor extent out of range", r.pos() - 4);
        d = static_cast<int>(e);
        n *= e;
        if (n > (1u << 28)) throw IoError("tensor too large", r.pos() - 4);
      }
      rec.t = Tensor<real>(shape);
      r.bytes(rec.t.data(), n * sizeof(real));
    }
  }
  if (!r.at_eof()) throw IoError("trailing bytes after checkpoint payload", r.pos());
  return nets;
}

NetworkRecord to_record(const NetworkState& net) {
  NetworkRecord rec;
  rec.modality = static_cast<std::uint32_t>(net.modality);
  for (const auto& [name, t] : net.params) rec.tensors.push_back({name, t});
  return rec;
}

// Rebuilds the architecture from the stored conv shapes: padding kernel/2,
// relu on all but the final layer.
NetworkState network_from_record(const NetworkRecord& rec) {
  NetworkState net;
  net.modality = static_cast<int>(rec.modality);
  ArchDescriptor arch;
  arch.layers.clear();

  std::vector<const TensorRecord*> weights, biases;
  for (const auto& t : rec.tensors) {
    if (t.name.rfind("conv", 0) != 0) continue;  // optimizer/meta tensors live alongside
    if (t.name.size() > 7 && t.name.substr(t.name.size() - 7) == ".weight") weights.push_back(&t);
    else if (t.name.size() > 5 && t.name.substr(t.name.size() - 5) == ".bias") biases.push_back(&t);
  }
  if (weights.empty() || weights.size() != biases.size())
    throw std::invalid_argument("checkpoint: malformed parameter list");

  int cin = -1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const std::string base = "conv" + std::to_string(i);
    const TensorRecord* w = nullptr;
    const TensorRecord* b = nullptr;
    for (auto* t : weights)
      if (t->name == base + ".weight") w = t;
    for (auto* t : biases)
      if (t->name == base + ".bias") b = t;
    if (!w || !b) throw std::invalid_argument("checkpoint: missing tensors for layer " + base);
    if (w->t.rank() != 4 || w->t.dim(2) != w->t.dim(3))
      throw std::invalid_argument("checkpoint: mismatched tensor " + w->name + " with shape " +
                                  w->t.shape_str());
    if (b->t.rank() != 1 || b->t.dim(0) != w->t.dim(0))
      throw std::invalid_argument("checkpoint: mismatched tensor " + b->name + " with shape " +
                                  b->t.shape_str() + " against kernel " + w->t.shape_str());
    if (cin >= 0 && w->t.dim(1) != cin)
      throw std::invalid_argument("checkpoint: mismatched tensor " + w->name + ": expected " +
                                  std::to_string(cin) + " input channels, got " +
                                  std::to_string(w->t.dim(1)));
    if (cin < 0) arch.in_channels = w->t.dim(1);
    const int k = w->t.dim(2);
    arch.layers.push_back({w->t.dim(0), k, k / 2, i + 1 < weights.size()});
    cin = w->t.dim(0);
    net.params.emplace_back(w->name, w->t);
    net.params.emplace_back(b->name, b->t);
  }
  arch.num_classes = cin;
  arch.validate();
  net.arch = arch;
  return net;
}

void save_networks(const std::string& path, const std::vector<NetworkState>& nets) {
  std::vector<NetworkRecord> recs;
  recs.reserve(nets.size());
  for (const auto& n : nets) recs.push_back(to_record(n));
  write_checkpoint(path, recs);
}

std::vector<NetworkState> load_networks(const std::string& path) {
  std::vector<NetworkState> nets;
  for (const auto& rec : read_checkpoint(path)) nets.push_back(network_from_record(rec));
  return nets;
}

}  // namespace eqcm
