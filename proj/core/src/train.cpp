#include "eqcm/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "eqcm/rng.hpp"

namespace eqcm {

void adamw_step(std::vector<std::pair<std::string, Tensor<real>>>& params,
                const std::vector<Tensor<real>>& grads, OptimizerState& opt, double lr,
                double wd, double beta1, double beta2, double eps) {
  require(grads.size() == params.size(), "adamw: gradient list does not match parameters");
  if (opt.m.empty()) {
    for (const auto& [name, t] : params) {
      opt.m.emplace_back(t.shape);
      opt.v.emplace_back(t.shape);
    }
  }
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, theta] = params[i];
    const Tensor<real>& g = grads[i];
    require(g.same_shape(theta), "adamw: gradient shape mismatch for " + name);
    Tensor<real>& m = opt.m[i];
    Tensor<real>& v = opt.v[i];
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double gj = g.v[j];
      if (!std::isfinite(gj))
        throw std::runtime_error("adamw: non-finite gradient in tensor " + name);
      const double mj = beta1 * m.v[j] + (1.0 - beta1) * gj;
      const double vj = beta2 * v.v[j] + (1.0 - beta2) * gj * gj;
      m.v[j] = static_cast<real>(mj);
      v.v[j] = static_cast<real>(vj);
      const double m_hat = mj / bc1;
      const double v_hat = vj / bc2;
      theta.v[j] = static_cast<real>(
          theta.v[j] - lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * theta.v[j]));
    }
  }
}

namespace {

constexpr std::uint64_t kShuffleTag = 0x5348554646ull;
constexpr std::uint64_t kTransformTag = 0x5452414e53ull;
constexpr std::uint64_t kParamTag = 0x504152414dull;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(splitmix64(splitmix64(seed ^ kShuffleTag) + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Stacks one modality of a minibatch into [B, 1, H, W].
Tensor<real> stack_images(const Dataset& data, const std::vector<ModalitySample>& split,
                          const std::vector<std::size_t>& order, std::size_t begin,
                          std::size_t end, int modality) {
  const int B = static_cast<int>(end - begin);
  Tensor<real> x({B, 1, data.h, data.w});
  const std::size_t plane = static_cast<std::size_t>(data.h) * data.w;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& img = split[order[i]].images[static_cast<std::size_t>(modality)];
    std::copy_n(img.data(), plane, x.data() + (i - begin) * plane);
  }
  return x;
}

Tensor<real> stack_labels(const std::vector<ModalitySample>& split,
                          const std::vector<std::size_t>& order, std::size_t begin,
                          std::size_t end, int c) {
  const int B = static_cast<int>(end - begin);
  Tensor<real> y({B, c});
  for (std::size_t i = begin; i < end; ++i)
    for (int j = 0; j < c; ++j)
      y.v[(i - begin) * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)] =
          split[order[i]].label[static_cast<std::size_t>(j)];
  return y;
}

// [B, C, H, W] one-hot of the ground-truth masks (class 1 = lesion).
Tensor<real> stack_mask_one_hot(const std::vector<ModalitySample>& split,
                                const std::vector<std::size_t>& order, std::size_t begin,
                                std::size_t end, int h, int w) {
  const int B = static_cast<int>(end - begin);
  Tensor<real> y({B, 2, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& m = split[order[i]].gt_mask;
    real* bg = y.data() + (i - begin) * 2 * plane;
    real* fg = bg + plane;
    for (std::size_t p = 0; p < plane; ++p) {
      fg[p] = static_cast<real>(m[p]);
      bg[p] = static_cast<real>(1 - m[p]);
    }
  }
  return y;
}

void maybe_checkpoint(const TrainConfig& config, const std::vector<NetworkState>& nets,
                      const std::vector<OptimizerState>& opts, int epoch, bool final_epoch) {
  if (config.out_dir.empty()) return;
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(config.out_dir) / "checkpoints";
  fs::create_directories(dir);
  if (config.checkpoint_every > 0 && (epoch % config.checkpoint_every == 0 || final_epoch)) {
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
    save_checkpoint((dir / name.str()).string(), nets, &opts, epoch);
  }
  if (final_epoch) save_checkpoint((dir / "final").string(), nets, &opts, epoch);
}

struct EpochAccumulator {
  std::vector<LossBreakdown> sums;
  int batches = 0;

  void add(const std::vector<LossBreakdown>& bs) {
    if (sums.empty()) sums.resize(bs.size());
    for (std::size_t i = 0; i < bs.size(); ++i) {
      sums[i].l_c += bs[i].l_c;
      sums[i].l_kd += bs[i].l_kd;
      sums[i].l_er += bs[i].l_er;
      sums[i].l_cmer += bs[i].l_cmer;
      sums[i].total += bs[i].total;
    }
    ++batches;
  }

  EpochLogRow row(std::size_t i, int epoch, double lam, double wall) const {
    EpochLogRow r;
    r.epoch = epoch;
    r.modality = static_cast<int>(i);
    r.l_c = sums[i].l_c / batches;
    r.l_kd = sums[i].l_kd / batches;
    r.l_er = sums[i].l_er / batches;
    r.l_cmer = sums[i].l_cmer / batches;
    r.total = sums[i].total / batches;
    r.lambda_e = lam;
    r.wall_seconds = wall;
    return r;
  }
};

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const Checkpoint* resume) {
  config.validate();
  require(config.mode == TrainMode::weak, "train: config mode must be weak");
  require(!data.train.empty(), "train: empty dataset");
  const int K = data.k;
  require(K >= 1, "train: need at least one modality");
  require(K >= 2 || !(config.weights.kd || config.weights.cmer),
          "train: KD/CMER toggles require K >= 2");

  TrainResult out;
  int start_epoch = 0;
  if (resume) {
    require(static_cast<int>(resume->nets.size()) == K, "train: resume checkpoint has wrong K");
    require(!resume->opts.empty(), "train: resume checkpoint lacks optimizer state");
    out.nets = resume->nets;
    out.opts = resume->opts;
    start_epoch = resume->epoch + 1;
  } else {
    const std::uint64_t pseed = splitmix64(config.seed ^ kParamTag);
    const auto arch = ArchDescriptor::classifier(1, data.c);
    for (int k = 0; k < K; ++k) out.nets.push_back(init_params(pseed, arch, k));
    out.opts.resize(static_cast<std::size_t>(K));
  }

  const std::size_t n = data.train.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lam = lambda_e(epoch, config.weights.schedule_T);
    const auto order = epoch_order(n, config.seed, epoch);
    Rng tf_rng(splitmix64(splitmix64(config.seed ^ kTransformTag) +
                          static_cast<std::uint64_t>(epoch)));
    EpochAccumulator acc;

    for (std::size_t begin = 0; begin < n; begin += bs) {
      const std::size_t end = std::min(n, begin + bs);
      const AffineTransform pi = config.transforms.sample(tf_rng, data.h, data.w);
      const ValidityMask mask = validity_mask(pi, data.h, data.w);
      const Tensor<real> y = stack_labels(data.train, order, begin, end, data.c);

      try {
        Graph<real> g;
        std::vector<std::vector<NodeId>> param_ids(static_cast<std::size_t>(K));
        std::vector<BranchOutputs<real>> branches(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k) {
          for (const auto& [name, t] : out.nets[static_cast<std::size_t>(k)].params)
            param_ids[static_cast<std::size_t>(k)].push_back(g.leaf(t, true));
          const NodeId x = g.leaf(stack_images(data, data.train, order, begin, end, k), false);
          const auto s = siamese_step(g, param_ids[static_cast<std::size_t>(k)],
                                      out.nets[static_cast<std::size_t>(k)].arch, x, pi);
          branches[static_cast<std::size_t>(k)] = {s.plain.probs, s.transformed.probs, s.cam,
                                                   s.cam_t};
        }

        // objectives assembled before any update: peer targets in one
        // minibatch come from pre-update parameters for every k
        std::vector<ObjectiveNodes<real>> objectives;
        std::vector<LossBreakdown> bds;
        for (int k = 0; k < K; ++k) {
          objectives.push_back(
              network_objective(g, k, branches, y, config.weights, epoch, pi, mask));
          const auto bd = breakdown_from_nodes(g, objectives.back(), k, epoch);
          if (!std::isfinite(bd.total))
            throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                     ", batch " + std::to_string(begin / bs) + ", modality " +
                                     std::to_string(k));
          bds.push_back(bd);
        }
        acc.add(bds);

        for (int k = 0; k < K; ++k) {
          g.backward(objectives[static_cast<std::size_t>(k)].total);
          std::vector<Tensor<real>> grads;
          grads.reserve(param_ids[static_cast<std::size_t>(k)].size());
          for (NodeId id : param_ids[static_cast<std::size_t>(k)]) grads.push_back(g.grad(id));
          adamw_step(out.nets[static_cast<std::size_t>(k)].params, grads,
                     out.opts[static_cast<std::size_t>(k)], config.lr, config.weight_decay,
                     config.beta1, config.beta2, config.adam_eps);
        }
      } catch (const std::runtime_error&) {
        throw;  // already carries epoch/batch or tensor context
      } catch (const std::exception& e) {
        // divergence can surface as a precondition failure deep in the loss
        // stack; pin it to the step where it happened
        throw std::runtime_error("train: failure at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(begin / bs) + ": " + e.what());
      }
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (int k = 0; k < K; ++k)
      out.log.push_back(acc.row(static_cast<std::size_t>(k), epoch, lam, wall));
    out.epochs_done = epoch + 1;
    maybe_checkpoint(config, out.nets, out.opts, epoch, epoch + 1 == config.epochs);
  }

  if (!config.out_dir.empty())
    write_train_log((std::filesystem::path(config.out_dir) / "train_log.csv").string(), out.log);
  return out;
}

TrainResult train_fully_supervised(const TrainConfig& config, const Dataset& data,
                                   const Checkpoint* resume) {
  config.validate();
  require(config.mode == TrainMode::fully_supervised,
          "train_fully_supervised: config mode must be fully_supervised");
  require(!data.train.empty(), "train: empty dataset");
  const int K = data.k;

  TrainResult out;
  int start_epoch = 0;
  if (resume) {
    require(static_cast<int>(resume->nets.size()) == K, "train: resume checkpoint has wrong K");
    out.nets = resume->nets;
    out.opts = resume->opts;
    start_epoch = resume->epoch + 1;
  } else {
    const std::uint64_t pseed = splitmix64(config.seed ^ kParamTag);
    const auto arch = ArchDescriptor::classifier(1, data.c);
    for (int k = 0; k < K; ++k) out.nets.push_back(init_params(pseed, arch, k));
    out.opts.resize(static_cast<std::size_t>(K));
  }

  const std::size_t n = data.train.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, config.seed, epoch);
    EpochAccumulator acc;

    for (std::size_t begin = 0; begin < n; begin += bs) {
      const std::size_t end = std::min(n, begin + bs);
      const Tensor<real> gt = stack_mask_one_hot(data.train, order, begin, end, data.h, data.w);
      std::vector<LossBreakdown> bds;

      for (int k = 0; k < K; ++k) {
        Graph<real> g;
        std::vector<NodeId> ids;
        for (const auto& [name, t] : out.nets[static_cast<std::size_t>(k)].params)
          ids.push_back(g.leaf(t, true));
        const NodeId x = g.leaf(stack_images(data, data.train, order, begin, end, k), false);
        const auto f = forward_network(g, ids, out.nets[static_cast<std::size_t>(k)].arch, x);
        const NodeId total = supervised_loss(g, f.features, gt).total;
        const double tv = g.value(total).v[0];
        if (!std::isfinite(tv))
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(begin / bs) + ", modality " +
                                   std::to_string(k));
        LossBreakdown bd;
        bd.modality = k;
        bd.epoch = epoch;
        bd.l_c = tv;
        bd.total = tv;
        bds.push_back(bd);

        g.backward(total);
        std::vector<Tensor<real>> grads;
        for (NodeId id : ids) grads.push_back(g.grad(id));
        adamw_step(out.nets[static_cast<std::size_t>(k)].params, grads,
                   out.opts[static_cast<std::size_t>(k)], config.lr, config.weight_decay,
                   config.beta1, config.beta2, config.adam_eps);
      }
      acc.add(bds);
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (int k = 0; k < K; ++k)
      out.log.push_back(acc.row(static_cast<std::size_t>(k), epoch, 0.0, wall));
    out.epochs_done = epoch + 1;
    maybe_checkpoint(config, out.nets, out.opts, epoch, epoch + 1 == config.epochs);
  }

  if (!config.out_dir.empty())
    write_train_log((std::filesystem::path(config.out_dir) / "train_log.csv").string(), out.log);
  return out;
}

SupervisedLossNodes supervised_loss(Graph<real>& g, NodeId features,
                                    const Tensor<real>& gt_one_hot, double eps) {
  const Tensor<real>& fv = g.value(features);
  require(fv.rank() == 4 && fv.dim(1) == 2, "supervised_loss: expected [N,2,H,W] class maps");
  require(fv.same_shape(gt_one_hot), "supervised_loss: mask one-hot shape mismatch");
  const NodeId probs = g.softmax_channels(features);
  const NodeId gt_leaf = g.leaf(gt_one_hot, false);

  SupervisedLossNodes out;
  const NodeId fg = g.slice_channels(probs, 1, 2);
  const NodeId gt_fg = g.slice_channels(gt_leaf, 1, 2);
  const NodeId inter = g.sum(g.mul(fg, gt_fg));
  const NodeId sums = g.add(g.sum(fg), g.sum(gt_fg));
  const NodeId eps_leaf = g.leaf(Tensor<real>({1}, {static_cast<real>(eps)}), false);
  const NodeId one_leaf = g.leaf(Tensor<real>({1}, {real(1)}), false);
  out.dice =
      g.sub(one_leaf, g.div(g.add(g.scale(inter, 2.0), eps_leaf), g.add(sums, eps_leaf)));

  const std::size_t px = gt_one_hot.numel() / 2;
  out.ce = g.scale(g.sum(g.mul(gt_leaf, g.log_clamped(probs))), -1.0 / static_cast<double>(px));
  out.total = g.add(out.dice, out.ce);
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<NetworkState>& nets,
                     const std::vector<OptimizerState>* opts, int epoch) {
  require(!path.empty(), "save_checkpoint: empty path");
  if (opts)
    require(opts->size() == nets.size(), "save_checkpoint: optimizer list does not match nets");
  std::vector<NetworkRecord> recs;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    NetworkRecord rec = to_record(nets[i]);
    if (opts) {
      const OptimizerState& o = (*opts)[i];
      for (std::size_t j = 0; j < o.m.size(); ++j) {
        rec.tensors.push_back({"opt.m." + nets[i].params[j].first, o.m[j]});
        rec.tensors.push_back({"opt.v." + nets[i].params[j].first, o.v[j]});
      }
      // exact in f32 up to 2^24 steps, far beyond desk scale
      rec.tensors.push_back({"opt.step", Tensor<real>({1}, {static_cast<real>(o.step)})});
    }
    if (epoch >= 0)
      rec.tensors.push_back({"meta.epoch", Tensor<real>({1}, {static_cast<real>(epoch)})});
    recs.push_back(std::move(rec));
  }
  write_checkpoint(path, recs);
}

Checkpoint load_checkpoint(const std::string& path) {
  require(!path.empty(), "load_checkpoint: empty path");
  Checkpoint out;
  const auto recs = read_checkpoint(path);
  for (const auto& rec : recs) {
    NetworkState net = network_from_record(rec);
    OptimizerState opt;
    bool has_opt = false;
    for (const auto& [pname, pt] : net.params) {
      const TensorRecord* m = nullptr;
      const TensorRecord* v = nullptr;
      for (const auto& t : rec.tensors) {
        if (t.name == "opt.m." + pname) m = &t;
        if (t.name == "opt.v." + pname) v = &t;
      }
      if (m && v) {
        require(m->t.same_shape(pt) && v->t.same_shape(pt),
                "checkpoint: mismatched tensor opt moments for " + pname);
        opt.m.push_back(m->t);
        opt.v.push_back(v->t);
        has_opt = true;
      }
    }
    for (const auto& t : rec.tensors) {
      if (t.name == "opt.step") opt.step = static_cast<std::int64_t>(t.t.v[0]);
      if (t.name == "meta.epoch") out.epoch = static_cast<int>(t.t.v[0]);
    }
    if (has_opt)
      require(opt.m.size() == net.params.size(), "checkpoint: incomplete optimizer state");
    else
      opt = OptimizerState{};
    out.nets.push_back(std::move(net));
    out.opts.push_back(std::move(opt));
  }
  bool any_opt = false;
  for (const auto& o : out.opts) any_opt = any_opt || !o.m.empty();
  if (!any_opt) out.opts.clear();
  return out;
}

void write_train_log(const std::string& path, const std::vector<EpochLogRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write training log: " + path);
  f << "epoch,modality,L_C,L_KD,L_ER,L_CMER,total,lambda_e,wall_seconds\n";
  f << std::setprecision(9);
  for (const auto& r : rows)
    f << r.epoch << ',' << r.modality << ',' << r.l_c << ',' << r.l_kd << ',' << r.l_er << ','
      << r.l_cmer << ',' << r.total << ',' << r.lambda_e << ',' << r.wall_seconds << '\n';
}

}  // namespace eqcm
