#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eqcm/losses.hpp"
#include "eqcm/model.hpp"
#include "eqcm/synth.hpp"
#include "eqcm/tensor.hpp"
#include "eqcm/transforms.hpp"

namespace eqcm {

enum class TrainMode { weak, fully_supervised };

struct TrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double lr = 5e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  TransformSampler transforms;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::weak;

  // Optional run directory; when set, per-epoch checkpoints land in
  // <out_dir>/checkpoints and the log in <out_dir>/train_log.csv.
  std::string out_dir;
  int checkpoint_every = 1;

  void validate() const {
    require(epochs >= 1, "train config: epochs must be >= 1");
    require(batch_size >= 1, "train config: batch size must be >= 1");
    require(lr > 0.0, "train config: learning rate must be > 0");
    require(weight_decay >= 0.0, "train config: weight decay must be >= 0");
    weights.validate();
  }
};

struct OptimizerState {
  std::vector<Tensor<real>> m;  // first moments, parallel to the parameter list
  std::vector<Tensor<real>> v;  // second moments
  std::int64_t step = 0;
};

// Decoupled-weight-decay Adam:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta )
// Aborts on a non-finite gradient, naming the offending tensor.
void adamw_step(std::vector<std::pair<std::string, Tensor<real>>>& params,
                const std::vector<Tensor<real>>& grads, OptimizerState& opt, double lr,
                double wd, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// One row of the training log, the per-epoch mean of the loss breakdown.
struct EpochLogRow {
  int epoch = 0;
  int modality = 0;
  double l_c = 0, l_kd = 0, l_er = 0, l_cmer = 0, total = 0;
  double lambda_e = 0;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<NetworkState> nets;
  std::vector<OptimizerState> opts;
  std::vector<EpochLogRow> log;
  int epochs_done = 0;
};

struct Checkpoint {
  std::vector<NetworkState> nets;
  std::vector<OptimizerState> opts;  // empty when the file has no optimizer tensors
  int epoch = -1;                    // last completed epoch, -1 if absent
};

// Resumable checkpoint: the EQCMCKP1 container with optimizer moments and
// step counter stored as extra named tensors per network.
void save_checkpoint(const std::string& path, const std::vector<NetworkState>& nets,
                     const std::vector<OptimizerState>* opts = nullptr, int epoch = -1);
Checkpoint load_checkpoint(const std::string& path);

// Algorithm: per minibatch draw one transform shared by every sample,
// modality and branch; run all K siamese forwards; then per network assemble
// the objective with detached peers, backprop, and update. Single-threaded
// and bit-deterministic for a fixed seed.
TrainResult train(const TrainConfig& config, const Dataset& data,
                  const Checkpoint* resume = nullptr);

struct SupervisedLossNodes {
  NodeId total = -1;
  NodeId dice = -1;  // batch-pooled soft Dice on the foreground channel
  NodeId ce = -1;    // pixelwise cross-entropy over the per-pixel softmax
};

// Full-supervision objective over the class maps: 1 - (2*sum(p_fg*g_fg)+eps)
// / (sum(p_fg)+sum(g_fg)+eps) plus the mean pixel CE against the mask.
SupervisedLossNodes supervised_loss(Graph<real>& g, NodeId features,
                                    const Tensor<real>& gt_one_hot, double eps = 1e-8);

// Upper bound: per-modality networks trained on the ground-truth masks with
// soft-Dice + pixelwise cross-entropy over the per-pixel class softmax.
TrainResult train_fully_supervised(const TrainConfig& config, const Dataset& data,
                                   const Checkpoint* resume = nullptr);

void write_train_log(const std::string& path, const std::vector<EpochLogRow>& rows);

}  // namespace eqcm
