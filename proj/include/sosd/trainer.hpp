#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sosd/augment.hpp"
#include "sosd/graph.hpp"
#include "sosd/model.hpp"
#include "sosd/optimizer.hpp"
#include "sosd/scene.hpp"

namespace sosd {

enum class Schedule { Em, Joint };

std::string schedule_name(Schedule s);
Schedule schedule_from_name(const std::string& name);

struct TrainConfig {
  Schedule schedule = Schedule::Em;
  std::int64_t epochs = 1;
  // 0 derives epochs * steps_per_epoch; otherwise a hard step budget, which
  // is what gives ablation rows identical optimizer budgets.
  std::int64_t total_steps = 0;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Per-stream gradient weights of the backbone merge, applied to the three
  // streams entering the active phase's fusion unit in the order
  // {task feature, common representation, opposite-task feature}.
  std::array<double, 3> branch_weights{1.0, 1.0, 1.0};
  // Joint-schedule objective: w_s * L_semantic + w_d * L_depth.
  double loss_weight_semantic = 1.0;
  double loss_weight_depth = 1.0;
  // Flip the em phase once per epoch instead of once per batch.
  bool flip_per_epoch = false;
  // Evaluate batch norm with running statistics while its owning branch is
  // frozen (default trains stats through, with frozen affine parameters).
  bool frozen_bn_eval = false;
  bool augment_enabled = false;
  AugmentConfig augment;
  std::int64_t checkpoint_every = 0;  // steps between checkpoints; 0 = final only
  int ignore_id = 255;
  std::uint64_t seed = 0;

  AdamConfig adam() const { return AdamConfig{learning_rate, beta1, beta2, adam_eps}; }
  void validate(Variant variant) const;
};

// Alternation bookkeeping. phase 0 trains the depth side, 1 the semantic
// side; the phase flips after every outer iteration, and outer_iteration
// counts completed (depth, semantic) pairs.
struct EMState {
  int phase = 0;
  std::int64_t outer_iteration = 0;
  std::int64_t depth_steps = 0;
  std::int64_t semantic_steps = 0;
};

struct LossRecord {
  std::int64_t step = 0;
  int phase = -1;  // phase that took the gradient step; -1 = joint
  double loss_semantic = 0.0;
  double loss_depth = 0.0;
  std::int64_t valid_n = 0;  // depth-loss pixel count
  double wall_ms = 0.0;
  bool semantic_all_ignored = false;
  bool depth_all_ignored = false;
};

// Mini-batch in network layout. labels carry ignore_id where the scene had
// no supervision (holes stay in the depth mask instead).
struct Batch {
  Tensor image;   // N x 3 x H x W
  Tensor depth;   // N x 1 x H x W
  Tensor mask;    // N x 1 x H x W
  std::vector<int> labels;  // N*H*W row-major
};

Batch make_batch(const std::vector<const SyntheticScene*>& scenes, int ignore_id);

// Loss wrappers over the graph ops (Eq. 6 / Eq. 7 shapes).
Tensor cross_entropy_loss(Graph& g, Tensor logits, const std::vector<int>& labels, int ignore_id,
                          LossStats* stats = nullptr);
Tensor l1_depth_loss(Graph& g, Tensor pred, Tensor gt, Tensor mask, LossStats* stats = nullptr);

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);

  // One alternating step: forward both tasks, backward the phase loss, Adam
  // step on the phase's exclusive groups (branch update) and on the common
  // group (backbone merge), then flip the phase unless told not to.
  LossRecord em_step(const Batch& batch, bool flip_phase = true);

  // One step on the weighted-sum objective over every live group.
  LossRecord joint_step(const Batch& batch);

  // Dispatches on cfg.schedule.
  LossRecord train_step(const Batch& batch);

  EMState& em_state() { return em_state_; }
  const EMState& em_state() const { return em_state_; }
  Adam& optimizer() { return adam_; }
  Model& model() { return model_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

 private:
  struct ForwardLosses {
    Tensor semantic;
    Tensor depth;
    LossStats semantic_stats;
    LossStats depth_stats;
  };
  ForwardLosses forward_losses(Graph& g, const Batch& batch, const ForwardOptions& opts);
  void zero_all_grads();

  Model& model_;
  TrainConfig cfg_;
  Adam adam_;
  EMState em_state_;
  std::int64_t step_ = 0;
};

// Epoch driver used by run_training and the alternation tests: iterates the
// shuffled batches of one epoch, stepping the trainer on each.
std::vector<LossRecord> em_epoch(Trainer& trainer, const Dataset& data, std::int64_t epoch_index,
                                 const TrainConfig& cfg);

struct TrainResult {
  std::int64_t final_step = 0;
  std::vector<LossRecord> records;  // this invocation's records only
  std::filesystem::path final_checkpoint;
};

// Full driver: builds batches from shuffle substream (seed, epoch), applies
// augmentation substream (seed, step), logs one JSON line per step to
// <out>/train_log.jsonl, checkpoints under <out>/checkpoints/step-<n>, and
// resumes from the newest checkpoint in <out> when one exists. A non-finite
// loss writes a diagnostic record and throws RuntimeFault.
TrainResult run_training(Model& model, const Dataset& train, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir);

}  // namespace sosd
