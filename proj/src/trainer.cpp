#include "sosd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <utility>

#include "json.hpp"
#include "sosd/checkpoint.hpp"
#include "sosd/errors.hpp"

namespace sosd {

using nlohmann::json;

std::string schedule_name(Schedule s) { return s == Schedule::Em ? "em" : "joint"; }

Schedule schedule_from_name(const std::string& name) {
  if (name == "em") return Schedule::Em;
  if (name == "joint") return Schedule::Joint;
  throw ValidationError("unknown schedule '" + name + "' (expected em or joint)");
}

void TrainConfig::validate(Variant variant) const {
  // 0 is allowed as an explicit null update (bitwise no-op on parameters).
  if (!(learning_rate >= 0.0)) throw ValidationError("train config: learning_rate must be >= 0");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (epochs < 0) throw ValidationError("train config: epochs must be >= 0");
  if (total_steps < 0) throw ValidationError("train config: total_steps must be >= 0");
  if (checkpoint_every < 0) throw ValidationError("train config: checkpoint_every must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("train config: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("train config: adam_eps must be > 0");
  for (double w : branch_weights) {
    if (!(w >= 0.0)) throw ValidationError("train config: branch_weights must be >= 0");
  }
  if (!(loss_weight_semantic >= 0.0 && loss_weight_depth >= 0.0)) {
    throw ValidationError("train config: loss weights must be >= 0");
  }
  if (ignore_id < 0) throw ValidationError("train config: ignore_id must be >= 0");
  if (augment_enabled) augment.validate();
  if (schedule == Schedule::Em && variant != Variant::Sosd) {
    throw ValidationError("train config: the em schedule requires the sosd variant");
  }
}

Batch make_batch(const std::vector<const SyntheticScene*>& scenes, int ignore_id) {
  if (scenes.empty()) throw ValidationError("make_batch: empty scene list");
  const std::int64_t n = static_cast<std::int64_t>(scenes.size());
  const std::int64_t h = scenes[0]->image.shape()[0];
  const std::int64_t w = scenes[0]->image.shape()[1];

  Batch batch;
  batch.image = Tensor::zeros(Shape{n, 3, h, w});
  batch.depth = Tensor::zeros(Shape{n, 1, h, w});
  batch.mask = Tensor::zeros(Shape{n, 1, h, w});
  batch.labels.resize(static_cast<std::size_t>(n * h * w));

  double* img = batch.image.values().data();
  double* dep = batch.depth.values().data();
  double* msk = batch.mask.values().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const SyntheticScene& s = *scenes[static_cast<std::size_t>(i)];
    if (s.image.shape()[0] != h || s.image.shape()[1] != w) {
      throw ValidationError("make_batch: scenes must share one resolution");
    }
    const double* si = s.image.values().data();
    const double* sd = s.depth.values().data();
    const double* ss = s.semantic.values().data();
    const double* sm = s.mask.values().data();
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t px = y * w + x;
        for (std::int64_t c = 0; c < 3; ++c) {
          img[((i * 3 + c) * h + y) * w + x] = si[px * 3 + c];
        }
        dep[(i * h + y) * w + x] = sd[px];
        msk[(i * h + y) * w + x] = sm[px];
        const double label = ss[px];
        batch.labels[static_cast<std::size_t>((i * h + y) * w + x)] =
            label < 0.0 ? ignore_id : static_cast<int>(std::llround(label));
      }
    }
  }
  return batch;
}

Tensor cross_entropy_loss(Graph& g, Tensor logits, const std::vector<int>& labels, int ignore_id,
                          LossStats* stats) {
  return g.softmax_cross_entropy(std::move(logits), labels, ignore_id, stats);
}

Tensor l1_depth_loss(Graph& g, Tensor pred, Tensor gt, Tensor mask, LossStats* stats) {
  return g.masked_l1(std::move(pred), std::move(gt), std::move(mask), stats);
}

Trainer::Trainer(Model& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), adam_(cfg.adam()) {
  cfg_.validate(model_.config().variant);
  adam_.register_parameters(model_.parameters());
}

Trainer::ForwardLosses Trainer::forward_losses(Graph& g, const Batch& batch,
                                               const ForwardOptions& opts) {
  ModelOutput out = model_.forward(g, batch.image, opts);
  ForwardLosses fl;
  if (out.logits.defined()) {
    fl.semantic =
        cross_entropy_loss(g, out.logits, batch.labels, cfg_.ignore_id, &fl.semantic_stats);
  }
  if (out.depth.defined()) {
    fl.depth = l1_depth_loss(g, out.depth, batch.depth, batch.mask, &fl.depth_stats);
  }
  return fl;
}

void Trainer::zero_all_grads() {
  for (const Parameter& p : model_.parameters()) {
    Tensor t = p.tensor;
    t.grad();  // materialize so a zero-gradient step is well-defined
    t.zero_grad();
  }
}

LossRecord Trainer::em_step(const Batch& batch, bool flip_phase) {
  if (model_.config().variant != Variant::Sosd) {
    throw ValidationError("em_step: the em schedule requires the sosd variant");
  }
  const int phase = em_state_.phase;
  zero_all_grads();

  ForwardOptions opts;
  // Batch norm lives on the depth side (semantic-to-depth latents); the
  // frozen-branch switch only matters while the semantic phase holds it fixed.
  opts.bn_mode =
      (phase == 1 && cfg_.frozen_bn_eval) ? BatchNormMode::Eval : BatchNormMode::Train;
  if (phase == 0) {
    opts.s2d_gates = cfg_.branch_weights;
  } else {
    opts.d2s_gates = cfg_.branch_weights;
  }

  Graph g;
  ForwardLosses fl = forward_losses(g, batch, opts);
  const Tensor active = phase == 0 ? fl.depth : fl.semantic;
  const bool degenerate =
      phase == 0 ? fl.depth_stats.all_ignored : fl.semantic_stats.all_ignored;

  if (!degenerate) {
    g.backward(active);
    // Branch update: the phase's exclusive groups. Backbone merge: the
    // common group, whose gradient is the gate-weighted stream sum.
    std::vector<Parameter> branch;
    const auto groups = phase == 0 ? depth_phase_groups() : semantic_phase_groups();
    for (ParamGroup grp : groups) {
      for (Parameter& p : model_.group_parameters(grp)) branch.push_back(std::move(p));
    }
    adam_.step(branch);
    adam_.step(model_.group_parameters(ParamGroup::Com));
  }

  LossRecord rec;
  rec.phase = phase;
  rec.loss_semantic = fl.semantic.defined() ? fl.semantic.value_at(0) : 0.0;
  rec.loss_depth = fl.depth.defined() ? fl.depth.value_at(0) : 0.0;
  rec.valid_n = fl.depth_stats.considered;
  rec.semantic_all_ignored = fl.semantic_stats.all_ignored;
  rec.depth_all_ignored = fl.depth_stats.all_ignored;

  if (phase == 0) {
    em_state_.depth_steps += 1;
  } else {
    em_state_.semantic_steps += 1;
  }
  if (flip_phase) {
    em_state_.outer_iteration += 1;
    em_state_.phase = 1 - em_state_.phase;
  }
  step_ += 1;
  rec.step = step_;
  return rec;
}

LossRecord Trainer::joint_step(const Batch& batch) {
  zero_all_grads();
  Graph g;
  ForwardLosses fl = forward_losses(g, batch, ForwardOptions{});

  Tensor total;
  if (fl.semantic.defined() && !fl.semantic_stats.all_ignored && cfg_.loss_weight_semantic != 0.0) {
    total = g.scale(fl.semantic, cfg_.loss_weight_semantic);
  }
  if (fl.depth.defined() && !fl.depth_stats.all_ignored && cfg_.loss_weight_depth != 0.0) {
    Tensor term = g.scale(fl.depth, cfg_.loss_weight_depth);
    total = total.defined() ? g.add(total, term) : term;
  }
  if (total.defined()) {
    g.backward(total);
    adam_.step(model_.parameters());
  }

  LossRecord rec;
  rec.phase = -1;
  rec.loss_semantic = fl.semantic.defined() ? fl.semantic.value_at(0) : 0.0;
  rec.loss_depth = fl.depth.defined() ? fl.depth.value_at(0) : 0.0;
  rec.valid_n = fl.depth_stats.considered;
  rec.semantic_all_ignored = fl.semantic_stats.all_ignored;
  rec.depth_all_ignored = fl.depth_stats.all_ignored;
  step_ += 1;
  rec.step = step_;
  return rec;
}

LossRecord Trainer::train_step(const Batch& batch) {
  if (cfg_.schedule == Schedule::Em) {
    return em_step(batch, /*flip_phase=*/!cfg_.flip_per_epoch);
  }
  return joint_step(batch);
}

namespace {

std::vector<std::int64_t> epoch_permutation(std::int64_t n, std::uint64_t seed,
                                            std::int64_t epoch) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng::substream(seed, rng_tag::kShuffle, static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

// Batch for position `step_in_epoch` of the permuted epoch. Augmentation
// substreams are indexed by global sample index, so a resumed run draws the
// same transforms without serialized generator state.
Batch epoch_batch(const Dataset& data, const TrainConfig& cfg,
                  const std::vector<std::int64_t>& perm, std::int64_t step_in_epoch,
                  std::int64_t global_step) {
  std::vector<SyntheticScene> storage;
  std::vector<const SyntheticScene*> ptrs;
  storage.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
    const std::int64_t scene_idx = perm[static_cast<std::size_t>(step_in_epoch * cfg.batch_size + i)];
    const SyntheticScene& scene = data.scenes[static_cast<std::size_t>(scene_idx)];
    if (cfg.augment_enabled) {
      Rng rng = Rng::substream(cfg.seed, rng_tag::kAugment,
                               static_cast<std::uint64_t>(global_step * cfg.batch_size + i));
      storage.push_back(augment_scene(scene, cfg.augment, rng));
    }
  }
  if (cfg.augment_enabled) {
    for (const SyntheticScene& s : storage) ptrs.push_back(&s);
  } else {
    for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
      const std::int64_t scene_idx =
          perm[static_cast<std::size_t>(step_in_epoch * cfg.batch_size + i)];
      ptrs.push_back(&data.scenes[static_cast<std::size_t>(scene_idx)]);
    }
  }
  return make_batch(ptrs, cfg.ignore_id);
}

std::string step_dir_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%08lld", static_cast<long long>(step));
  return buf;
}

json record_to_json(const LossRecord& rec) {
  json j{{"step", rec.step},          {"phase", rec.phase},   {"L_semantic", rec.loss_semantic},
         {"L_depth", rec.loss_depth}, {"valid_N", rec.valid_n}, {"wall_ms", rec.wall_ms}};
  if (rec.semantic_all_ignored) j["semantic_all_ignored"] = true;
  if (rec.depth_all_ignored) j["depth_all_ignored"] = true;
  return j;
}

}  // namespace

std::vector<LossRecord> em_epoch(Trainer& trainer, const Dataset& data, std::int64_t epoch_index,
                                 const TrainConfig& cfg) {
  const std::int64_t n = static_cast<std::int64_t>(data.scenes.size());
  const std::int64_t spe = n / cfg.batch_size;
  if (spe < 1) throw ValidationError("em_epoch: dataset smaller than one batch");
  const std::vector<std::int64_t> perm = epoch_permutation(n, cfg.seed, epoch_index);
  std::vector<LossRecord> records;
  records.reserve(static_cast<std::size_t>(spe));
  for (std::int64_t s = 0; s < spe; ++s) {
    Batch batch = epoch_batch(data, cfg, perm, s, trainer.step());
    records.push_back(trainer.train_step(batch));
  }
  if (cfg.schedule == Schedule::Em && cfg.flip_per_epoch) {
    trainer.em_state().outer_iteration += 1;
    trainer.em_state().phase = 1 - trainer.em_state().phase;
  }
  return records;
}

TrainResult run_training(Model& model, const Dataset& train, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate(model.config().variant);
  const std::int64_t n = static_cast<std::int64_t>(train.scenes.size());
  const std::int64_t spe = cfg.batch_size > 0 ? n / cfg.batch_size : 0;
  if (spe < 1) throw ValidationError("run_training: dataset smaller than one batch");
  const std::int64_t total = cfg.total_steps > 0 ? cfg.total_steps : cfg.epochs * spe;

  std::error_code ec;
  fs::create_directories(out_dir / "checkpoints", ec);
  if (ec) throw IoError("run_training: cannot create " + out_dir.string());

  Trainer trainer(model, cfg);

  // Resume from the newest checkpoint when one is present.
  const fs::path resume_from = latest_checkpoint(out_dir);
  if (!resume_from.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume_from);
    if (net_config_to_json(lc.meta.net) != net_config_to_json(model.config())) {
      throw ValidationError("run_training: checkpoint was trained with a different net config");
    }
    const auto& src = lc.model.parameters();
    const auto& dst = model.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(),
                Tensor(dst[i].tensor).values().begin());
    }
    auto src_bn = lc.model.batch_norm_states();
    auto dst_bn = model.batch_norm_states();
    for (std::size_t i = 0; i < dst_bn.size(); ++i) {
      dst_bn[i].second->running_mean = src_bn[i].second->running_mean;
      dst_bn[i].second->running_var = src_bn[i].second->running_var;
    }
    for (auto& [name, slot] : trainer.optimizer().slots()) {
      const Adam::Slot& loaded = lc.adam.slots().at(name);
      std::copy(loaded.m.values().begin(), loaded.m.values().end(), slot.m.values().begin());
      std::copy(loaded.v.values().begin(), loaded.v.values().end(), slot.v.values().begin());
      slot.t = loaded.t;
    }
    trainer.em_state() = lc.meta.em_state;
    trainer.set_step(lc.meta.step);
  }

  std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary | std::ios::app);
  if (!log) throw IoError("run_training: cannot open train log in " + out_dir.string());

  const auto save = [&](std::int64_t step) {
    CheckpointMeta meta;
    meta.step = step;
    meta.seed = cfg.seed;
    meta.em_state = trainer.em_state();
    meta.net = model.config();
    meta.train = cfg;
    const fs::path dir = out_dir / "checkpoints" / step_dir_name(step);
    save_checkpoint(dir, model, trainer.optimizer(), meta);
    return dir;
  };

  TrainResult result;
  std::int64_t epoch = -1;
  std::vector<std::int64_t> perm;
  while (trainer.step() < total) {
    const std::int64_t step = trainer.step();
    const std::int64_t this_epoch = step / spe;
    const std::int64_t pos = step % spe;
    if (this_epoch != epoch) {
      epoch = this_epoch;
      perm = epoch_permutation(n, cfg.seed, epoch);
    }
    Batch batch = epoch_batch(train, cfg, perm, pos, step);

    const auto t0 = std::chrono::steady_clock::now();
    LossRecord rec;
    try {
      rec = trainer.train_step(batch);
    } catch (const RuntimeFault& fault) {
      json diag{{"event", "abort"}, {"step", step + 1}, {"error", fault.what()}};
      log << diag.dump() << "\n" << std::flush;
      throw;
    }
    if (cfg.schedule == Schedule::Em && cfg.flip_per_epoch && pos == spe - 1) {
      trainer.em_state().outer_iteration += 1;
      trainer.em_state().phase = 1 - trainer.em_state().phase;
    }
    const auto t1 = std::chrono::steady_clock::now();
    rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    if (!std::isfinite(rec.loss_semantic) || !std::isfinite(rec.loss_depth)) {
      json diag = record_to_json(rec);
      diag["event"] = "non-finite-loss";
      log << diag.dump() << "\n" << std::flush;
      throw RuntimeFault("run_training: non-finite loss at step " + std::to_string(rec.step));
    }

    log << record_to_json(rec).dump() << "\n";
    result.records.push_back(rec);

    if (cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0 &&
        trainer.step() < total) {
      save(trainer.step());
    }
  }
  log << std::flush;

  result.final_step = trainer.step();
  result.final_checkpoint = save(trainer.step());
  return result;
}

}  // namespace sosd
