#include "sosd/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "sosd/errors.hpp"

namespace sosd {

using nlohmann::json;

json net_config_to_json(const NetConfig& cfg) {
  return json{{"height", cfg.height},
              {"width", cfg.width},
              {"base_channels", cfg.base_channels},
              {"aspp_dilations", cfg.aspp_dilations},
              {"num_classes", cfg.num_classes},
              {"variant", variant_name(cfg.variant)},
              {"fusion_kernel", cfg.fusion_kernel},
              {"d2s_hidden", cfg.d2s_hidden},
              {"d2s_latent", cfg.d2s_latent},
              {"init_std", cfg.init_std},
              {"bn_momentum", cfg.bn_momentum},
              {"bn_epsilon", cfg.bn_epsilon},
              {"safe_sqrt_floor", cfg.safe_sqrt_floor},
              {"positivity_offset", cfg.positivity_offset},
              {"depth_scale", cfg.depth_scale}};
}

NetConfig net_config_from_json(const json& j) {
  NetConfig cfg;
  try {
    cfg.height = j.value("height", cfg.height);
    cfg.width = j.value("width", cfg.width);
    cfg.base_channels = j.value("base_channels", cfg.base_channels);
    cfg.aspp_dilations = j.value("aspp_dilations", cfg.aspp_dilations);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    if (j.contains("variant")) cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.fusion_kernel = j.value("fusion_kernel", cfg.fusion_kernel);
    cfg.d2s_hidden = j.value("d2s_hidden", cfg.d2s_hidden);
    cfg.d2s_latent = j.value("d2s_latent", cfg.d2s_latent);
    cfg.init_std = j.value("init_std", cfg.init_std);
    cfg.bn_momentum = j.value("bn_momentum", cfg.bn_momentum);
    cfg.bn_epsilon = j.value("bn_epsilon", cfg.bn_epsilon);
    cfg.safe_sqrt_floor = j.value("safe_sqrt_floor", cfg.safe_sqrt_floor);
    cfg.positivity_offset = j.value("positivity_offset", cfg.positivity_offset);
    cfg.depth_scale = j.value("depth_scale", cfg.depth_scale);
  } catch (const json::exception& e) {
    throw ValidationError("net config: " + std::string(e.what()));
  }
  return cfg;
}

json augment_config_to_json(const AugmentConfig& cfg) {
  return json{{"flip_probability", cfg.flip_probability},
              {"scale_ratios", cfg.scale_ratios},
              {"flip_enabled", cfg.flip_enabled},
              {"scale_enabled", cfg.scale_enabled},
              {"scale_adjusts_depth", cfg.scale_adjusts_depth}};
}

AugmentConfig augment_config_from_json(const json& j) {
  AugmentConfig cfg;
  try {
    cfg.flip_probability = j.value("flip_probability", cfg.flip_probability);
    cfg.scale_ratios = j.value("scale_ratios", cfg.scale_ratios);
    cfg.flip_enabled = j.value("flip_enabled", cfg.flip_enabled);
    cfg.scale_enabled = j.value("scale_enabled", cfg.scale_enabled);
    cfg.scale_adjusts_depth = j.value("scale_adjusts_depth", cfg.scale_adjusts_depth);
  } catch (const json::exception& e) {
    throw ValidationError("augment config: " + std::string(e.what()));
  }
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  return json{{"schedule", schedule_name(cfg.schedule)},
              {"epochs", cfg.epochs},
              {"total_steps", cfg.total_steps},
              {"batch_size", cfg.batch_size},
              {"learning_rate", cfg.learning_rate},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"adam_eps", cfg.adam_eps},
              {"branch_weights", cfg.branch_weights},
              {"loss_weight_semantic", cfg.loss_weight_semantic},
              {"loss_weight_depth", cfg.loss_weight_depth},
              {"flip_per_epoch", cfg.flip_per_epoch},
              {"frozen_bn_eval", cfg.frozen_bn_eval},
              {"augment_enabled", cfg.augment_enabled},
              {"augment", augment_config_to_json(cfg.augment)},
              {"checkpoint_every", cfg.checkpoint_every},
              {"ignore_id", cfg.ignore_id},
              {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  try {
    if (j.contains("schedule")) {
      cfg.schedule = schedule_from_name(j.at("schedule").get<std::string>());
    }
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.total_steps = j.value("total_steps", cfg.total_steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    if (j.contains("branch_weights")) {
      const auto w = j.at("branch_weights").get<std::vector<double>>();
      if (w.size() != 3) throw ValidationError("train config: branch_weights needs 3 entries");
      std::copy(w.begin(), w.end(), cfg.branch_weights.begin());
    }
    cfg.loss_weight_semantic = j.value("loss_weight_semantic", cfg.loss_weight_semantic);
    cfg.loss_weight_depth = j.value("loss_weight_depth", cfg.loss_weight_depth);
    cfg.flip_per_epoch = j.value("flip_per_epoch", cfg.flip_per_epoch);
    cfg.frozen_bn_eval = j.value("frozen_bn_eval", cfg.frozen_bn_eval);
    cfg.augment_enabled = j.value("augment_enabled", cfg.augment_enabled);
    if (j.contains("augment")) cfg.augment = augment_config_from_json(j.at("augment"));
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    cfg.ignore_id = j.value("ignore_id", cfg.ignore_id);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ValidationError("train config: " + std::string(e.what()));
  }
  return cfg;
}

json dataset_config_to_json(const DatasetConfig& cfg) {
  return json{{"scene_count", cfg.scene_count},
              {"height", cfg.height},
              {"width", cfg.width},
              {"min_objects", cfg.min_objects},
              {"max_objects", cfg.max_objects},
              {"min_depth", cfg.min_depth},
              {"max_depth", cfg.max_depth},
              {"num_classes", cfg.num_classes},
              {"focal_x", cfg.focal_x},
              {"focal_y", cfg.focal_y},
              {"far_plane", cfg.far_plane},
              {"hole_rate", cfg.hole_rate},
              {"pixel_noise", cfg.pixel_noise},
              {"write_previews", cfg.write_previews},
              {"seed", cfg.seed}};
}

DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig cfg;
  try {
    cfg.scene_count = j.value("scene_count", cfg.scene_count);
    cfg.height = j.value("height", cfg.height);
    cfg.width = j.value("width", cfg.width);
    cfg.min_objects = j.value("min_objects", cfg.min_objects);
    cfg.max_objects = j.value("max_objects", cfg.max_objects);
    cfg.min_depth = j.value("min_depth", cfg.min_depth);
    cfg.max_depth = j.value("max_depth", cfg.max_depth);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.focal_x = j.value("focal_x", cfg.focal_x);
    cfg.focal_y = j.value("focal_y", cfg.focal_y);
    cfg.far_plane = j.value("far_plane", cfg.far_plane);
    cfg.hole_rate = j.value("hole_rate", cfg.hole_rate);
    cfg.pixel_noise = j.value("pixel_noise", cfg.pixel_noise);
    cfg.write_previews = j.value("write_previews", cfg.write_previews);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ValidationError("dataset config: " + std::string(e.what()));
  }
  return cfg;
}

namespace {

json em_state_to_json(const EMState& s) {
  return json{{"phase", s.phase},
              {"outer_iteration", s.outer_iteration},
              {"depth_steps", s.depth_steps},
              {"semantic_steps", s.semantic_steps}};
}

EMState em_state_from_json(const json& j) {
  EMState s;
  s.phase = j.value("phase", 0);
  s.outer_iteration = j.value("outer_iteration", std::int64_t{0});
  s.depth_steps = j.value("depth_steps", std::int64_t{0});
  s.semantic_steps = j.value("semantic_steps", std::int64_t{0});
  return s;
}

Tensor vector_tensor(const std::vector<double>& v) {
  return Tensor::from_values(Shape{static_cast<std::int64_t>(v.size())}, v);
}

void copy_into(std::vector<double>& dst, const Tensor& src, const std::string& what) {
  if (src.numel() != static_cast<std::int64_t>(dst.size())) {
    throw ValidationError("checkpoint: size mismatch loading " + what);
  }
  std::copy(src.values().begin(), src.values().end(), dst.begin());
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& what) {
  if (!(src.shape() == dst.shape())) {
    throw ValidationError("checkpoint: shape mismatch loading " + what + " (stored " +
                          src.shape().str() + ", expected " + dst.shape().str() + ")");
  }
  std::copy(src.values().begin(), src.values().end(), dst.values().begin());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, Model& model, const Adam& adam,
                     const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  fs::create_directories(dir / "optim", ec);
  fs::create_directories(dir / "bn", ec);
  if (ec) throw IoError("save_checkpoint: cannot create " + dir.string());

  json groups = json::object();
  json names = json::array();
  for (const Parameter& p : model.parameters()) {
    write_tensor(dir / "params" / (p.name + ".sosd"), p.tensor);
    groups[p.name] = group_name(p.group);
    names.push_back(p.name);
  }
  json adam_t = json::object();
  for (const auto& [name, slot] : adam.slots()) {
    write_tensor(dir / "optim" / (name + ".m.sosd"), slot.m);
    write_tensor(dir / "optim" / (name + ".v.sosd"), slot.v);
    adam_t[name] = slot.t;
  }
  json bn_names = json::array();
  for (auto& [name, state] : model.batch_norm_states()) {
    write_tensor(dir / "bn" / (name + ".mean.sosd"), vector_tensor(state->running_mean));
    write_tensor(dir / "bn" / (name + ".var.sosd"), vector_tensor(state->running_var));
    bn_names.push_back(name);
  }

  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["type"] = "sosd-checkpoint";
  manifest["step"] = meta.step;
  manifest["seed"] = meta.seed;
  manifest["em_state"] = em_state_to_json(meta.em_state);
  manifest["net"] = net_config_to_json(meta.net);
  manifest["train"] = train_config_to_json(meta.train);
  manifest["groups"] = groups;
  manifest["parameters"] = names;
  manifest["bn"] = bn_names;
  manifest["adam"] = json{{"learning_rate", adam.config().learning_rate},
                          {"beta1", adam.config().beta1},
                          {"beta2", adam.config().beta2},
                          {"epsilon", adam.config().epsilon},
                          {"t", adam_t}};

  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("save_checkpoint: manifest write failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("load_checkpoint: malformed manifest: " + std::string(e.what()));
  }

  LoadedCheckpoint lc;
  try {
    if (manifest.at("type").get<std::string>() != "sosd-checkpoint") {
      throw ValidationError("load_checkpoint: not a checkpoint manifest");
    }
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw ValidationError("load_checkpoint: unsupported format version");
    }
    lc.meta.step = manifest.at("step").get<std::int64_t>();
    lc.meta.seed = manifest.at("seed").get<std::uint64_t>();
    lc.meta.em_state = em_state_from_json(manifest.at("em_state"));
    lc.meta.net = net_config_from_json(manifest.at("net"));
    lc.meta.train = train_config_from_json(manifest.at("train"));

    Rng scratch(0);
    lc.model = Model::build(lc.meta.net, scratch);

    const auto stored = manifest.at("parameters").get<std::vector<std::string>>();
    std::vector<std::string> expected;
    for (const Parameter& p : lc.model.parameters()) expected.push_back(p.name);
    if (stored != expected) {
      throw ValidationError("load_checkpoint: parameter list does not match the rebuilt model");
    }
    for (const Parameter& p : lc.model.parameters()) {
      Tensor t = read_tensor(dir / "params" / (p.name + ".sosd"));
      Tensor dst = p.tensor;
      copy_into(dst, t, "parameter " + p.name);
    }

    AdamConfig acfg;
    const json& aj = manifest.at("adam");
    acfg.learning_rate = aj.at("learning_rate").get<double>();
    acfg.beta1 = aj.at("beta1").get<double>();
    acfg.beta2 = aj.at("beta2").get<double>();
    acfg.epsilon = aj.at("epsilon").get<double>();
    lc.adam = Adam(acfg);
    lc.adam.register_parameters(lc.model.parameters());
    for (auto& [name, slot] : lc.adam.slots()) {
      copy_into(slot.m, read_tensor(dir / "optim" / (name + ".m.sosd")), "moment m of " + name);
      copy_into(slot.v, read_tensor(dir / "optim" / (name + ".v.sosd")), "moment v of " + name);
      slot.t = aj.at("t").at(name).get<std::int64_t>();
    }

    for (auto& [name, state] : lc.model.batch_norm_states()) {
      copy_into(state->running_mean, read_tensor(dir / "bn" / (name + ".mean.sosd")),
                "running mean of " + name);
      copy_into(state->running_var, read_tensor(dir / "bn" / (name + ".var.sosd")),
                "running var of " + name);
    }
  } catch (const json::exception& e) {
    throw ValidationError("load_checkpoint: manifest missing fields: " + std::string(e.what()));
  }
  return lc;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& train_out) {
  namespace fs = std::filesystem;
  const fs::path root = train_out / "checkpoints";
  if (!fs::exists(root)) return {};
  fs::path best;
  std::int64_t best_step = -1;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("step-", 0) != 0) continue;
    std::int64_t step = -1;
    try {
      step = std::stoll(name.substr(5));
    } catch (...) {
      continue;
    }
    if (step > best_step) {
      best_step = step;
      best = entry.path();
    }
  }
  return best;
}

}  // namespace sosd
