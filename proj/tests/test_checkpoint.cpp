#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "sosd/checkpoint.hpp"
#include "sosd/errors.hpp"
#include "sosd/model.hpp"
#include "sosd/optimizer.hpp"
#include "sosd/rng.hpp"
#include "sosd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

using sosd::Adam;
using sosd::AugmentConfig;
using sosd::Batch;
using sosd::CheckpointMeta;
using sosd::DatasetConfig;
using sosd::IoError;
using sosd::LoadedCheckpoint;
using sosd::Model;
using sosd::NetConfig;
using sosd::Parameter;
using sosd::Schedule;
using sosd::Shape;
using sosd::Tensor;
using sosd::TrainConfig;
using sosd::Trainer;
using sosd::ValidationError;
using sosd::Variant;

namespace {

NetConfig tiny_net(Variant variant) {
  NetConfig cfg;
  cfg.height = 16;
  cfg.width = 32;
  cfg.base_channels = 4;
  cfg.num_classes = 4;
  cfg.aspp_dilations = {1, 2};
  cfg.variant = variant;
  return cfg;
}

Batch random_batch(std::uint64_t seed) {
  sosd::Rng rng(seed);
  Batch b;
  b.image = oracles::random_tensor(Shape{2, 3, 16, 32}, rng, 0.0, 1.0);
  b.depth = oracles::random_tensor(Shape{2, 1, 16, 32}, rng, 1.0, 6.0);
  b.mask = Tensor::full(Shape{2, 1, 16, 32}, 1.0);
  b.labels.resize(2 * 16 * 32);
  for (int& l : b.labels) l = static_cast<int>(rng.uniform_int(0, 3));
  return b;
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("sosd_ckpt_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig fixture_cfg() {
  TrainConfig cfg;
  cfg.schedule = Schedule::Em;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 77;
  return cfg;
}

// Makes parameters, moments, running stats, and em state all non-trivial.
CheckpointMeta warm_up(Model& model, Trainer& trainer, const TrainConfig& cfg) {
  const Batch batch = random_batch(311);
  for (int i = 0; i < 3; ++i) trainer.train_step(batch);
  CheckpointMeta meta;
  meta.step = trainer.step();
  meta.seed = cfg.seed;
  meta.em_state = trainer.em_state();
  meta.net = model.config();
  meta.train = cfg;
  return meta;
}

bool same_bytes(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("net config survives a json round trip") {
    NetConfig cfg = tiny_net(Variant::Mtl);
    cfg.fusion_kernel = 5;
    cfg.d2s_hidden = 12;
    cfg.init_std = 0.05;
    cfg.bn_momentum = 0.8;
    cfg.depth_scale = 7.5;
    const NetConfig back = sosd::net_config_from_json(sosd::net_config_to_json(cfg));
    CHECK(sosd::net_config_to_json(back) == sosd::net_config_to_json(cfg));
    CHECK(back.variant == Variant::Mtl);
    CHECK(back.aspp_dilations == std::vector<int>{1, 2});

    // missing keys fall back to defaults
    const NetConfig defaults = sosd::net_config_from_json(json::object());
    CHECK(sosd::net_config_to_json(defaults) == sosd::net_config_to_json(NetConfig{}));
    CHECK_THROWS_AS(sosd::net_config_from_json(json{{"variant", "bogus"}}), ValidationError);
    CHECK_THROWS_AS(sosd::net_config_from_json(json{{"height", "tall"}}), ValidationError);
  }

  TEST_CASE("train and augment configs survive a json round trip") {
    TrainConfig cfg;
    cfg.schedule = Schedule::Joint;
    cfg.total_steps = 123;
    cfg.branch_weights = {0.25, 1.0, 0.5};
    cfg.loss_weight_depth = 0.4;
    cfg.flip_per_epoch = true;
    cfg.augment_enabled = true;
    cfg.augment.scale_ratios = {0.5, 1.5};
    cfg.augment.flip_probability = 0.25;
    cfg.checkpoint_every = 50;
    cfg.seed = 9;
    const TrainConfig back = sosd::train_config_from_json(sosd::train_config_to_json(cfg));
    CHECK(sosd::train_config_to_json(back) == sosd::train_config_to_json(cfg));
    CHECK(back.schedule == Schedule::Joint);
    CHECK(back.branch_weights == std::array<double, 3>{0.25, 1.0, 0.5});
    CHECK(back.augment.scale_ratios == std::vector<double>{0.5, 1.5});

    CHECK_THROWS_AS(sosd::train_config_from_json(json{{"schedule", "sgd"}}), ValidationError);
    CHECK_THROWS_AS(sosd::train_config_from_json(json{{"branch_weights", {1.0, 2.0}}}),
                    ValidationError);

    AugmentConfig acfg;
    acfg.scale_adjusts_depth = false;
    acfg.flip_enabled = false;
    const AugmentConfig aback =
        sosd::augment_config_from_json(sosd::augment_config_to_json(acfg));
    CHECK(sosd::augment_config_to_json(aback) == sosd::augment_config_to_json(acfg));
  }

  TEST_CASE("dataset config survives a json round trip") {
    DatasetConfig cfg;
    cfg.scene_count = 77;
    cfg.height = 32;
    cfg.width = 64;
    cfg.hole_rate = 0.125;
    cfg.pixel_noise = 0.01;
    cfg.write_previews = true;
    cfg.seed = 1234;
    const DatasetConfig back = sosd::dataset_config_from_json(sosd::dataset_config_to_json(cfg));
    CHECK(sosd::dataset_config_to_json(back) == sosd::dataset_config_to_json(cfg));
    const DatasetConfig defaults = sosd::dataset_config_from_json(json::object());
    CHECK(sosd::dataset_config_to_json(defaults) ==
          sosd::dataset_config_to_json(DatasetConfig{}));
  }

  TEST_CASE("save then load restores every tensor bitwise") {
    sosd::Rng rng(42);
    Model model = Model::build(tiny_net(Variant::Sosd), rng);
    const TrainConfig cfg = fixture_cfg();
    Trainer trainer(model, cfg);
    const CheckpointMeta meta = warm_up(model, trainer, cfg);
    const fs::path dir = fresh_dir("roundtrip");
    sosd::save_checkpoint(dir, model, trainer.optimizer(), meta);

    LoadedCheckpoint lc = sosd::load_checkpoint(dir);
    CHECK(lc.meta.step == 3);
    CHECK(lc.meta.seed == 77);
    CHECK(lc.meta.em_state.phase == meta.em_state.phase);
    CHECK(lc.meta.em_state.outer_iteration == meta.em_state.outer_iteration);
    CHECK(lc.meta.em_state.depth_steps == 2);
    CHECK(lc.meta.em_state.semantic_steps == 1);
    CHECK(sosd::net_config_to_json(lc.meta.net) == sosd::net_config_to_json(meta.net));
    CHECK(sosd::train_config_to_json(lc.meta.train) == sosd::train_config_to_json(meta.train));

    const auto& got = lc.model.parameters();
    const auto& want = model.parameters();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CAPTURE(want[i].name);
      CHECK(got[i].name == want[i].name);
      CHECK(got[i].group == want[i].group);
      CHECK(same_bytes(got[i].tensor.values(), want[i].tensor.values()));
    }

    const auto& slots = trainer.optimizer().slots();
    for (const auto& [name, slot] : lc.adam.slots()) {
      CAPTURE(name);
      const Adam::Slot& src = slots.at(name);
      CHECK(slot.t == src.t);
      CHECK(same_bytes(slot.m.values(), src.m.values()));
      CHECK(same_bytes(slot.v.values(), src.v.values()));
    }
    CHECK(lc.adam.config().learning_rate == 1e-3);

    auto got_bn = lc.model.batch_norm_states();
    auto want_bn = model.batch_norm_states();
    REQUIRE(got_bn.size() == want_bn.size());
    for (std::size_t i = 0; i < got_bn.size(); ++i) {
      CHECK(got_bn[i].first == want_bn[i].first);
      CHECK(got_bn[i].second->running_mean == want_bn[i].second->running_mean);
      CHECK(got_bn[i].second->running_var == want_bn[i].second->running_var);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("saving twice produces identical bytes") {
    sosd::Rng rng(42);
    Model model = Model::build(tiny_net(Variant::Sosd), rng);
    const TrainConfig cfg = fixture_cfg();
    Trainer trainer(model, cfg);
    const CheckpointMeta meta = warm_up(model, trainer, cfg);
    const fs::path a = fresh_dir("det_a");
    const fs::path b = fresh_dir("det_b");
    sosd::save_checkpoint(a, model, trainer.optimizer(), meta);
    sosd::save_checkpoint(b, model, trainer.optimizer(), meta);
    int files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a);
      CAPTURE(rel.string());
      CHECK(slurp(a / rel) == slurp(b / rel));
      ++files;
    }
    CHECK(files > 10);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("the loader rejects corruption with structured errors") {
    sosd::Rng rng(42);
    Model model = Model::build(tiny_net(Variant::Sosd), rng);
    const TrainConfig cfg = fixture_cfg();
    Trainer trainer(model, cfg);
    const CheckpointMeta meta = warm_up(model, trainer, cfg);
    const fs::path dir = fresh_dir("corrupt");
    sosd::save_checkpoint(dir, model, trainer.optimizer(), meta);

    SUBCASE("missing manifest") {
      fs::remove(dir / "manifest.json");
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), IoError);
    }
    SUBCASE("malformed manifest") {
      std::ofstream(dir / "manifest.json", std::ios::binary) << "{ not json";
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), ValidationError);
    }
    SUBCASE("wrong manifest type") {
      json m = json::parse(slurp(dir / "manifest.json"));
      m["type"] = "sosd-dataset";
      std::ofstream(dir / "manifest.json", std::ios::binary) << m.dump();
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), ValidationError);
    }
    SUBCASE("unsupported format version") {
      json m = json::parse(slurp(dir / "manifest.json"));
      m["format_version"] = 99;
      std::ofstream(dir / "manifest.json", std::ios::binary) << m.dump();
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), ValidationError);
    }
    SUBCASE("manifest missing required fields") {
      json m = json::parse(slurp(dir / "manifest.json"));
      m.erase("step");
      std::ofstream(dir / "manifest.json", std::ios::binary) << m.dump();
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), ValidationError);
    }
    SUBCASE("missing parameter tensor") {
      fs::remove(dir / "params" / "backbone.stem.w.sosd");
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), IoError);
    }
    SUBCASE("missing optimizer moment") {
      fs::remove(dir / "optim" / "backbone.stem.w.m.sosd");
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), IoError);
    }
    SUBCASE("garbage tensor payload") {
      std::ofstream(dir / "params" / "backbone.stem.w.sosd", std::ios::binary) << "junkjunk";
      CHECK_THROWS(sosd::load_checkpoint(dir));
    }
    SUBCASE("config pointing at a different architecture") {
      json m = json::parse(slurp(dir / "manifest.json"));
      m["net"]["variant"] = "mtl";
      std::ofstream(dir / "manifest.json", std::ios::binary) << m.dump();
      CHECK_THROWS_AS(sosd::load_checkpoint(dir), ValidationError);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("latest_checkpoint compares steps numerically") {
    const fs::path out = fresh_dir("latest");
    CHECK(sosd::latest_checkpoint(out).empty());  // no checkpoints dir yet
    fs::create_directories(out / "checkpoints");
    CHECK(sosd::latest_checkpoint(out).empty());  // empty dir

    fs::create_directories(out / "checkpoints" / "step-9");
    fs::create_directories(out / "checkpoints" / "step-00000010");
    fs::create_directories(out / "checkpoints" / "step-abc");  // ignored
    fs::create_directories(out / "checkpoints" / "notes");     // ignored
    std::ofstream(out / "checkpoints" / "step-99") << "file, not a directory";
    CHECK(sosd::latest_checkpoint(out).filename() == "step-00000010");
    fs::remove_all(out);
  }
}
