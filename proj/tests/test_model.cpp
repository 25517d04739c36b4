#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "sosd/errors.hpp"
#include "sosd/graph.hpp"
#include "sosd/model.hpp"
#include "sosd/rng.hpp"

using sosd::BatchNormMode;
using sosd::ForwardOptions;
using sosd::Graph;
using sosd::Model;
using sosd::ModelOutput;
using sosd::NetConfig;
using sosd::OpKind;
using sosd::ParamGroup;
using sosd::Parameter;
using sosd::Shape;
using sosd::Tensor;
using sosd::ValidationError;
using sosd::Variant;

namespace {

NetConfig tiny_config(Variant variant) {
  NetConfig cfg;
  cfg.height = 16;
  cfg.width = 32;
  cfg.base_channels = 4;
  cfg.num_classes = 4;
  cfg.aspp_dilations = {1, 2};
  cfg.variant = variant;
  return cfg;
}

Model tiny_model(Variant variant, std::uint64_t seed = 42) {
  sosd::Rng rng(seed);
  return Model::build(tiny_config(variant), rng);
}

Tensor random_image(std::int64_t n, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  sosd::Rng rng(seed);
  return oracles::random_tensor(Shape{n, 3, h, w}, rng, 0.0, 1.0);
}

std::vector<std::vector<double>> snapshot_group(const Model& m, ParamGroup g) {
  std::vector<std::vector<double>> out;
  for (const Parameter& p : m.group_parameters(g)) {
    out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  }
  return out;
}

const std::array<ParamGroup, 7> kAllGroups = {
    ParamGroup::Com,       ParamGroup::Dep,  ParamGroup::Sem,  ParamGroup::ThreeDDep,
    ParamGroup::ThreeDSem, ParamGroup::TwoD, ParamGroup::DInv2};

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation rejects bad geometry and hyperparameters") {
    NetConfig ok = tiny_config(Variant::Sosd);
    CHECK_NOTHROW(ok.validate());

    NetConfig bad = ok;
    bad.height = 20;  // not a multiple of 8
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = ok;
    bad.width = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = ok;
    bad.num_classes = 1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = ok;
    bad.aspp_dilations = {1, 2, 2};  // not distinct
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = ok;
    bad.aspp_dilations = {0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = ok;
    bad.init_std = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
  }

  TEST_CASE("latent head widths derive from base channels unless overridden") {
    NetConfig cfg = tiny_config(Variant::Sosd);
    CHECK(cfg.d2s_hidden_channels() == 4);
    CHECK(cfg.d2s_latent_channels() == 2);
    cfg.d2s_hidden = 64;
    cfg.d2s_latent = 32;
    CHECK(cfg.d2s_hidden_channels() == 64);
    CHECK(cfg.d2s_latent_channels() == 32);
  }

  TEST_CASE("identical config and seed build identical parameter bytes") {
    Model a = tiny_model(Variant::Sosd, 7);
    Model b = tiny_model(Variant::Sosd, 7);
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      const Parameter& pa = a.parameters()[i];
      const Parameter& pb = b.parameters()[i];
      CHECK(pa.name == pb.name);
      CHECK(pa.group == pb.group);
      REQUIRE(pa.tensor.numel() == pb.tensor.numel());
      CHECK(std::memcmp(pa.tensor.values().data(), pb.tensor.values().data(),
                        static_cast<std::size_t>(pa.tensor.numel()) * sizeof(double)) == 0);
    }
    Model c = tiny_model(Variant::Sosd, 8);
    bool any_differ = false;
    for (std::size_t i = 0; i < a.parameters().size() && !any_differ; ++i) {
      const auto va = a.parameters()[i].tensor.values();
      const auto vc = c.parameters()[i].tensor.values();
      any_differ = !std::equal(va.begin(), va.end(), vc.begin());
    }
    CHECK(any_differ);
  }

  TEST_CASE("weights are gaussian with the configured spread and biases are constant") {
    NetConfig cfg;
    cfg.height = 16;
    cfg.width = 32;
    cfg.base_channels = 16;
    cfg.variant = Variant::Sosd;
    sosd::Rng rng(99);
    Model m = Model::build(cfg, rng);
    // pool every conv weight entry: mean ~ 0, std ~ init_std
    double sum = 0.0, sq = 0.0;
    std::int64_t n = 0;
    for (const Parameter& p : m.parameters()) {
      if (p.name.size() >= 2 && p.name.substr(p.name.size() - 2) == ".w") {
        for (double v : p.tensor.values()) {
          sum += v;
          sq += v * v;
          ++n;
        }
      }
    }
    REQUIRE(n > 1000);
    const double mean = sum / static_cast<double>(n);
    const double std = std::sqrt(sq / static_cast<double>(n) - mean * mean);
    CHECK(std::abs(mean) < 0.01);
    CHECK(std == doctest::Approx(cfg.init_std).epsilon(0.05));
    // batch-norm affine parameters start at identity
    for (const Parameter& p : m.parameters()) {
      if (p.name.find(".gamma") != std::string::npos) {
        for (double v : p.tensor.values()) CHECK(v == 1.0);
      }
      if (p.name.find(".beta") != std::string::npos) {
        for (double v : p.tensor.values()) CHECK(v == 0.0);
      }
    }
  }

  TEST_CASE("parameter count is strictly ordered across variants") {
    const std::int64_t sem = tiny_model(Variant::SemanticOnly).parameter_count();
    const std::int64_t dep = tiny_model(Variant::DepthOnly).parameter_count();
    const std::int64_t mtl = tiny_model(Variant::Mtl).parameter_count();
    const std::int64_t sosd = tiny_model(Variant::Sosd).parameter_count();
    CHECK(sem < mtl);
    CHECK(dep < mtl);
    CHECK(mtl < sosd);
  }

  TEST_CASE("the seven groups partition the parameter set") {
    for (Variant v : {Variant::SemanticOnly, Variant::DepthOnly, Variant::Mtl, Variant::Sosd}) {
      Model m = tiny_model(v);
      std::set<std::string> all_names;
      for (const Parameter& p : m.parameters()) {
        CHECK(all_names.insert(p.name).second);  // unique names
      }
      std::set<std::string> grouped;
      for (ParamGroup g : kAllGroups) {
        for (const Parameter& p : m.group_parameters(g)) {
          CHECK(p.group == g);
          CHECK(grouped.insert(p.name).second);  // disjoint groups
        }
      }
      CHECK(grouped == all_names);  // complete cover
    }
  }

  TEST_CASE("variants own no parameters outside their live groups") {
    struct Expect {
      Variant v;
      std::set<ParamGroup> live;
    };
    const std::vector<Expect> table = {
        {Variant::SemanticOnly, {ParamGroup::Com, ParamGroup::Sem}},
        {Variant::DepthOnly, {ParamGroup::Com, ParamGroup::Dep}},
        {Variant::Mtl, {ParamGroup::Com, ParamGroup::Dep, ParamGroup::Sem}},
        {Variant::Sosd,
         {ParamGroup::Com, ParamGroup::Dep, ParamGroup::Sem, ParamGroup::ThreeDDep,
          ParamGroup::ThreeDSem, ParamGroup::TwoD, ParamGroup::DInv2}},
    };
    for (const Expect& e : table) {
      Model m = tiny_model(e.v);
      const auto live = m.live_groups();
      CHECK(std::set<ParamGroup>(live.begin(), live.end()) == e.live);
      for (ParamGroup g : kAllGroups) {
        const bool is_live = e.live.count(g) > 0;
        if (is_live) {
          CHECK_FALSE(m.group_parameters(g).empty());
        } else {
          CHECK(m.group_parameters(g).empty());
        }
      }
    }
  }

  TEST_CASE("phase group selections are disjoint and exclude the common group") {
    const auto depth = sosd::depth_phase_groups();
    const auto semantic = sosd::semantic_phase_groups();
    std::set<ParamGroup> d(depth.begin(), depth.end());
    std::set<ParamGroup> s(semantic.begin(), semantic.end());
    CHECK(d == std::set<ParamGroup>{ParamGroup::Dep, ParamGroup::ThreeDDep, ParamGroup::TwoD});
    CHECK(s == std::set<ParamGroup>{ParamGroup::Sem, ParamGroup::ThreeDSem, ParamGroup::DInv2});
    for (ParamGroup g : d) CHECK(s.count(g) == 0);
    CHECK(d.count(ParamGroup::Com) == 0);
    CHECK(s.count(ParamGroup::Com) == 0);
  }

  TEST_CASE("group and variant names round-trip") {
    for (ParamGroup g : kAllGroups) {
      CHECK(sosd::group_from_name(sosd::group_name(g)) == g);
    }
    for (Variant v : {Variant::SemanticOnly, Variant::DepthOnly, Variant::Mtl, Variant::Sosd}) {
      CHECK(sosd::variant_from_name(sosd::variant_name(v)) == v);
    }
    CHECK_THROWS_AS(sosd::variant_from_name("bogus"), ValidationError);
    CHECK_THROWS_AS(sosd::group_from_name("bogus"), ValidationError);
  }

  TEST_CASE("backbone produces stride-4 and stride-8 features") {
    NetConfig cfg;
    cfg.height = 64;
    cfg.width = 128;
    cfg.base_channels = 8;
    cfg.variant = Variant::Sosd;
    sosd::Rng rng(3);
    Model m = Model::build(cfg, rng);
    Graph g;
    auto [refined, global_feature] = m.backbone_forward(g, random_image(1, 64, 128, 4), {});
    CHECK(refined.shape()[0] == 1);
    CHECK(refined.shape()[2] == 16);
    CHECK(refined.shape()[3] == 32);
    CHECK(global_feature.shape()[0] == 1);
    CHECK(global_feature.shape()[2] == 8);
    CHECK(global_feature.shape()[3] == 16);
  }

  TEST_CASE("zeroing the global branch changes the backbone output") {
    Model m = tiny_model(Variant::Sosd, 5);
    Tensor image = random_image(1, 16, 32, 6);
    Tensor base;
    {
      Graph g;
      base = m.backbone_forward(g, image, {}).second.clone();
    }
    for (const Parameter& p : m.parameters()) {
      if (p.name == "backbone.global.w" || p.name == "backbone.global.b") {
        Tensor t = p.tensor;
        std::fill(t.values().begin(), t.values().end(), 0.0);
      }
    }
    Graph g;
    Tensor ablated = m.backbone_forward(g, image, {}).second;
    bool changed = false;
    for (std::int64_t i = 0; i < base.numel() && !changed; ++i) {
      changed = base.value_at(i) != ablated.value_at(i);
    }
    CHECK(changed);
  }

  TEST_CASE("decoder emits three equal-shape stride-4 streams") {
    Model m = tiny_model(Variant::Sosd);
    Graph g;
    Tensor image = random_image(2, 16, 32, 7);
    auto [refined, global_feature] = m.backbone_forward(g, image, {});
    auto bundle = m.decoder_forward(g, refined, global_feature, {});
    const Shape want{2, 4, 4, 8};  // N x base_channels x H/4 x W/4
    CHECK(bundle.semantic_feature.shape() == want);
    CHECK(bundle.common_representation.shape() == want);
    CHECK(bundle.depth_feature.shape() == want);

    // zeroed global feature must still give finite streams
    Graph g2;
    auto [refined2, global2] = m.backbone_forward(g2, image, {});
    Tensor zero_global = Tensor::zeros(global2.shape());
    auto bundle2 = m.decoder_forward(g2, refined2, zero_global, {});
    for (double v : bundle2.semantic_feature.values()) CHECK(std::isfinite(v));
    for (double v : bundle2.depth_feature.values()) CHECK(std::isfinite(v));
  }

  TEST_CASE("perturbing the refined feature perturbs all three decoder streams") {
    Model m = tiny_model(Variant::Sosd, 11);
    Tensor image = random_image(1, 16, 32, 12);
    sosd::FeatureBundle before, after;
    {
      Graph g;
      auto [refined, global_feature] = m.backbone_forward(g, image, {});
      before = m.decoder_forward(g, refined, global_feature, {});
    }
    {
      Graph g;
      auto [refined, global_feature] = m.backbone_forward(g, image, {});
      Tensor bumped = refined.clone();
      bumped.values()[0] += 0.5;
      after = m.decoder_forward(g, bumped, global_feature, {});
    }
    auto differs = [](const Tensor& a, const Tensor& b) {
      for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.value_at(i) != b.value_at(i)) return true;
      }
      return false;
    };
    CHECK(differs(before.semantic_feature, after.semantic_feature));
    CHECK(differs(before.common_representation, after.common_representation));
    CHECK(differs(before.depth_feature, after.depth_feature));
  }

  TEST_CASE("forward emits the variant's heads at full resolution") {
    Tensor image = random_image(1, 16, 32, 13);

    Model sosd_m = tiny_model(Variant::Sosd);
    Graph g1;
    ModelOutput out = sosd_m.forward(g1, image);
    CHECK(out.depth.shape() == Shape{1, 1, 16, 32});
    CHECK(out.logits.shape() == Shape{1, 4, 16, 32});
    for (double v : out.depth.values()) CHECK(v > 0.0);
    for (double v : out.logits.values()) CHECK(std::isfinite(v));

    Model sem_m = tiny_model(Variant::SemanticOnly);
    Graph g2;
    ModelOutput sem_out = sem_m.forward(g2, image);
    CHECK(sem_out.logits.shape() == Shape{1, 4, 16, 32});
    CHECK_FALSE(sem_out.depth.defined());

    Model dep_m = tiny_model(Variant::DepthOnly);
    Graph g3;
    ModelOutput dep_out = dep_m.forward(g3, image);
    CHECK(dep_out.depth.shape() == Shape{1, 1, 16, 32});
    CHECK_FALSE(dep_out.logits.defined());
    for (double v : dep_out.depth.values()) CHECK(v > 0.0);

    Model mtl_m = tiny_model(Variant::Mtl);
    Graph g4;
    ModelOutput mtl_out = mtl_m.forward(g4, image);
    CHECK(mtl_out.depth.shape() == Shape{1, 1, 16, 32});
    CHECK(mtl_out.logits.shape() == Shape{1, 4, 16, 32});

    Graph g5;
    CHECK_THROWS_AS(sosd_m.forward(g5, random_image(1, 8, 32, 14)), ValidationError);
  }

  TEST_CASE("sosd forward at the reference resolution") {
    NetConfig cfg;
    cfg.height = 64;
    cfg.width = 128;
    cfg.base_channels = 8;
    cfg.num_classes = 6;
    cfg.variant = Variant::Sosd;
    sosd::Rng rng(15);
    Model m = Model::build(cfg, rng);
    Graph g;
    ModelOutput out = m.forward(g, random_image(1, 64, 128, 16));
    CHECK(out.depth.shape() == Shape{1, 1, 64, 128});
    CHECK(out.logits.shape() == Shape{1, 6, 64, 128});
  }

  TEST_CASE("repeated forwards on the same input are bitwise identical") {
    Model m = tiny_model(Variant::Sosd, 17);
    Tensor image = random_image(1, 16, 32, 18);
    ForwardOptions opts;
    opts.bn_mode = BatchNormMode::Eval;  // keep running stats untouched
    Graph g1;
    ModelOutput a = m.forward(g1, image, opts);
    Graph g2;
    ModelOutput b = m.forward(g2, image, opts);
    CHECK(std::memcmp(a.depth.values().data(), b.depth.values().data(),
                      static_cast<std::size_t>(a.depth.numel()) * sizeof(double)) == 0);
    CHECK(std::memcmp(a.logits.values().data(), b.logits.values().data(),
                      static_cast<std::size_t>(a.logits.numel()) * sizeof(double)) == 0);
  }

  TEST_CASE("gate weights do not change forward values") {
    Model m = tiny_model(Variant::Sosd, 19);
    Tensor image = random_image(1, 16, 32, 20);
    ForwardOptions plain;
    plain.bn_mode = BatchNormMode::Eval;
    ForwardOptions gated = plain;
    gated.s2d_gates = {0.3, 0.0, 2.0};
    gated.d2s_gates = {0.0, 1.7, 0.25};
    Graph g1;
    ModelOutput a = m.forward(g1, image, plain);
    Graph g2;
    ModelOutput b = m.forward(g2, image, gated);
    CHECK(std::memcmp(a.depth.values().data(), b.depth.values().data(),
                      static_cast<std::size_t>(a.depth.numel()) * sizeof(double)) == 0);
    CHECK(std::memcmp(a.logits.values().data(), b.logits.values().data(),
                      static_cast<std::size_t>(a.logits.numel()) * sizeof(double)) == 0);
  }

  TEST_CASE("fusion units reject non-sosd variants") {
    Model m = tiny_model(Variant::Mtl);
    Graph g;
    Tensor image = random_image(1, 16, 32, 21);
    auto [refined, global_feature] = m.backbone_forward(g, image, {});
    auto bundle = m.decoder_forward(g, refined, global_feature, {});
    CHECK_THROWS_AS(m.semantic_to_depth(g, bundle, {}), ValidationError);
    CHECK_THROWS_AS(m.depth_to_semantic(g, bundle, {}), ValidationError);
  }

  TEST_CASE("the square-root asymmetry separates the two fusion paths") {
    Model m = tiny_model(Variant::Sosd, 23);
    Graph g;
    Tensor image = random_image(1, 16, 32, 24);
    auto [refined, global_feature] = m.backbone_forward(g, image, {});
    auto bundle = m.decoder_forward(g, refined, global_feature, {});
    auto [depth, s2d_lat] = m.semantic_to_depth(g, bundle, {});
    CHECK(g.output_depends_on(depth, OpKind::SafeSqrt));
    CHECK(g.output_depends_on(depth, OpKind::BatchNorm));

    Graph g2;
    auto [refined2, global2] = m.backbone_forward(g2, image, {});
    auto bundle2 = m.decoder_forward(g2, refined2, global2, {});
    auto [logits, d2s_lat] = m.depth_to_semantic(g2, bundle2, {});
    CHECK_FALSE(g2.output_depends_on(logits, OpKind::SafeSqrt));
    CHECK_FALSE(g2.output_depends_on(logits, OpKind::BatchNorm));
    CHECK(g2.output_depends_on(logits, OpKind::PointwiseMul));
    CHECK(logits.shape() == Shape{1, 4, 16, 32});
    CHECK(depth.shape() == Shape{1, 1, 16, 32});
  }

  TEST_CASE("latent maps carry the documented shapes") {
    Model m = tiny_model(Variant::Sosd, 25);
    Graph g;
    ModelOutput out = m.forward(g, random_image(2, 16, 32, 26));
    CHECK(out.s2d_latents.latent3d.shape() == Shape{2, 1, 4, 8});
    CHECK(out.s2d_latents.latent2d_inv.shape() == Shape{2, 1, 4, 8});
    CHECK(out.d2s_latents.latent_d_inv2.shape() == Shape{2, 2, 4, 8});
    CHECK(out.d2s_latents.latent3d.shape() == Shape{2, 2, 4, 8});
  }

  TEST_CASE("objectness cue instantiates the area relation") {
    // latent3d = fx*fy*dX*dY, latent2d_inv = 1/(du*dv)  →  cue = true depth
    const double fx = 100.0, fy = 100.0, area3d = 1.0, area2d = 2500.0;
    Graph g;
    Tensor latent3d = Tensor::full(Shape{1, 1, 4, 4}, fx * fy * area3d);
    Tensor latent2d_inv = Tensor::full(Shape{1, 1, 4, 4}, 1.0 / area2d);
    Tensor cue = Model::objectness_cue(g, latent3d, latent2d_inv, 1e-6);
    for (std::int64_t i = 0; i < cue.numel(); ++i) {
      CHECK(std::abs(cue.value_at(i) - 2.0) < 1e-9);
    }
  }

  TEST_CASE("objectness cue respects the safe-sqrt floor") {
    Graph g;
    Tensor latent3d = Tensor::full(Shape{1, 1, 2, 2}, -3.0);
    Tensor latent2d_inv = Tensor::full(Shape{1, 1, 2, 2}, 5.0);
    Tensor cue = Model::objectness_cue(g, latent3d, latent2d_inv, 1e-6);
    for (std::int64_t i = 0; i < cue.numel(); ++i) {
      CHECK(cue.value_at(i) == doctest::Approx(std::sqrt(1e-6)).epsilon(1e-12));
    }
  }

  TEST_CASE("positivity map is strictly positive with the documented form") {
    NetConfig cfg = tiny_config(Variant::Sosd);
    sosd::Rng rng(27);
    Model m = Model::build(cfg, rng);
    Graph g;
    Tensor z = Tensor::from_values(Shape{1, 1, 1, 3}, {0.0, -2.0, 3.0});
    z.set_requires_grad(true);
    Tensor d = m.positivity_map(g, z);
    const double off = cfg.positivity_offset, s = cfg.depth_scale;
    CHECK(d.value_at(0) == doctest::Approx(s * std::sqrt(off)).epsilon(1e-12));
    CHECK(d.value_at(1) == doctest::Approx(s * std::sqrt(4.0 + off)).epsilon(1e-12));
    CHECK(d.value_at(2) == doctest::Approx(s * std::sqrt(9.0 + off)).epsilon(1e-12));
    for (std::int64_t i = 0; i < d.numel(); ++i) CHECK(d.value_at(i) > 0.0);
    g.backward(g.sum(d));
    CHECK(z.grad_view()[1] != 0.0);  // gradient alive away from zero
    CHECK(z.grad_view()[2] != 0.0);
  }

  TEST_CASE("depth loss reaches the semantic branch through the fusion unit") {
    Model m = tiny_model(Variant::Sosd, 29);
    Graph g;
    Tensor image = random_image(1, 16, 32, 30);
    ModelOutput out = m.forward(g, image);
    sosd::Rng rng(31);
    Tensor gt = oracles::random_tensor(Shape{1, 1, 16, 32}, rng, 1.0, 10.0);
    Tensor mask = Tensor::full(Shape{1, 1, 16, 32}, 1.0);
    g.backward(g.masked_l1(out.depth, gt, mask));

    auto group_touched = [&](ParamGroup grp) {
      for (const Parameter& p : m.group_parameters(grp)) {
        for (double v : p.tensor.grad_view()) {
          if (v != 0.0) return true;
        }
      }
      return false;
    };
    CHECK(group_touched(ParamGroup::Sem));        // via the 2D latent path
    CHECK(group_touched(ParamGroup::TwoD));
    CHECK(group_touched(ParamGroup::ThreeDDep));
    CHECK(group_touched(ParamGroup::Dep));
    CHECK(group_touched(ParamGroup::Com));
    // groups on the semantic output path alone stay untouched
    CHECK_FALSE(group_touched(ParamGroup::DInv2));
    CHECK_FALSE(group_touched(ParamGroup::ThreeDSem));
  }

  TEST_CASE("segmentation loss reaches the depth branch through the fusion unit") {
    Model m = tiny_model(Variant::Sosd, 33);
    Graph g;
    Tensor image = random_image(1, 16, 32, 34);
    ModelOutput out = m.forward(g, image);
    std::vector<int> labels(16 * 32, 1);
    g.backward(g.softmax_cross_entropy(out.logits, labels));

    auto group_touched = [&](ParamGroup grp) {
      for (const Parameter& p : m.group_parameters(grp)) {
        for (double v : p.tensor.grad_view()) {
          if (v != 0.0) return true;
        }
      }
      return false;
    };
    CHECK(group_touched(ParamGroup::Dep));        // via the d^-2 latent path
    CHECK(group_touched(ParamGroup::DInv2));
    CHECK(group_touched(ParamGroup::ThreeDSem));
    CHECK(group_touched(ParamGroup::Sem));
    CHECK(group_touched(ParamGroup::Com));
    CHECK_FALSE(group_touched(ParamGroup::TwoD));
    CHECK_FALSE(group_touched(ParamGroup::ThreeDDep));
  }

  TEST_CASE("a combined loss touches every parameter of every live group") {
    for (Variant v : {Variant::SemanticOnly, Variant::DepthOnly, Variant::Mtl, Variant::Sosd}) {
      CAPTURE(sosd::variant_name(v));
      Model m = tiny_model(v, 35);
      Graph g;
      Tensor image = random_image(2, 16, 32, 36);
      ModelOutput out = m.forward(g, image);
      sosd::Rng rng(37);
      Tensor loss;
      if (out.logits.defined()) {
        std::vector<int> labels;
        for (int i = 0; i < 2 * 16 * 32; ++i) {
          labels.push_back(static_cast<int>(rng.uniform_int(0, 3)));
        }
        loss = g.softmax_cross_entropy(out.logits, labels);
      }
      if (out.depth.defined()) {
        Tensor gt = oracles::random_tensor(Shape{2, 1, 16, 32}, rng, 1.0, 10.0);
        Tensor mask = Tensor::full(Shape{2, 1, 16, 32}, 1.0);
        Tensor dl = g.masked_l1(out.depth, gt, mask);
        loss = loss.defined() ? g.add(loss, dl) : dl;
      }
      g.backward(loss);
      for (const Parameter& p : m.parameters()) {
        CAPTURE(p.name);
        bool touched = false;
        for (double gv : p.tensor.grad_view()) {
          if (gv != 0.0) {
            touched = true;
            break;
          }
        }
        CHECK(touched);
      }
    }
  }

  TEST_CASE("batch norm lives only in the semantic-to-depth unit") {
    Model sosd_m = tiny_model(Variant::Sosd);
    auto states = sosd_m.batch_norm_states();
    REQUIRE(states.size() == 2);
    CHECK(states[0].first == "s2d.latent3d.bn");
    CHECK(states[1].first == "s2d.latent2d.bn");
    CHECK(tiny_model(Variant::Mtl).batch_norm_states().empty());
    CHECK(tiny_model(Variant::SemanticOnly).batch_norm_states().empty());
  }

  TEST_CASE("frozen-group snapshot helper sees live tensors") {
    Model m = tiny_model(Variant::Sosd);
    auto before = snapshot_group(m, ParamGroup::Sem);
    REQUIRE_FALSE(before.empty());
    Tensor t = m.group_parameters(ParamGroup::Sem)[0].tensor;
    t.values()[0] += 1.0;
    auto after = snapshot_group(m, ParamGroup::Sem);
    CHECK(before[0][0] != after[0][0]);
  }
}
