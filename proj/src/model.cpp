#include "sosd/model.hpp"

#include <algorithm>
#include <set>

#include "sosd/errors.hpp"

namespace sosd {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::SemanticOnly:
      return "semantic-only";
    case Variant::DepthOnly:
      return "depth-only";
    case Variant::Mtl:
      return "mtl";
    case Variant::Sosd:
      return "sosd";
  }
  throw ValidationError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
  if (name == "semantic-only") return Variant::SemanticOnly;
  if (name == "depth-only") return Variant::DepthOnly;
  if (name == "mtl") return Variant::Mtl;
  if (name == "sosd") return Variant::Sosd;
  throw ValidationError("unknown variant: " + name);
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Com:
      return "com";
    case ParamGroup::Dep:
      return "dep";
    case ParamGroup::Sem:
      return "sem";
    case ParamGroup::ThreeDDep:
      return "3d-dep";
    case ParamGroup::ThreeDSem:
      return "3d-sem";
    case ParamGroup::TwoD:
      return "2d";
    case ParamGroup::DInv2:
      return "d-2";
  }
  throw ValidationError("group_name: unknown group");
}

ParamGroup group_from_name(const std::string& name) {
  if (name == "com") return ParamGroup::Com;
  if (name == "dep") return ParamGroup::Dep;
  if (name == "sem") return ParamGroup::Sem;
  if (name == "3d-dep") return ParamGroup::ThreeDDep;
  if (name == "3d-sem") return ParamGroup::ThreeDSem;
  if (name == "2d") return ParamGroup::TwoD;
  if (name == "d-2") return ParamGroup::DInv2;
  throw ValidationError("unknown parameter group: " + name);
}

std::array<ParamGroup, 3> depth_phase_groups() {
  return {ParamGroup::Dep, ParamGroup::ThreeDDep, ParamGroup::TwoD};
}

std::array<ParamGroup, 3> semantic_phase_groups() {
  return {ParamGroup::Sem, ParamGroup::ThreeDSem, ParamGroup::DInv2};
}

void NetConfig::validate() const {
  if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
    throw ValidationError("NetConfig: height and width must be positive multiples of 8");
  }
  if (base_channels < 2 || base_channels % 2 != 0) {
    throw ValidationError("NetConfig: base_channels must be even and >= 2");
  }
  if (num_classes < 2) throw ValidationError("NetConfig: num_classes must be >= 2");
  if (aspp_dilations.empty()) throw ValidationError("NetConfig: need at least one ASPP dilation");
  std::set<int> seen;
  for (int d : aspp_dilations) {
    if (d < 1) throw ValidationError("NetConfig: dilations must be positive");
    if (!seen.insert(d).second) throw ValidationError("NetConfig: dilations must be distinct");
  }
  if (fusion_kernel < 1) throw ValidationError("NetConfig: fusion_kernel must be >= 1");
  if (d2s_hidden < 0 || d2s_latent < 0) {
    throw ValidationError("NetConfig: negative latent head widths");
  }
  if (!(init_std > 0.0)) throw ValidationError("NetConfig: init_std must be positive");
  if (bn_momentum < 0.0 || bn_momentum >= 1.0) {
    throw ValidationError("NetConfig: bn_momentum must be in [0, 1)");
  }
  if (!(bn_epsilon > 0.0)) throw ValidationError("NetConfig: bn_epsilon must be positive");
  if (!(safe_sqrt_floor > 0.0)) throw ValidationError("NetConfig: safe_sqrt_floor must be > 0");
  if (!(positivity_offset > safe_sqrt_floor)) {
    throw ValidationError("NetConfig: positivity_offset must exceed safe_sqrt_floor");
  }
  if (!(depth_scale > 0.0)) throw ValidationError("NetConfig: depth_scale must be positive");
}

Model::ConvLayer Model::make_conv(const std::string& name, ParamGroup group, std::int64_t in_c,
                                  std::int64_t out_c, int kernel, int stride, int dilation,
                                  double bias_init, Rng& rng) {
  ConvLayer layer;
  layer.w = Tensor::zeros(Shape{out_c, in_c, kernel, kernel});
  for (double& v : layer.w.values()) v = rng.normal(0.0, cfg_.init_std);
  layer.b = Tensor::full(Shape{out_c}, bias_init);
  layer.w.set_requires_grad(true);
  layer.b.set_requires_grad(true);
  layer.opts = Conv2dOptions{stride, dilation, Padding::Same};
  params_.push_back(Parameter{name + ".w", group, layer.w});
  params_.push_back(Parameter{name + ".b", group, layer.b});
  return layer;
}

Model::BnLayer Model::make_bn(const std::string& name, ParamGroup group, std::int64_t channels) {
  BnLayer layer;
  layer.gamma = Tensor::full(Shape{channels}, 1.0).set_requires_grad(true);
  layer.beta = Tensor::zeros(Shape{channels}).set_requires_grad(true);
  layer.state = BatchNormState::identity(channels);
  params_.push_back(Parameter{name + ".gamma", group, layer.gamma});
  params_.push_back(Parameter{name + ".beta", group, layer.beta});
  return layer;
}

Tensor Model::conv(Graph& g, const ConvLayer& layer, Tensor x) const {
  return g.conv2d(std::move(x), layer.w, layer.b, layer.opts);
}

Tensor Model::bn(Graph& g, BnLayer& layer, Tensor x, BatchNormMode mode) {
  return g.batch_norm(std::move(x), layer.gamma, layer.beta, layer.state, mode, cfg_.bn_momentum,
                      cfg_.bn_epsilon);
}

Model Model::build(const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  const std::int64_t b = cfg.base_channels;
  const int kf = cfg.fusion_kernel;
  const std::int64_t dh = cfg.d2s_hidden_channels();
  const std::int64_t dl = cfg.d2s_latent_channels();
  const std::int64_t c = cfg.num_classes;

  // Backbone: two stride-2 stages to the stride-4 refined map, one more to
  // stride 8, then ASPP + cross-channel + full-image branches fused 1x1.
  m.stem_ = m.make_conv("backbone.stem", ParamGroup::Com, 3, b, 3, 2, 1, 0.0, rng);
  m.stage2_ = m.make_conv("backbone.stage2", ParamGroup::Com, b, b, 3, 2, 1, 0.0, rng);
  m.stage3_ = m.make_conv("backbone.stage3", ParamGroup::Com, b, 2 * b, 3, 2, 1, 0.0, rng);
  for (std::size_t i = 0; i < cfg.aspp_dilations.size(); ++i) {
    m.aspp_.push_back(m.make_conv("backbone.aspp" + std::to_string(i), ParamGroup::Com, 2 * b, b,
                                  3, 1, cfg.aspp_dilations[i], 0.0, rng));
  }
  m.cross_channel_ = m.make_conv("backbone.cross_channel", ParamGroup::Com, 2 * b, b, 1, 1, 1,
                                 0.0, rng);
  m.global_branch_ = m.make_conv("backbone.global", ParamGroup::Com, 2 * b, b, 1, 1, 1, 0.0, rng);
  const std::int64_t fused_in = static_cast<std::int64_t>(cfg.aspp_dilations.size() + 2) * b;
  m.fuse_ = m.make_conv("backbone.fuse", ParamGroup::Com, fused_in, 2 * b, 1, 1, 1, 0.0, rng);

  // Decoder streams: a refine conv on refined_fp, concat with the x2
  // upsampled global feature, then one conv (semantic, common) or two
  // convs (depth).
  if (m.has_semantic()) {
    m.sem_refine_ = m.make_conv("decoder.sem.refine", ParamGroup::Sem, b, b, 3, 1, 1, 0.0, rng);
    m.sem_head_ = m.make_conv("decoder.sem.head", ParamGroup::Sem, 3 * b, b, 3, 1, 1, 0.0, rng);
  }
  if (m.has_depth()) {
    m.dep_refine_ = m.make_conv("decoder.dep.refine", ParamGroup::Dep, b, b, 3, 1, 1, 0.0, rng);
    m.dep_head1_ = m.make_conv("decoder.dep.head1", ParamGroup::Dep, 3 * b, b, 3, 1, 1, 0.0, rng);
    m.dep_head2_ = m.make_conv("decoder.dep.head2", ParamGroup::Dep, b, b, 3, 1, 1, 0.0, rng);
  }
  if (m.has_fusion()) {
    m.com_refine_ = m.make_conv("decoder.com.refine", ParamGroup::Com, b, b, 3, 1, 1, 0.0, rng);
    m.com_head_ = m.make_conv("decoder.com.head", ParamGroup::Com, 3 * b, b, 3, 1, 1, 0.0, rng);
  }

  if (!m.has_fusion()) {
    if (m.has_semantic()) {
      m.plain_sem_ = m.make_conv("head.semantic", ParamGroup::Sem, b, c, 3, 1, 1, 0.0, rng);
    }
    if (m.has_depth()) {
      // Bias 0.5 puts the initial positivity-mapped depth mid-range instead
      // of in the flat region around z = 0.
      m.plain_dep_ = m.make_conv("head.depth", ParamGroup::Dep, b, 1, 3, 1, 1, 0.5, rng);
    }
  }

  if (m.has_fusion()) {
    m.s2d_3d_c1_ = m.make_conv("s2d.latent3d.c1", ParamGroup::ThreeDDep, b, 2, kf, 1, 1, 0.0, rng);
    m.s2d_3d_c2_ = m.make_conv("s2d.latent3d.c2", ParamGroup::ThreeDDep, 2, 1, kf, 1, 1, 0.0, rng);
    m.s2d_3d_bn_ = m.make_bn("s2d.latent3d.bn", ParamGroup::ThreeDDep, 1);
    m.s2d_2d_c1_ = m.make_conv("s2d.latent2d.c1", ParamGroup::TwoD, b, 2, kf, 1, 1, 0.0, rng);
    m.s2d_2d_c2_ = m.make_conv("s2d.latent2d.c2", ParamGroup::TwoD, 2, 1, kf, 1, 1, 0.0, rng);
    m.s2d_2d_bn_ = m.make_bn("s2d.latent2d.bn", ParamGroup::TwoD, 1);
    m.s2d_fuse_ = m.make_conv("s2d.fuse", ParamGroup::Dep, b + 1, 1, kf, 1, 1, 0.5, rng);

    m.d2s_d2_c1_ = m.make_conv("d2s.latentd2.c1", ParamGroup::DInv2, b, dh, kf, 1, 1, 0.0, rng);
    m.d2s_d2_c2_ = m.make_conv("d2s.latentd2.c2", ParamGroup::DInv2, dh, dl, kf, 1, 1, 0.0, rng);
    m.d2s_3d_c1_ = m.make_conv("d2s.latent3d.c1", ParamGroup::ThreeDSem, b, dh, kf, 1, 1, 0.0,
                               rng);
    m.d2s_3d_c2_ = m.make_conv("d2s.latent3d.c2", ParamGroup::ThreeDSem, dh, dl, kf, 1, 1, 0.0,
                               rng);
    m.d2s_cue_ = m.make_conv("d2s.cue", ParamGroup::Sem, dl, dl, 1, 1, 1, 0.0, rng);
    m.d2s_fuse_ = m.make_conv("d2s.fuse", ParamGroup::Sem, b + dl, c, kf, 1, 1, 0.0, rng);
  }
  return m;
}

std::pair<Tensor, Tensor> Model::backbone_forward(Graph& g, Tensor image,
                                                  const ForwardOptions& opts) {
  if (image.shape().rank() != 4 || image.shape()[1] != 3 || image.shape()[2] != cfg_.height ||
      image.shape()[3] != cfg_.width) {
    throw ValidationError("backbone_forward: image shape " + image.shape().str() +
                          " does not match configured Nx3x" + std::to_string(cfg_.height) + "x" +
                          std::to_string(cfg_.width));
  }
  (void)opts;
  Tensor x = g.relu(conv(g, stem_, std::move(image)));
  Tensor refined = g.relu(conv(g, stage2_, x));
  Tensor f8 = g.relu(conv(g, stage3_, refined));
  const std::int64_t h8 = f8.shape()[2], w8 = f8.shape()[3];

  std::vector<Tensor> branches;
  branches.reserve(aspp_.size() + 2);
  for (const ConvLayer& layer : aspp_) branches.push_back(g.relu(conv(g, layer, f8)));
  branches.push_back(g.relu(conv(g, cross_channel_, f8)));
  branches.push_back(
      g.broadcast_spatial(g.relu(conv(g, global_branch_, g.global_avg_pool(f8))), h8, w8));

  Tensor cat = branches[0];
  for (std::size_t i = 1; i < branches.size(); ++i) cat = g.concat_channels(cat, branches[i]);
  Tensor global_feature = g.relu(conv(g, fuse_, cat));
  return {refined, global_feature};
}

FeatureBundle Model::decoder_forward(Graph& g, Tensor refined_fp, Tensor global_feature,
                                     const ForwardOptions& opts) {
  (void)opts;
  Tensor up = g.bilinear_upsample(std::move(global_feature), 2);
  FeatureBundle bundle;
  if (has_semantic()) {
    Tensor r = g.relu(conv(g, sem_refine_, refined_fp));
    bundle.semantic_feature = g.relu(conv(g, sem_head_, g.concat_channels(r, up)));
  }
  if (has_depth()) {
    Tensor r = g.relu(conv(g, dep_refine_, refined_fp));
    Tensor d1 = g.relu(conv(g, dep_head1_, g.concat_channels(r, up)));
    bundle.depth_feature = g.relu(conv(g, dep_head2_, d1));
  }
  if (has_fusion()) {
    Tensor r = g.relu(conv(g, com_refine_, refined_fp));
    bundle.common_representation = g.relu(conv(g, com_head_, g.concat_channels(r, up)));
  }
  return bundle;
}

Tensor Model::positivity_map(Graph& g, Tensor z) const {
  Tensor offset = Tensor::full(z.shape(), cfg_.positivity_offset);
  Tensor sq = g.add(g.pointwise_mul(z, z), offset);
  return g.scale(g.safe_sqrt(sq, cfg_.safe_sqrt_floor), cfg_.depth_scale);
}

Tensor Model::objectness_cue(Graph& g, Tensor latent3d, Tensor latent2d_inv, double floor) {
  return g.safe_sqrt(g.pointwise_mul(std::move(latent3d), std::move(latent2d_inv)), floor);
}

std::pair<Tensor, LatentAreas> Model::semantic_to_depth(Graph& g, const FeatureBundle& bundle,
                                                        const ForwardOptions& opts) {
  if (!has_fusion()) {
    throw ValidationError("semantic_to_depth: only the sosd variant has fusion units");
  }
  if (!bundle.semantic_feature.defined() || !bundle.common_representation.defined() ||
      !bundle.depth_feature.defined()) {
    throw ValidationError("semantic_to_depth: bundle is missing decoder streams");
  }
  Tensor fd = g.grad_scale(bundle.depth_feature, opts.s2d_gates[0]);
  Tensor fc = g.grad_scale(bundle.common_representation, opts.s2d_gates[1]);
  Tensor fs = g.grad_scale(bundle.semantic_feature, opts.s2d_gates[2]);

  LatentAreas latents;
  latents.latent3d = bn(g, s2d_3d_bn_, conv(g, s2d_3d_c2_, conv(g, s2d_3d_c1_, fc)), opts.bn_mode);
  latents.latent2d_inv =
      bn(g, s2d_2d_bn_, conv(g, s2d_2d_c2_, conv(g, s2d_2d_c1_, fs)), opts.bn_mode);
  Tensor cue = objectness_cue(g, latents.latent3d, latents.latent2d_inv, cfg_.safe_sqrt_floor);
  Tensor z = conv(g, s2d_fuse_, g.concat_channels(fd, cue));
  Tensor depth = g.bilinear_upsample(positivity_map(g, z), 4);
  return {depth, latents};
}

std::pair<Tensor, LatentAreas> Model::depth_to_semantic(Graph& g, const FeatureBundle& bundle,
                                                        const ForwardOptions& opts) {
  if (!has_fusion()) {
    throw ValidationError("depth_to_semantic: only the sosd variant has fusion units");
  }
  if (!bundle.semantic_feature.defined() || !bundle.common_representation.defined() ||
      !bundle.depth_feature.defined()) {
    throw ValidationError("depth_to_semantic: bundle is missing decoder streams");
  }
  Tensor fs = g.grad_scale(bundle.semantic_feature, opts.d2s_gates[0]);
  Tensor fc = g.grad_scale(bundle.common_representation, opts.d2s_gates[1]);
  Tensor fd = g.grad_scale(bundle.depth_feature, opts.d2s_gates[2]);

  LatentAreas latents;
  latents.latent_d_inv2 = conv(g, d2s_d2_c2_, conv(g, d2s_d2_c1_, fd));
  latents.latent3d = conv(g, d2s_3d_c2_, conv(g, d2s_3d_c1_, fc));
  // Multiplicative coupling only; this path has no square root.
  Tensor cue = conv(g, d2s_cue_, g.pointwise_mul(latents.latent_d_inv2, latents.latent3d));
  Tensor logits = g.bilinear_upsample(conv(g, d2s_fuse_, g.concat_channels(fs, cue)), 4);
  return {logits, latents};
}

ModelOutput Model::forward(Graph& g, Tensor image, const ForwardOptions& opts) {
  auto [refined, global_feature] = backbone_forward(g, std::move(image), opts);
  ModelOutput out;
  out.bundle = decoder_forward(g, refined, global_feature, opts);
  switch (cfg_.variant) {
    case Variant::SemanticOnly:
      out.logits = g.bilinear_upsample(conv(g, plain_sem_, out.bundle.semantic_feature), 4);
      break;
    case Variant::DepthOnly:
      out.depth =
          g.bilinear_upsample(positivity_map(g, conv(g, plain_dep_, out.bundle.depth_feature)), 4);
      break;
    case Variant::Mtl:
      out.logits = g.bilinear_upsample(conv(g, plain_sem_, out.bundle.semantic_feature), 4);
      out.depth =
          g.bilinear_upsample(positivity_map(g, conv(g, plain_dep_, out.bundle.depth_feature)), 4);
      break;
    case Variant::Sosd: {
      auto [depth, s2d] = semantic_to_depth(g, out.bundle, opts);
      auto [logits, d2s] = depth_to_semantic(g, out.bundle, opts);
      out.depth = depth;
      out.logits = logits;
      out.s2d_latents = s2d;
      out.d2s_latents = d2s;
      break;
    }
  }
  return out;
}

std::vector<Parameter> Model::group_parameters(ParamGroup group) const {
  std::vector<Parameter> out;
  for (const Parameter& p : params_) {
    if (p.group == group) out.push_back(p);
  }
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.numel();
  return n;
}

std::vector<ParamGroup> Model::live_groups() const {
  switch (cfg_.variant) {
    case Variant::SemanticOnly:
      return {ParamGroup::Com, ParamGroup::Sem};
    case Variant::DepthOnly:
      return {ParamGroup::Com, ParamGroup::Dep};
    case Variant::Mtl:
      return {ParamGroup::Com, ParamGroup::Dep, ParamGroup::Sem};
    case Variant::Sosd:
      return {ParamGroup::Com,      ParamGroup::Dep,  ParamGroup::Sem, ParamGroup::ThreeDDep,
              ParamGroup::ThreeDSem, ParamGroup::TwoD, ParamGroup::DInv2};
  }
  throw ValidationError("live_groups: unknown variant");
}

std::vector<std::pair<std::string, BatchNormState*>> Model::batch_norm_states() {
  std::vector<std::pair<std::string, BatchNormState*>> out;
  if (has_fusion()) {
    out.emplace_back("s2d.latent3d.bn", &s2d_3d_bn_.state);
    out.emplace_back("s2d.latent2d.bn", &s2d_2d_bn_.state);
  }
  return out;
}

}  // namespace sosd
