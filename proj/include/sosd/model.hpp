#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sosd/graph.hpp"
#include "sosd/rng.hpp"
#include "sosd/tensor.hpp"

namespace sosd {

enum class Variant { SemanticOnly, DepthOnly, Mtl, Sosd };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Parameter groups of the alternating schedule. Com is the backbone plus the
// common-representation decoder stream; Dep/Sem are the task branches;
// ThreeDDep/TwoD are the latent heads inside the semantic-to-depth unit;
// ThreeDSem/DInv2 are the latent heads inside the depth-to-semantic unit.
enum class ParamGroup { Com, Dep, Sem, ThreeDDep, ThreeDSem, TwoD, DInv2 };

std::string group_name(ParamGroup g);
ParamGroup group_from_name(const std::string& name);

// Groups stepped by the depth phase (the common group is stepped separately
// by the backbone merge update in both phases).
std::array<ParamGroup, 3> depth_phase_groups();
std::array<ParamGroup, 3> semantic_phase_groups();

struct NetConfig {
  std::int64_t height = 64;
  std::int64_t width = 128;
  std::int64_t base_channels = 16;
  std::vector<int> aspp_dilations{1, 2, 4, 8};
  std::int64_t num_classes = 6;
  Variant variant = Variant::Sosd;
  int fusion_kernel = 3;
  // Depth-to-semantic latent head widths; 0 derives base_channels and
  // base_channels/2 (the toy-scaled analogue of the wide semantic-side head).
  std::int64_t d2s_hidden = 0;
  std::int64_t d2s_latent = 0;
  double init_std = 0.1;  // weight init N(0, init_std^2), i.e. variance 0.01
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  double safe_sqrt_floor = 1e-6;
  // Depth positivity: depth = depth_scale * sqrt(z^2 + positivity_offset).
  double positivity_offset = 1e-4;
  double depth_scale = 20.0;

  void validate() const;
  std::int64_t d2s_hidden_channels() const { return d2s_hidden > 0 ? d2s_hidden : base_channels; }
  std::int64_t d2s_latent_channels() const {
    return d2s_latent > 0 ? d2s_latent : base_channels / 2;
  }
};

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

// Stride-4 feature maps produced by the decoder; single-task variants leave
// the missing streams default-constructed.
struct FeatureBundle {
  Tensor semantic_feature;
  Tensor common_representation;
  Tensor depth_feature;
};

struct LatentAreas {
  Tensor latent3d;       // from the common representation
  Tensor latent2d_inv;   // semantic-to-depth unit, 1 channel
  Tensor latent_d_inv2;  // depth-to-semantic unit, d2s_latent channels
};

struct ModelOutput {
  Tensor depth;   // N x 1 x H x W, strictly positive (absent for semantic-only)
  Tensor logits;  // N x C x H x W (absent for depth-only)
  FeatureBundle bundle;
  LatentAreas s2d_latents;
  LatentAreas d2s_latents;
};

// Per-forward switches. The gate weights multiply gradients (identity
// forward) on the three streams entering each fusion unit, in the order
// {task feature, common representation, opposite-task feature}; they
// implement the per-branch weighting of the backbone merge update.
struct ForwardOptions {
  BatchNormMode bn_mode = BatchNormMode::Train;
  std::array<double, 3> s2d_gates{1.0, 1.0, 1.0};
  std::array<double, 3> d2s_gates{1.0, 1.0, 1.0};
};

class Model {
 public:
  Model() = default;

  // All conv weights are drawn from rng in a fixed creation order, so the
  // same (cfg, rng seed) reproduces identical parameter bytes.
  static Model build(const NetConfig& cfg, Rng& rng);

  const NetConfig& config() const { return cfg_; }

  // Returns (refined_fp at stride 4, global_feature at stride 8).
  std::pair<Tensor, Tensor> backbone_forward(Graph& g, Tensor image, const ForwardOptions& opts);
  FeatureBundle decoder_forward(Graph& g, Tensor refined_fp, Tensor global_feature,
                                const ForwardOptions& opts);
  // Fusion units; valid only for the sosd variant.
  std::pair<Tensor, LatentAreas> semantic_to_depth(Graph& g, const FeatureBundle& bundle,
                                                   const ForwardOptions& opts);
  std::pair<Tensor, LatentAreas> depth_to_semantic(Graph& g, const FeatureBundle& bundle,
                                                   const ForwardOptions& opts);
  ModelOutput forward(Graph& g, Tensor image, const ForwardOptions& opts = {});

  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter> group_parameters(ParamGroup group) const;
  std::int64_t parameter_count() const;
  std::vector<ParamGroup> live_groups() const;

  // Named mutable access to batch-norm running statistics (checkpointing).
  std::vector<std::pair<std::string, BatchNormState*>> batch_norm_states();

  // depth = depth_scale * sqrt(z^2 + positivity_offset): smooth, strictly
  // positive, with nonvanishing gradient wherever z is away from 0.
  Tensor positivity_map(Graph& g, Tensor z) const;

  // The square-root objectness composition used inside semantic_to_depth:
  // cue = safe_sqrt(latent3d * latent2d_inv).
  static Tensor objectness_cue(Graph& g, Tensor latent3d, Tensor latent2d_inv, double floor);

 private:
  struct ConvLayer {
    Tensor w, b;
    Conv2dOptions opts;
  };
  struct BnLayer {
    Tensor gamma, beta;
    BatchNormState state;
  };

  ConvLayer make_conv(const std::string& name, ParamGroup group, std::int64_t in_c,
                      std::int64_t out_c, int kernel, int stride, int dilation, double bias_init,
                      Rng& rng);
  BnLayer make_bn(const std::string& name, ParamGroup group, std::int64_t channels);
  Tensor conv(Graph& g, const ConvLayer& layer, Tensor x) const;
  Tensor bn(Graph& g, BnLayer& layer, Tensor x, BatchNormMode mode);

  bool has_semantic() const { return cfg_.variant != Variant::DepthOnly; }
  bool has_depth() const { return cfg_.variant != Variant::SemanticOnly; }
  bool has_fusion() const { return cfg_.variant == Variant::Sosd; }

  NetConfig cfg_;
  std::vector<Parameter> params_;

  // Backbone.
  ConvLayer stem_, stage2_, stage3_;
  std::vector<ConvLayer> aspp_;
  ConvLayer cross_channel_, global_branch_, fuse_;
  // Decoder streams.
  ConvLayer sem_refine_, sem_head_;
  ConvLayer dep_refine_, dep_head1_, dep_head2_;
  ConvLayer com_refine_, com_head_;
  // Plain task heads (non-sosd variants).
  ConvLayer plain_sem_, plain_dep_;
  // Semantic-to-depth unit.
  ConvLayer s2d_3d_c1_, s2d_3d_c2_, s2d_2d_c1_, s2d_2d_c2_, s2d_fuse_;
  BnLayer s2d_3d_bn_, s2d_2d_bn_;
  // Depth-to-semantic unit.
  ConvLayer d2s_d2_c1_, d2s_d2_c2_, d2s_3d_c1_, d2s_3d_c2_, d2s_cue_, d2s_fuse_;
};

}  // namespace sosd
