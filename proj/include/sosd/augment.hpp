#pragma once

#include <vector>

#include "sosd/rng.hpp"
#include "sosd/scene.hpp"

namespace sosd {

struct AugmentConfig {
  double flip_probability = 0.5;
  std::vector<double> scale_ratios{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
  bool flip_enabled = true;
  bool scale_enabled = true;
  // Divide stored depth by the scale ratio (magnification mimics
  // approaching); switchable to leaving depth untouched.
  bool scale_adjusts_depth = true;

  void validate() const;
};

// Horizontal mirror of all four grids; applying it twice is the identity.
SyntheticScene flip_scene(const SyntheticScene& scene);

// Scale by ratio s: the image is resized bilinearly, depth/labels/mask with
// nearest neighbor, then everything is center-cropped or center-padded back
// to the original size. With adjust_depth, stored depth is divided by s
// (apparent size scales with 1/d, so magnification mimics approaching);
// padded pixels get mask 0 and semantic id -1, which training maps to the
// ignore id.
SyntheticScene scale_scene(const SyntheticScene& scene, double ratio, bool adjust_depth = true);

// Draws flip and ratio choices from rng (one bernoulli, one index draw when
// the respective transform is enabled) and applies them.
SyntheticScene augment_scene(const SyntheticScene& scene, const AugmentConfig& cfg, Rng& rng);

}  // namespace sosd
