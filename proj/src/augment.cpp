#include "sosd/augment.hpp"

#include <algorithm>
#include <cmath>

#include "sosd/errors.hpp"

namespace sosd {
namespace {

// Nearest-neighbor source index under pixel-center mapping; exact identity
// at ratio 1 and exact sample duplication at integer ratios.
std::int64_t nearest_src(std::int64_t out, std::int64_t in_size, std::int64_t out_size) {
  const double src = (static_cast<double>(out) + 0.5) * static_cast<double>(in_size) /
                         static_cast<double>(out_size) -
                     0.5;
  const auto idx = static_cast<std::int64_t>(std::floor(src + 0.5));
  return std::clamp<std::int64_t>(idx, 0, in_size - 1);
}

struct BilinearTap {
  std::int64_t lo, hi;
  double frac;
};

BilinearTap bilinear_src(std::int64_t out, std::int64_t in_size, std::int64_t out_size) {
  double src = (static_cast<double>(out) + 0.5) * static_cast<double>(in_size) /
                   static_cast<double>(out_size) -
               0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  const auto lo = static_cast<std::int64_t>(std::floor(src));
  return BilinearTap{lo, std::min(lo + 1, in_size - 1), src - static_cast<double>(lo)};
}

}  // namespace

void AugmentConfig::validate() const {
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    throw ValidationError("augment: flip_probability must be in [0, 1]");
  }
  for (double r : scale_ratios) {
    if (!(r > 0.0)) throw ValidationError("augment: scale ratios must be positive");
  }
}

SyntheticScene flip_scene(const SyntheticScene& scene) {
  const std::int64_t h = scene.image.shape()[0], w = scene.image.shape()[1];
  SyntheticScene out;
  out.intrinsics = scene.intrinsics;
  out.image = Tensor::zeros(scene.image.shape());
  out.depth = Tensor::zeros(scene.depth.shape());
  out.semantic = Tensor::zeros(scene.semantic.shape());
  out.mask = Tensor::zeros(scene.mask.shape());
  const double* si = scene.image.values().data();
  const double* sd = scene.depth.values().data();
  const double* ss = scene.semantic.values().data();
  const double* sm = scene.mask.values().data();
  double* oi = out.image.values().data();
  double* od = out.depth.values().data();
  double* os = out.semantic.values().data();
  double* om = out.mask.values().data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t src = y * w + (w - 1 - x);
      const std::int64_t dst = y * w + x;
      oi[dst * 3 + 0] = si[src * 3 + 0];
      oi[dst * 3 + 1] = si[src * 3 + 1];
      oi[dst * 3 + 2] = si[src * 3 + 2];
      od[dst] = sd[src];
      os[dst] = ss[src];
      om[dst] = sm[src];
    }
  }
  return out;
}

SyntheticScene scale_scene(const SyntheticScene& scene, double ratio, bool adjust_depth) {
  if (!(ratio > 0.0)) throw ValidationError("scale_scene: ratio must be positive");
  if (ratio == 1.0) return scene;
  const double depth_div = adjust_depth ? ratio : 1.0;
  const std::int64_t h = scene.image.shape()[0], w = scene.image.shape()[1];
  const std::int64_t nh = std::max<std::int64_t>(1, std::llround(h * ratio));
  const std::int64_t nw = std::max<std::int64_t>(1, std::llround(w * ratio));

  // Resize to (nh, nw).
  std::vector<double> rimg(static_cast<std::size_t>(nh) * nw * 3);
  std::vector<double> rdep(static_cast<std::size_t>(nh) * nw);
  std::vector<double> rsem(static_cast<std::size_t>(nh) * nw);
  std::vector<double> rmask(static_cast<std::size_t>(nh) * nw);
  const double* si = scene.image.values().data();
  const double* sd = scene.depth.values().data();
  const double* ss = scene.semantic.values().data();
  const double* sm = scene.mask.values().data();
  for (std::int64_t y = 0; y < nh; ++y) {
    const BilinearTap ty = bilinear_src(y, h, nh);
    const std::int64_t ny = nearest_src(y, h, nh);
    for (std::int64_t x = 0; x < nw; ++x) {
      const BilinearTap tx = bilinear_src(x, w, nw);
      const std::int64_t nx = nearest_src(x, w, nw);
      for (int c = 0; c < 3; ++c) {
        const double v00 = si[(ty.lo * w + tx.lo) * 3 + c];
        const double v01 = si[(ty.lo * w + tx.hi) * 3 + c];
        const double v10 = si[(ty.hi * w + tx.lo) * 3 + c];
        const double v11 = si[(ty.hi * w + tx.hi) * 3 + c];
        const double top = v00 * (1.0 - tx.frac) + v01 * tx.frac;
        const double bot = v10 * (1.0 - tx.frac) + v11 * tx.frac;
        rimg[(y * nw + x) * 3 + c] = top * (1.0 - ty.frac) + bot * ty.frac;
      }
      const std::int64_t nsrc = ny * w + nx;
      rdep[y * nw + x] = sd[nsrc] / depth_div;
      rsem[y * nw + x] = ss[nsrc];
      rmask[y * nw + x] = sm[nsrc];
    }
  }

  // Center crop or pad back to (h, w). Padded pixels carry no supervision:
  // mask 0 and the -1 semantic sentinel.
  SyntheticScene out;
  out.intrinsics = scene.intrinsics;
  out.image = Tensor::zeros(scene.image.shape());
  out.depth = Tensor::zeros(scene.depth.shape());
  out.semantic = Tensor::full(scene.semantic.shape(), -1.0);
  out.mask = Tensor::zeros(scene.mask.shape());
  double* oi = out.image.values().data();
  double* od = out.depth.values().data();
  double* os = out.semantic.values().data();
  double* om = out.mask.values().data();
  const std::int64_t src_off_y = nh >= h ? (nh - h) / 2 : 0;
  const std::int64_t src_off_x = nw >= w ? (nw - w) / 2 : 0;
  const std::int64_t dst_off_y = nh >= h ? 0 : (h - nh) / 2;
  const std::int64_t dst_off_x = nw >= w ? 0 : (w - nw) / 2;
  const std::int64_t copy_h = std::min(h, nh), copy_w = std::min(w, nw);
  for (std::int64_t y = 0; y < copy_h; ++y) {
    for (std::int64_t x = 0; x < copy_w; ++x) {
      const std::int64_t src = (y + src_off_y) * nw + (x + src_off_x);
      const std::int64_t dst = (y + dst_off_y) * w + (x + dst_off_x);
      oi[dst * 3 + 0] = rimg[src * 3 + 0];
      oi[dst * 3 + 1] = rimg[src * 3 + 1];
      oi[dst * 3 + 2] = rimg[src * 3 + 2];
      od[dst] = rdep[src];
      os[dst] = rsem[src];
      om[dst] = rmask[src];
    }
  }
  return out;
}

SyntheticScene augment_scene(const SyntheticScene& scene, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  SyntheticScene out = scene;
  if (cfg.flip_enabled) {
    // Always draw so the stream layout does not depend on outcomes.
    const bool do_flip = rng.bernoulli(cfg.flip_probability);
    if (do_flip) out = flip_scene(out);
  }
  if (cfg.scale_enabled && !cfg.scale_ratios.empty()) {
    const auto idx =
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.scale_ratios.size()) - 1);
    const double ratio = cfg.scale_ratios[static_cast<std::size_t>(idx)];
    if (ratio != 1.0) out = scale_scene(out, ratio, cfg.scale_adjusts_depth);
  }
  return out;
}

}  // namespace sosd
