#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sosd/geometry.hpp"
#include "sosd/rng.hpp"
#include "sosd/tensor.hpp"

namespace sosd {

// One rendered sample. image Is [H,W,3] in [0,1]; depth [H,W] meters;
// semantic [H,W] class ids stored as doubles (0 = background); mask [H,W]
// with 1 = valid ground truth, 0 = hole.
struct SyntheticScene {
  Tensor image;
  Tensor depth;
  Tensor semantic;
  Tensor mask;
  CameraIntrinsics intrinsics;
};

struct DatasetConfig {
  std::int64_t scene_count = 512;
  std::int64_t height = 64;
  std::int64_t width = 128;
  std::int64_t min_objects = 2;
  std::int64_t max_objects = 6;
  double min_depth = 2.0;
  double max_depth = 12.0;
  std::int64_t num_classes = 6;  // including background class 0
  double focal_x = 100.0;
  double focal_y = 100.0;
  double far_plane = 20.0;
  double hole_rate = 0.05;
  double pixel_noise = 0.0;  // uniform +/- amplitude added to the image
  bool write_previews = false;
  std::uint64_t seed = 0;

  CameraIntrinsics intrinsics() const {
    return CameraIntrinsics{focal_x, focal_y, static_cast<double>(width) / 2.0,
                            static_cast<double>(height) / 2.0};
  }
};

// Characteristic physical side length (meters) of a class; every instance of
// the class has exactly this physical area (aspect ratio varies), which is
// what makes the class label informative about metric size.
double class_base_size(int class_id);
// Flat albedo associated with a class id (class 0 = background).
std::array<double, 3> class_albedo(int class_id);

// Sample the object list for one scene. All draws come from `rng`; objects
// are placed fully inside the field of view.
std::vector<PlanarObject> make_scene_objects(const DatasetConfig& cfg, Rng& rng);

// Painter's-algorithm rasterization at pixel centers (integer coordinates),
// no anti-aliasing: the nearest object covering a pixel center wins; pixels
// covered by no object get class 0 and depth = far_plane. holes_rng knocks
// out a hole_rate fraction of the valid mask.
SyntheticScene render_scene(const std::vector<PlanarObject>& objects, const CameraIntrinsics& k,
                            std::int64_t height, std::int64_t width, Rng& holes_rng,
                            double hole_rate, double far_plane);

// Directory layout: <root>/manifest.json plus one subdirectory per scene
// holding image.sosd / depth.sosd / semantic.sosd / mask.sosd (and optional
// image.ppm / depth.pgm previews). Identical (config, seed) gives
// byte-identical output.
void generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& root);

struct Dataset {
  DatasetConfig config;
  std::vector<std::string> scene_names;
  std::vector<SyntheticScene> scenes;
};

SyntheticScene load_scene(const std::filesystem::path& dir, const CameraIntrinsics& k);
Dataset load_dataset(const std::filesystem::path& root);

void validate_scene(const SyntheticScene& scene, std::int64_t num_classes);

}  // namespace sosd
