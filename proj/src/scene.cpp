#include "sosd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "sosd/errors.hpp"
#include "sosd/image_io.hpp"

namespace sosd {
namespace {

using nlohmann::json;

void validate_config(const DatasetConfig& cfg) {
  if (cfg.scene_count < 0) throw ValidationError("dataset: scene_count must be >= 0");
  if (cfg.height < 1 || cfg.width < 1) throw ValidationError("dataset: empty image dims");
  if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects) {
    throw ValidationError("dataset: object count range is invalid");
  }
  if (!(cfg.min_depth > 0.0) || cfg.max_depth < cfg.min_depth) {
    throw ValidationError("dataset: depth range is invalid");
  }
  if (cfg.num_classes < 2) throw ValidationError("dataset: need at least background + 1 class");
  if (!(cfg.focal_x > 0.0 && cfg.focal_y > 0.0)) {
    throw ValidationError("dataset: focal lengths must be positive");
  }
  if (!(cfg.far_plane > cfg.max_depth)) {
    throw ValidationError("dataset: far_plane must exceed max_depth");
  }
  if (cfg.hole_rate < 0.0 || cfg.hole_rate >= 1.0) {
    throw ValidationError("dataset: hole_rate must be in [0, 1)");
  }
  if (cfg.pixel_noise < 0.0 || cfg.pixel_noise > 0.5) {
    throw ValidationError("dataset: pixel_noise must be in [0, 0.5]");
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0.0, g = 0.0, b = 0.0;
  if (hp < 1.0) {
    r = c, g = x;
  } else if (hp < 2.0) {
    r = x, g = c;
  } else if (hp < 3.0) {
    g = c, b = x;
  } else if (hp < 4.0) {
    g = x, b = c;
  } else if (hp < 5.0) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

json intrinsics_json(const CameraIntrinsics& k) {
  return json{{"fx", k.fx}, {"fy", k.fy}, {"ux", k.ux}, {"uy", k.uy}};
}

std::string scene_dir_name(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05lld", static_cast<long long>(index));
  return buf;
}

// Extra substream tag local to dataset generation (0 is reserved/unused by
// the shared tags).
constexpr std::uint64_t kNoiseTag = 6;

}  // namespace

double class_base_size(int class_id) {
  if (class_id < 1) throw ValidationError("class_base_size: class 0 is background");
  // Distinct physical scale per class, geometric progression.
  return 0.45 * std::pow(1.34, class_id - 1);
}

std::array<double, 3> class_albedo(int class_id) {
  if (class_id < 0) throw ValidationError("class_albedo: negative class id");
  if (class_id == 0) return {0.08, 0.08, 0.10};
  // Golden-ratio hue spacing keeps any number of classes visually distinct.
  const double hue = std::fmod(0.12 + 0.618033988749895 * (class_id - 1), 1.0);
  return hsv_to_rgb(hue, 0.75, 0.85);
}

std::vector<PlanarObject> make_scene_objects(const DatasetConfig& cfg, Rng& rng) {
  validate_config(cfg);
  const CameraIntrinsics k = cfg.intrinsics();
  const std::int64_t n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<PlanarObject> objects;
  objects.reserve(n);
  for (std::int64_t i = 0; i < n; ++i) {
    PlanarObject obj;
    obj.class_id = static_cast<int>(rng.uniform_int(1, cfg.num_classes - 1));
    const double size = class_base_size(obj.class_id);
    // Aspect jitter preserves the physical area exactly: dx*dy == size^2,
    // so the class id alone determines the area term of the size relation.
    const double aspect = rng.uniform(0.8, 1.25);
    obj.extent.dx = size * std::sqrt(aspect);
    obj.extent.dy = size / std::sqrt(aspect);
    obj.albedo = class_albedo(obj.class_id);

    // Keep the whole rectangle inside the field of view: lift the minimum
    // depth until the projected extent fits with a small margin.
    const double fit_x = k.fx * obj.extent.dx / (static_cast<double>(cfg.width) - 2.0);
    const double fit_y = k.fy * obj.extent.dy / (static_cast<double>(cfg.height) - 2.0);
    const double d_lo = std::max({cfg.min_depth, fit_x, fit_y});
    const double d_hi = std::max(cfg.max_depth, d_lo * 1.05);
    const double d = rng.uniform(d_lo, d_hi);

    const ImageExtent ext = image_extent(obj.extent, d, k);
    const double margin_u = ext.du / 2.0 + 0.5;
    const double margin_v = ext.dv / 2.0 + 0.5;
    const double u_lo = margin_u, u_hi = static_cast<double>(cfg.width) - 1.0 - margin_u;
    const double v_lo = margin_v, v_hi = static_cast<double>(cfg.height) - 1.0 - margin_v;
    const double u = u_lo < u_hi ? rng.uniform(u_lo, u_hi) : (u_lo + u_hi) / 2.0;
    const double v = v_lo < v_hi ? rng.uniform(v_lo, v_hi) : (v_lo + v_hi) / 2.0;
    obj.center = SpacePoint{(u - k.ux) * d / k.fx, (v - k.uy) * d / k.fy, d};
    objects.push_back(obj);
  }
  return objects;
}

SyntheticScene render_scene(const std::vector<PlanarObject>& objects, const CameraIntrinsics& k,
                            std::int64_t height, std::int64_t width, Rng& holes_rng,
                            double hole_rate, double far_plane) {
  if (height < 1 || width < 1) throw ValidationError("render_scene: empty image dims");
  if (hole_rate < 0.0 || hole_rate >= 1.0) {
    throw ValidationError("render_scene: hole_rate must be in [0, 1)");
  }
  if (!(far_plane > 0.0)) throw ValidationError("render_scene: far_plane must be positive");

  SyntheticScene scene;
  scene.intrinsics = k;
  scene.image = Tensor::zeros(Shape{height, width, 3});
  scene.depth = Tensor::full(Shape{height, width}, far_plane);
  scene.semantic = Tensor::zeros(Shape{height, width});
  scene.mask = Tensor::full(Shape{height, width}, 1.0);

  {
    const std::array<double, 3> bg = class_albedo(0);
    double* img = scene.image.values().data();
    for (std::int64_t i = 0; i < height * width; ++i) {
      img[i * 3 + 0] = bg[0];
      img[i * 3 + 1] = bg[1];
      img[i * 3 + 2] = bg[2];
    }
  }

  // Painter's algorithm: draw far-to-near so the nearest object wins each
  // pixel. Stable sort keeps exact-tie resolution deterministic.
  std::vector<std::size_t> order(objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return objects[a].center.d > objects[b].center.d;
  });

  double* img = scene.image.values().data();
  double* dep = scene.depth.values().data();
  double* sem = scene.semantic.values().data();
  for (std::size_t oi : order) {
    const PlanarObject& obj = objects[oi];
    if (!(obj.center.d > 0.0)) throw ValidationError("render_scene: object behind camera");
    if (!(obj.extent.dx > 0.0 && obj.extent.dy > 0.0)) {
      throw ValidationError("render_scene: object extent must be positive");
    }
    const ImagePoint c = project_point(obj.center, k);
    const ImageExtent e = image_extent(obj.extent, obj.center.d, k);
    // Pixel centers sit at integer coordinates; pixel (x, y) is covered when
    // its center falls in the half-open projected rectangle.
    const double u_lo = c.u - e.du / 2.0, u_hi = c.u + e.du / 2.0;
    const double v_lo = c.v - e.dv / 2.0, v_hi = c.v + e.dv / 2.0;
    const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(u_lo)));
    const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(v_lo)));
    for (std::int64_t y = y0; y < height && static_cast<double>(y) < v_hi; ++y) {
      for (std::int64_t x = x0; x < width && static_cast<double>(x) < u_hi; ++x) {
        const std::int64_t p = y * width + x;
        img[p * 3 + 0] = obj.albedo[0];
        img[p * 3 + 1] = obj.albedo[1];
        img[p * 3 + 2] = obj.albedo[2];
        dep[p] = obj.center.d;
        sem[p] = static_cast<double>(obj.class_id);
      }
    }
  }

  if (hole_rate > 0.0) {
    double* msk = scene.mask.values().data();
    for (std::int64_t i = 0; i < height * width; ++i) {
      if (holes_rng.bernoulli(hole_rate)) msk[i] = 0.0;
    }
  }
  return scene;
}

void generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& root) {
  validate_config(cfg);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("generate_dataset: cannot create " + root.string() + ": " + ec.message());

  const CameraIntrinsics k = cfg.intrinsics();
  std::vector<std::string> names;
  names.reserve(cfg.scene_count);
  for (std::int64_t i = 0; i < cfg.scene_count; ++i) {
    Rng scene_rng = Rng::substream(cfg.seed, rng_tag::kScene, static_cast<std::uint64_t>(i));
    Rng holes_rng = Rng::substream(cfg.seed, rng_tag::kHoles, static_cast<std::uint64_t>(i));
    const std::vector<PlanarObject> objects = make_scene_objects(cfg, scene_rng);
    SyntheticScene scene =
        render_scene(objects, k, cfg.height, cfg.width, holes_rng, cfg.hole_rate, cfg.far_plane);
    if (cfg.pixel_noise > 0.0) {
      Rng noise_rng = Rng::substream(cfg.seed, kNoiseTag, static_cast<std::uint64_t>(i));
      for (double& v : scene.image.values()) {
        v = std::clamp(v + noise_rng.uniform(-cfg.pixel_noise, cfg.pixel_noise), 0.0, 1.0);
      }
    }

    const std::string name = scene_dir_name(i);
    const std::filesystem::path dir = root / name;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("generate_dataset: cannot create " + dir.string());
    write_tensor(dir / "image.sosd", scene.image);
    write_tensor(dir / "depth.sosd", scene.depth);
    write_tensor(dir / "semantic.sosd", scene.semantic);
    write_tensor(dir / "mask.sosd", scene.mask);
    if (cfg.write_previews) {
      write_image_ppm(dir / "image.ppm", scene.image);
      write_grid_pgm(dir / "depth.pgm", scene.depth);
    }
    names.push_back(name);
  }

  json manifest;
  manifest["format_version"] = 1;
  manifest["type"] = "sosd-dataset";
  manifest["seed"] = cfg.seed;
  manifest["scene_count"] = cfg.scene_count;
  manifest["height"] = cfg.height;
  manifest["width"] = cfg.width;
  manifest["num_classes"] = cfg.num_classes;
  manifest["min_objects"] = cfg.min_objects;
  manifest["max_objects"] = cfg.max_objects;
  manifest["min_depth"] = cfg.min_depth;
  manifest["max_depth"] = cfg.max_depth;
  manifest["far_plane"] = cfg.far_plane;
  manifest["hole_rate"] = cfg.hole_rate;
  manifest["pixel_noise"] = cfg.pixel_noise;
  manifest["intrinsics"] = intrinsics_json(k);
  manifest["scenes"] = names;

  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw IoError("generate_dataset: cannot write manifest under " + root.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("generate_dataset: manifest write failed");
}

SyntheticScene load_scene(const std::filesystem::path& dir, const CameraIntrinsics& k) {
  SyntheticScene scene;
  scene.intrinsics = k;
  scene.image = read_tensor(dir / "image.sosd");
  scene.depth = read_tensor(dir / "depth.sosd");
  scene.semantic = read_tensor(dir / "semantic.sosd");
  scene.mask = read_tensor(dir / "mask.sosd");
  if (scene.image.shape().rank() != 3 || scene.image.shape()[2] != 3) {
    throw ValidationError("load_scene: image must be HxWx3, got " + scene.image.shape().str());
  }
  const Shape grid{scene.image.shape()[0], scene.image.shape()[1]};
  for (const Tensor* t : {&scene.depth, &scene.semantic, &scene.mask}) {
    if (!(t->shape() == grid)) {
      throw ValidationError("load_scene: grid shape mismatch in " + dir.string());
    }
  }
  return scene;
}

Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json", std::ios::binary);
  if (!in) throw IoError("load_dataset: cannot open manifest in " + root.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("load_dataset: malformed manifest: " + std::string(e.what()));
  }
  try {
    if (manifest.at("type").get<std::string>() != "sosd-dataset") {
      throw ValidationError("load_dataset: not a dataset manifest");
    }
    Dataset ds;
    ds.config.seed = manifest.at("seed").get<std::uint64_t>();
    ds.config.scene_count = manifest.at("scene_count").get<std::int64_t>();
    ds.config.height = manifest.at("height").get<std::int64_t>();
    ds.config.width = manifest.at("width").get<std::int64_t>();
    ds.config.num_classes = manifest.at("num_classes").get<std::int64_t>();
    ds.config.min_objects = manifest.at("min_objects").get<std::int64_t>();
    ds.config.max_objects = manifest.at("max_objects").get<std::int64_t>();
    ds.config.min_depth = manifest.at("min_depth").get<double>();
    ds.config.max_depth = manifest.at("max_depth").get<double>();
    ds.config.far_plane = manifest.at("far_plane").get<double>();
    ds.config.hole_rate = manifest.at("hole_rate").get<double>();
    ds.config.pixel_noise = manifest.value("pixel_noise", 0.0);
    ds.config.focal_x = manifest.at("intrinsics").at("fx").get<double>();
    ds.config.focal_y = manifest.at("intrinsics").at("fy").get<double>();
    const CameraIntrinsics k{manifest.at("intrinsics").at("fx").get<double>(),
                             manifest.at("intrinsics").at("fy").get<double>(),
                             manifest.at("intrinsics").at("ux").get<double>(),
                             manifest.at("intrinsics").at("uy").get<double>()};
    for (const auto& name : manifest.at("scenes")) {
      ds.scene_names.push_back(name.get<std::string>());
      ds.scenes.push_back(load_scene(root / ds.scene_names.back(), k));
    }
    return ds;
  } catch (const json::exception& e) {
    throw ValidationError("load_dataset: manifest missing fields: " + std::string(e.what()));
  }
}

void validate_scene(const SyntheticScene& scene, std::int64_t num_classes) {
  const std::int64_t h = scene.image.shape()[0], w = scene.image.shape()[1];
  const std::int64_t hw = h * w;
  const double* img = scene.image.values().data();
  const double* dep = scene.depth.values().data();
  const double* sem = scene.semantic.values().data();
  const double* msk = scene.mask.values().data();
  for (std::int64_t i = 0; i < hw * 3; ++i) {
    if (!(img[i] >= 0.0 && img[i] <= 1.0)) {
      throw ValidationError("scene invariant: image values must lie in [0,1]");
    }
  }
  for (std::int64_t i = 0; i < hw; ++i) {
    if (msk[i] != 0.0 && msk[i] != 1.0) {
      throw ValidationError("scene invariant: mask must be 0/1");
    }
    if (msk[i] == 1.0 && !(dep[i] > 0.0)) {
      throw ValidationError("scene invariant: non-positive depth on a valid pixel");
    }
    const double c = sem[i];
    if (c != std::floor(c) || c < 0.0 || c >= static_cast<double>(num_classes)) {
      throw ValidationError("scene invariant: semantic id out of range");
    }
  }
}

}  // namespace sosd
