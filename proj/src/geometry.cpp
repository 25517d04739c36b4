#include "sosd/geometry.hpp"

#include <cmath>
#include <string>

#include "sosd/errors.hpp"

namespace sosd {
namespace {

void require_positive_depth(double d, const char* where) {
  if (!(d > 0.0)) {
    throw ValidationError(std::string(where) + ": depth must be positive, got " +
                          std::to_string(d));
  }
}

}  // namespace

ImagePoint project_point(const SpacePoint& p, const CameraIntrinsics& k) {
  require_positive_depth(p.d, "project_point");
  return ImagePoint{k.fx * p.x / p.d + k.ux, k.fy * p.y / p.d + k.uy};
}

ImageExtent image_extent(const ObjectExtent& e, double depth, const CameraIntrinsics& k) {
  require_positive_depth(depth, "image_extent");
  if (!(e.dx > 0.0 && e.dy > 0.0)) {
    throw ValidationError("image_extent: object extent must be positive");
  }
  return ImageExtent{k.fx * e.dx / depth, k.fy * e.dy / depth};
}

double depth_from_areas(const ObjectExtent& e, const ImageExtent& i, const CameraIntrinsics& k) {
  if (!(e.dx > 0.0 && e.dy > 0.0)) {
    throw ValidationError("depth_from_areas: physical area must be positive");
  }
  if (!(i.du > 0.0 && i.dv > 0.0)) {
    throw ValidationError("depth_from_areas: image area must be positive");
  }
  return std::sqrt(k.fx * k.fy * e.dx * e.dy / (i.du * i.dv));
}

}  // namespace sosd
