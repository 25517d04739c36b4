#pragma once

#include <array>

namespace sosd {

// Pinhole parameters, all in pixels.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double ux = 0.0;
  double uy = 0.0;
};

// Point in the camera frame; d is depth along the optical axis, meters.
struct SpacePoint {
  double x = 0.0;
  double y = 0.0;
  double d = 0.0;
};

// Continuous pixel coordinates.
struct ImagePoint {
  double u = 0.0;
  double v = 0.0;
};

// Physical size of a fronto-parallel rectangle, meters.
struct ObjectExtent {
  double dx = 0.0;
  double dy = 0.0;
};

// Projected size on the image plane, pixels.
struct ImageExtent {
  double du = 0.0;
  double dv = 0.0;
};

struct PlanarObject {
  SpacePoint center;
  ObjectExtent extent;
  int class_id = 0;
  std::array<double, 3> albedo{0.0, 0.0, 0.0};
};

// Perspective projection: u = fx*x/d + ux, v = fy*y/d + uy.
ImagePoint project_point(const SpacePoint& p, const CameraIntrinsics& k);

// Projected extents of a fronto-parallel rectangle at depth d:
// du = fx*dx/d, dv = fy*dy/d.
ImageExtent image_extent(const ObjectExtent& e, double depth, const CameraIntrinsics& k);

// Positive root of the area relation d^2 = fx*fy*dx*dy / (du*dv).
double depth_from_areas(const ObjectExtent& e, const ImageExtent& i, const CameraIntrinsics& k);

}  // namespace sosd
