#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "sosd/tensor.hpp"

namespace sosd {

struct DepthMetricReport {
  double rel = 0.0;
  double rms = 0.0;
  double log10 = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  double disparity_mae = 0.0;
  std::int64_t valid_n = 0;
};

// Pools valid pixels globally across every added image (one set-wide mean,
// not a mean of per-image means). Depth and prediction must be positive on
// valid pixels. disparity_mae is the mean absolute error of the reciprocals.
class DepthAccumulator {
 public:
  explicit DepthAccumulator(std::array<double, 3> thresholds = {1.25, 1.5625, 1.953125});
  void add(const Tensor& pred, const Tensor& gt, const Tensor& mask);
  DepthMetricReport report() const;

 private:
  std::array<double, 3> thresholds_;
  double sum_rel_ = 0.0, sum_sq_ = 0.0, sum_log10_ = 0.0, sum_disp_ = 0.0;
  std::array<std::int64_t, 3> delta_hits_{0, 0, 0};
  std::int64_t n_ = 0;
};

DepthMetricReport depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                                std::array<double, 3> thresholds = {1.25, 1.5625, 1.953125});

// Mean |pred - gt| over valid pixels of two disparity grids; 0 when no pixel
// is valid (valid_n reports the count when provided).
double disparity_mae(const Tensor& pred_disp, const Tensor& gt_disp, const Tensor& mask,
                     std::int64_t* valid_n = nullptr);

struct SegMetricReport {
  std::vector<std::int64_t> confusion;  // C x C row-major, rows = ground truth
  double miou = 0.0;
  double mean_accuracy = 0.0;
  double pixel_accuracy = 0.0;
  std::vector<double> per_class_iou;  // -1 marks classes absent from gt
  std::vector<int> present_classes;
  std::vector<int> absent_classes;
  std::int64_t valid_n = 0;
};

class SegAccumulator {
 public:
  SegAccumulator(int num_classes, std::optional<int> ignore_id = std::nullopt);
  void add(const std::vector<int>& pred, const std::vector<int>& gt);
  SegMetricReport report() const;

 private:
  int c_;
  std::optional<int> ignore_;
  std::vector<std::int64_t> confusion_;
};

SegMetricReport seg_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                            int num_classes, std::optional<int> ignore_id = std::nullopt);

}  // namespace sosd
