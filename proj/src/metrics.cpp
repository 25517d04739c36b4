#include "sosd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sosd/errors.hpp"

namespace sosd {
namespace {

void require_same_numel(const Tensor& a, const Tensor& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    throw ValidationError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
  }
}

}  // namespace

DepthAccumulator::DepthAccumulator(std::array<double, 3> thresholds) : thresholds_(thresholds) {
  if (!(thresholds[0] <= thresholds[1] && thresholds[1] <= thresholds[2])) {
    throw ValidationError("depth_metrics: thresholds must be non-decreasing");
  }
}

void DepthAccumulator::add(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  require_same_numel(pred, gt, "depth_metrics");
  require_same_numel(pred, mask, "depth_metrics");
  const double* p = pred.values().data();
  const double* g = gt.values().data();
  const double* m = mask.values().data();
  const std::int64_t n = pred.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (m[i] == 0.0) continue;
    if (!(p[i] > 0.0) || !(g[i] > 0.0)) {
      throw ValidationError("depth_metrics: non-positive depth on valid pixel " +
                            std::to_string(i));
    }
    const double diff = p[i] - g[i];
    sum_rel_ += std::abs(diff) / g[i];
    sum_sq_ += diff * diff;
    sum_log10_ += std::abs(std::log10(p[i]) - std::log10(g[i]));
    sum_disp_ += std::abs(1.0 / p[i] - 1.0 / g[i]);
    const double ratio = std::max(p[i] / g[i], g[i] / p[i]);
    for (std::size_t k = 0; k < 3; ++k) {
      if (ratio < thresholds_[k]) ++delta_hits_[k];
    }
    ++n_;
  }
}

DepthMetricReport DepthAccumulator::report() const {
  DepthMetricReport r;
  r.valid_n = n_;
  if (n_ == 0) return r;
  const double dn = static_cast<double>(n_);
  r.rel = sum_rel_ / dn;
  r.rms = std::sqrt(sum_sq_ / dn);
  r.log10 = sum_log10_ / dn;
  r.disparity_mae = sum_disp_ / dn;
  r.delta1 = static_cast<double>(delta_hits_[0]) / dn;
  r.delta2 = static_cast<double>(delta_hits_[1]) / dn;
  r.delta3 = static_cast<double>(delta_hits_[2]) / dn;
  return r;
}

DepthMetricReport depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                                std::array<double, 3> thresholds) {
  DepthAccumulator acc(thresholds);
  acc.add(pred, gt, mask);
  return acc.report();
}

double disparity_mae(const Tensor& pred_disp, const Tensor& gt_disp, const Tensor& mask,
                     std::int64_t* valid_n) {
  require_same_numel(pred_disp, gt_disp, "disparity_mae");
  require_same_numel(pred_disp, mask, "disparity_mae");
  const double* p = pred_disp.values().data();
  const double* g = gt_disp.values().data();
  const double* m = mask.values().data();
  double total = 0.0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < pred_disp.numel(); ++i) {
    if (m[i] == 0.0) continue;
    total += std::abs(p[i] - g[i]);
    ++n;
  }
  if (valid_n) *valid_n = n;
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

SegAccumulator::SegAccumulator(int num_classes, std::optional<int> ignore_id)
    : c_(num_classes), ignore_(ignore_id) {
  if (num_classes < 1) throw ValidationError("seg_metrics: need at least one class");
  confusion_.assign(static_cast<std::size_t>(c_) * c_, 0);
}

void SegAccumulator::add(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("seg_metrics: prediction and ground truth sizes differ");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (ignore_ && gt[i] == *ignore_) continue;
    if (gt[i] < 0 || gt[i] >= c_) {
      throw ValidationError("seg_metrics: ground-truth label " + std::to_string(gt[i]) +
                            " out of range");
    }
    if (pred[i] < 0 || pred[i] >= c_) {
      throw ValidationError("seg_metrics: predicted label " + std::to_string(pred[i]) +
                            " out of range");
    }
    ++confusion_[static_cast<std::size_t>(gt[i]) * c_ + pred[i]];
  }
}

SegMetricReport SegAccumulator::report() const {
  SegMetricReport r;
  r.confusion = confusion_;
  r.per_class_iou.assign(c_, -1.0);
  std::int64_t total = 0, trace = 0;
  double iou_sum = 0.0, acc_sum = 0.0;
  for (int cls = 0; cls < c_; ++cls) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < c_; ++j) {
      row += confusion_[static_cast<std::size_t>(cls) * c_ + j];
      col += confusion_[static_cast<std::size_t>(j) * c_ + cls];
    }
    const std::int64_t tp = confusion_[static_cast<std::size_t>(cls) * c_ + cls];
    total += row;
    trace += tp;
    if (row == 0) {
      r.absent_classes.push_back(cls);
      continue;
    }
    r.present_classes.push_back(cls);
    const std::int64_t denom = row + col - tp;  // TP + FP + FN
    r.per_class_iou[cls] = static_cast<double>(tp) / static_cast<double>(denom);
    iou_sum += r.per_class_iou[cls];
    acc_sum += static_cast<double>(tp) / static_cast<double>(row);
  }
  r.valid_n = total;
  if (!r.present_classes.empty()) {
    const double np = static_cast<double>(r.present_classes.size());
    r.miou = iou_sum / np;
    r.mean_accuracy = acc_sum / np;
  }
  if (total > 0) r.pixel_accuracy = static_cast<double>(trace) / static_cast<double>(total);
  return r;
}

SegMetricReport seg_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                            int num_classes, std::optional<int> ignore_id) {
  SegAccumulator acc(num_classes, ignore_id);
  acc.add(pred, gt);
  return acc.report();
}

}  // namespace sosd
