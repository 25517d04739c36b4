#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "sosd/tensor.hpp"

namespace sosd {

enum class OpKind {
  Conv2d,
  BatchNorm,
  Relu,
  PointwiseMul,
  ConcatChannels,
  GlobalAvgPool,
  BroadcastSpatial,
  SafeSqrt,
  BilinearUpsample,
  Add,
  Scale,
  Sum,
  GradScale,
  SoftmaxCrossEntropy,
  MaskedL1,
};

enum class Padding { Same, Valid };

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  Padding padding = Padding::Same;
};

enum class BatchNormMode { Train, Eval };

// Running statistics owned by the hosting layer. Train-mode forward mutates
// them (momentum update with the biased batch variance); backward never
// reads them in train mode, it uses the batch statistics captured at forward.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static BatchNormState identity(std::int64_t channels) {
    return BatchNormState{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
};

struct LossStats {
  std::int64_t considered = 0;
  bool all_ignored = false;
};

// Reverse-mode tape. Ops append nodes in creation order; backward replays the
// tape in reverse, which is a fixed topological order, so gradient reductions
// are deterministic. Gradients accumulate additively into every reachable
// tensor with requires_grad set. Single-threaded per graph.
class Graph {
 public:
  Tensor conv2d(Tensor input, Tensor weight, Tensor bias, Conv2dOptions opts = {});
  Tensor batch_norm(Tensor input, Tensor gamma, Tensor beta, BatchNormState& state,
                    BatchNormMode mode, double momentum, double epsilon);
  Tensor relu(Tensor input);
  Tensor pointwise_mul(Tensor a, Tensor b);
  Tensor concat_channels(Tensor a, Tensor b);
  Tensor global_avg_pool(Tensor input);
  Tensor broadcast_spatial(Tensor input, std::int64_t h, std::int64_t w);
  Tensor safe_sqrt(Tensor input, double floor = 1e-6);
  Tensor bilinear_upsample(Tensor input, int factor);
  Tensor add(Tensor a, Tensor b);
  Tensor scale(Tensor input, double factor);
  Tensor sum(Tensor input);
  // Identity forward; multiplies the upstream gradient by alpha on backward.
  // Training-protocol operator for weighting branch contributions, not a
  // derivative of its forward map (except at alpha = 1).
  Tensor grad_scale(Tensor input, double alpha);
  // Mean softmax negative log-likelihood over non-ignored pixels.
  // labels are row-major (n, h, w); stats (optional) reports the pixel count.
  Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& labels,
                               std::optional<int> ignore_id = std::nullopt,
                               LossStats* stats = nullptr);
  // Mean |pred - target| over pixels where mask != 0. Masked-out pixels
  // contribute nothing to the value or the gradient.
  Tensor masked_l1(Tensor pred, Tensor target, Tensor mask, LossStats* stats = nullptr);

  void backward(const Tensor& loss);

  struct NodeInfo {
    OpKind kind;
    std::vector<std::int64_t> inputs;
    std::int64_t output;
  };
  const std::vector<NodeInfo>& node_infos() const { return infos_; }
  std::size_t node_count() const { return infos_.size(); }
  // True if any ancestor op of `out` (inclusive) has the given kind.
  bool output_depends_on(const Tensor& out, OpKind kind) const;

 private:
  std::int64_t id_of(Tensor& t);
  Tensor new_output(Shape shape, bool requires_grad);
  void record(OpKind kind, std::vector<std::int64_t> inputs, const Tensor& output,
              std::function<void()> backward_fn);

  std::vector<NodeInfo> infos_;
  std::vector<std::function<void()>> backward_fns_;
  std::unordered_map<const void*, std::int64_t> ids_;
  std::unordered_map<std::int64_t, std::size_t> node_by_output_;
  std::int64_t next_id_ = 0;
};

}  // namespace sosd
