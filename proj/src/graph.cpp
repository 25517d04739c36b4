#include "sosd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "sosd/errors.hpp"

namespace sosd {
namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

void require_rank4(const Tensor& t, const char* what) {
  if (t.shape().rank() != 4) {
    std::ostringstream os;
    os << what << " must be rank 4 (NCHW), got shape " << t.shape().str();
    throw ValidationError(os.str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    std::ostringstream os;
    os << op << ": shape mismatch " << a.shape().str() << " vs " << b.shape().str();
    throw ValidationError(os.str());
  }
}

struct ConvGeom {
  std::int64_t n, ic, ih, iw;
  std::int64_t oc, kh, kw;
  std::int64_t oh, ow;
  std::int64_t stride, dilation;
  std::int64_t pad_top, pad_left;
};

ConvGeom conv_geometry(const Shape& in, const Shape& w, const Conv2dOptions& o) {
  ConvGeom g{};
  g.n = in[0];
  g.ic = in[1];
  g.ih = in[2];
  g.iw = in[3];
  g.oc = w[0];
  g.kh = w[2];
  g.kw = w[3];
  g.stride = o.stride;
  g.dilation = o.dilation;
  const std::int64_t eff_kh = (g.kh - 1) * g.dilation + 1;
  const std::int64_t eff_kw = (g.kw - 1) * g.dilation + 1;
  if (o.padding == Padding::Same) {
    g.oh = (g.ih + g.stride - 1) / g.stride;
    g.ow = (g.iw + g.stride - 1) / g.stride;
    const std::int64_t pad_h = std::max<std::int64_t>(0, (g.oh - 1) * g.stride + eff_kh - g.ih);
    const std::int64_t pad_w = std::max<std::int64_t>(0, (g.ow - 1) * g.stride + eff_kw - g.iw);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    require(g.ih >= eff_kh && g.iw >= eff_kw,
            "conv2d: valid padding needs input at least the effective kernel size");
    g.oh = (g.ih - eff_kh) / g.stride + 1;
    g.ow = (g.iw - eff_kw) / g.stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

// Unfold one image (ic * ih * iw, row-major) into a (ic*kh*kw) x (oh*ow)
// matrix. Out-of-bounds taps read as zero.
void im2col(const double* src, const ConvGeom& g, double* cols) {
  const std::int64_t p = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.ic; ++c) {
    const double* plane = src + c * g.ih * g.iw;
    for (std::int64_t kh = 0; kh < g.kh; ++kh) {
      for (std::int64_t kw = 0; kw < g.kw; ++kw) {
        double* row = cols + ((c * g.kh + kh) * g.kw + kw) * p;
        for (std::int64_t oh = 0; oh < g.oh; ++oh) {
          const std::int64_t sh = oh * g.stride - g.pad_top + kh * g.dilation;
          double* out = row + oh * g.ow;
          if (sh < 0 || sh >= g.ih) {
            std::fill(out, out + g.ow, 0.0);
            continue;
          }
          const double* line = plane + sh * g.iw;
          for (std::int64_t ow = 0; ow < g.ow; ++ow) {
            const std::int64_t sw = ow * g.stride - g.pad_left + kw * g.dilation;
            out[ow] = (sw >= 0 && sw < g.iw) ? line[sw] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add the columns matrix back onto one image gradient.
void col2im_add(const double* cols, const ConvGeom& g, double* dst) {
  const std::int64_t p = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.ic; ++c) {
    double* plane = dst + c * g.ih * g.iw;
    for (std::int64_t kh = 0; kh < g.kh; ++kh) {
      for (std::int64_t kw = 0; kw < g.kw; ++kw) {
        const double* row = cols + ((c * g.kh + kh) * g.kw + kw) * p;
        for (std::int64_t oh = 0; oh < g.oh; ++oh) {
          const std::int64_t sh = oh * g.stride - g.pad_top + kh * g.dilation;
          if (sh < 0 || sh >= g.ih) continue;
          const double* in = row + oh * g.ow;
          double* line = plane + sh * g.iw;
          for (std::int64_t ow = 0; ow < g.ow; ++ow) {
            const std::int64_t sw = ow * g.stride - g.pad_left + kw * g.dilation;
            if (sw >= 0 && sw < g.iw) line[sw] += in[ow];
          }
        }
      }
    }
  }
}

// c[m x p] += a[m x k] * b[k x p], row-major; c must be pre-initialized.
void gemm_acc(std::int64_t m, std::int64_t k, std::int64_t p, const double* a, const double* b,
              double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      if (av == 0.0) continue;
      const double* bk = b + kk * p;
      for (std::int64_t j = 0; j < p; ++j) ci[j] += av * bk[j];
    }
  }
}

bool is_finite_span(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

std::int64_t Graph::id_of(Tensor& t) {
  const void* key = t.values().data();
  auto it = ids_.find(key);
  if (it != ids_.end()) {
    t.set_node_id(it->second);
    return it->second;
  }
  const std::int64_t id = next_id_++;
  ids_.emplace(key, id);
  t.set_node_id(id);
  return id;
}

Tensor Graph::new_output(Shape shape, bool requires_grad) {
  Tensor out = Tensor::zeros(std::move(shape));
  out.set_requires_grad(requires_grad);
  return out;
}

void Graph::record(OpKind kind, std::vector<std::int64_t> inputs, const Tensor& output,
                   std::function<void()> backward_fn) {
  Tensor out = output;
  const std::int64_t out_id = id_of(out);
  node_by_output_.emplace(out_id, infos_.size());
  infos_.push_back(NodeInfo{kind, std::move(inputs), out_id});
  backward_fns_.push_back(std::move(backward_fn));
}

Tensor Graph::conv2d(Tensor input, Tensor weight, Tensor bias, Conv2dOptions opts) {
  require_rank4(input, "conv2d input");
  require_rank4(weight, "conv2d weight");
  require(bias.shape().rank() == 1, "conv2d bias must be rank 1");
  require(weight.shape()[1] == input.shape()[1],
          "conv2d: weight input-channel count " + std::to_string(weight.shape()[1]) +
              " does not match input channels " + std::to_string(input.shape()[1]));
  require(bias.shape()[0] == weight.shape()[0],
          "conv2d: bias length must equal output channel count");
  require(opts.stride >= 1, "conv2d: stride must be >= 1");
  require(opts.dilation >= 1, "conv2d: dilation must be >= 1");

  const ConvGeom g = conv_geometry(input.shape(), weight.shape(), opts);
  const std::int64_t k = g.ic * g.kh * g.kw;
  const std::int64_t p = g.oh * g.ow;
  const bool needs = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  Tensor out = new_output(Shape{g.n, g.oc, g.oh, g.ow}, needs);

  {
    std::vector<double> cols(static_cast<std::size_t>(k) * p);
    const double* in = input.values().data();
    const double* w = weight.values().data();
    const double* b = bias.values().data();
    double* o = out.values().data();
    for (std::int64_t n = 0; n < g.n; ++n) {
      im2col(in + n * g.ic * g.ih * g.iw, g, cols.data());
      double* on = o + n * g.oc * p;
      for (std::int64_t c = 0; c < g.oc; ++c) std::fill(on + c * p, on + (c + 1) * p, b[c]);
      gemm_acc(g.oc, k, p, w, cols.data(), on);
    }
  }

  const bool need_in = input.requires_grad();
  const bool need_w = weight.requires_grad();
  const bool need_b = bias.requires_grad();
  auto backward_fn = [input, weight, bias, out, g, k, p, need_in, need_w, need_b]() mutable {
    if (!out.has_grad()) return;
    const double* go = out.grad().data();
    const double* w = weight.values().data();
    const double* in = input.values().data();
    std::vector<double> cols(static_cast<std::size_t>(k) * p);
    std::vector<double> dcols;
    if (need_in) dcols.resize(static_cast<std::size_t>(k) * p);
    for (std::int64_t n = 0; n < g.n; ++n) {
      const double* gon = go + n * g.oc * p;
      if (need_w || need_in) im2col(in + n * g.ic * g.ih * g.iw, g, cols.data());
      if (need_b) {
        double* gb = bias.grad().data();
        for (std::int64_t c = 0; c < g.oc; ++c) {
          double s = 0.0;
          const double* row = gon + c * p;
          for (std::int64_t j = 0; j < p; ++j) s += row[j];
          gb[c] += s;
        }
      }
      if (need_w) {
        double* gw = weight.grad().data();
        for (std::int64_t c = 0; c < g.oc; ++c) {
          const double* row = gon + c * p;
          double* gwrow = gw + c * k;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const double* crow = cols.data() + kk * p;
            double s = 0.0;
            for (std::int64_t j = 0; j < p; ++j) s += row[j] * crow[j];
            gwrow[kk] += s;
          }
        }
      }
      if (need_in) {
        std::fill(dcols.begin(), dcols.end(), 0.0);
        for (std::int64_t c = 0; c < g.oc; ++c) {
          const double* row = gon + c * p;
          const double* wrow = w + c * k;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const double wv = wrow[kk];
            if (wv == 0.0) continue;
            double* drow = dcols.data() + kk * p;
            for (std::int64_t j = 0; j < p; ++j) drow[j] += wv * row[j];
          }
        }
        col2im_add(dcols.data(), g, input.grad().data() + n * g.ic * g.ih * g.iw);
      }
    }
  };

  Tensor in_t = input, w_t = weight, b_t = bias;
  record(OpKind::Conv2d, {id_of(in_t), id_of(w_t), id_of(b_t)}, out,
         needs ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::batch_norm(Tensor input, Tensor gamma, Tensor beta, BatchNormState& state,
                         BatchNormMode mode, double momentum, double epsilon) {
  require_rank4(input, "batch_norm input");
  const std::int64_t c = input.shape()[1];
  require(gamma.shape().rank() == 1 && gamma.shape()[0] == c,
          "batch_norm: gamma must be rank 1 with one entry per channel");
  require(beta.shape().rank() == 1 && beta.shape()[0] == c,
          "batch_norm: beta must be rank 1 with one entry per channel");
  require(static_cast<std::int64_t>(state.running_mean.size()) == c &&
              static_cast<std::int64_t>(state.running_var.size()) == c,
          "batch_norm: running statistics size must match channel count");
  require(momentum >= 0.0 && momentum < 1.0, "batch_norm: momentum must be in [0, 1)");
  require(epsilon > 0.0, "batch_norm: epsilon must be positive");

  const std::int64_t n = input.shape()[0];
  const std::int64_t hw = input.shape()[2] * input.shape()[3];
  const std::int64_t m = n * hw;
  require(m > 0, "batch_norm: zero-size batch");
  const std::int64_t chw = c * hw;

  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  const double* in = input.values().data();
  if (mode == BatchNormMode::Train) {
    std::vector<double> var(c, 0.0);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* plane = in + b * chw + ch * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += plane[i];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* plane = in + b * chw + ch * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = plane[i] - mu;
          v += d * d;
        }
      }
      v /= static_cast<double>(m);  // biased variance, also used for running stats
      mean[ch] = mu;
      var[ch] = v;
      inv_std[ch] = 1.0 / std::sqrt(v + epsilon);
      state.running_mean[ch] = momentum * state.running_mean[ch] + (1.0 - momentum) * mu;
      state.running_var[ch] = momentum * state.running_var[ch] + (1.0 - momentum) * v;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + epsilon);
    }
  }

  const bool needs = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor out = new_output(input.shape(), needs);
  {
    double* o = out.values().data();
    const double* gm = gamma.values().data();
    const double* bt = beta.values().data();
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = in + b * chw + ch * hw;
        double* oplane = o + b * chw + ch * hw;
        const double mu = mean[ch], is = inv_std[ch], gv = gm[ch], bv = bt[ch];
        for (std::int64_t i = 0; i < hw; ++i) oplane[i] = gv * (plane[i] - mu) * is + bv;
      }
    }
  }

  const bool train = mode == BatchNormMode::Train;
  const bool need_in = input.requires_grad();
  const bool need_g = gamma.requires_grad();
  const bool need_b = beta.requires_grad();
  auto backward_fn = [input, gamma, beta, out, mean, inv_std, n, c, hw, chw, m, train, need_in,
                      need_g, need_b]() mutable {
    if (!out.has_grad()) return;
    const double* go = out.grad().data();
    const double* in = input.values().data();
    const double* gm = gamma.values().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double mu = mean[ch], is = inv_std[ch];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* gplane = go + b * chw + ch * hw;
        const double* plane = in + b * chw + ch * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          sum_dy += gplane[i];
          sum_dy_xhat += gplane[i] * (plane[i] - mu) * is;
        }
      }
      if (need_g) gamma.grad()[ch] += sum_dy_xhat;
      if (need_b) beta.grad()[ch] += sum_dy;
      if (!need_in) continue;
      double* gi = input.grad().data();
      const double gv = gm[ch];
      if (train) {
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::int64_t b = 0; b < n; ++b) {
          const double* gplane = go + b * chw + ch * hw;
          const double* plane = in + b * chw + ch * hw;
          double* giplane = gi + b * chw + ch * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double xhat = (plane[i] - mu) * is;
            giplane[i] += gv * is * (gplane[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
          }
        }
      } else {
        for (std::int64_t b = 0; b < n; ++b) {
          const double* gplane = go + b * chw + ch * hw;
          double* giplane = gi + b * chw + ch * hw;
          for (std::int64_t i = 0; i < hw; ++i) giplane[i] += gv * is * gplane[i];
        }
      }
    }
  };

  Tensor in_t = input, g_t = gamma, b_t = beta;
  record(OpKind::BatchNorm, {id_of(in_t), id_of(g_t), id_of(b_t)}, out,
         needs ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::relu(Tensor input) {
  Tensor out = new_output(input.shape(), input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  }
  auto backward_fn = [input, out]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    const double* in = input.values().data();
    double* gi = input.grad().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) {
      if (in[i] > 0.0) gi[i] += go[i];
    }
  };
  Tensor in_t = input;
  record(OpKind::Relu, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::pointwise_mul(Tensor a, Tensor b) {
  require_same_shape(a, b, "pointwise_mul");
  const bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = new_output(a.shape(), needs);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* o = out.values().data();
    const std::int64_t sz = a.numel();
    for (std::int64_t i = 0; i < sz; ++i) o[i] = av[i] * bv[i];
  }
  auto backward_fn = [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const double* go = out.grad().data();
    const std::int64_t sz = a.numel();
    if (a.requires_grad()) {
      const double* bv = b.values().data();
      double* ga = a.grad().data();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += go[i] * bv[i];
    }
    if (b.requires_grad()) {
      const double* av = a.values().data();
      double* gb = b.grad().data();
      for (std::int64_t i = 0; i < sz; ++i) gb[i] += go[i] * av[i];
    }
  };
  Tensor a_t = a, b_t = b;
  record(OpKind::PointwiseMul, {id_of(a_t), id_of(b_t)}, out,
         needs ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::concat_channels(Tensor a, Tensor b) {
  require_rank4(a, "concat_channels lhs");
  require_rank4(b, "concat_channels rhs");
  require(a.shape()[0] == b.shape()[0] && a.shape()[2] == b.shape()[2] &&
              a.shape()[3] == b.shape()[3],
          "concat_channels: inputs must agree on batch and spatial dims, got " + a.shape().str() +
              " vs " + b.shape().str());
  const std::int64_t n = a.shape()[0];
  const std::int64_t ca = a.shape()[1], cb = b.shape()[1];
  const std::int64_t hw = a.shape()[2] * a.shape()[3];
  const bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = new_output(Shape{n, ca + cb, a.shape()[2], a.shape()[3]}, needs);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* o = out.values().data();
    for (std::int64_t i = 0; i < n; ++i) {
      std::memcpy(o + i * (ca + cb) * hw, av + i * ca * hw, sizeof(double) * ca * hw);
      std::memcpy(o + i * (ca + cb) * hw + ca * hw, bv + i * cb * hw, sizeof(double) * cb * hw);
    }
  }
  auto backward_fn = [a, b, out, n, ca, cb, hw]() mutable {
    if (!out.has_grad()) return;
    const double* go = out.grad().data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const double* src = go + i * (ca + cb) * hw;
        double* dst = ga + i * ca * hw;
        for (std::int64_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
      }
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const double* src = go + i * (ca + cb) * hw + ca * hw;
        double* dst = gb + i * cb * hw;
        for (std::int64_t j = 0; j < cb * hw; ++j) dst[j] += src[j];
      }
    }
  };
  Tensor a_t = a, b_t = b;
  record(OpKind::ConcatChannels, {id_of(a_t), id_of(b_t)}, out,
         needs ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::global_avg_pool(Tensor input) {
  require_rank4(input, "global_avg_pool input");
  const std::int64_t n = input.shape()[0], c = input.shape()[1];
  const std::int64_t hw = input.shape()[2] * input.shape()[3];
  Tensor out = new_output(Shape{n, c, 1, 1}, input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      const double* plane = in + i * hw;
      for (std::int64_t j = 0; j < hw; ++j) s += plane[j];
      o[i] = s / static_cast<double>(hw);
    }
  }
  auto backward_fn = [input, out, n, c, hw]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    double* gi = input.grad().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double g = go[i] / static_cast<double>(hw);
      double* plane = gi + i * hw;
      for (std::int64_t j = 0; j < hw; ++j) plane[j] += g;
    }
  };
  Tensor in_t = input;
  record(OpKind::GlobalAvgPool, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::broadcast_spatial(Tensor input, std::int64_t h, std::int64_t w) {
  require_rank4(input, "broadcast_spatial input");
  require(input.shape()[2] == 1 && input.shape()[3] == 1,
          "broadcast_spatial: input spatial dims must be 1x1, got " + input.shape().str());
  require(h >= 1 && w >= 1, "broadcast_spatial: target dims must be positive");
  const std::int64_t n = input.shape()[0], c = input.shape()[1];
  Tensor out = new_output(Shape{n, c, h, w}, input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    for (std::int64_t i = 0; i < n * c; ++i) std::fill(o + i * h * w, o + (i + 1) * h * w, in[i]);
  }
  auto backward_fn = [input, out, n, c, h, w]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    double* gi = input.grad().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      const double* plane = go + i * h * w;
      for (std::int64_t j = 0; j < h * w; ++j) s += plane[j];
      gi[i] += s;
    }
  };
  Tensor in_t = input;
  record(OpKind::BroadcastSpatial, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::safe_sqrt(Tensor input, double floor) {
  require(floor > 0.0, "safe_sqrt: floor must be positive");
  Tensor out = new_output(input.shape(), input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) o[i] = std::sqrt(in[i] > floor ? in[i] : floor);
  }
  // Below the floor the forward value is constant, so the subgradient is zero.
  auto backward_fn = [input, out, floor]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    const double* in = input.values().data();
    const double* ov = out.values().data();
    double* gi = input.grad().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) {
      if (in[i] > floor) gi[i] += go[i] * 0.5 / ov[i];
    }
  };
  Tensor in_t = input;
  record(OpKind::SafeSqrt, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::bilinear_upsample(Tensor input, int factor) {
  require_rank4(input, "bilinear_upsample input");
  require(factor >= 1, "bilinear_upsample: factor must be >= 1");
  const std::int64_t n = input.shape()[0], c = input.shape()[1];
  const std::int64_t ih = input.shape()[2], iw = input.shape()[3];
  const std::int64_t oh = ih * factor, ow = iw * factor;

  // Align-corners sampling: output corners coincide with input corners.
  auto make_axis = [](std::int64_t in_sz, std::int64_t out_sz, std::vector<std::int64_t>& lo,
                      std::vector<std::int64_t>& hi, std::vector<double>& frac) {
    lo.resize(out_sz);
    hi.resize(out_sz);
    frac.resize(out_sz);
    for (std::int64_t o = 0; o < out_sz; ++o) {
      double src = 0.0;
      if (in_sz > 1 && out_sz > 1) {
        src = static_cast<double>(o) * static_cast<double>(in_sz - 1) /
              static_cast<double>(out_sz - 1);
      }
      const std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
      lo[o] = std::min(i0, in_sz - 1);
      hi[o] = std::min(i0 + 1, in_sz - 1);
      frac[o] = src - static_cast<double>(i0);
    }
  };
  std::vector<std::int64_t> hlo, hhi, wlo, whi;
  std::vector<double> hfrac, wfrac;
  make_axis(ih, oh, hlo, hhi, hfrac);
  make_axis(iw, ow, wlo, whi, wfrac);

  Tensor out = new_output(Shape{n, c, oh, ow}, input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double* plane = in + i * ih * iw;
      double* oplane = o + i * oh * ow;
      for (std::int64_t y = 0; y < oh; ++y) {
        const double fy = hfrac[y];
        const double* r0 = plane + hlo[y] * iw;
        const double* r1 = plane + hhi[y] * iw;
        double* orow = oplane + y * ow;
        for (std::int64_t x = 0; x < ow; ++x) {
          const double fx = wfrac[x];
          const double top = r0[wlo[x]] * (1.0 - fx) + r0[whi[x]] * fx;
          const double bot = r1[wlo[x]] * (1.0 - fx) + r1[whi[x]] * fx;
          orow[x] = top * (1.0 - fy) + bot * fy;
        }
      }
    }
  }
  auto backward_fn = [input, out, n, c, ih, iw, oh, ow, hlo, hhi, hfrac, wlo, whi,
                      wfrac]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    double* gi = input.grad().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      double* plane = gi + i * ih * iw;
      const double* oplane = go + i * oh * ow;
      for (std::int64_t y = 0; y < oh; ++y) {
        const double fy = hfrac[y];
        double* r0 = plane + hlo[y] * iw;
        double* r1 = plane + hhi[y] * iw;
        const double* orow = oplane + y * ow;
        for (std::int64_t x = 0; x < ow; ++x) {
          const double g = orow[x];
          const double fx = wfrac[x];
          r0[wlo[x]] += g * (1.0 - fy) * (1.0 - fx);
          r0[whi[x]] += g * (1.0 - fy) * fx;
          r1[wlo[x]] += g * fy * (1.0 - fx);
          r1[whi[x]] += g * fy * fx;
        }
      }
    }
  };
  Tensor in_t = input;
  record(OpKind::BilinearUpsample, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::add(Tensor a, Tensor b) {
  require_same_shape(a, b, "add");
  const bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = new_output(a.shape(), needs);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* o = out.values().data();
    const std::int64_t sz = a.numel();
    for (std::int64_t i = 0; i < sz; ++i) o[i] = av[i] + bv[i];
  }
  auto backward_fn = [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const double* go = out.grad().data();
    const std::int64_t sz = a.numel();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      for (std::int64_t i = 0; i < sz; ++i) gb[i] += go[i];
    }
  };
  Tensor a_t = a, b_t = b;
  record(OpKind::Add, {id_of(a_t), id_of(b_t)}, out,
         needs ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::scale(Tensor input, double factor) {
  Tensor out = new_output(input.shape(), input.requires_grad());
  {
    const double* in = input.values().data();
    double* o = out.values().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) o[i] = in[i] * factor;
  }
  auto backward_fn = [input, out, factor]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double* go = out.grad().data();
    double* gi = input.grad().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) gi[i] += go[i] * factor;
  };
  Tensor in_t = input;
  record(OpKind::Scale, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::sum(Tensor input) {
  Tensor out = new_output(Shape{1}, input.requires_grad());
  {
    const double* in = input.values().data();
    double s = 0.0;
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) s += in[i];
    out.values()[0] = s;
  }
  auto backward_fn = [input, out]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    const double g = out.grad()[0];
    double* gi = input.grad().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) gi[i] += g;
  };
  Tensor in_t = input;
  record(OpKind::Sum, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::grad_scale(Tensor input, double alpha) {
  Tensor out = new_output(input.shape(), input.requires_grad());
  {
    std::span<const double> in = input.values();
    std::copy(in.begin(), in.end(), out.values().begin());
  }
  auto backward_fn = [input, out, alpha]() mutable {
    if (!out.has_grad() || !input.requires_grad()) return;
    if (alpha == 0.0) return;
    const double* go = out.grad().data();
    double* gi = input.grad().data();
    const std::int64_t sz = input.numel();
    for (std::int64_t i = 0; i < sz; ++i) gi[i] += alpha * go[i];
  };
  Tensor in_t = input;
  record(OpKind::GradScale, {id_of(in_t)}, out,
         input.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::softmax_cross_entropy(Tensor logits, const std::vector<int>& labels,
                                    std::optional<int> ignore_id, LossStats* stats) {
  require_rank4(logits, "softmax_cross_entropy logits");
  const std::int64_t n = logits.shape()[0], c = logits.shape()[1];
  const std::int64_t h = logits.shape()[2], w = logits.shape()[3];
  const std::int64_t pix = n * h * w;
  require(static_cast<std::int64_t>(labels.size()) == pix,
          "softmax_cross_entropy: label count " + std::to_string(labels.size()) +
              " does not match pixel count " + std::to_string(pix));
  std::int64_t considered = 0;
  for (std::int64_t i = 0; i < pix; ++i) {
    const int y = labels[i];
    if (ignore_id && y == *ignore_id) continue;
    require(y >= 0 && y < c, "softmax_cross_entropy: label " + std::to_string(y) +
                                 " outside [0, " + std::to_string(c) + ") at pixel " +
                                 std::to_string(i));
    ++considered;
  }
  if (stats) {
    stats->considered = considered;
    stats->all_ignored = considered == 0;
  }

  Tensor out = new_output(Shape{1}, logits.requires_grad());
  const std::int64_t hw = h * w;
  const double* z = logits.values().data();
  // Pixel (b, y, x) reads logit channel ch at z[((b*c + ch)*h + y)*w + x].
  auto logit_at = [&](std::int64_t b, std::int64_t ch, std::int64_t p) {
    return z[(b * c + ch) * hw + p];
  };
  if (considered > 0) {
    double total = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t p = 0; p < hw; ++p) {
        const int y = labels[b * hw + p];
        if (ignore_id && y == *ignore_id) continue;
        double mx = logit_at(b, 0, p);
        for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, logit_at(b, ch, p));
        double se = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) se += std::exp(logit_at(b, ch, p) - mx);
        total += std::log(se) - (logit_at(b, y, p) - mx);
      }
    }
    out.values()[0] = total / static_cast<double>(considered);
  }

  std::vector<int> labels_copy = labels;
  auto backward_fn = [logits, out, labels_copy, ignore_id, considered, n, c, hw]() mutable {
    if (!out.has_grad() || !logits.requires_grad() || considered == 0) return;
    const double g = out.grad()[0] / static_cast<double>(considered);
    const double* z = logits.values().data();
    double* gz = logits.grad().data();
    std::vector<double> prob(c);
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t p = 0; p < hw; ++p) {
        const int y = labels_copy[b * hw + p];
        if (ignore_id && y == *ignore_id) continue;
        double mx = z[(b * c) * hw + p];
        for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, z[(b * c + ch) * hw + p]);
        double se = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          prob[ch] = std::exp(z[(b * c + ch) * hw + p] - mx);
          se += prob[ch];
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double soft = prob[ch] / se;
          gz[(b * c + ch) * hw + p] += g * (soft - (ch == y ? 1.0 : 0.0));
        }
      }
    }
  };
  Tensor l_t = logits;
  record(OpKind::SoftmaxCrossEntropy, {id_of(l_t)}, out,
         logits.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

Tensor Graph::masked_l1(Tensor pred, Tensor target, Tensor mask, LossStats* stats) {
  require_same_shape(pred, target, "masked_l1 pred/target");
  require_same_shape(pred, mask, "masked_l1 pred/mask");
  const std::int64_t sz = pred.numel();
  const double* pv = pred.values().data();
  const double* tv = target.values().data();
  const double* mv = mask.values().data();
  std::int64_t valid = 0;
  double total = 0.0;
  for (std::int64_t i = 0; i < sz; ++i) {
    if (mv[i] != 0.0) {
      ++valid;
      total += std::abs(pv[i] - tv[i]);
    }
  }
  if (stats) {
    stats->considered = valid;
    stats->all_ignored = valid == 0;
  }
  Tensor out = new_output(Shape{1}, pred.requires_grad());
  if (valid > 0) out.values()[0] = total / static_cast<double>(valid);

  auto backward_fn = [pred, target, mask, out, valid, sz]() mutable {
    if (!out.has_grad() || !pred.requires_grad() || valid == 0) return;
    const double g = out.grad()[0] / static_cast<double>(valid);
    const double* pv = pred.values().data();
    const double* tv = target.values().data();
    const double* mv = mask.values().data();
    double* gp = pred.grad().data();
    for (std::int64_t i = 0; i < sz; ++i) {
      if (mv[i] == 0.0) continue;
      const double d = pv[i] - tv[i];
      // sign(0) = 0: exact ties contribute no gradient.
      if (d > 0.0) {
        gp[i] += g;
      } else if (d < 0.0) {
        gp[i] -= g;
      }
    }
  };
  Tensor p_t = pred, t_t = target, m_t = mask;
  record(OpKind::MaskedL1, {id_of(p_t), id_of(t_t), id_of(m_t)}, out,
         pred.requires_grad() ? std::function<void()>(backward_fn) : nullptr);
  return out;
}

void Graph::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
  Tensor seed = loss;
  const void* key = seed.values().data();
  auto it = ids_.find(key);
  require(it != ids_.end() && node_by_output_.count(it->second) != 0,
          "backward: loss tensor was not produced by this graph");
  if (!is_finite_span(loss.values())) {
    throw RuntimeFault("backward: loss is not finite");
  }
  seed.grad()[0] += 1.0;
  for (std::size_t i = backward_fns_.size(); i-- > 0;) {
    if (backward_fns_[i]) backward_fns_[i]();
  }
}

bool Graph::output_depends_on(const Tensor& out, OpKind kind) const {
  Tensor t = out;
  auto id_it = ids_.find(static_cast<const void*>(t.values().data()));
  if (id_it == ids_.end()) return false;
  std::vector<std::int64_t> stack{id_it->second};
  std::vector<bool> seen(static_cast<std::size_t>(next_id_), false);
  while (!stack.empty()) {
    const std::int64_t id = stack.back();
    stack.pop_back();
    if (id < 0 || id >= next_id_ || seen[static_cast<std::size_t>(id)]) continue;
    seen[static_cast<std::size_t>(id)] = true;
    auto it = node_by_output_.find(id);
    if (it == node_by_output_.end()) continue;
    const NodeInfo& info = infos_[it->second];
    if (info.kind == kind) return true;
    for (std::int64_t in : info.inputs) stack.push_back(in);
  }
  return false;
}

}  // namespace sosd
