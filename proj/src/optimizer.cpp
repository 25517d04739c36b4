#include "sosd/optimizer.hpp"

#include <cmath>

#include "sosd/errors.hpp"

namespace sosd {

void Adam::register_parameters(const std::vector<Parameter>& params) {
  for (const Parameter& p : params) {
    if (slots_.count(p.name)) {
      throw ValidationError("adam: duplicate parameter name " + p.name);
    }
    Slot slot;
    slot.m = Tensor::zeros(p.tensor.shape());
    slot.v = Tensor::zeros(p.tensor.shape());
    slots_.emplace(p.name, std::move(slot));
  }
}

void Adam::step(const std::vector<Parameter>& subset) {
  for (const Parameter& p : subset) {
    auto it = slots_.find(p.name);
    if (it == slots_.end()) {
      throw RuntimeFault("adam: parameter " + p.name + " was never registered");
    }
    if (!p.tensor.has_grad()) {
      throw RuntimeFault("adam: parameter " + p.name + " has no gradient for this step");
    }
    Slot& s = it->second;
    s.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    Tensor param = p.tensor;  // handle copy; shares the payload
    const double* g = param.grad().data();
    double* m = s.m.values().data();
    double* v = s.v.values().data();
    double* theta = param.values().data();
    const std::int64_t n = param.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

}  // namespace sosd
