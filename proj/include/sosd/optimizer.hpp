#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sosd/model.hpp"
#include "sosd/tensor.hpp"

namespace sosd {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. One moment slot per parameter, keyed by name and
// created at registration; the slot's step count advances only when that
// parameter is stepped, so alternating schedules keep correct corrections.
class Adam {
 public:
  struct Slot {
    Tensor m, v;
    std::int64_t t = 0;
  };

  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void register_parameters(const std::vector<Parameter>& params);

  // Applies one update to every parameter in `subset` from its accumulated
  // gradient. A missing or never-touched gradient is a contract violation.
  void step(const std::vector<Parameter>& subset);

  const AdamConfig& config() const { return cfg_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
};

}  // namespace sosd
