#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "charbot/tensor.hpp"

namespace charbot {

// Applies one optimizer update to a named parameter, consuming whatever
// gradient has been accumulated on it. Absent gradients count as zero.
using StepFn = std::function<void(const std::string& name, Tensor& param)>;

// Adaptive moments with decoupled weight decay. Moment buffers are keyed by
// parameter name so optimizer state can round-trip through checkpoints.
class AdamW {
 public:
  struct Config {
    double lr = 5.0e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  const Config& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(const std::string& name, Tensor& param);
  StepFn step_fn() {
    return [this](const std::string& name, Tensor& param) { step(name, param); };
  }

  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
  };
  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }

 private:
  Config cfg_;
  std::map<std::string, Moments> state_;
};

}  // namespace charbot
