#include "charbot/optimizer.hpp"

#include <cmath>

namespace charbot {

void AdamW::step(const std::string& name, Tensor& param) {
  const std::size_t n = param.numel();
  Moments& mom = state_[name];
  if (mom.m.empty()) {
    mom.m.assign(n, 0.0);
    mom.v.assign(n, 0.0);
  }
  mom.t += 1;
  const std::vector<double> g = param.grad_or_zero();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mom.t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mom.t));
  double* p = param.data();
  for (std::size_t i = 0; i < n; ++i) {
    mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
    mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
    const double mhat = mom.m[i] / bc1;
    const double vhat = mom.v[i] / bc2;
    p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
  }
}

}  // namespace charbot
