#include "dmr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dmr {

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double step) {
  for (const Tensor& p : params) {
    if (!p.requires_grad()) throw state_error("grad_check: parameter does not require grad");
    const_cast<Tensor&>(p).zero_grad();
  }
  Tensor loss = f();
  if (loss.numel() != 1) throw shape_error("grad_check: f must return a scalar");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    analytic.push_back(p.grad());
    for (double g : analytic.back()) {
      if (!std::isfinite(g)) throw numeric_error("grad_check: non-finite analytic gradient");
    }
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + step;
      const double fp = f().value();
      p.data()[i] = orig - step;
      const double fm = f().value();
      p.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[pi][i];
      const double scale = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, std::fabs(a - numeric) / scale);
    }
  }
  return worst;
}

}  // namespace dmr
