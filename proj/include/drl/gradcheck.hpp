#pragma once

#include <cmath>
#include <functional>

#include "drl/tensor.hpp"

namespace drl {

// Central-difference gradient estimate, one coordinate at a time. The
// reference every reverse-mode gradient in this library is checked against;
// it never touches the tape.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  if (h <= 0.0) throw ValueError("finite_diff_grad: step must be positive");
  Tensor probe = x.detach();
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + h;
    const double fp = f(probe);
    probe.values()[i] = orig - h;
    const double fm = f(probe);
    probe.values()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite evaluation");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

}  // namespace drl
