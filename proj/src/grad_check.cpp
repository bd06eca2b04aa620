#include "genatt/grad_check.hpp"

#include <cmath>

namespace genatt {

double grad_check(const std::function<Tensor()>& loss_fn,
                  const std::vector<Tensor*>& params, double h) {
  zero_grads(params);
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.value())) {
    throw NumericError("grad_check: non-finite loss " +
                       std::to_string(loss.value()));
  }
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor* p : params) {
    analytic.push_back(p->grad ? *p->grad : std::vector<double>(p->numel(), 0.0));
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    for (std::size_t j = 0; j < p->numel(); ++j) {
      const double orig = (*p->data)[j];
      (*p->data)[j] = orig + h;
      const double up = loss_fn().value();
      (*p->data)[j] = orig - h;
      const double down = loss_fn().value();
      (*p->data)[j] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss during perturbation");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i][j] - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace genatt
