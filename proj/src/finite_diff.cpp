#include "mtnas/finite_diff.hpp"

#include <cmath>

namespace mtnas {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor params, double h) {
  if (h <= 0) throw ArgumentError("finite_diff_check: step h must be positive");
  params.zero_grad();
  Tensor loss = f(params);
  backward(loss);
  Array analytic = params.grad();

  Array& v = params.value_mut();
  double worst = 0.0;
  for (int i = 0; i < params.size(); ++i) {
    autograd::NoGradGuard guard;
    double orig = v[i];
    v[i] = orig + h;
    double up = f(params).item();
    v[i] = orig - h;
    double down = f(params).item();
    v[i] = orig;
    double numeric = (up - down) / (2 * h);
    double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mtnas
