#include "equivar/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "equivar/errors.hpp"

namespace equivar {

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps) {
  auto probe = Tensor<double>::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  const Tensor<double> y = f(probe);
  if (y.size() != 1) throw DimensionError("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  double worst = 0.0;
  auto values = probe.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f(probe).item();
    values[i] = saved - eps;
    const double down = f(probe).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      throw NumericError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
    }
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12));
  }
  return worst;
}

}  // namespace equivar
