#include "rfc/gradcheck.hpp"

#include <cmath>

#include "rfc/errors.hpp"

namespace rfc {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps) {
  check_valid(eps > 0.0, "finite_diff_grad: eps must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(probe);
    probe[i] = saved - eps;
    const double down = f(probe);
    probe[i] = saved;
    check_numeric(std::isfinite(up) && std::isfinite(down),
                  "finite_diff_grad: non-finite functional value");
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

double max_rel_error(const Tensor& a, const Tensor& b, double floor) {
  check_dim(a.same_shape(b), "max_rel_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double m = std::max(std::fabs(a[i]), std::fabs(b[i]));
    if (m <= floor) continue;
    worst = std::max(worst, std::fabs(a[i] - b[i]) / m);
  }
  return worst;
}

}  // namespace rfc
