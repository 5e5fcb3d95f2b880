#include "brainage/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "brainage/error.hpp"

namespace brainage {

Array finite_difference_gradient(const ScalarFunction& f, const Array& x, double eps) {
  Array grad(x.shape());
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(const Array& a, const Array& b, double floor) {
  if (a.shape() != b.shape()) {
    throw DimensionError("relative_error: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace brainage
