#pragma once

#include <functional>

#include "brainage/tensor.hpp"

namespace brainage {

using ScalarFunction = std::function<double(const Array&)>;

/// Central differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) for every
/// coordinate of x.
Array finite_difference_gradient(const ScalarFunction& f, const Array& x, double eps = 1e-5);

/// ||a - b||_2 / max(||a||_2, ||b||_2, floor). Shapes must agree.
double relative_error(const Array& a, const Array& b, double floor = 1e-12);

}  // namespace brainage
