#pragma once

#include <cstddef>
#include <stdexcept>

namespace fbm {

/// Composite Simpson rule on [a, b] with `panels` panels (2*panels+1 nodes).
template <class F>
double simpson(F&& f, double a, double b, std::size_t panels) {
    if (panels == 0) throw std::invalid_argument("simpson: panels must be positive");
    const std::size_t n = 2 * panels;
    const double h = (b - a) / double(n);
    double acc = f(a) + f(b);
    for (std::size_t i = 1; i < n; ++i) {
        const double x = a + h * double(i);
        acc += (i % 2 == 1 ? 4.0 : 2.0) * f(x);
    }
    return acc * h / 3.0;
}

}  // namespace fbm
