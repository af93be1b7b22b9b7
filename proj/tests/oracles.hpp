#pragma once

// Test-only oracles: finite differences, norm comparisons, closed-form
// references. Nothing here may call back into the gradient paths it checks.

#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

// central finite differences of a scalar function of a flat parameter vector
inline std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                                   std::vector<double> p, double h = 1e-5) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        const double up = f(p);
        p[i] = keep - h;
        const double down = f(p);
        p[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double l2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// ||a - b|| / max(||b||, floor)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b,
                      double floor = 1e-12) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return l2(d) / std::max(l2(b), floor);
}

}  // namespace oracles
