#pragma once

#include <functional>

#include "icvt/autograd.hpp"

namespace icvt::testutil {

inline double rel_err(double got, double want) {
    double denom = std::max({1.0, std::abs(got), std::abs(want)});
    return std::abs(got - want) / denom;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
double max_abs_diff_t(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs((double)a[i] - (double)b[i]));
    return m;
}

// Per-element central differences; f must be deterministic.
inline Tensor<double> numeric_grad(std::function<double(const Tensor<double>&)> f,
                                   const Tensor<double>& x, double step = 1e-5) {
    Tensor<double> g(x.shape);
    Tensor<double> xp = x.clone();
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = xp[i];
        xp[i] = orig + step;
        double fp = f(xp);
        xp[i] = orig - step;
        double fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2 * step);
    }
    return g;
}

inline double max_rel_err(const Tensor<double>& got, const Tensor<double>& want) {
    double worst = 0;
    for (int64_t i = 0; i < got.numel(); ++i) worst = std::max(worst, rel_err(got[i], want[i]));
    return worst;
}

}  // namespace icvt::testutil
