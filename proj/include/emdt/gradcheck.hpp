#pragma once

#include <functional>

#include "emdt/ops.hpp"
#include "emdt/tensor.hpp"

namespace emdt {

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, coordinate by coordinate. Returns the worst
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
/// Meaningful tolerances require the wide (double) scalar width.
template <std::floating_point S>
S grad_check(const std::function<Tensor<S>(Tensor<S>&)>& f, const Tensor<S>& x_in, S eps) {
    if (eps <= S(0)) throw NumericsError("grad_check: eps must be positive");
    Tensor<S> x = x_in.clone();  // leave caller's gradient state untouched
    x.set_requires_grad(true);
    Tensor<S> y = f(x);
    if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericsError("grad_check: f(x) is non-finite");
    backward(y);
    std::vector<S> analytic = x.has_grad() ? x.grad() : std::vector<S>(x.data().size(), S(0));

    autograd::NoGradGuard ng;
    Tensor<S> probe = x.clone();
    probe.set_requires_grad(false);
    S worst = 0;
    for (size_t i = 0; i < probe.data().size(); ++i) {
        const S orig = probe.data()[i];
        probe.data()[i] = orig + eps;
        const S fp = f(probe).item();
        probe.data()[i] = orig - eps;
        const S fm = f(probe).item();
        probe.data()[i] = orig;
        const S numeric = (fp - fm) / (S(2) * eps);
        const S denom = std::max({std::abs(analytic[i]), std::abs(numeric), S(1e-8)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace emdt
