#pragma once

// Central-difference gradient oracle used by the unit and acceptance suites.
// Kept independent of the tape: finite differences only ever call the
// forward path under a NoGradGuard.

#include <cmath>
#include <functional>

#include "advlab/autograd.hpp"
#include "advlab/ops.hpp"
#include "advlab/rng.hpp"
#include "advlab/tensor.hpp"

namespace gradcheck {

// Max relative error between the tape gradient of fn(x) w.r.t. x and central
// differences, sampled at `probes` random coordinates (all coordinates if the
// tensor is smaller). fn must return a scalar tensor.
template <typename F>
double max_rel_error(F fn, advlab::Tensor<double>& x, int probes, uint64_t seed,
                     double h = 1e-5) {
    using advlab::GradTape;
    using advlab::NoGradGuard;
    using advlab::Tensor;

    x.requires_grad = true;
    Tensor<double> analytic;
    {
        GradTape<double> tape;
        Tensor<double> loss = fn(x);
        tape.backward(loss);
        analytic = tape.grad(x);
    }

    advlab::Rng rng(seed);
    const int64_t n = x.numel();
    const int count = probes < n ? probes : static_cast<int>(n);
    double worst = 0.0;
    for (int p = 0; p < count; ++p) {
        const int64_t i = probes < n ? rng.below(n) : p;
        const double orig = x[i];
        double fplus, fminus;
        {
            NoGradGuard ng;
            x[i] = orig + h;
            fplus = fn(x).item();
            x[i] = orig - h;
            fminus = fn(x).item();
            x[i] = orig;
        }
        const double fd = (fplus - fminus) / (2.0 * h);
        const double an = analytic[i];
        double err;
        if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) {
            err = 0.0;
        } else {
            err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
        }
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace gradcheck
