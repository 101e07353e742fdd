#pragma once

// Closed-form toy classifiers used as independent oracles for the attack
// tests: an affine model with analytic gradients, and a 1-d line search for
// the minimal decision-boundary crossing.

#include <cmath>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/tensor.hpp"

namespace toy {

// logits = x_flat . W^T + b, with exact analytic gradients.
template <typename T>
class AffineOracle : public advlab::GradientOracle<T> {
public:
    AffineOracle(advlab::Tensor<T> weight, std::vector<T> bias)
        : w_(std::move(weight)), b_(std::move(bias)) {}

    int classes() const override { return w_.dim(0); }

    advlab::Tensor<T> logits(const advlab::Tensor<T>& x) const override {
        const int n = x.dim(0);
        const int d = static_cast<int>(x.numel() / n);
        const int k = w_.dim(0);
        advlab::Tensor<T> out({n, k});
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < k; ++c) {
                T s = b_[static_cast<size_t>(c)];
                for (int j = 0; j < d; ++j)
                    s += w_[static_cast<int64_t>(c) * d + j] * x[static_cast<int64_t>(i) * d + j];
                out[static_cast<int64_t>(i) * k + c] = s;
            }
        return out;
    }

    advlab::Tensor<T> logits_vjp(const advlab::Tensor<T>& x,
                                 const advlab::Tensor<T>& seed) const override {
        const int n = x.dim(0);
        const int d = static_cast<int>(x.numel() / n);
        const int k = w_.dim(0);
        advlab::Tensor<T> g(x.shape());
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < k; ++c) {
                const T s = seed[static_cast<int64_t>(i) * k + c];
                if (s == T(0)) continue;
                for (int j = 0; j < d; ++j)
                    g[static_cast<int64_t>(i) * d + j] += s * w_[static_cast<int64_t>(c) * d + j];
            }
        return g;
    }

    advlab::CeGradResult<T> ce_loss_grad(const advlab::Tensor<T>& x,
                                         const std::vector<int>& labels) const override {
        auto z = logits(x);
        const int n = x.dim(0), k = w_.dim(0);
        // softmax - onehot, scaled by 1/N
        advlab::Tensor<T> seed({n, k});
        T loss = 0;
        for (int i = 0; i < n; ++i) {
            const T* row = z.data() + static_cast<int64_t>(i) * k;
            T mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
            loss += std::log(sum) + mx - row[labels[static_cast<size_t>(i)]];
            for (int j = 0; j < k; ++j) {
                T p = std::exp(row[j] - mx) / sum;
                if (j == labels[static_cast<size_t>(i)]) p -= T(1);
                seed[static_cast<int64_t>(i) * k + j] = p / static_cast<T>(n);
            }
        }
        return {loss / static_cast<T>(n), logits_vjp(x, seed), z};
    }

    const advlab::Tensor<T>& weight() const { return w_; }
    const std::vector<T>& bias() const { return b_; }

private:
    advlab::Tensor<T> w_;  // [K, D]
    std::vector<T> b_;
};

// Minimal |x' - x| such that the binary affine oracle flips its decision for
// a scalar input, found by bisection on each side of x.
template <typename T>
double line_search_min_crossing(const AffineOracle<T>& oracle, T x0, int label) {
    auto pred = [&](double v) {
        advlab::Tensor<T> in({1, 1}, {static_cast<T>(v)});
        auto z = oracle.logits(in);
        return z[0] >= z[1] ? 0 : 1;
    };
    const int orig = pred(x0);
    if (orig != label) return 0.0;  // already across

    double best = std::numeric_limits<double>::infinity();
    for (double dir : {-1.0, 1.0}) {
        double lo = 0.0, hi = -1.0;
        // exponential probe for a flip inside the domain
        for (double step = 1e-4; step <= 1.2; step *= 2) {
            double v = x0 + dir * step;
            if (v < 0.0 || v > 1.0) break;
            if (pred(v) != orig) {
                hi = step;
                break;
            }
            lo = step;
        }
        if (hi < 0) continue;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (pred(x0 + dir * mid) != orig) hi = mid; else lo = mid;
        }
        best = std::min(best, hi);
    }
    return best;
}

}  // namespace toy
