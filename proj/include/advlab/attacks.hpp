#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <limits>
#include <string>
#include <vector>

#include "advlab/autograd.hpp"
#include "advlab/models.hpp"
#include "advlab/ops.hpp"
#include "advlab/rng.hpp"
#include "advlab/tensor.hpp"

// Adversarial-sample generators. Every attack maps a batch x in [0,1] to a
// perturbed batch in [0,1]; FGSM/BIM/NST additionally guarantee the exact
// L-inf budget |x_adv - x| <= intensity in float arithmetic. All attacks are
// deterministic given (x, spec.seed, frozen oracle).

namespace advlab {

enum class AttackKind { gaussian, fgsm, bim, deepfool, cw, nst };

constexpr std::array<AttackKind, 6> kAllAttackKinds{AttackKind::gaussian, AttackKind::fgsm,
                                                    AttackKind::bim, AttackKind::deepfool,
                                                    AttackKind::cw, AttackKind::nst};

inline std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::gaussian: return "gaussian";
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::bim: return "bim";
        case AttackKind::deepfool: return "deepfool";
        case AttackKind::cw: return "cw";
        case AttackKind::nst: return "nst";
    }
    throw Error("bad attack kind");
}

inline AttackKind attack_kind_from_string(const std::string& s) {
    for (AttackKind k : kAllAttackKinds)
        if (to_string(k) == s) return k;
    throw ConfigError(detail::cat("unknown attack kind '", s, "'"));
}

// Attack parameters. `intensity` follows the per-kind semantics of the noise
// table: gaussian -> noise sigma, fgsm/bim/nst -> L-inf budget, deepfool ->
// overshoot, cw -> optimizer step size.
struct AttackSpec {
    AttackKind kind = AttackKind::fgsm;
    double intensity = 0.005;
    int steps = 1;
    double step_size = 0.0;
    double overshoot = 0.1;
    double confidence = 0.0;  // cw kappa
    double penalty = 1.0;     // cw c
    uint64_t seed = 0;

    static AttackSpec defaults(AttackKind kind, uint64_t seed = 0) {
        AttackSpec s;
        s.kind = kind;
        s.seed = seed;
        switch (kind) {
            case AttackKind::gaussian:
                s.intensity = 0.1;
                s.steps = 1;
                break;
            case AttackKind::fgsm:
                s.intensity = 0.005;
                s.steps = 1;
                break;
            case AttackKind::bim:
                s.intensity = 0.001;
                s.steps = 10;
                s.step_size = 0.001 / 4.0;
                break;
            case AttackKind::deepfool:
                s.intensity = 0.1;
                s.overshoot = 0.1;
                s.steps = 50;
                break;
            case AttackKind::cw:
                s.intensity = 0.005;
                s.step_size = 0.005;
                s.penalty = 1.0;
                s.confidence = 0.0;
                s.steps = 100;
                break;
            case AttackKind::nst:
                s.intensity = 0.1;
                s.steps = 20;
                s.step_size = 4.0;
                break;
        }
        if (kind == AttackKind::deepfool) s.overshoot = s.intensity;
        if (kind == AttackKind::cw) s.step_size = s.intensity;
        return s;
    }

    void validate() const {
        if (intensity <= 0) throw ConfigError("attack: intensity must be positive");
        const bool iterative = kind == AttackKind::bim || kind == AttackKind::deepfool ||
                               kind == AttackKind::cw || kind == AttackKind::nst;
        if (iterative && steps < 1) throw ConfigError("attack: iterative kinds need steps >= 1");
        if ((kind == AttackKind::bim || kind == AttackKind::cw || kind == AttackKind::nst) &&
            step_size <= 0)
            throw ConfigError("attack: step size must be positive");
    }

    bool operator==(const AttackSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const AttackSpec& s) {
    j = {{"kind", to_string(s.kind)},   {"intensity", s.intensity},
         {"steps", s.steps},            {"step_size", s.step_size},
         {"overshoot", s.overshoot},    {"confidence", s.confidence},
         {"penalty", s.penalty},        {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, AttackSpec& s) {
    s = AttackSpec::defaults(attack_kind_from_string(j.at("kind").get<std::string>()));
    s.intensity = j.value("intensity", s.intensity);
    s.steps = j.value("steps", s.steps);
    s.step_size = j.value("step_size", s.step_size);
    s.overshoot = j.value("overshoot", s.overshoot);
    s.confidence = j.value("confidence", s.confidence);
    s.penalty = j.value("penalty", s.penalty);
    s.seed = j.value("seed", s.seed);
}

// ---------------------------------------------------------------------------
// gradient oracle
// ---------------------------------------------------------------------------

template <typename T>
struct CeGradResult {
    T loss;
    Tensor<T> grad;    // d(mean CE)/dx
    Tensor<T> logits;  // [N,K]
};

// Frozen view of a classifier for input-gradient attacks. Implementations
// must be deterministic: identical inputs give identical outputs.
template <typename T>
class GradientOracle {
public:
    virtual ~GradientOracle() = default;
    virtual int classes() const = 0;
    virtual Tensor<T> logits(const Tensor<T>& x) const = 0;
    // d/dx of sum_{i,k} seed[i,k] * logits[i,k]
    virtual Tensor<T> logits_vjp(const Tensor<T>& x, const Tensor<T>& seed) const = 0;
    virtual CeGradResult<T> ce_loss_grad(const Tensor<T>& x, const std::vector<int>& labels) const = 0;
};

// Oracle over a frozen copy of a backbone (eval mode, running statistics).
template <typename T>
class BackboneOracle : public GradientOracle<T> {
public:
    explicit BackboneOracle(const ResidualBackbone<T>& net) : net_(net) {
        net_.set_requires_grad(false);
    }

    int classes() const override { return net_.config().classes; }

    Tensor<T> logits(const Tensor<T>& x) const override {
        NoGradGuard ng;
        return net_.forward(x, BnMode::eval, false).logits;
    }

    // taps for the texture attack; records on the caller's tape
    std::vector<Tensor<T>> feature_taps(const Tensor<T>& x) const {
        return net_.forward(x, BnMode::eval, false).feature_maps;
    }

    Tensor<T> logits_vjp(const Tensor<T>& x, const Tensor<T>& seed) const override {
        Tensor<T> xin = x.clone();
        xin.requires_grad = true;
        GradTape<T> tape;
        auto out = net_.forward(xin, BnMode::eval, false);
        auto weighted = sum_all(mul(out.logits, seed));
        tape.backward(weighted);
        return tape.grad(xin);
    }

    CeGradResult<T> ce_loss_grad(const Tensor<T>& x, const std::vector<int>& labels) const override {
        Tensor<T> xin = x.clone();
        xin.requires_grad = true;
        GradTape<T> tape;
        auto out = net_.forward(xin, BnMode::eval, false);
        auto loss = loss_ce(out.logits, labels);
        tape.backward(loss);
        return {loss.item(), tape.grad(xin), out.logits};
    }

private:
    mutable ResidualBackbone<T> net_;
};

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

namespace detail {

// Largest representable T not exceeding the double-precision budget, so the
// projected ball is contained in the ball the verifier measures.
template <typename T>
T budget_as(double intensity) {
    T eps = static_cast<T>(intensity);
    while (static_cast<double>(eps) > intensity) eps = std::nextafter(eps, T(0));
    return eps;
}

// Projects x_adv into the float-exact L-inf ball of radius eps around x and
// into [0,1]. After this, |x_adv[i] - x[i]| <= eps holds in float arithmetic
// (rounding of x + eps can otherwise leak a few ulps past the budget).
template <typename T>
void project_linf_box(const Tensor<T>& x, Tensor<T>& adv, T eps) {
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        T v = adv[i];
        const T xi = x[i];
        if (v - xi > eps) v = xi + eps;
        while (v - xi > eps) v = std::nextafter(v, xi);
        if (xi - v > eps) v = xi - eps;
        while (xi - v > eps) v = std::nextafter(v, xi);
        v = std::min(T(1), std::max(T(0), v));
        adv[i] = v;
    }
}

template <typename T>
int argmax_row(const T* row, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// attacks
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> attack_gaussian(const Tensor<T>& x, const AttackSpec& spec) {
    Rng rng(mix_seed({spec.seed, 0x6a55ull}));
    Tensor<T> adv(x.shape());
    const T sigma = static_cast<T>(spec.intensity);
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x[i] + sigma * static_cast<T>(rng.normal());
        adv[i] = std::min(T(1), std::max(T(0), v));
    }
    check_finite(adv, "attack_gaussian");
    return adv;
}

template <typename T>
Tensor<T> attack_fgsm(const Tensor<T>& x, const std::vector<int>& labels,
                      const GradientOracle<T>& oracle, const AttackSpec& spec) {
    const T eps = detail::budget_as<T>(spec.intensity);
    auto res = oracle.ce_loss_grad(x, labels);
    Tensor<T> adv(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T g = res.grad[i];
        const T s = g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
        adv[i] = x[i] + eps * s;
    }
    detail::project_linf_box(x, adv, eps);
    check_finite(adv, "attack_fgsm");
    return adv;
}

template <typename T>
Tensor<T> attack_bim(const Tensor<T>& x, const std::vector<int>& labels,
                     const GradientOracle<T>& oracle, const AttackSpec& spec) {
    const T eps = detail::budget_as<T>(spec.intensity);
    const T alpha = static_cast<T>(spec.step_size);
    Tensor<T> cur = x.clone();
    const int64_t n = x.numel();
    for (int step = 0; step < spec.steps; ++step) {
        auto res = oracle.ce_loss_grad(cur, labels);
        for (int64_t i = 0; i < n; ++i) {
            const T g = res.grad[i];
            const T s = g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
            T v = cur[i] + alpha * s;
            // per-step projection into the eps-ball around the clean image
            v = std::min(x[i] + eps, std::max(x[i] - eps, v));
            cur[i] = v;
        }
    }
    detail::project_linf_box(x, cur, eps);
    check_finite(cur, "attack_bim");
    return cur;
}

// Iterative minimal-perturbation search over linearized class boundaries.
// Runs from the current argmax; the recorded label plays no role.
template <typename T>
Tensor<T> attack_deepfool(const Tensor<T>& x, const GradientOracle<T>& oracle,
                          const AttackSpec& spec) {
    const int n = x.dim(0);
    const int k = oracle.classes();
    const int64_t stride = x.numel() / n;
    const int top = std::min(10, k - 1);  // class search restricted to the top logits

    auto logits0 = oracle.logits(x);
    std::vector<int> orig(static_cast<size_t>(n));
    std::vector<std::vector<int>> cands(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* row = logits0.data() + static_cast<int64_t>(i) * k;
        orig[static_cast<size_t>(i)] = detail::argmax_row(row, k);
        std::vector<int> order(static_cast<size_t>(k));
        for (int j = 0; j < k; ++j) order[static_cast<size_t>(j)] = j;
        std::sort(order.begin(), order.end(), [&](int a, int b) { return row[a] > row[b]; });
        for (int j : order) {
            if (j == orig[static_cast<size_t>(i)]) continue;
            cands[static_cast<size_t>(i)].push_back(j);
            if (static_cast<int>(cands[static_cast<size_t>(i)].size()) == top) break;
        }
    }

    Tensor<T> cur = x.clone();
    std::vector<bool> active(static_cast<size_t>(n), true);
    for (int step = 0; step < spec.steps; ++step) {
        bool any = false;
        auto logits = oracle.logits(cur);
        for (int i = 0; i < n; ++i) {
            if (!active[static_cast<size_t>(i)]) continue;
            const T* row = logits.data() + static_cast<int64_t>(i) * k;
            if (detail::argmax_row(row, k) != orig[static_cast<size_t>(i)])
                active[static_cast<size_t>(i)] = false;
            else
                any = true;
        }
        if (!any) break;

        // one vjp per candidate slot: gradients of (logit_cand - logit_orig)
        std::vector<Tensor<T>> grads;
        for (int j = 0; j < top; ++j) {
            Tensor<T> seed({n, k});
            for (int i = 0; i < n; ++i) {
                if (!active[static_cast<size_t>(i)]) continue;
                seed[static_cast<int64_t>(i) * k + cands[static_cast<size_t>(i)][static_cast<size_t>(j)]] = T(1);
                seed[static_cast<int64_t>(i) * k + orig[static_cast<size_t>(i)]] = T(-1);
            }
            grads.push_back(oracle.logits_vjp(cur, seed));
        }

        for (int i = 0; i < n; ++i) {
            if (!active[static_cast<size_t>(i)]) continue;
            const T* row = logits.data() + static_cast<int64_t>(i) * k;
            int best = -1;
            double best_ratio = 0, best_f = 0, best_norm2 = 0;
            for (int j = 0; j < top; ++j) {
                const int cls = cands[static_cast<size_t>(i)][static_cast<size_t>(j)];
                const double f = static_cast<double>(row[cls]) - row[orig[static_cast<size_t>(i)]];
                const T* w = grads[static_cast<size_t>(j)].data() + static_cast<int64_t>(i) * stride;
                double norm2 = 0;
                for (int64_t p = 0; p < stride; ++p) norm2 += static_cast<double>(w[p]) * w[p];
                if (norm2 <= 0) continue;
                const double ratio = std::abs(f) / std::sqrt(norm2);
                if (best < 0 || ratio < best_ratio) {
                    best = j;
                    best_ratio = ratio;
                    best_f = f;
                    best_norm2 = norm2;
                }
            }
            if (best < 0)
                throw NumericError("deepfool: all boundary gradients vanished");
            const double scale = std::abs(best_f) / best_norm2;
            const T* w = grads[static_cast<size_t>(best)].data() + static_cast<int64_t>(i) * stride;
            T* dst = cur.data() + static_cast<int64_t>(i) * stride;
            for (int64_t p = 0; p < stride; ++p) dst[p] += static_cast<T>(scale * w[p]);
        }
    }

    // overshoot the accumulated perturbation, then clamp to the image domain
    Tensor<T> adv(x.shape());
    const T grow = static_cast<T>(1.0 + spec.overshoot);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T v = x[i] + grow * (cur[i] - x[i]);
        adv[i] = std::min(T(1), std::max(T(0), v));
    }
    check_finite(adv, "attack_deepfool");
    return adv;
}

template <typename T>
struct CwResult {
    Tensor<T> x_adv;
    std::vector<bool> found;  // per sample: an adversarial point was seen
};

// Margin-penalty attack over the tanh reparameterization:
// minimize ||x'-x||_2^2 + c * max(logit_y(x') - max_{k!=y} logit_k(x'), -kappa).
template <typename T>
CwResult<T> attack_cw(const Tensor<T>& x, const std::vector<int>& labels,
                      const GradientOracle<T>& oracle, const AttackSpec& spec) {
    const int n = x.dim(0);
    const int k = oracle.classes();
    const int64_t stride = x.numel() / n;
    const T p = static_cast<T>(1e-6);
    const T c = static_cast<T>(spec.penalty);
    const T kappa = static_cast<T>(spec.confidence);
    const T lr = static_cast<T>(spec.step_size);

    // w = atanh(2 * squeeze(x) - 1)
    Tensor<T> w(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T xi = std::min(T(1) - p, std::max(p, x[i]));
        w[i] = std::atanh(T(2) * xi - T(1));
    }

    CwResult<T> result{x.clone(), std::vector<bool>(static_cast<size_t>(n), false)};
    std::vector<double> best_dist(static_cast<size_t>(n), std::numeric_limits<double>::infinity());

    Tensor<T> xprime(x.shape());
    for (int step = 0; step <= spec.steps; ++step) {
        for (int64_t i = 0; i < x.numel(); ++i)
            xprime[i] = (std::tanh(w[i]) + T(1)) * T(0.5);
        auto logits = oracle.logits(xprime);

        Tensor<T> seed({n, k});
        std::vector<T> margins(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            const T* row = logits.data() + static_cast<int64_t>(i) * k;
            const int y = labels[static_cast<size_t>(i)];
            int kstar = -1;
            for (int j = 0; j < k; ++j) {
                if (j == y) continue;
                if (kstar < 0 || row[j] > row[kstar]) kstar = j;
            }
            const T margin = row[y] - row[kstar];
            margins[static_cast<size_t>(i)] = margin;

            if (detail::argmax_row(row, k) != y) {
                double dist = 0;
                const T* xp = xprime.data() + static_cast<int64_t>(i) * stride;
                const T* xc = x.data() + static_cast<int64_t>(i) * stride;
                for (int64_t q = 0; q < stride; ++q)
                    dist += (static_cast<double>(xp[q]) - xc[q]) * (static_cast<double>(xp[q]) - xc[q]);
                if (dist < best_dist[static_cast<size_t>(i)]) {
                    best_dist[static_cast<size_t>(i)] = dist;
                    result.found[static_cast<size_t>(i)] = true;
                    std::copy(xp, xp + stride, result.x_adv.data() + static_cast<int64_t>(i) * stride);
                }
            }
            if (margin > -kappa) {  // penalty active: push the margin down
                seed[static_cast<int64_t>(i) * k + y] += c;
                seed[static_cast<int64_t>(i) * k + kstar] -= c;
            }
        }
        if (step == spec.steps) break;

        auto vjp = oracle.logits_vjp(xprime, seed);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const T th = std::tanh(w[i]);
            const T dxdw = (T(1) - th * th) * T(0.5);
            const T g = (T(2) * (xprime[i] - x[i]) + vjp[i]) * dxdw;
            w[i] -= lr * g;
        }
    }
    check_finite(result.x_adv, "attack_cw");
    return result;
}

// Texture attack: bounded descent on the Gram-matrix distance to a style
// source through frozen feature taps. taps_fn must run under the caller's
// active tape.
template <typename T>
using TapsFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&)>;

template <typename T>
Tensor<T> attack_nst(const Tensor<T>& x, const Tensor<T>& style, const TapsFn<T>& taps_fn,
                     const AttackSpec& spec) {
    if (!x.same_shape(style))
        throw ShapeError("attack_nst: style batch must match the input batch shape");
    const T eps = detail::budget_as<T>(spec.intensity);
    const T lr = static_cast<T>(spec.step_size);

    auto gram_all = [&](const std::vector<Tensor<T>>& maps) {
        std::vector<Tensor<T>> grams;
        for (const auto& m : maps) {
            const int n = m.dim(0), ch = m.dim(1);
            const int hw = m.dim(2) * m.dim(3);
            auto flat = reshape(m, {n, ch, hw});
            grams.push_back(smul(bmm(flat, flat, /*transpose_b=*/true),
                                 T(1) / static_cast<T>(ch) / static_cast<T>(hw)));
        }
        return grams;
    };

    std::vector<Tensor<T>> style_grams;
    {
        NoGradGuard ng;
        style_grams = gram_all(taps_fn(style));
    }

    Tensor<T> cur = x.clone();
    for (int step = 0; step < spec.steps; ++step) {
        Tensor<T> grad;
        {
            Tensor<T> xin = cur.clone();
            xin.requires_grad = true;
            GradTape<T> tape;
            auto grams = gram_all(taps_fn(xin));
            Tensor<T> loss = Tensor<T>::scalar(T(0));
            for (size_t l = 0; l < grams.size(); ++l) {
                auto d = sub(grams[l], style_grams[l]);
                loss = add(loss, sum_all(mul(d, d)));
            }
            tape.backward(loss);
            grad = tape.grad(xin);
        }
        for (int64_t i = 0; i < cur.numel(); ++i) cur[i] -= lr * grad[i];
        detail::project_linf_box(x, cur, eps);
    }
    check_finite(cur, "attack_nst");
    return cur;
}

// Gram objective value, exposed for descent diagnostics and tests.
template <typename T>
T nst_objective(const Tensor<T>& a, const Tensor<T>& style, const TapsFn<T>& taps_fn) {
    NoGradGuard ng;
    auto gram_of = [&](const Tensor<T>& img) {
        std::vector<Tensor<T>> grams;
        for (const auto& m : taps_fn(img)) {
            const int n = m.dim(0), ch = m.dim(1);
            const int hw = m.dim(2) * m.dim(3);
            auto flat = reshape(m, {n, ch, hw});
            grams.push_back(smul(bmm(flat, flat, true), T(1) / static_cast<T>(ch) / static_cast<T>(hw)));
        }
        return grams;
    };
    auto ga = gram_of(a), gs = gram_of(style);
    T total = 0;
    for (size_t l = 0; l < ga.size(); ++l)
        for (int64_t i = 0; i < ga[l].numel(); ++i) {
            const T d = ga[l][i] - gs[l][i];
            total += d * d;
        }
    return total;
}

// ---------------------------------------------------------------------------
// perturbation verification
// ---------------------------------------------------------------------------

struct PerturbationReport {
    double linf = 0;
    double l2 = 0;
    bool in_domain = true;      // x_adv elementwise in [0,1]
    bool finite = true;
    bool within_budget = true;  // L-inf budget for the kinds that carry one
    bool compliant = true;

    nlohmann::json to_json() const {
        return {{"linf", linf},       {"l2", l2},
                {"in_domain", in_domain}, {"finite", finite},
                {"within_budget", within_budget}, {"compliant", compliant}};
    }
};

template <typename T>
PerturbationReport verify_perturbation(const Tensor<T>& x, const Tensor<T>& x_adv,
                                       const AttackSpec& spec) {
    if (!x.same_shape(x_adv))
        throw ShapeError("verify_perturbation: shape mismatch between clean and adversarial");
    PerturbationReport r;
    double sq = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x_adv[i]) - static_cast<double>(x[i]);
        r.linf = std::max(r.linf, std::abs(d));
        sq += d * d;
        if (!(x_adv[i] >= T(0) && x_adv[i] <= T(1))) r.in_domain = false;
        if (!std::isfinite(static_cast<double>(x_adv[i]))) r.finite = false;
    }
    r.l2 = std::sqrt(sq);
    const bool bounded = spec.kind == AttackKind::fgsm || spec.kind == AttackKind::bim ||
                         spec.kind == AttackKind::nst;
    if (bounded) r.within_budget = r.linf <= spec.intensity;
    r.compliant = r.in_domain && r.finite && r.within_budget;
    return r;
}

}  // namespace advlab
