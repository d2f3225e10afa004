#pragma once

#include "vesselnet/tape.hpp"

namespace vesselnet {

struct LossWeights {
    float lambda_bce = 0.5f;
    float lambda_mcc = 0.5f;

    void validate() const {
        if (lambda_bce < 0 || lambda_mcc < 0)
            throw ConfigError("loss weights must be non-negative");
        if (lambda_bce + lambda_mcc <= 0)
            throw ConfigError("loss weights must not both be zero");
    }
};

// Soft confusion pooled over every pixel of the batch.
template <typename T>
struct SoftConfusion {
    double tp = 0, tn = 0, fp = 0, fn = 0;

    static SoftConfusion from(const TensorT<T>& p, const TensorT<T>& y) {
        SoftConfusion c;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double pi = p.data[i];
            const double yi = y.data[i];
            c.tp += pi * yi;
            c.tn += (1.0 - yi) * (1.0 - pi);
            c.fp += (1.0 - yi) * pi;
            c.fn += yi * (1.0 - pi);
        }
        return c;
    }
};

namespace detail {
template <typename T>
void require_binary_targets(const TensorT<T>& y) {
    for (T v : y.data)
        if (v != T(0) && v != T(1))
            throw ContractError("targets must be exactly 0 or 1");
}
}  // namespace detail

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kMccEps = 1e-7;

// Mean negative log-likelihood; probabilities are clamped to
// [1e-7, 1 - 1e-7] before the logs, and the clamp participates in the
// gradient (zero slope outside).
template <typename T>
Var bce(Tape<T>& tape, Var p, Var y) {
    const auto& pv = tape.value(p);
    const auto& yv = tape.value(y);
    detail::require_same_shape(pv, yv, "bce");
    detail::require_binary_targets(yv);
    const double n = static_cast<double>(pv.numel());
    double acc = 0;
    for (std::size_t i = 0; i < pv.data.size(); ++i) {
        double pi = std::min(1.0 - kProbClamp, std::max(kProbClamp, double(pv.data[i])));
        double yi = yv.data[i];
        acc -= yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
    }
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / n));
    return tape.emit(std::move(out), {p, y},
                     [p, y, n](Tape<T>& t, const TensorT<T>& g) {
                         const auto& pvv = t.value(p);
                         const auto& yvv = t.value(y);
                         const double gs = g.data[0];
                         TensorT<T> gp(pvv.shape);
                         for (std::size_t i = 0; i < gp.data.size(); ++i) {
                             double pi = pvv.data[i];
                             if (pi < kProbClamp || pi > 1.0 - kProbClamp) continue;
                             double yi = yvv.data[i];
                             gp.data[i] = static_cast<T>(gs * (pi - yi) / (pi * (1.0 - pi)) / n);
                         }
                         t.accumulate_grad(p, gp);
                     },
                     "bce");
}

// 1 - (TP*TN - FP*FN) / (sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)) + eps), soft
// counts over continuous probabilities, pooled over the whole batch.
template <typename T>
Var mcc_loss(Tape<T>& tape, Var p, Var y) {
    const auto& pv = tape.value(p);
    const auto& yv = tape.value(y);
    detail::require_same_shape(pv, yv, "mcc_loss");
    detail::require_binary_targets(yv);
    const auto c = SoftConfusion<T>::from(pv, yv);
    const double numer = c.tp * c.tn - c.fp * c.fn;
    const double a = c.tp + c.fp;  // sum(p)
    const double b = c.tp + c.fn;  // sum(y), constant in p
    const double cc = c.tn + c.fp; // sum(1-y), constant in p
    const double dd = c.tn + c.fn; // sum(1-p)
    const double s = a * b * cc * dd;
    const double root = std::sqrt(std::max(0.0, s));
    const double denom = root + kMccEps;
    const double loss = 1.0 - numer / denom;

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    return tape.emit(
        std::move(out), {p, y},
        [p, y, c, numer, a, b, cc, dd, root, denom](Tape<T>& t, const TensorT<T>& g) {
            const auto& yvv = t.value(y);
            const double gs = g.data[0];
            // d numer / d p_i = y_i (TN + FP) - (1 - y_i)(TP + FN)
            // d denom / d p_i = B*C*(D - A) / (2 root)   (same for every i)
            const double ddenom = root > 0 ? b * cc * (dd - a) / (2.0 * root) : 0.0;
            TensorT<T> gp(t.value(p).shape);
            for (std::size_t i = 0; i < gp.data.size(); ++i) {
                const double yi = yvv.data[i];
                const double dnum = yi * (c.tn + c.fp) - (1.0 - yi) * (c.tp + c.fn);
                const double dloss = -(dnum * denom - numer * ddenom) / (denom * denom);
                gp.data[i] = static_cast<T>(gs * dloss);
            }
            t.accumulate_grad(p, gp);
        },
        "mcc_loss");
}

template <typename T>
Var total_loss(Tape<T>& tape, Var p, Var y, const LossWeights& w) {
    w.validate();
    Var lb = scalar_mul(tape, bce(tape, p, y), static_cast<T>(w.lambda_bce));
    Var lm = scalar_mul(tape, mcc_loss(tape, p, y), static_cast<T>(w.lambda_mcc));
    return add(tape, lb, lm);
}

}  // namespace vesselnet
