#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfar/ops.hpp"

namespace dfar {

struct LossWeights {
    double lambda_reg = 5.0;
    double eta_mc = 1.0;
};

/// Raised when a loss term is NaN or infinite; training must stop.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& term, double value)
        : std::runtime_error("non-finite loss term " + term + " = " + std::to_string(value)), term_(term) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

/// Sum over adjacent frames of the mean absolute difference between each
/// aligned feature and the target feature. Gradients reach both sides.
template <typename T>
Var<T> motion_compensation_loss(const std::vector<Var<T>>& aligned, const Var<T>& f_tgt) {
    if (aligned.empty()) return scalar_var(T(0));
    std::vector<Var<T>> terms;
    for (const auto& a : aligned) {
        if (a.shape() != f_tgt.shape())
            throw ShapeError("motion compensation loss: aligned " + shape_str(a.shape()) + " vs target " +
                             shape_str(f_tgt.shape()));
        terms.push_back(l1_mean(a, f_tgt));
    }
    return add_n(terms);
}

template <typename T>
struct LossTerms {
    Var<T> reg, cls, obj, mc;
};

/// lambda * reg + cls + obj + eta * mc.
template <typename T>
Var<T> total_loss(const Var<T>& reg, const Var<T>& cls, const Var<T>& obj, const Var<T>& mc, const LossWeights& w) {
    const std::pair<const char*, const Var<T>*> named[] = {{"reg", &reg}, {"cls", &cls}, {"obj", &obj}, {"mc", &mc}};
    for (const auto& [name, v] : named) {
        const double x = static_cast<double>(v->item());
        if (!std::isfinite(x)) throw NonFiniteLossError(name, x);
    }
    if (w.lambda_reg < 0 || w.eta_mc < 0) throw std::invalid_argument("loss weights must be non-negative");
    return weighted_sum<T>({reg, cls, obj, mc},
                           {static_cast<T>(w.lambda_reg), T(1), T(1), static_cast<T>(w.eta_mc)});
}

template <typename T>
Var<T> total_loss(const LossTerms<T>& t, const LossWeights& w) {
    return total_loss(t.reg, t.cls, t.obj, t.mc, w);
}

}  // namespace dfar
