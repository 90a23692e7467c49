#pragma once

// Composites built from the primitive ops; gradients (to any order) come from
// the primitives' backward rules.

#include "perk/ops.hpp"

namespace perk {

// Row-wise log-sum-exp with a constant max shift. The shift is exact: for any
// fixed c, c + log(sum(exp(x - c))) equals logsumexp(x) identically in x.
template <typename Real>
Tensor<Real> logsumexp_rows(const Tensor<Real>& x) {
    auto m = rowmax_const(x);
    auto shifted = sub(x, broadcast_col(m, x.cols()));
    return add(log(rowsum(exp(shifted))), m);
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    auto lse = logsumexp_rows(x);
    return exp(sub(x, broadcast_col(lse, x.cols())));
}

// Per-row negative log-likelihood of the target class: lse(x) - x[target].
template <typename Real>
Tensor<Real> cross_entropy_rows(const Tensor<Real>& logits,
                                const std::vector<std::int32_t>& targets) {
    if (static_cast<std::int64_t>(targets.size()) != logits.rows()) {
        throw std::invalid_argument("cross_entropy_rows: target count != row count");
    }
    auto picked = rowsum(mul(logits, onehot_rows<Real>(targets, logits.cols())));
    return sub(logsumexp_rows(logits), picked);
}

template <typename Real>
Tensor<Real> layer_norm_rows(const Tensor<Real>& x, const Tensor<Real>& gamma,
                             const Tensor<Real>& beta, Real eps = Real(1e-5)) {
    const auto c = x.cols();
    auto mean = scale(rowsum(x), Real(1) / static_cast<Real>(c));
    auto centered = sub(x, broadcast_col(mean, c));
    auto var = scale(rowsum(mul(centered, centered)), Real(1) / static_cast<Real>(c));
    auto inv_std = recip(sqrt(add_const(var, eps)));
    auto normed = mul(centered, broadcast_col(inv_std, c));
    return add(mul(normed, broadcast_row(gamma, x.rows())), broadcast_row(beta, x.rows()));
}

// tanh-approximate GELU.
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    const Real k = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
    auto inner = add(x, scale(mul(mul(x, x), x), static_cast<Real>(0.044715)));
    auto t = tanh(scale(inner, k));
    return scale(mul(x, add_const(t, Real(1))), static_cast<Real>(0.5));
}

// Numerically stable softplus: relu(x) + log1p(exp(-|x|)).
template <typename Real>
Tensor<Real> softplus(const Tensor<Real>& x) {
    auto tail = log(add_const(exp(neg(abs(x))), Real(1)));
    return add(relu(x), tail);
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

}  // namespace perk
