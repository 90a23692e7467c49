#pragma once

// Differentiable primitive operations. Every backward rule is itself written
// in terms of these primitives, so gradients can be differentiated again
// (create_graph) to any order.

#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "perk/autodiff.hpp"
#include "perk/kernels.hpp"
#include "perk/tensor.hpp"

namespace perk {

namespace detail {

template <typename Real>
void check_finite(const char* op, const Tensor<Real>& t) {
    if (!kern::all_finite(t.numel(), t.ptr())) {
        throw OverflowError(std::string("non-finite value produced by op '") + op + "'");
    }
}

template <typename Real>
void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

template <typename Real>
void check_2d(const char* op, const Tensor<Real>& a) {
    if (a.shape().size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                    shape_str(a.shape()));
    }
}

template <typename Real>
void check_1d(const char* op, const Tensor<Real>& a) {
    if (a.shape().size() != 1) {
        throw std::invalid_argument(std::string(op) + ": expected 1-D tensor, got " +
                                    shape_str(a.shape()));
    }
}

}  // namespace detail

// Forward declarations needed by backward rules.
template <typename Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> scale(const Tensor<Real>& a, Real c);
template <typename Real> Tensor<Real> add_const(const Tensor<Real>& a, Real c);
template <typename Real> Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> transpose(const Tensor<Real>& a);
template <typename Real> Tensor<Real> exp(const Tensor<Real>& a);
template <typename Real> Tensor<Real> log(const Tensor<Real>& a);
template <typename Real> Tensor<Real> tanh(const Tensor<Real>& a);
template <typename Real> Tensor<Real> sqrt(const Tensor<Real>& a);
template <typename Real> Tensor<Real> recip(const Tensor<Real>& a);
template <typename Real> Tensor<Real> abs(const Tensor<Real>& a);
template <typename Real> Tensor<Real> relu(const Tensor<Real>& a);
template <typename Real> Tensor<Real> sin(const Tensor<Real>& a);
template <typename Real> Tensor<Real> cos(const Tensor<Real>& a);
template <typename Real> Tensor<Real> sum(const Tensor<Real>& a);
template <typename Real> Tensor<Real> rowsum(const Tensor<Real>& a);
template <typename Real> Tensor<Real> colsum(const Tensor<Real>& a);
template <typename Real> Tensor<Real> broadcast_col(const Tensor<Real>& v, std::int64_t c);
template <typename Real> Tensor<Real> broadcast_row(const Tensor<Real>& v, std::int64_t r);
template <typename Real> Tensor<Real> broadcast_scalar(const Tensor<Real>& s, Shape shape);
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& table,
                         std::shared_ptr<const std::vector<std::int32_t>> ids);
template <typename Real>
Tensor<Real> scatter_add_rows(const Tensor<Real>& src,
                              std::shared_ptr<const std::vector<std::int32_t>> ids,
                              std::int64_t n_rows);
template <typename Real>
Tensor<Real> slice_block(const Tensor<Real>& a, std::int64_t r0, std::int64_t r1, std::int64_t c0,
                         std::int64_t c1);
template <typename Real>
Tensor<Real> pad_block(const Tensor<Real>& a, std::int64_t rows, std::int64_t cols,
                       std::int64_t r0, std::int64_t c0);
template <typename Real> Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts);

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return scale(a, Real(-1));
}

namespace detail {

template <typename Real>
std::vector<Tensor<Real>> add_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {g, g};
}

template <typename Real>
std::vector<Tensor<Real>> sub_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {g, neg(g)};
}

template <typename Real>
std::vector<Tensor<Real>> mul_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, n.inputs[1]), mul(g, n.inputs[0])};
}

template <typename Real>
std::vector<Tensor<Real>> scale_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {scale(g, n.attrs[0])};
}

template <typename Real>
std::vector<Tensor<Real>> add_const_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {g};
}

template <typename Real>
std::vector<Tensor<Real>> matmul_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {matmul(g, transpose(n.inputs[1])), matmul(transpose(n.inputs[0]), g)};
}

template <typename Real>
std::vector<Tensor<Real>> transpose_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {transpose(g)};
}

template <typename Real>
std::vector<Tensor<Real>> exp_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, exp(n.inputs[0]))};
}

template <typename Real>
std::vector<Tensor<Real>> log_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, recip(n.inputs[0]))};
}

template <typename Real>
std::vector<Tensor<Real>> tanh_bw(const Tensor<Real>& g, const Node<Real>& n) {
    auto t = tanh(n.inputs[0]);
    return {mul(g, add_const(neg(mul(t, t)), Real(1)))};
}

template <typename Real>
std::vector<Tensor<Real>> sqrt_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {scale(mul(g, recip(sqrt(n.inputs[0]))), Real(0.5))};
}

template <typename Real>
std::vector<Tensor<Real>> recip_bw(const Tensor<Real>& g, const Node<Real>& n) {
    auto r = recip(n.inputs[0]);
    return {neg(mul(g, mul(r, r)))};
}

// Piecewise-constant derivative masks are materialized as constants; the
// second derivative through them is zero (correct almost everywhere).
template <typename Real>
Tensor<Real> sign_mask(const Tensor<Real>& a) {
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map1(a.numel(), a.ptr(), out.mutable_ptr(), [](Real x) {
        return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0));
    });
    return out;
}

template <typename Real>
Tensor<Real> step_mask(const Tensor<Real>& a) {
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map1(a.numel(), a.ptr(), out.mutable_ptr(),
               [](Real x) { return x > Real(0) ? Real(1) : Real(0); });
    return out;
}

template <typename Real>
std::vector<Tensor<Real>> abs_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, sign_mask(n.inputs[0]))};
}

template <typename Real>
std::vector<Tensor<Real>> relu_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, step_mask(n.inputs[0]))};
}

template <typename Real>
std::vector<Tensor<Real>> sin_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {mul(g, cos(n.inputs[0]))};
}

template <typename Real>
std::vector<Tensor<Real>> cos_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {neg(mul(g, sin(n.inputs[0])))};
}

template <typename Real>
std::vector<Tensor<Real>> sum_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {broadcast_scalar(g, n.inputs[0].shape())};
}

template <typename Real>
std::vector<Tensor<Real>> rowsum_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {broadcast_col(g, n.inputs[0].cols())};
}

template <typename Real>
std::vector<Tensor<Real>> colsum_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {broadcast_row(g, n.inputs[0].rows())};
}

template <typename Real>
std::vector<Tensor<Real>> broadcast_col_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {rowsum(g)};
}

template <typename Real>
std::vector<Tensor<Real>> broadcast_row_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {colsum(g)};
}

template <typename Real>
std::vector<Tensor<Real>> broadcast_scalar_bw(const Tensor<Real>& g, const Node<Real>&) {
    return {sum(g)};
}

template <typename Real>
std::vector<Tensor<Real>> gather_rows_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {scatter_add_rows(g, n.ids, n.inputs[0].rows())};
}

template <typename Real>
std::vector<Tensor<Real>> scatter_add_rows_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {gather_rows(g, n.ids)};
}

template <typename Real>
std::vector<Tensor<Real>> slice_block_bw(const Tensor<Real>& g, const Node<Real>& n) {
    const auto& in = n.inputs[0];
    return {pad_block(g, in.rows(), in.cols(), n.iattrs[0], n.iattrs[2])};
}

template <typename Real>
std::vector<Tensor<Real>> pad_block_bw(const Tensor<Real>& g, const Node<Real>& n) {
    const std::int64_t r0 = n.iattrs[2];
    const std::int64_t c0 = n.iattrs[3];
    const auto& in = n.inputs[0];
    return {slice_block(g, r0, r0 + in.rows(), c0, c0 + in.cols())};
}

template <typename Real>
std::vector<Tensor<Real>> concat_cols_bw(const Tensor<Real>& g, const Node<Real>& n) {
    std::vector<Tensor<Real>> out;
    out.reserve(n.inputs.size());
    std::int64_t c0 = 0;
    for (const auto& in : n.inputs) {
        out.push_back(slice_block(g, 0, g.rows(), c0, c0 + in.cols()));
        c0 += in.cols();
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("add", a, b);
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map2(a.numel(), a.ptr(), b.ptr(), out.mutable_ptr(),
               [](Real x, Real y) { return x + y; });
    detail::check_finite("add", out);
    return record<Real>("add", {a, b}, std::move(out), &detail::add_bw<Real>);
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("sub", a, b);
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map2(a.numel(), a.ptr(), b.ptr(), out.mutable_ptr(),
               [](Real x, Real y) { return x - y; });
    detail::check_finite("sub", out);
    return record<Real>("sub", {a, b}, std::move(out), &detail::sub_bw<Real>);
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("mul", a, b);
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map2(a.numel(), a.ptr(), b.ptr(), out.mutable_ptr(),
               [](Real x, Real y) { return x * y; });
    detail::check_finite("mul", out);
    return record<Real>("mul", {a, b}, std::move(out), &detail::mul_bw<Real>);
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map1(a.numel(), a.ptr(), out.mutable_ptr(), [c](Real x) { return x * c; });
    detail::check_finite("scale", out);
    return record<Real>("scale", {a}, std::move(out), &detail::scale_bw<Real>, {c});
}

template <typename Real>
Tensor<Real> add_const(const Tensor<Real>& a, Real c) {
    auto out = Tensor<Real>::from_storage(a.shape(), nullptr);
    kern::map1(a.numel(), a.ptr(), out.mutable_ptr(), [c](Real x) { return x + c; });
    detail::check_finite("add_const", out);
    return record<Real>("add_const", {a}, std::move(out), &detail::add_const_bw<Real>, {c});
}

#define PERK_UNARY_OP(NAME, EXPR)                                                              \
    template <typename Real>                                                                   \
    Tensor<Real> NAME(const Tensor<Real>& a) {                                                 \
        auto out = Tensor<Real>::from_storage(a.shape(), nullptr);                             \
        kern::map1(a.numel(), a.ptr(), out.mutable_ptr(), [](Real x) { return EXPR; });        \
        detail::check_finite(#NAME, out);                                                      \
        return record<Real>(#NAME, {a}, std::move(out), &detail::NAME##_bw<Real>);             \
    }

PERK_UNARY_OP(exp, std::exp(x))
PERK_UNARY_OP(log, std::log(x))
PERK_UNARY_OP(tanh, std::tanh(x))
PERK_UNARY_OP(sqrt, std::sqrt(x))
PERK_UNARY_OP(recip, Real(1) / x)
PERK_UNARY_OP(abs, std::abs(x))
PERK_UNARY_OP(relu, x > Real(0) ? x : Real(0))
PERK_UNARY_OP(sin, std::sin(x))
PERK_UNARY_OP(cos, std::cos(x))

#undef PERK_UNARY_OP

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_2d("matmul", a);
    detail::check_2d("matmul", b);
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    auto out = Tensor<Real>::from_storage({a.rows(), b.cols()}, nullptr);
    kern::matmul(a.rows(), a.cols(), b.cols(), a.ptr(), b.ptr(), out.mutable_ptr());
    detail::check_finite("matmul", out);
    return record<Real>("matmul", {a, b}, std::move(out), &detail::matmul_bw<Real>);
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    detail::check_2d("transpose", a);
    auto out = Tensor<Real>::from_storage({a.cols(), a.rows()}, nullptr);
    kern::transpose(a.rows(), a.cols(), a.ptr(), out.mutable_ptr());
    return record<Real>("transpose", {a}, std::move(out), &detail::transpose_bw<Real>);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    auto out = Tensor<Real>::from_storage(Shape{}, nullptr);
    out.mutable_ptr()[0] = kern::sum(a.numel(), a.ptr());
    detail::check_finite("sum", out);
    return record<Real>("sum", {a}, std::move(out), &detail::sum_bw<Real>);
}

template <typename Real>
Tensor<Real> rowsum(const Tensor<Real>& a) {
    detail::check_2d("rowsum", a);
    auto out = Tensor<Real>::from_storage({a.rows()}, nullptr);
    kern::rowsum(a.rows(), a.cols(), a.ptr(), out.mutable_ptr());
    detail::check_finite("rowsum", out);
    return record<Real>("rowsum", {a}, std::move(out), &detail::rowsum_bw<Real>);
}

template <typename Real>
Tensor<Real> colsum(const Tensor<Real>& a) {
    detail::check_2d("colsum", a);
    auto out = Tensor<Real>::from_storage({a.cols()}, nullptr);
    kern::colsum(a.rows(), a.cols(), a.ptr(), out.mutable_ptr());
    detail::check_finite("colsum", out);
    return record<Real>("colsum", {a}, std::move(out), &detail::colsum_bw<Real>);
}

template <typename Real>
Tensor<Real> broadcast_col(const Tensor<Real>& v, std::int64_t c) {
    detail::check_1d("broadcast_col", v);
    auto out = Tensor<Real>::from_storage({v.rows(), c}, nullptr);
    kern::broadcast_col(v.rows(), c, v.ptr(), out.mutable_ptr());
    return record<Real>("broadcast_col", {v}, std::move(out), &detail::broadcast_col_bw<Real>);
}

template <typename Real>
Tensor<Real> broadcast_row(const Tensor<Real>& v, std::int64_t r) {
    detail::check_1d("broadcast_row", v);
    auto out = Tensor<Real>::from_storage({r, v.rows()}, nullptr);
    kern::broadcast_row(r, v.rows(), v.ptr(), out.mutable_ptr());
    return record<Real>("broadcast_row", {v}, std::move(out), &detail::broadcast_row_bw<Real>);
}

template <typename Real>
Tensor<Real> broadcast_scalar(const Tensor<Real>& s, Shape shape) {
    if (!s.is_scalar()) {
        throw std::invalid_argument("broadcast_scalar: source must have one element");
    }
    auto out = Tensor<Real>::full(shape, s.item());
    return record<Real>("broadcast_scalar", {s}, std::move(out),
                        &detail::broadcast_scalar_bw<Real>);
}

// Row-wise maxima as a detached constant; used as the numerically stabilizing
// shift in softmax/logsumexp, where a constant shift leaves all derivatives
// exact.
template <typename Real>
Tensor<Real> rowmax_const(const Tensor<Real>& a) {
    detail::check_2d("rowmax_const", a);
    auto out = Tensor<Real>::from_storage({a.rows()}, nullptr);
    kern::rowmax(a.rows(), a.cols(), a.ptr(), out.mutable_ptr());
    return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter / slicing

template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& table,
                         std::shared_ptr<const std::vector<std::int32_t>> ids) {
    detail::check_2d("gather_rows", table);
    for (auto id : *ids) {
        if (id < 0 || id >= table.rows()) {
            throw std::invalid_argument("gather_rows: id " + std::to_string(id) +
                                        " out of range [0," + std::to_string(table.rows()) + ")");
        }
    }
    auto out = Tensor<Real>::from_storage({static_cast<std::int64_t>(ids->size()), table.cols()},
                                          nullptr);
    kern::gather_rows(out.rows(), table.cols(), table.ptr(), ids->data(), out.mutable_ptr());
    return record<Real>("gather_rows", {table}, std::move(out), &detail::gather_rows_bw<Real>, {},
                        {}, std::move(ids));
}

template <typename Real>
Tensor<Real> scatter_add_rows(const Tensor<Real>& src,
                              std::shared_ptr<const std::vector<std::int32_t>> ids,
                              std::int64_t n_rows) {
    detail::check_2d("scatter_add_rows", src);
    if (static_cast<std::int64_t>(ids->size()) != src.rows()) {
        throw std::invalid_argument("scatter_add_rows: ids/src row count mismatch");
    }
    auto out = Tensor<Real>::from_storage({n_rows, src.cols()}, nullptr);
    kern::scatter_add_rows(src.rows(), src.cols(), src.ptr(), ids->data(), out.mutable_ptr());
    detail::check_finite("scatter_add_rows", out);
    return record<Real>("scatter_add_rows", {src}, std::move(out),
                        &detail::scatter_add_rows_bw<Real>, {}, {}, std::move(ids));
}

template <typename Real>
Tensor<Real> slice_block(const Tensor<Real>& a, std::int64_t r0, std::int64_t r1, std::int64_t c0,
                         std::int64_t c1) {
    detail::check_2d("slice_block", a);
    if (r0 < 0 || r1 > a.rows() || c0 < 0 || c1 > a.cols() || r0 >= r1 || c0 >= c1) {
        throw std::invalid_argument("slice_block: bad bounds");
    }
    auto out = Tensor<Real>::from_storage({r1 - r0, c1 - c0}, nullptr);
    kern::slice_block(a.cols(), r0, r1, c0, c1, a.ptr(), out.mutable_ptr());
    return record<Real>("slice_block", {a}, std::move(out), &detail::slice_block_bw<Real>, {},
                        {r0, r1, c0, c1});
}

template <typename Real>
Tensor<Real> pad_block(const Tensor<Real>& a, std::int64_t rows, std::int64_t cols,
                       std::int64_t r0, std::int64_t c0) {
    detail::check_2d("pad_block", a);
    if (r0 + a.rows() > rows || c0 + a.cols() > cols) {
        throw std::invalid_argument("pad_block: block exceeds target");
    }
    auto out = Tensor<Real>::from_storage({rows, cols}, nullptr);
    kern::pad_block(rows, cols, r0, r0 + a.rows(), c0, c0 + a.cols(), a.ptr(), out.mutable_ptr());
    return record<Real>("pad_block", {a}, std::move(out), &detail::pad_block_bw<Real>, {},
                        {rows, cols, r0, c0});
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: empty input");
    }
    std::int64_t total = 0;
    for (const auto& p : parts) {
        detail::check_2d("concat_cols", p);
        if (p.rows() != parts[0].rows()) {
            throw std::invalid_argument("concat_cols: row count mismatch");
        }
        total += p.cols();
    }
    auto out = Tensor<Real>::from_storage({parts[0].rows(), total}, nullptr);
    Real* o = out.mutable_ptr();
    std::int64_t c0 = 0;
    for (const auto& p : parts) {
        for (std::int64_t i = 0; i < p.rows(); ++i) {
            std::memcpy(o + i * total + c0, p.ptr() + i * p.cols(),
                        sizeof(Real) * static_cast<std::size_t>(p.cols()));
        }
        c0 += p.cols();
    }
    return record<Real>("concat_cols", parts, std::move(out), &detail::concat_cols_bw<Real>);
}

namespace detail {
template <typename Real>
std::vector<Tensor<Real>> reshape_bw(const Tensor<Real>& g, const Node<Real>& n);
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    auto out = Tensor<Real>::from_vector(std::move(shape), a.to_vector());
    return record<Real>("reshape", {a}, std::move(out), &detail::reshape_bw<Real>);
}

namespace detail {
template <typename Real>
std::vector<Tensor<Real>> reshape_bw(const Tensor<Real>& g, const Node<Real>& n) {
    return {reshape(g, n.inputs[0].shape())};
}
}  // namespace detail

// Constant one-hot rows (no gradient path).
template <typename Real>
Tensor<Real> onehot_rows(const std::vector<std::int32_t>& ids, std::int64_t width) {
    auto out = Tensor<Real>::from_storage({static_cast<std::int64_t>(ids.size()), width}, nullptr);
    Real* o = out.mutable_ptr();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= width) {
            throw std::invalid_argument("onehot_rows: id out of range");
        }
        o[static_cast<std::int64_t>(i) * width + ids[i]] = Real(1);
    }
    return out;
}

template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, const Tensor<Real>& s) {
    return mul(a, broadcast_scalar(s, a.shape()));
}

inline std::shared_ptr<const std::vector<std::int32_t>> make_ids(std::vector<std::int32_t> v) {
    return std::make_shared<const std::vector<std::int32_t>>(std::move(v));
}

inline std::shared_ptr<const std::vector<std::int32_t>> iota_ids(std::int64_t n,
                                                                 std::int32_t start = 0) {
    std::vector<std::int32_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = start + static_cast<std::int32_t>(i);
    }
    return make_ids(std::move(v));
}

// ---------------------------------------------------------------------------
// backward_at: reverse-mode sweep from a scalar loss to the requested target
// tensors, which may be leaves or intermediates. Traversal is pruned below
// each target (targets are treated as differentiation cut points, so no
// target may feed another target). Unreachable targets receive zero
// gradients rather than errors (this matches truncation semantics: a
// detached tensor simply stops the flow). With create_graph=true the
// returned gradients carry graph references and can be differentiated again.

template <typename Real>
std::vector<Tensor<Real>> backward_at(const Tensor<Real>& loss,
                                      const std::vector<Tensor<Real>>& targets,
                                      bool create_graph = false) {
    if (!loss.is_scalar()) {
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    }
    std::unordered_set<const TensorImpl<Real>*> target_keys;
    for (const auto& t : targets) {
        target_keys.insert(t.key());
    }

    // Reverse post-order over the recorded graph = consumers before producers.
    std::vector<Tensor<Real>> topo;
    {
        struct Frame {
            Tensor<Real> t;
            std::size_t next = 0;
        };
        std::unordered_set<const TensorImpl<Real>*> seen;
        std::vector<Frame> stack;
        if (loss.node() && !target_keys.count(loss.key())) {
            seen.insert(loss.key());
            stack.push_back({loss, 0});
        }
        while (!stack.empty()) {
            Frame& f = stack.back();
            const auto& node = *f.t.node();
            if (f.next < node.inputs.size()) {
                const Tensor<Real>& in = node.inputs[f.next++];
                if (in.node() && !target_keys.count(in.key()) && seen.insert(in.key()).second) {
                    stack.push_back({in, 0});
                }
            } else {
                topo.push_back(f.t);
                stack.pop_back();
            }
        }
    }

    std::unordered_map<const TensorImpl<Real>*, Tensor<Real>> grads;
    grads.emplace(loss.key(), Tensor<Real>::full(loss.shape(), Real(1)));

    {
        GradGuard guard(create_graph);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            const Tensor<Real>& t = *it;
            auto git = grads.find(t.key());
            if (git == grads.end()) {
                continue;
            }
            Tensor<Real> gout = git->second;
            grads.erase(git);
            const auto& node = *t.node();
            auto gins = node.backward(gout, node);
            for (std::size_t i = 0; i < gins.size(); ++i) {
                if (!gins[i].defined()) {
                    continue;
                }
                const Tensor<Real>& in = node.inputs[i];
                if (!in.tracks_grad()) {
                    continue;
                }
                auto jt = grads.find(in.key());
                if (jt == grads.end()) {
                    grads.emplace(in.key(), gins[i]);
                } else {
                    jt->second = add(jt->second, gins[i]);
                }
            }
        }
    }

    std::vector<Tensor<Real>> out;
    out.reserve(targets.size());
    for (const auto& t : targets) {
        auto it = grads.find(t.key());
        if (it != grads.end()) {
            out.push_back(it->second);
        } else {
            out.push_back(Tensor<Real>::zeros(t.shape()));
        }
    }
    return out;
}

// backward over gradient-receiving leaves (requires_grad must be set).
template <typename Real>
std::vector<Tensor<Real>> backward(const Tensor<Real>& loss,
                                   const std::vector<Tensor<Real>>& leaves,
                                   bool create_graph = false) {
    for (const auto& leaf : leaves) {
        if (!leaf.requires_grad()) {
            throw std::invalid_argument("backward: leaf does not require grad");
        }
    }
    return backward_at(loss, leaves, create_graph);
}

// Max over coordinates of |g_ad - g_fd| / (|g_fd| + 1e-12), with g_fd from
// central differences at step h. Throws if f is not deterministic (checked by
// evaluating f twice and comparing bits).
template <typename Real, typename F>
Real finite_diff_check(F f, const Tensor<Real>& x, Real h) {
    if (!(h > Real(0))) {
        throw std::invalid_argument("finite_diff_check: h must be positive");
    }
    auto xl = Tensor<Real>::leaf(x);
    Tensor<Real> y1 = f(xl);
    Tensor<Real> y2 = f(xl);
    if (!y1.bit_equal(y2)) {
        throw std::invalid_argument("finite_diff_check: f is non-deterministic");
    }
    auto g_ad = backward(y1, {xl})[0];

    std::vector<Real> base = x.to_vector();
    Real max_err = Real(0);
    NoGradGuard ng;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<Real> vp = base;
        std::vector<Real> vm = base;
        vp[i] += h;
        vm[i] -= h;
        const Real fp = f(Tensor<Real>::from_vector(x.shape(), std::move(vp))).item();
        const Real fm = f(Tensor<Real>::from_vector(x.shape(), std::move(vm))).item();
        const Real g_fd = (fp - fm) / (Real(2) * h);
        const Real err = std::abs(g_ad.at(static_cast<std::int64_t>(i)) - g_fd) /
                         (std::abs(g_fd) + Real(1e-12));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace perk
