#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "perk/common.hpp"

namespace perk {

template <typename Real>
struct Node;

template <typename Real>
struct Storage {
    std::vector<Real> v;

    explicit Storage(std::size_t n) : v(n, Real(0)) {
        GraphStats::on_alloc(static_cast<std::int64_t>(n * sizeof(Real)));
    }
    explicit Storage(std::vector<Real> x) : v(std::move(x)) {
        GraphStats::on_alloc(static_cast<std::int64_t>(v.size() * sizeof(Real)));
    }
    ~Storage() { GraphStats::on_free(static_cast<std::int64_t>(v.size() * sizeof(Real))); }
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "," : "") << s[i];
    }
    os << "]";
    return os.str();
}

template <typename Real>
struct TensorImpl {
    Shape shape;
    std::shared_ptr<Storage<Real>> storage;
    bool requires_grad = false;
    std::shared_ptr<Node<Real>> node;  // producing node; null for leaves/constants
};

// Value-semantic handle to an immutable tensor. Data buffers are never
// mutated after construction; detach/leaf_proxy produce new handles sharing
// the same storage.
template <typename Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_storage(std::move(shape), nullptr);
    }

    static Tensor full(Shape shape, Real value) {
        auto n = shape_numel(shape);
        std::vector<Real> v(static_cast<std::size_t>(n), value);
        return from_vector(std::move(shape), std::move(v));
    }

    static Tensor scalar(Real value) { return full(Shape{}, value); }

    static Tensor from_vector(Shape shape, std::vector<Real> values) {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
            throw std::invalid_argument("tensor shape " + shape_str(shape) +
                                        " does not match value count " +
                                        std::to_string(values.size()));
        }
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<Real>>();
        t.impl_->shape = std::move(shape);
        t.impl_->storage = std::make_shared<Storage<Real>>(std::move(values));
        return t;
    }

    template <typename Rng>
    static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1)) {
        std::normal_distribution<double> dist(0.0, 1.0);
        auto n = shape_numel(shape);
        std::vector<Real> v(static_cast<std::size_t>(n));
        for (auto& x : v) {
            x = static_cast<Real>(dist(rng)) * stddev;
        }
        return from_vector(std::move(shape), std::move(v));
    }

    template <typename Rng>
    static Tensor rand_uniform(Shape shape, Rng& rng, Real lo, Real hi) {
        std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                    static_cast<double>(hi));
        auto n = shape_numel(shape);
        std::vector<Real> v(static_cast<std::size_t>(n));
        for (auto& x : v) {
            x = static_cast<Real>(dist(rng));
        }
        return from_vector(std::move(shape), std::move(v));
    }

    // Marks a tensor as a gradient-receiving leaf (shares storage).
    static Tensor leaf(const Tensor& src) {
        Tensor t = src.detach();
        t.impl_->requires_grad = true;
        return t;
    }

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return shape_numel(impl_->shape); }
    std::int64_t rows() const { return impl_->shape.at(0); }
    std::int64_t cols() const { return impl_->shape.at(1); }
    bool is_scalar() const { return numel() == 1; }

    std::span<const Real> data() const { return {impl_->storage->v.data(), impl_->storage->v.size()}; }
    const Real* ptr() const { return impl_->storage->v.data(); }

    Real item() const {
        if (!is_scalar()) {
            throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
        }
        return impl_->storage->v[0];
    }

    Real at(std::int64_t i) const { return impl_->storage->v.at(static_cast<std::size_t>(i)); }
    Real at(std::int64_t i, std::int64_t j) const {
        return impl_->storage->v.at(static_cast<std::size_t>(i * cols() + j));
    }

    bool requires_grad() const { return impl_->requires_grad; }
    const std::shared_ptr<Node<Real>>& node() const { return impl_->node; }
    bool tracks_grad() const { return impl_ && (impl_->requires_grad || impl_->node != nullptr); }

    // Same values, no graph reference. Shares the underlying storage.
    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<Real>>();
        t.impl_->shape = impl_->shape;
        t.impl_->storage = impl_->storage;
        return t;
    }

    // Detached copy flagged requires_grad: gradients accumulate on the proxy,
    // never on the source.
    Tensor leaf_proxy() const { return leaf(*this); }

    bool same_storage(const Tensor& o) const { return impl_->storage == o.impl_->storage; }
    bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }
    const TensorImpl<Real>* key() const { return impl_.get(); }

    bool bit_equal(const Tensor& o) const {
        if (shape() != o.shape()) {
            return false;
        }
        const auto& a = impl_->storage->v;
        const auto& b = o.impl_->storage->v;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!(a[i] == b[i]) || std::signbit(a[i]) != std::signbit(b[i])) {
                return false;
            }
        }
        return true;
    }

    std::vector<Real> to_vector() const { return impl_->storage->v; }

    // Internal: ops use these to construct results.
    static Tensor from_storage(Shape shape, std::shared_ptr<Node<Real>> node) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<Real>>();
        auto n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->storage = std::make_shared<Storage<Real>>(static_cast<std::size_t>(n));
        t.impl_->node = std::move(node);
        return t;
    }

    Real* mutable_ptr() { return impl_->storage->v.data(); }
    void set_node(std::shared_ptr<Node<Real>> n) { impl_->node = std::move(n); }

private:
    std::shared_ptr<TensorImpl<Real>> impl_;
};

}  // namespace perk
