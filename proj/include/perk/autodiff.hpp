#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "perk/common.hpp"
#include "perk/tensor.hpp"

namespace perk {

// One recorded operation on the dynamic tape. Nodes are created only while
// gradient recording is enabled and at least one input tracks gradients; they
// are freed automatically once no tensor references them (detachment makes
// the upstream graph releasable).
template <typename Real>
struct Node {
    const char* op = "";
    std::vector<Tensor<Real>> inputs;
    std::vector<Real> attrs;
    std::vector<std::int64_t> iattrs;
    std::shared_ptr<const std::vector<std::int32_t>> ids;

    using BackwardFn = std::vector<Tensor<Real>> (*)(const Tensor<Real>& grad_out,
                                                     const Node<Real>& node);
    BackwardFn backward = nullptr;

    Node() { GraphStats::on_node_created(); }
    ~Node() { GraphStats::on_node_destroyed(); }
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;
};

// Attaches a node to `out` when recording is active and any input tracks
// gradients; otherwise returns `out` unchanged.
template <typename Real>
Tensor<Real> record(const char* op, std::vector<Tensor<Real>> inputs, Tensor<Real> out,
                    typename Node<Real>::BackwardFn backward, std::vector<Real> attrs = {},
                    std::vector<std::int64_t> iattrs = {},
                    std::shared_ptr<const std::vector<std::int32_t>> ids = nullptr) {
    if (!grad_enabled()) {
        return out;
    }
    bool tracked = false;
    for (const auto& t : inputs) {
        tracked = tracked || t.tracks_grad();
    }
    if (!tracked) {
        return out;
    }
    auto node = std::make_shared<Node<Real>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->attrs = std::move(attrs);
    node->iattrs = std::move(iattrs);
    node->ids = std::move(ids);
    node->backward = backward;
    out.set_node(std::move(node));
    return out;
}

template <typename Real>
Tensor<Real> detach(const Tensor<Real>& t) {
    return t.detach();
}

template <typename Real>
Tensor<Real> leaf_proxy(const Tensor<Real>& t) {
    return t.leaf_proxy();
}

}  // namespace perk
