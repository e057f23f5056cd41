// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/tape.hpp"

#include "mosld/error.hpp"

namespace mosld {

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var{nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) {
        return Var{it->second};
    }
    nodes_.push_back(Node{p.value(), {}, p.trainable(), {}});
    const std::size_t id = nodes_.size() - 1;
    leaves_.emplace(&p, id);
    return Var{id};
}

Var Tape::record(Matrix value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, requires_grad ? std::move(fn) : BackwardFn{}});
    return Var{nodes_.size() - 1};
}

Matrix Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) {
        return Matrix(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

Matrix& Tape::grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) {
        n.grad = Matrix(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

Matrix Tape::gradient(const Parameter& p) const {
    auto it = leaves_.find(&p);
    if (it == leaves_.end()) {
        return Matrix(p.value().rows(), p.value().cols());
    }
    return grad(Var{it->second});
}

void Tape::backward(Var loss) {
    const Matrix& out = nodes_.at(loss.id).value;
    if (out.rows() != 1 || out.cols() != 1) {
        throw InternalError("Tape::backward: loss must be 1x1, got " + out.shape_str());
    }
    trace_.clear();
    grad_buffer(loss)(0, 0) += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward || n.grad.empty()) {
            continue;
        }
        trace_.push_back(i);
        n.backward(*this, n.grad);
    }
}

}  // namespace mosld
