// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape over dense matrices.
//
// Every differentiable op appends one node holding its output value and a
// backward closure. backward() walks the nodes in exact reverse order of
// recording; a closure reads its own output gradient and accumulates into
// the gradients of its inputs. Parameters enter the tape once per tape (the
// leaf is cached by identity), so a parameter read by several ops, such as
// the shared general-feature matrix read by every expert, receives the sum
// of all contributions in a single gradient buffer.

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mosld/matrix.hpp"

namespace mosld {

/// Named learnable tensor. `trainable` decides whether a tape tracks its gradient.
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Matrix value, bool trainable = true)
        : name_(std::move(name)), value_(std::move(value)), trainable_(trainable) {}

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] const Matrix& value() const noexcept { return value_; }
    [[nodiscard]] Matrix& value() noexcept { return value_; }
    [[nodiscard]] bool trainable() const noexcept { return trainable_; }
    void set_trainable(bool t) noexcept { trainable_ = t; }
    [[nodiscard]] std::size_t numel() const noexcept { return value_.size(); }

private:
    std::string name_;
    Matrix value_;
    bool trainable_ = true;
};

/// Handle to a tape node.
struct Var {
    std::size_t id = 0;
};

class Tape {
public:
    /// Receives the node's output gradient; accumulates into its inputs.
    using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Value that never receives a gradient.
    Var constant(Matrix value);
    /// Leaf for a parameter; repeated calls return the same node.
    Var param(const Parameter& p);

    /// Append an op node. `fn` runs during backward only if the node requires grad.
    Var record(Matrix value, bool requires_grad, BackwardFn fn);

    [[nodiscard]] const Matrix& value(Var v) const { return nodes_[v.id].value; }
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    /// Gradient of a node; zeros if nothing flowed into it.
    [[nodiscard]] Matrix grad(Var v) const;
    /// Mutable gradient buffer, allocated on first use.
    Matrix& grad_buffer(Var v);

    /// Accumulated gradient for a parameter, zeros if it was not on this tape.
    [[nodiscard]] Matrix gradient(const Parameter& p) const;
    [[nodiscard]] bool contains(const Parameter& p) const { return leaves_.contains(&p); }

    /// Reverse sweep from a 1x1 output.
    void backward(Var loss);

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    /// Node ids whose backward closure ran, in visiting order (for inspection).
    [[nodiscard]] const std::vector<std::size_t>& backward_trace() const noexcept { return trace_; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> leaves_;
    std::vector<std::size_t> trace_;
};

}  // namespace mosld
