#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "apam/tensor.hpp"

namespace apam {

using NodeId = std::size_t;
class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    NodeId id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    NodeId id_ = 0;
};

/// Called once per node during backward. `grad_in[i]` is null when input i
/// does not need a gradient; otherwise the function accumulates into it.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class GradientMap {
public:
    explicit GradientMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

    /// Gradient of the output with respect to `v`; zeros if `v` did not
    /// influence the output.
    Tensor operator[](const Var& v) const;
    bool contains(const Var& v) const;

private:
    friend class Tape;
    std::vector<Tensor> grads_;
};

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. One tape belongs to one computation; it is not
/// safe to share across threads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);
    Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar output. Throws ShapeError if `output`
    /// holds more than one element.
    GradientMap backward(const Var& output) const;

private:
    struct Node {
        Tensor value;
        std::vector<NodeId> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
};

}  // namespace apam
