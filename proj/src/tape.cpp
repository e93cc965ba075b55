#include "apam/tape.hpp"

namespace apam {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor GradientMap::operator[](const Var& v) const {
    if (contains(v)) return grads_[v.id()];
    return Tensor(v.shape(), 0.0);
}

bool GradientMap::contains(const Var& v) const {
    return v.id() < grads_.size() && !grads_[v.id()].empty();
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (NodeId in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs});
    return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& output) const {
    const NodeId out = output.id();
    if (nodes_[out].value.size() != 1) {
        throw ShapeError("backward needs a scalar output, got shape " +
                         to_string(nodes_[out].value.shape()));
    }
    std::vector<Tensor> grads(out + 1);
    grads[out] = Tensor(nodes_[out].value.shape(), 1.0);

    std::vector<Tensor*> grad_in;
    for (NodeId i = out + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (grads[i].empty() || !node.backward) continue;
        grad_in.assign(node.inputs.size(), nullptr);
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
            const NodeId in = node.inputs[j];
            if (!nodes_[in].requires_grad) continue;
            if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
            grad_in[j] = &grads[in];
        }
        node.backward(grads[i], grad_in);
        // Interior gradients are no longer needed once propagated.
        if (!node.inputs.empty()) grads[i] = Tensor();
    }
    return GradientMap(std::move(grads));
}

}  // namespace apam
