#include "smoelab/graph.hpp"

#include "smoelab/errors.hpp"

namespace smoelab::diff {

bool Graph::needs_grad(std::initializer_list<const Tensor*> inputs) const
{
    if (!recording_)
        return false;
    for (const Tensor* t : inputs)
        if (t != nullptr && t->defined() && t->requires_grad())
            return true;
    return false;
}

void Graph::record(Tensor& output, std::string op, std::vector<std::int64_t> inputs,
                   std::function<void()> backward)
{
    if (!recording_)
        return;
    output.set_requires_grad(true);
    output.set_node_id(static_cast<std::int64_t>(nodes_.size()));
    nodes_.push_back({std::move(op), std::move(inputs), output, std::move(backward)});
}

void Graph::backward(const Tensor& loss)
{
    if (loss.size() != 1)
        throw ContractError("backward() requires a scalar loss, got shape " +
                            to_string(loss.shape()));
    Tensor root = loss;
    if (!root.requires_grad())
        return;
    root.grad()[0] += 1.0;
    traversal_.clear();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.output.has_grad())
            continue;
        traversal_.push_back(static_cast<std::int64_t>(i));
        node.backward();
    }
}

}  // namespace smoelab::diff
